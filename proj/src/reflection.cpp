#include <algorithm>
#include <cmath>
#include <deque>

#include "endomap/kernels.hpp"
#include "endomap/preprocess.hpp"

namespace endomap {

BinaryMask gradient_threshold_mask(const GradientField& grad, double percentile) {
    if (!(percentile > 0.0 && percentile < 100.0)) throw Error("percentile must lie in (0,100)");
    const Raster& mag = grad.magnitude;
    std::vector<double> sorted = mag.values();
    std::sort(sorted.begin(), sorted.end());
    const double pos = percentile / 100.0 * static_cast<double>(sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double threshold = sorted[lo] + (pos - lo) * (sorted[hi] - sorted[lo]);

    BinaryMask m(mag.width(), mag.height());
    for (std::size_t i = 0; i < sorted.size(); ++i) m.bits()[i] = mag.values()[i] > threshold ? 1 : 0;
    return m;
}

namespace {

std::vector<std::pair<int, int>> disc(int radius) {
    std::vector<std::pair<int, int>> offs;
    for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx)
            if (dx * dx + dy * dy <= radius * radius) offs.emplace_back(dx, dy);
    return offs;
}

// value == true: dilation (any set neighbour); false: erosion (any clear neighbour).
BinaryMask morph(const BinaryMask& m, int radius, bool dilation) {
    if (radius < 0) throw Error("structuring element radius must be >= 0");
    const auto offs = disc(radius);
    const int w = m.width(), h = m.height();
    BinaryMask out(w, h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            bool hit = !dilation;
            for (const auto& [dx, dy] : offs) {
                const int xx = x + dx, yy = y + dy;
                if (xx < 0 || yy < 0 || xx >= w || yy >= h) continue;
                if (m(xx, yy) == dilation) {
                    hit = dilation;
                    break;
                }
            }
            out.set(x, y, hit);
        }
    }
    return out;
}

}  // namespace

BinaryMask dilate(const BinaryMask& m, int radius) { return morph(m, radius, true); }
BinaryMask erode(const BinaryMask& m, int radius) { return morph(m, radius, false); }

BinaryMask fill_holes(const BinaryMask& m) {
    const int w = m.width(), h = m.height();
    // Flood the background from the border; whatever background remains is a hole.
    BinaryMask outside(w, h);
    std::deque<std::pair<int, int>> queue;
    auto seed = [&](int x, int y) {
        if (!m(x, y) && !outside(x, y)) {
            outside.set(x, y, true);
            queue.emplace_back(x, y);
        }
    };
    for (int x = 0; x < w; ++x) {
        seed(x, 0);
        seed(x, h - 1);
    }
    for (int y = 0; y < h; ++y) {
        seed(0, y);
        seed(w - 1, y);
    }
    while (!queue.empty()) {
        const auto [x, y] = queue.front();
        queue.pop_front();
        if (x > 0) seed(x - 1, y);
        if (x < w - 1) seed(x + 1, y);
        if (y > 0) seed(x, y - 1);
        if (y < h - 1) seed(x, y + 1);
    }
    return ~outside;
}

BinaryMask morphological_close_and_fill(const BinaryMask& m, int radius) {
    if (radius < 1) throw Error("closing radius must be >= 1");
    return fill_holes(erode(dilate(m, radius), radius));
}

BinaryMask illumination_mask(const ImageBuffer& gray, const ImageStats& stats) {
    if (gray.channels() != 1) throw Error("illumination_mask expects a single-channel image");
    const double t = stats.mean + stats.stddev;
    BinaryMask m(gray.width(), gray.height());
    for (std::size_t i = 0; i < gray.data().size(); ++i) m.bits()[i] = gray.data()[i] >= t ? 1 : 0;
    return m;
}

BinaryMask detect_reflections(const ImageBuffer& gray, const ReflectionConfig& cfg) {
    if (gray.channels() != 1) throw Error("detect_reflections expects a single-channel image");
    const BinaryMask ring = gradient_threshold_mask(gradient(gray), cfg.percentile);
    const BinaryMask closed = morphological_close_and_fill(ring, cfg.close_radius);
    const BinaryMask bright = illumination_mask(gray, image_stats(gray));
    return dilate(closed & bright, cfg.dilate_radius);
}

ImageBuffer inpaint(const ImageBuffer& img, const BinaryMask& mask, double tol, int max_iters,
                    InpaintReport* report) {
    require_same_size(img.width(), img.height(), mask.width(), mask.height(), "inpaint mask");
    const int w = img.width(), h = img.height(), nc = img.channels();
    if (mask.count() == static_cast<std::size_t>(w) * h) throw Error("inpaint: mask covers the whole image");
    InpaintReport rep;
    if (mask.count() == 0) {
        if (report) *report = rep;
        return img;
    }

    // Onion-peel initialisation: each masked pixel starts as the mean of its
    // already-known 4-neighbours, which keeps the start inside the boundary range.
    std::vector<int> order;
    {
        BinaryMask known = ~mask;
        std::vector<int> frontier;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if (mask(x, y)) order.push_back(y * w + x);
        std::vector<int> pending = order;
        order.clear();
        while (!pending.empty()) {
            frontier.clear();
            std::vector<int> rest;
            for (int idx : pending) {
                const int x = idx % w, y = idx / w;
                const bool touches = (x > 0 && known(x - 1, y)) || (x < w - 1 && known(x + 1, y)) ||
                                     (y > 0 && known(x, y - 1)) || (y < h - 1 && known(x, y + 1));
                (touches ? frontier : rest).push_back(idx);
            }
            for (int idx : frontier) {
                known.set(idx % w, idx / w, true);
                order.push_back(idx);
            }
            pending.swap(rest);
        }
    }

    std::vector<double> out = img.data();
    auto px = [&](int x, int y, int c) -> double& { return out[(static_cast<std::size_t>(y) * w + x) * nc + c]; };
    {
        BinaryMask known = ~mask;
        for (int idx : order) {
            const int x = idx % w, y = idx / w;
            for (int c = 0; c < nc; ++c) {
                double s = 0.0;
                int n = 0;
                if (x > 0 && known(x - 1, y)) s += px(x - 1, y, c), ++n;
                if (x < w - 1 && known(x + 1, y)) s += px(x + 1, y, c), ++n;
                if (y > 0 && known(x, y - 1)) s += px(x, y - 1, c), ++n;
                if (y < h - 1 && known(x, y + 1)) s += px(x, y + 1, c), ++n;
                px(x, y, c) = s / n;
            }
            known.set(x, y, true);
        }
    }

    std::vector<int> raster;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (mask(x, y)) raster.push_back(y * w + x);
    for (int it = 0; it < max_iters; ++it) {
        double max_update = 0.0;
        for (int idx : raster) {
            const int x = idx % w, y = idx / w;
            for (int c = 0; c < nc; ++c) {
                double s = 0.0;
                int n = 0;
                if (x > 0) s += px(x - 1, y, c), ++n;
                if (x < w - 1) s += px(x + 1, y, c), ++n;
                if (y > 0) s += px(x, y - 1, c), ++n;
                if (y < h - 1) s += px(x, y + 1, c), ++n;
                const double v = s / n;
                max_update = std::max(max_update, std::abs(v - px(x, y, c)));
                px(x, y, c) = v;
            }
        }
        rep.iterations = it + 1;
        rep.last_update = max_update;
        if (max_update < tol) break;
    }
    if (report) *report = rep;
    return ImageBuffer(w, h, nc, std::move(out));
}

Raster unsharp_mask_raw(const Raster& r, double sigma, double amount) {
    if (!(sigma > 0.0)) throw Error("unsharp_mask needs sigma > 0");
    if (!(amount >= 0.0)) throw Error("unsharp_mask needs amount >= 0");
    const Raster b = gaussian_blur(r, sigma);
    Raster out(r.width(), r.height());
    for (std::size_t i = 0; i < r.size(); ++i)
        out.values()[i] = r.values()[i] + amount * (r.values()[i] - b.values()[i]);
    return out;
}

ImageBuffer unsharp_mask(const ImageBuffer& img, double sigma, double amount) {
    const int nc = img.channels();
    std::vector<double> out(img.data().size());
    for (int c = 0; c < nc; ++c) {
        const Raster u = unsharp_mask_raw(img.channel(c), sigma, amount);
        for (std::size_t i = 0; i < u.size(); ++i) out[i * nc + c] = u.values()[i];
    }
    return ImageBuffer(img.width(), img.height(), nc, std::move(out));
}

}  // namespace endomap
