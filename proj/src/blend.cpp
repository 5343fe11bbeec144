#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

#include "endomap/kernels.hpp"
#include "endomap/parallel.hpp"
#include "endomap/stitcher.hpp"

namespace endomap {

namespace {

// Binomial 1-4-6-4-1 smoothing then 2x decimation, replicate border.
Raster reduce(const Raster& r) {
    static const double k[5] = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
    const int w = r.width(), h = r.height();
    const int nw = (w + 1) / 2, nh = (h + 1) / 2;
    Raster tmp(nw, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < nw; ++x) {
            double s = 0.0;
            for (int d = -2; d <= 2; ++d) s += k[d + 2] * r.clamped(2 * x + d, y);
            tmp(x, y) = s;
        }
    Raster out(nw, nh);
    for (int y = 0; y < nh; ++y)
        for (int x = 0; x < nw; ++x) {
            double s = 0.0;
            for (int d = -2; d <= 2; ++d) s += k[d + 2] * tmp.clamped(x, 2 * y + d);
            out(x, y) = s;
        }
    return out;
}

// Interpolating upsample to (w,h); the per-axis weights always sum to 1.
Raster expand(const Raster& r, int w, int h) {
    auto taps = [](int x, int n, int* idx, double* wt) {
        if (x % 2 == 0) {
            const int i = x / 2;
            idx[0] = std::max(i - 1, 0);
            idx[1] = std::min(i, n - 1);
            idx[2] = std::min(i + 1, n - 1);
            wt[0] = 1.0 / 8;
            wt[1] = 6.0 / 8;
            wt[2] = 1.0 / 8;
        } else {
            const int i = (x - 1) / 2;
            idx[0] = std::min(i, n - 1);
            idx[1] = std::min(i + 1, n - 1);
            idx[2] = idx[1];
            wt[0] = 0.5;
            wt[1] = 0.5;
            wt[2] = 0.0;
        }
    };
    Raster tmp(r.width(), h);
    for (int y = 0; y < h; ++y) {
        int iy[3];
        double wy[3];
        taps(y, r.height(), iy, wy);
        for (int x = 0; x < r.width(); ++x) tmp(x, y) = wy[0] * r(x, iy[0]) + wy[1] * r(x, iy[1]) + wy[2] * r(x, iy[2]);
    }
    Raster out(w, h);
    for (int x = 0; x < w; ++x) {
        int ix[3];
        double wx[3];
        taps(x, r.width(), ix, wx);
        for (int y = 0; y < h; ++y) out(x, y) = wx[0] * tmp(ix[0], y) + wx[1] * tmp(ix[1], y) + wx[2] * tmp(ix[2], y);
    }
    return out;
}

std::vector<Raster> gaussian_pyramid(const Raster& r, int levels) {
    std::vector<Raster> p{r};
    for (int l = 1; l < levels; ++l) p.push_back(reduce(p.back()));
    return p;
}

std::vector<Raster> laplacian_pyramid(const Raster& r, int levels) {
    auto g = gaussian_pyramid(r, levels);
    for (int l = 0; l + 1 < levels; ++l) {
        const Raster up = expand(g[l + 1], g[l].width(), g[l].height());
        for (std::size_t i = 0; i < g[l].size(); ++i) g[l].values()[i] -= up.values()[i];
    }
    return g;
}

// Fills pixels where `known` is 0 with the value of the nearest known pixel
// (4-connected BFS order, so ties resolve deterministically).
void nearest_fill(Raster& r, std::vector<std::uint8_t> known) {
    const int w = r.width(), h = r.height();
    std::deque<int> q;
    for (int i = 0; i < w * h; ++i)
        if (known[i]) q.push_back(i);
    if (q.empty()) return;
    while (!q.empty()) {
        const int i = q.front();
        q.pop_front();
        const int x = i % w, y = i / w;
        const int nb[4][2] = {{x - 1, y}, {x + 1, y}, {x, y - 1}, {x, y + 1}};
        for (const auto& n : nb) {
            if (n[0] < 0 || n[1] < 0 || n[0] >= w || n[1] >= h) continue;
            const int j = n[1] * w + n[0];
            if (known[j]) continue;
            known[j] = 1;
            r.values()[j] = r.values()[i];
            q.push_back(j);
        }
    }
}

// 1 + chamfer distance from each valid pixel to the nearest invalid or
// out-of-frame pixel; 0 on invalid pixels.
Raster border_distance(int w, int h, const BinaryMask* valid) {
    const double inf = std::numeric_limits<double>::infinity();
    Raster d(w, h, inf);
    auto ok = [&](int x, int y) { return !valid || valid->empty() || (*valid)(x, y); };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (!ok(x, y)) d(x, y) = 0.0;
    auto get = [&](int x, int y) { return (x < 0 || y < 0 || x >= w || y >= h) ? 0.0 : d(x, y); };
    const double s2 = std::sqrt(2.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (d(x, y) == 0.0) continue;
            d(x, y) = std::min({d(x, y), get(x - 1, y) + 1, get(x, y - 1) + 1, get(x - 1, y - 1) + s2,
                                get(x + 1, y - 1) + s2});
        }
    for (int y = h - 1; y >= 0; --y)
        for (int x = w - 1; x >= 0; --x) {
            if (d(x, y) == 0.0) continue;
            d(x, y) = std::min({d(x, y), get(x + 1, y) + 1, get(x, y + 1) + 1, get(x + 1, y + 1) + s2,
                                get(x - 1, y + 1) + s2});
        }
    return d;
}

struct Warped {
    std::vector<Raster> chans;
    Raster weight;  // 0 outside the footprint
};

Warped warp_frame(const BlendFrame& f, int cw, int ch) {
    const ImageBuffer& img = *f.image;
    const int w = img.width(), h = img.height(), nc = img.channels();
    const BinaryMask* valid = (f.valid && !f.valid->empty()) ? f.valid : nullptr;
    if (valid) require_same_size(w, h, valid->width(), valid->height(), "multiband_blend mask");
    const Raster dist = border_distance(w, h, valid);
    std::vector<Raster> src;
    for (int c = 0; c < nc; ++c) src.push_back(img.channel(c));

    Warped out;
    out.chans.assign(nc, Raster(cw, ch));
    out.weight = Raster(cw, ch);
    const Eigen::Matrix3d hi = f.warp.inverse().matrix();
    parallel_for(0, ch, [&](int y) {
        for (int x = 0; x < cw; ++x) {
            Point2 p;
            if (!project(hi, Point2(x, y), p)) continue;
            if (!(p.x() >= 0.0 && p.y() >= 0.0 && p.x() <= w - 1 && p.y() <= h - 1)) continue;
            const int x0 = std::min(static_cast<int>(p.x()), w - 1), y0 = std::min(static_cast<int>(p.y()), h - 1);
            const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
            if (valid && !((*valid)(x0, y0) && (*valid)(x1, y0) && (*valid)(x0, y1) && (*valid)(x1, y1))) continue;
            double wt;
            sample_bilinear(dist, p.x(), p.y(), wt);
            if (!(wt > 0.0)) continue;
            out.weight(x, y) = std::max(wt, 1.0);
            for (int c = 0; c < nc; ++c) {
                double v;
                sample_bilinear(src[c], p.x(), p.y(), v);
                out.chans[c](x, y) = v;
            }
        }
    });
    std::vector<std::uint8_t> known(static_cast<std::size_t>(cw) * ch);
    for (std::size_t i = 0; i < known.size(); ++i) known[i] = out.weight.values()[i] > 0.0;
    for (auto& r : out.chans) nearest_fill(r, known);
    return out;
}

}  // namespace

BlendResult multiband_blend(const std::vector<BlendFrame>& frames, int canvas_width, int canvas_height, int bands,
                            bool keep_weights) {
    if (bands < 1) throw Error("multiband_blend: bands must be >= 1");
    if (frames.empty()) throw Error("multiband_blend: no frames");
    if (canvas_width < 1 || canvas_height < 1) throw Error("multiband_blend: empty canvas");
    const int nc = frames.front().image->channels();
    for (const auto& f : frames) {
        if (!f.image || f.image->empty()) throw Error("multiband_blend: missing frame image");
        if (f.image->channels() != nc) throw Error("multiband_blend: frames differ in channel count");
    }
    const int cw = canvas_width, ch = canvas_height;

    int levels = 1;
    for (int s = std::min(cw, ch); levels < bands && s >= 8; s = (s + 1) / 2) ++levels;

    // First pass: weight sum for level-0 normalisation.
    Raster wsum(cw, ch);
    for (const auto& f : frames) {
        const Warped wf = warp_frame(f, cw, ch);
        for (std::size_t i = 0; i < wsum.size(); ++i) wsum.values()[i] += wf.weight.values()[i];
    }
    BlendResult res;
    res.coverage = BinaryMask(cw, ch);
    for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x) res.coverage.set(x, y, wsum(x, y) > 0.0);
    if (res.coverage.count() == 0) throw Error("multiband_blend: no frame covers the canvas");

    std::vector<std::vector<Raster>> acc(nc);
    std::vector<Raster> acc_w;
    for (const auto& f : frames) {
        Warped wf = warp_frame(f, cw, ch);
        Raster& w0 = wf.weight;
        for (std::size_t i = 0; i < w0.size(); ++i)
            w0.values()[i] = wsum.values()[i] > 0.0 ? w0.values()[i] / wsum.values()[i] : 0.0;
        if (keep_weights) res.weights.push_back(w0);
        const auto gw = gaussian_pyramid(w0, levels);
        if (acc_w.empty()) {
            for (const auto& g : gw) acc_w.emplace_back(g.width(), g.height());
            for (int c = 0; c < nc; ++c)
                for (const auto& g : gw) acc[c].emplace_back(g.width(), g.height());
        }
        for (int l = 0; l < levels; ++l)
            for (std::size_t i = 0; i < gw[l].size(); ++i) acc_w[l].values()[i] += gw[l].values()[i];
        for (int c = 0; c < nc; ++c) {
            const auto lp = laplacian_pyramid(wf.chans[c], levels);
            for (int l = 0; l < levels; ++l)
                for (std::size_t i = 0; i < lp[l].size(); ++i)
                    acc[c][l].values()[i] += lp[l].values()[i] * gw[l].values()[i];
        }
    }

    res.canvas = ImageBuffer(cw, ch, nc);
    for (int c = 0; c < nc; ++c) {
        for (int l = 0; l < levels; ++l) {
            Raster& a = acc[c][l];
            std::vector<std::uint8_t> known(a.size());
            for (std::size_t i = 0; i < a.size(); ++i) {
                const double s = acc_w[l].values()[i];
                known[i] = s > 1e-12;
                a.values()[i] = known[i] ? a.values()[i] / s : 0.0;
            }
            nearest_fill(a, known);
        }
        Raster img = acc[c][levels - 1];
        for (int l = levels - 2; l >= 0; --l) {
            Raster up = expand(img, acc[c][l].width(), acc[c][l].height());
            for (std::size_t i = 0; i < up.size(); ++i) up.values()[i] += acc[c][l].values()[i];
            img = std::move(up);
        }
        for (int y = 0; y < ch; ++y)
            for (int x = 0; x < cw; ++x) res.canvas.set(x, y, c, res.coverage(x, y) ? img(x, y) : 0.0);
    }
    return res;
}

}  // namespace endomap
