#include "endomap/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "endomap/parallel.hpp"

namespace endomap {

ImageBuffer to_grayscale(const ImageBuffer& img) {
    if (img.channels() == 1) return img;
    const int w = img.width(), h = img.height();
    std::vector<double> out(static_cast<std::size_t>(w) * h);
    const auto& d = img.data();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = 0.299 * d[3 * i] + 0.587 * d[3 * i + 1] + 0.114 * d[3 * i + 2];
    return ImageBuffer(w, h, 1, std::move(out));
}

GradientField gradient(const Raster& r) {
    const int w = r.width(), h = r.height();
    if (w < 2 || h < 2) throw Error("gradient needs an image of at least 2x2");
    GradientField g{Raster(w, h), Raster(w, h), Raster(w, h)};
    parallel_for(0, h, [&](int y) {
        for (int x = 0; x < w; ++x) {
            double dx, dy;
            if (x == 0) dx = r(1, y) - r(0, y);
            else if (x == w - 1) dx = r(x, y) - r(x - 1, y);
            else dx = 0.5 * (r(x + 1, y) - r(x - 1, y));
            if (y == 0) dy = r(x, 1) - r(x, 0);
            else if (y == h - 1) dy = r(x, y) - r(x, y - 1);
            else dy = 0.5 * (r(x, y + 1) - r(x, y - 1));
            g.dx(x, y) = dx;
            g.dy(x, y) = dy;
            g.magnitude(x, y) = std::sqrt(dx * dx + dy * dy);
        }
    });
    return g;
}

GradientField gradient(const ImageBuffer& gray) {
    if (gray.channels() != 1) throw Error("gradient expects a single-channel image");
    return gradient(gray.channel(0));
}

namespace {

std::vector<double> gaussian_kernel(double sigma) {
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += k[i + radius];
    }
    for (double& v : k) v /= sum;
    return k;
}

}  // namespace

Raster gaussian_blur(const Raster& r, double sigma) {
    if (!(sigma > 0.0)) throw Error("gaussian_blur needs sigma > 0");
    const auto k = gaussian_kernel(sigma);
    const int radius = static_cast<int>(k.size() / 2);
    const int w = r.width(), h = r.height();
    Raster tmp(w, h), out(w, h);
    parallel_for(0, h, [&](int y) {
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int i = -radius; i <= radius; ++i) s += k[i + radius] * r.clamped(x + i, y);
            tmp(x, y) = s;
        }
    });
    parallel_for(0, h, [&](int y) {
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int i = -radius; i <= radius; ++i) s += k[i + radius] * tmp.clamped(x, y + i);
            out(x, y) = s;
        }
    });
    return out;
}

ImageBuffer gaussian_blur(const ImageBuffer& img, double sigma) {
    if (!(sigma > 0.0)) throw Error("gaussian_blur needs sigma > 0");
    const int w = img.width(), h = img.height(), nc = img.channels();
    std::vector<double> out(img.data().size());
    for (int c = 0; c < nc; ++c) {
        const Raster b = gaussian_blur(img.channel(c), sigma);
        for (std::size_t i = 0; i < b.size(); ++i) out[i * nc + c] = b.values()[i];
    }
    return ImageBuffer(w, h, nc, std::move(out));
}

ImageStats raster_stats(const Raster& r, const BinaryMask* valid) {
    if (valid) require_same_size(r.width(), r.height(), valid->width(), valid->height(), "stats mask");
    ImageStats s;
    s.min = std::numeric_limits<double>::infinity();
    s.max = -std::numeric_limits<double>::infinity();
    // Welford update.
    double mean = 0.0, m2 = 0.0;
    std::size_t n = 0;
    for (int y = 0; y < r.height(); ++y) {
        for (int x = 0; x < r.width(); ++x) {
            if (valid && !(*valid)(x, y)) continue;
            const double v = r(x, y);
            ++n;
            const double d = v - mean;
            mean += d / static_cast<double>(n);
            m2 += d * (v - mean);
            s.min = std::min(s.min, v);
            s.max = std::max(s.max, v);
        }
    }
    s.count = n;
    if (n == 0) throw Error("statistics over an empty pixel set");
    s.mean = mean;
    s.stddev = std::sqrt(m2 / static_cast<double>(n));
    return s;
}

ImageStats image_stats(const ImageBuffer& img, const BinaryMask* valid) {
    return raster_stats(to_grayscale(img).channel(0), valid);
}

IntegralImage::IntegralImage(const Raster& r) : w_(r.width()), h_(r.height()) {
    s_.assign(static_cast<std::size_t>(w_ + 1) * (h_ + 1), 0.0);
    for (int y = 0; y < h_; ++y) {
        double row = 0.0;
        for (int x = 0; x < w_; ++x) {
            row += r(x, y);
            s_[static_cast<std::size_t>(y + 1) * (w_ + 1) + x + 1] =
                s_[static_cast<std::size_t>(y) * (w_ + 1) + x + 1] + row;
        }
    }
}

double IntegralImage::box_sum(int x0, int y0, int x1, int y1) const {
    x0 = std::clamp(x0, 0, w_);
    x1 = std::clamp(x1, 0, w_);
    y0 = std::clamp(y0, 0, h_);
    y1 = std::clamp(y1, 0, h_);
    if (x1 <= x0 || y1 <= y0) return 0.0;
    const auto at = [&](int x, int y) { return s_[static_cast<std::size_t>(y) * (w_ + 1) + x]; };
    return at(x1, y1) - at(x0, y1) - at(x1, y0) + at(x0, y0);
}

namespace {

template <typename Get>
bool bilinear(int w, int h, double x, double y, Get get, double& out) {
    if (!(x >= 0.0 && y >= 0.0 && x <= w - 1 && y <= h - 1)) return false;
    const int x0 = std::min(static_cast<int>(x), std::max(w - 2, 0));
    const int y0 = std::min(static_cast<int>(y), std::max(h - 2, 0));
    const int x1 = std::min(x0 + 1, w - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const double fx = x - x0, fy = y - y0;
    out = (1 - fy) * ((1 - fx) * get(x0, y0) + fx * get(x1, y0)) +
          fy * ((1 - fx) * get(x0, y1) + fx * get(x1, y1));
    return true;
}

}  // namespace

bool sample_bilinear(const Raster& r, double x, double y, double& out) {
    return bilinear(r.width(), r.height(), x, y, [&](int a, int b) { return r(a, b); }, out);
}

bool sample_bilinear(const ImageBuffer& img, double x, double y, int c, double& out) {
    return bilinear(img.width(), img.height(), x, y,
                    [&](int a, int b) { return img.at(a, b, c); }, out);
}

}  // namespace endomap
