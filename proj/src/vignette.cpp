#include <algorithm>
#include <cmath>
#include <limits>

#include "endomap/kernels.hpp"
#include "endomap/preprocess.hpp"

namespace endomap {

VignetteModel VignetteModel::identity(int width, int height) {
    VignetteModel m;
    m.x0 = 0.5 * (width - 1);
    m.y0 = 0.5 * (height - 1);
    m.half_diagonal = std::max(1e-9, std::hypot(m.x0, m.y0));
    return m;
}

double VignetteModel::gain(double r) const {
    const double r2 = r * r;
    return 1.0 + r2 * (a + r2 * (b + r2 * c));
}

double VignetteModel::gain_at(double x, double y) const {
    return gain(std::hypot(x - x0, y - y0) / half_diagonal);
}

namespace {

bool gain_admissible(double a, double b, double c, double min_gain) {
    for (int i = 0; i <= 200; ++i) {
        const double r2 = (i / 200.0) * (i / 200.0);
        if (1.0 + r2 * (a + r2 * (b + r2 * c)) <= min_gain) return false;
    }
    return true;
}

}  // namespace

double radial_asymmetry(const ImageBuffer& gray, const BinaryMask* valid) {
    if (gray.channels() != 1) throw Error("radial_asymmetry expects a single-channel image");
    const GradientField g = gradient(gray);
    const double x0 = 0.5 * (gray.width() - 1), y0 = 0.5 * (gray.height() - 1);
    double signed_sum = 0.0, abs_sum = 0.0;
    for (int y = 0; y < gray.height(); ++y) {
        for (int x = 0; x < gray.width(); ++x) {
            if (valid && !(*valid)(x, y)) continue;
            const double rx = x - x0, ry = y - y0;
            const double r = std::hypot(rx, ry);
            if (r < 1e-12) continue;
            const double v = (g.dx(x, y) * rx + g.dy(x, y) * ry) / r;
            signed_sum += v;
            abs_sum += std::abs(v);
        }
    }
    return abs_sum > 0.0 ? std::abs(signed_sum) / abs_sum : 0.0;
}

namespace {

// Per-pixel data for the fit objective. The radial gradient of I/g follows
// from the product rule, so trial models never touch the image again.
struct FitSample {
    double intensity;
    double radial_grad;  // of the input
    double r_hat;
    int bin;
};

class VignetteObjective {
public:
    VignetteObjective(const ImageBuffer& gray, const BinaryMask* valid, int bins, double min_gain)
        : bins_(bins), min_gain_(min_gain) {
        const VignetteModel id = VignetteModel::identity(gray.width(), gray.height());
        hd_ = id.half_diagonal;
        const GradientField g = gradient(gray);
        for (int y = 0; y < gray.height(); ++y) {
            for (int x = 0; x < gray.width(); ++x) {
                if (valid && !(*valid)(x, y)) continue;
                const double rx = x - id.x0, ry = y - id.y0;
                const double r = std::hypot(rx, ry);
                if (r < 1e-12) continue;
                const double rh = std::min(r / hd_, 1.0);
                const int bin = std::min(bins - 1, static_cast<int>(rh * bins));
                samples_.push_back({gray.at(x, y), (g.dx(x, y) * rx + g.dy(x, y) * ry) / r, rh, bin});
            }
        }
        sums_.resize(bins);
    }

    // Sum over radial bins of |net radial gradient| of the corrected image,
    // normalised by its mean intensity so a global gain change is neutral.
    double operator()(double a, double b, double c) {
        if (!gain_admissible(a, b, c, min_gain_)) return std::numeric_limits<double>::infinity();
        std::fill(sums_.begin(), sums_.end(), 0.0);
        double mean = 0.0;
        for (const FitSample& s : samples_) {
            const double r2 = s.r_hat * s.r_hat;
            const double gv = 1.0 + r2 * (a + r2 * (b + r2 * c));
            const double dg = (2.0 * a * s.r_hat + 4.0 * b * r2 * s.r_hat + 6.0 * c * r2 * r2 * s.r_hat) / hd_;
            sums_[s.bin] += s.radial_grad / gv - s.intensity * dg / (gv * gv);
            mean += s.intensity / gv;
        }
        if (samples_.empty() || mean <= 0.0) return 0.0;
        double total = 0.0;
        for (double v : sums_) total += std::abs(v);
        return total / mean;
    }

private:
    int bins_;
    double min_gain_;
    double hd_ = 1.0;
    std::vector<FitSample> samples_;
    std::vector<double> sums_;
};

}  // namespace

VignetteModel fit_vignette(const ImageBuffer& gray, const BinaryMask* valid, const VignetteFitOptions& opt) {
    if (gray.channels() != 1) throw Error("fit_vignette expects a single-channel image");
    if (std::min(gray.width(), gray.height()) < 32) throw Error("fit_vignette needs images of at least 32x32");

    VignetteObjective objective(gray, valid, opt.bins, opt.min_gain);
    double p[3] = {0.0, 0.0, 0.0};
    double best = objective(0.0, 0.0, 0.0);

    // Coordinate descent over the bounded grid.
    const int steps = static_cast<int>(std::lround(2.0 / opt.grid_step));
    for (int cycle = 0; cycle < 20; ++cycle) {
        bool moved = false;
        for (int k = 0; k < 3; ++k) {
            double best_v = p[k];
            for (int i = 0; i <= steps; ++i) {
                double trial[3] = {p[0], p[1], p[2]};
                trial[k] = -1.0 + i * opt.grid_step;
                const double v = objective(trial[0], trial[1], trial[2]);
                if (v < best - 1e-15) {
                    best = v;
                    best_v = trial[k];
                }
            }
            if (best_v != p[k]) {
                p[k] = best_v;
                moved = true;
            }
        }
        if (!moved) break;
    }

    // Local refinement: compass search with a shrinking step, still inside [-1,1].
    for (double step = opt.grid_step / 2; step > 1e-5; step /= 2) {
        bool improved = true;
        while (improved) {
            improved = false;
            for (int k = 0; k < 3; ++k) {
                for (double dir : {1.0, -1.0}) {
                    double trial[3] = {p[0], p[1], p[2]};
                    trial[k] = std::clamp(trial[k] + dir * step, -1.0, 1.0);
                    const double v = objective(trial[0], trial[1], trial[2]);
                    if (v < best - 1e-15) {
                        best = v;
                        p[k] = trial[k];
                        improved = true;
                    }
                }
            }
        }
    }

    VignetteModel model = VignetteModel::identity(gray.width(), gray.height());
    if (!gain_admissible(p[0], p[1], p[2], opt.min_gain)) {
        model.rejected = true;
        model.warning = "vignette fit rejected: gain not above minimum";
        return model;
    }
    model.a = p[0];
    model.b = p[1];
    model.c = p[2];

    // Guard the contract that correction never raises the asymmetry measure.
    const double before = radial_asymmetry(gray, valid);
    const double after = radial_asymmetry(correct_vignetting(gray, model), valid);
    if (after > before + 1e-9) {
        VignetteModel id = VignetteModel::identity(gray.width(), gray.height());
        id.rejected = true;
        id.warning = "vignette fit rejected: radial asymmetry would increase";
        return id;
    }
    return model;
}

ImageBuffer correct_vignetting(const ImageBuffer& img, const VignetteModel& model) {
    const int w = img.width(), h = img.height(), nc = img.channels();
    std::vector<double> out(img.data().size());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double g = model.gain_at(x, y);
            for (int c = 0; c < nc; ++c) {
                const std::size_t i = (static_cast<std::size_t>(y) * w + x) * nc + c;
                out[i] = img.data()[i] / g;
            }
        }
    }
    return ImageBuffer(w, h, nc, std::move(out));
}

}  // namespace endomap
