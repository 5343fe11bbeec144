#include "endomap/sfs.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "endomap/kernels.hpp"
#include "endomap/parallel.hpp"

namespace endomap {

double LightModel::ix() const { return std::cos(tilt) * std::tan(slant); }
double LightModel::iy() const { return std::sin(tilt) * std::tan(slant); }

void LightModel::validate() const {
    if (!(slant >= 0.0 && slant < std::numbers::pi / 2)) throw Error("light: slant outside [0, pi/2)");
    if (!(tilt >= -std::numbers::pi - 1e-12 && tilt <= std::numbers::pi + 1e-12)) throw Error("light: tilt outside [-pi, pi]");
    if (!(albedo > 0.0 && albedo <= 1.5)) throw Error("light: albedo outside (0, 1.5]");
}

ReflectanceJet reflectance_jet(double p, double q, const LightModel& light) {
    const double ss = std::sin(light.slant), cs = std::cos(light.slant);
    const double a = std::cos(light.tilt) * ss, b = std::sin(light.tilt) * ss;
    const double d2 = p * p + q * q + 1.0;
    const double d = std::sqrt(d2);
    const double num = cs + p * a + q * b;
    ReflectanceJet j;
    if (num <= 0.0) return j;
    j.r = light.albedo * num / d;
    const double d3 = d2 * d;
    j.dp = light.albedo * (a / d - num * p / d3);
    j.dq = light.albedo * (b / d - num * q / d3);
    return j;
}

double reflectance(double p, double q, const LightModel& light) { return reflectance_jet(p, q, light).r; }

double sfs_residual(double intensity, double zc, double zl, double zu, bool has_left, bool has_up,
                    const LightModel& light) {
    const double p = has_left ? zc - zl : 0.0;
    const double q = has_up ? zc - zu : 0.0;
    return intensity - reflectance(p, q, light);
}

double sfs_residual_dz(double zc, double zl, double zu, bool has_left, bool has_up, const LightModel& light) {
    const double p = has_left ? zc - zl : 0.0;
    const double q = has_up ? zc - zu : 0.0;
    const ReflectanceJet j = reflectance_jet(p, q, light);
    return -((has_left ? j.dp : 0.0) + (has_up ? j.dq : 0.0));
}

void sphere_moments(double slant, double& m1, double& m2) {
    constexpr int nr = 400, nt = 512;
    const double ss = std::sin(slant), cs = std::cos(slant);
    double s1 = 0.0, s2 = 0.0;
    for (int j = 0; j < nt; ++j) {
        const double ct = std::cos(2.0 * std::numbers::pi * (j + 0.5) / nt);
        for (int i = 0; i < nr; ++i) {
            const double r2 = (i + 0.5) / nr;  // uniform in area
            const double v = ss * std::sqrt(r2) * ct + cs * std::sqrt(1.0 - r2);
            if (v > 0.0) {
                s1 += v;
                s2 += v * v;
            }
        }
    }
    m1 = s1 / (nr * nt);
    m2 = s2 / (nr * nt);
}

LightEstimate estimate_light(const ImageBuffer& gray, const BinaryMask* excluded) {
    if (gray.channels() != 1) throw Error("estimate_light expects a single-channel image");
    const int w = gray.width(), h = gray.height();
    if (w < 2 || h < 2) throw Error("estimate_light: image too small");
    const bool has_mask = excluded && !excluded->empty();
    if (has_mask) require_same_size(w, h, excluded->width(), excluded->height(), "estimate_light mask");
    auto usable = [&](int x, int y) { return !has_mask || !(*excluded)(x, y); };

    std::size_t n = 0;
    double s1 = 0.0, s2 = 0.0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (usable(x, y)) {
                const double v = gray.at(x, y);
                s1 += v;
                s2 += v * v;
                ++n;
            }
    if (2 * n < static_cast<std::size_t>(w) * h) throw Error("estimate_light: fewer than half the pixels are usable");

    LightEstimate est;
    est.mu1 = s1 / n;
    est.mu2 = s2 / n;

    // Tilt from the mean unit gradient direction, away from masked edges.
    const GradientField g = gradient(gray);
    double gx = 0.0, gy = 0.0;
    for (int y = 1; y + 1 < h; ++y)
        for (int x = 1; x + 1 < w; ++x) {
            if (!usable(x, y) || !usable(x - 1, y) || !usable(x + 1, y) || !usable(x, y - 1) || !usable(x, y + 1))
                continue;
            const double m = g.magnitude(x, y);
            if (m < 1e-9) continue;
            gx += g.dx(x, y) / m;
            gy += g.dy(x, y) / m;
        }
    est.light.tilt = (gx == 0.0 && gy == 0.0) ? 0.0 : std::atan2(gy, gx);

    const double target = est.mu1 > 0.0 ? est.mu2 / (est.mu1 * est.mu1) : 0.0;
    auto ratio = [](double s) {
        double m1, m2;
        sphere_moments(s, m1, m2);
        return m2 / (m1 * m1);
    };
    const double lo0 = 0.0, hi0 = 85.0 * std::numbers::pi / 180.0;
    if (!(est.mu1 > 0.0) || target < ratio(lo0) || target > ratio(hi0)) {
        est.fallback = true;
        est.light.slant = 0.0;
        est.light.albedo = 2.0 * est.mu1;
        return est;
    }
    double lo = lo0, hi = hi0;
    for (int it = 0; it < 60; ++it) {
        const double mid = 0.5 * (lo + hi);
        (ratio(mid) < target ? lo : hi) = mid;
    }
    est.light.slant = 0.5 * (lo + hi);
    double m1, m2;
    sphere_moments(est.light.slant, m1, m2);
    est.light.albedo = est.mu1 / m1;
    return est;
}

GradientPair depth_gradients(const DepthMap& d) {
    const int w = d.width(), h = d.height();
    const bool has_mask = !d.valid.empty();
    auto ok = [&](int x, int y) { return !has_mask || d.valid(x, y); };
    GradientPair g{Raster(w, h), Raster(w, h)};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!ok(x, y)) continue;
            if (x > 0 && ok(x - 1, y)) g.p(x, y) = d.z(x, y) - d.z(x - 1, y);
            if (y > 0 && ok(x, y - 1)) g.q(x, y) = d.z(x, y) - d.z(x, y - 1);
        }
    return g;
}

namespace {

// Valid pixels in raster order with their stencil neighbours (-1 = none).
struct Problem {
    std::vector<double> I;
    std::vector<int> left, up;      // neighbours entering p and q
    std::vector<int> right, down;   // pixels whose p / q use this one
    LightModel light;
    std::size_t size() const { return I.size(); }
};

struct Jac {
    std::vector<double> c, l, u;  // df_i/dZ_i, df_i/dZ_left, df_i/dZ_up
};

constexpr int kBlock = 4096;

template <typename Fn>
void blocks(std::size_t n, Fn&& fn) {
    const int nb = static_cast<int>((n + kBlock - 1) / kBlock);
    parallel_for(0, nb, [&](int b) {
        const std::size_t lo = static_cast<std::size_t>(b) * kBlock;
        const std::size_t hi = std::min(n, lo + kBlock);
        fn(lo, hi);
    });
}

// Residuals (and optionally the Jacobian) at Z; returns sum f^2.
double evaluate(const Problem& pb, const std::vector<double>& Z, std::vector<double>* f, Jac* jac,
                double* mean_abs = nullptr) {
    const std::size_t n = pb.size();
    const int nb = static_cast<int>((n + kBlock - 1) / kBlock);
    std::vector<double> bsq(nb, 0.0), babs(nb, 0.0);
    blocks(n, [&](std::size_t lo, std::size_t hi) {
        double sq = 0.0, ab = 0.0;
        for (std::size_t i = lo; i < hi; ++i) {
            const int l = pb.left[i], u = pb.up[i];
            const double p = l >= 0 ? Z[i] - Z[l] : 0.0;
            const double q = u >= 0 ? Z[i] - Z[u] : 0.0;
            const ReflectanceJet j = reflectance_jet(p, q, pb.light);
            const double fi = pb.I[i] - j.r;
            sq += fi * fi;
            ab += std::abs(fi);
            if (f) (*f)[i] = fi;
            if (jac) {
                const double dl = l >= 0 ? j.dp : 0.0, du = u >= 0 ? j.dq : 0.0;
                jac->c[i] = -(dl + du);
                jac->l[i] = dl;
                jac->u[i] = du;
            }
        }
        bsq[lo / kBlock] = sq;
        babs[lo / kBlock] = ab;
    });
    double sq = 0.0, ab = 0.0;
    for (int b = 0; b < nb; ++b) {
        sq += bsq[b];
        ab += babs[b];
    }
    if (mean_abs) *mean_abs = n ? ab / n : 0.0;
    return sq;
}

double floored(double d, double floor) {
    if (std::abs(d) >= floor) return d;
    return d < 0.0 ? -floor : floor;
}

// y = J^T J v + shift .* v
void normal_matvec(const Problem& pb, const Jac& J, const std::vector<double>& shift, const std::vector<double>& v,
                   std::vector<double>& tmp, std::vector<double>& y) {
    const std::size_t n = pb.size();
    blocks(n, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            double s = J.c[i] * v[i];
            if (pb.left[i] >= 0) s += J.l[i] * v[pb.left[i]];
            if (pb.up[i] >= 0) s += J.u[i] * v[pb.up[i]];
            tmp[i] = s;
        }
    });
    blocks(n, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t k = lo; k < hi; ++k) {
            double s = J.c[k] * tmp[k];
            if (pb.right[k] >= 0) s += J.l[pb.right[k]] * tmp[pb.right[k]];
            if (pb.down[k] >= 0) s += J.u[pb.down[k]] * tmp[pb.down[k]];
            y[k] = s + shift[k] * v[k];
        }
    });
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// Jacobi-preconditioned CG on (J^T J + shift) x = rhs from x = 0.
void solve_normal(const Problem& pb, const Jac& J, const std::vector<double>& shift, const std::vector<double>& diag,
                  const std::vector<double>& rhs, std::vector<double>& x, int max_iters, double tol) {
    const std::size_t n = rhs.size();
    std::vector<double> r = rhs, z(n), p(n), ap(n), tmp(n);
    std::fill(x.begin(), x.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) z[i] = r[i] / diag[i];
    p = z;
    double rz = dot(r, z);
    const double r0 = std::sqrt(dot(r, r));
    if (r0 == 0.0) return;
    for (int it = 0; it < max_iters; ++it) {
        normal_matvec(pb, J, shift, p, tmp, ap);
        const double pap = dot(p, ap);
        if (!(pap > 0.0)) break;
        const double alpha = rz / pap;
        double rr = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
            rr += r[i] * r[i];
        }
        if (std::sqrt(rr) < tol * r0) break;
        double rz_new = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            z[i] = r[i] / diag[i];
            rz_new += r[i] * z[i];
        }
        const double beta = rz_new / rz;
        rz = rz_new;
        for (std::size_t i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
    }
}

// Levenberg-Marquardt on sum f^2. When the gradient vanishes (frontal light
// at Z = 0 makes every df/dZ zero) the floored per-pixel Newton step is used
// instead, with step halving.
void solve_newton(const Problem& pb, std::vector<double>& Z, const SfsOptions& opt, SfsReport& rep) {
    const std::size_t n = Z.size();
    Jac J{std::vector<double>(n), std::vector<double>(n), std::vector<double>(n)};
    std::vector<double> f(n), delta(n), trial(n), diag(n), shift(n), pre(n), rhs(n);
    double mean_abs;
    double cost = evaluate(pb, Z, &f, &J, &mean_abs);
    rep.mean_abs_residual.push_back(mean_abs);
    double lambda = 1e-3;

    auto pixel_step = [&]() {
        for (std::size_t i = 0; i < n; ++i) delta[i] = -f[i] / floored(J.c[i], opt.derivative_floor);
        for (double alpha = 1.0; alpha > 1e-300; alpha *= 0.5) {
            for (std::size_t i = 0; i < n; ++i) trial[i] = Z[i] + alpha * delta[i];
            const double c = evaluate(pb, trial, nullptr, nullptr);
            if (std::isfinite(c) && c < cost) return c;
        }
        return -1.0;
    };

    for (int it = 0; it < opt.iterations; ++it) {
        if (cost == 0.0) {
            rep.stop_reason = "zero residual";
            break;
        }
        double gmax = 0.0, dmean = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            double s = J.c[k] * f[k], d = J.c[k] * J.c[k];
            if (pb.right[k] >= 0) {
                s += J.l[pb.right[k]] * f[pb.right[k]];
                d += J.l[pb.right[k]] * J.l[pb.right[k]];
            }
            if (pb.down[k] >= 0) {
                s += J.u[pb.down[k]] * f[pb.down[k]];
                d += J.u[pb.down[k]] * J.u[pb.down[k]];
            }
            rhs[k] = -s;
            diag[k] = d;
            dmean += d;
            gmax = std::max(gmax, std::abs(s));
        }
        dmean /= static_cast<double>(n);
        double tcost = -1.0;
        if (gmax < 1e-14) {
            tcost = pixel_step();
        } else {
            while (lambda <= 1e10) {
                // The isotropic part of the damping keeps pixels with vanishing
                // Jacobian columns from taking unbounded steps.
                for (std::size_t k = 0; k < n; ++k) {
                    shift[k] = lambda * (diag[k] + dmean + 1e-12);
                    pre[k] = diag[k] + shift[k];
                }
                solve_normal(pb, J, shift, pre, rhs, delta, opt.cg_iterations, opt.cg_tol);
                for (std::size_t k = 0; k < n; ++k) trial[k] = Z[k] + delta[k];
                const double c = evaluate(pb, trial, nullptr, nullptr);
                if (std::isfinite(c) && c < cost) {
                    tcost = c;
                    lambda = std::max(lambda / 10.0, 1e-12);
                    break;
                }
                lambda *= 10.0;
            }
            if (tcost < 0.0) {
                lambda = 1e-3;
                tcost = pixel_step();
            }
        }
        rep.iterations = it + 1;
        if (tcost < 0.0) {
            rep.stop_reason = "no descent step";
            break;
        }
        Z.swap(trial);
        const double rel = (cost - tcost) / cost;
        cost = evaluate(pb, Z, &f, &J, &mean_abs);
        rep.mean_abs_residual.push_back(mean_abs);
        if (rel < opt.rel_tol) {
            rep.stop_reason = "relative decrease below tolerance";
            break;
        }
    }
    if (rep.stop_reason.empty()) rep.stop_reason = "iteration limit";
}

void solve_jacobi(const Problem& pb, std::vector<double>& Z, const SfsOptions& opt, SfsReport& rep) {
    const std::size_t n = Z.size();
    Jac J{std::vector<double>(n), std::vector<double>(n), std::vector<double>(n)};
    std::vector<double> f(n), next(n);
    std::vector<std::uint8_t> frozen(n, 0);
    double mean_abs;
    evaluate(pb, Z, &f, &J, &mean_abs);
    rep.mean_abs_residual.push_back(mean_abs);
    for (int it = 0; it < opt.iterations; ++it) {
        for (std::size_t i = 0; i < n; ++i) {
            next[i] = Z[i];
            if (frozen[i]) continue;
            const double z = Z[i] - f[i] / floored(J.c[i], opt.derivative_floor);
            if (!std::isfinite(z)) {
                frozen[i] = 1;
                ++rep.flagged;
                continue;
            }
            next[i] = z;
        }
        Z.swap(next);
        evaluate(pb, Z, &f, &J, &mean_abs);
        rep.mean_abs_residual.push_back(mean_abs);
        rep.iterations = it + 1;
    }
    rep.stop_reason = "iteration limit";
}

}  // namespace

DepthMap tsai_shah(const ImageBuffer& gray, const LightModel& light, const BinaryMask* valid, const SfsOptions& opt,
                   SfsReport* report) {
    if (gray.channels() != 1) throw Error("tsai_shah expects a single-channel image");
    if (opt.iterations < 1) throw Error("tsai_shah: iterations must be >= 1");
    light.validate();
    const int w = gray.width(), h = gray.height();
    const bool has_mask = valid && !valid->empty();
    if (has_mask) require_same_size(w, h, valid->width(), valid->height(), "tsai_shah mask");

    // Mirror the problem so the light's image-plane direction has
    // non-negative components; a tilt shifted by pi then maps onto the same
    // internal problem, rotated.
    const bool newton = opt.solver == SfsSolver::Newton;
    const bool fx = newton && std::cos(light.tilt) < -1e-12;
    const bool fy = newton && std::sin(light.tilt) < -1e-12;
    auto src_x = [&](int x) { return fx ? w - 1 - x : x; };
    auto src_y = [&](int y) { return fy ? h - 1 - y : y; };

    Problem pb;
    pb.light = light;
    pb.light.tilt = std::atan2(fy ? -std::sin(light.tilt) : std::sin(light.tilt),
                               fx ? -std::cos(light.tilt) : std::cos(light.tilt));
    std::vector<int> index(static_cast<std::size_t>(w) * h, -1);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (has_mask && !(*valid)(src_x(x), src_y(y))) continue;
            index[static_cast<std::size_t>(y) * w + x] = static_cast<int>(pb.I.size());
            pb.I.push_back(gray.at(src_x(x), src_y(y)));
        }
    const std::size_t n = pb.I.size();
    pb.left.assign(n, -1);
    pb.up.assign(n, -1);
    pb.right.assign(n, -1);
    pb.down.assign(n, -1);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int i = index[static_cast<std::size_t>(y) * w + x];
            if (i < 0) continue;
            if (x > 0) pb.left[i] = index[static_cast<std::size_t>(y) * w + x - 1];
            if (y > 0) pb.up[i] = index[static_cast<std::size_t>(y - 1) * w + x];
            if (pb.left[i] >= 0) pb.right[pb.left[i]] = i;
            if (pb.up[i] >= 0) pb.down[pb.up[i]] = i;
        }

    std::vector<double> Z(n, 0.0);
    SfsReport rep;
    if (n > 0) {
        if (newton) solve_newton(pb, Z, opt, rep);
        else solve_jacobi(pb, Z, opt, rep);
    }

    DepthMap out;
    out.z = Raster(w, h);
    out.valid = has_mask ? *valid : BinaryMask(w, h, true);
    double mean = 0.0;
    for (double v : Z) mean += v;
    if (n) mean /= static_cast<double>(n);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int i = index[static_cast<std::size_t>(y) * w + x];
            if (i >= 0) out.z(src_x(x), src_y(y)) = Z[i] - mean;
        }
    if (report) *report = std::move(rep);
    return out;
}

std::vector<Point3> depth_to_pointcloud(const DepthMap& d, const CameraIntrinsics& cam, double scale) {
    if (!(scale > 0.0)) throw Error("depth_to_pointcloud: scale must be > 0");
    if (!(cam.fx > 0.0 && cam.fy > 0.0)) throw Error("depth_to_pointcloud: invalid focal length");
    const bool has_mask = !d.valid.empty();
    double zmin = std::numeric_limits<double>::infinity();
    for (int y = 0; y < d.height(); ++y)
        for (int x = 0; x < d.width(); ++x)
            if (!has_mask || d.valid(x, y)) zmin = std::min(zmin, d.z(x, y));
    std::vector<Point3> cloud;
    for (int y = 0; y < d.height(); ++y)
        for (int x = 0; x < d.width(); ++x) {
            if (has_mask && !d.valid(x, y)) continue;
            const double z = d.z(x, y) - zmin + 1.0;
            cloud.push_back({scale * z * (x - cam.cx) / cam.fx, scale * z * (y - cam.cy) / cam.fy, scale * z});
        }
    return cloud;
}

}  // namespace endomap
