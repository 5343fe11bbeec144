#pragma once

#include <string>
#include <vector>

#include "endomap/calibration.hpp"
#include "endomap/image.hpp"

namespace endomap {

// Single distant light. Angles in radians.
struct LightModel {
    double slant = 0.0;   // [0, pi/2)
    double tilt = 0.0;    // [-pi, pi]
    double albedo = 1.0;  // (0, 1.5]

    double ix() const;  // cos(tilt) tan(slant)
    double iy() const;  // sin(tilt) tan(slant)
    void validate() const;
};

// rho (cos s + p cos t sin s + q sin t sin s) / sqrt(p^2 + q^2 + 1), floored at 0.
double reflectance(double p, double q, const LightModel& light);

// Reflectance plus its partials in p and q (both 0 on the shadowed branch).
struct ReflectanceJet {
    double r = 0.0;
    double dp = 0.0;
    double dq = 0.0;
};
ReflectanceJet reflectance_jet(double p, double q, const LightModel& light);

// Per-pixel residual f = I - R(zc - zl, zc - zu) and its derivative in zc.
// has_left / has_up = false means the corresponding difference is taken as 0.
double sfs_residual(double intensity, double zc, double zl, double zu, bool has_left, bool has_up,
                    const LightModel& light);
double sfs_residual_dz(double zc, double zl, double zu, bool has_left, bool has_up, const LightModel& light);

struct LightEstimate {
    LightModel light;
    bool fallback = false;  // moment system had no root; slant 0, albedo 2 E[I]
    double mu1 = 0.0;
    double mu2 = 0.0;
};

// Moment-based estimator. `excluded` marks pixels to ignore (may be null);
// at least half of the image must remain.
LightEstimate estimate_light(const ImageBuffer& gray, const BinaryMask* excluded = nullptr);

// First two moments of max(0, n.s) over a uniformly sampled unit-sphere
// silhouette lit at the given slant (unit albedo).
void sphere_moments(double slant, double& m1, double& m2);

struct DepthMap {
    Raster z;
    BinaryMask valid;

    int width() const { return z.width(); }
    int height() const { return z.height(); }
};

struct GradientPair {
    Raster p;
    Raster q;
};

// Backward differences; first column/row and invalid neighbours give 0.
GradientPair depth_gradients(const DepthMap& d);

enum class SfsSolver {
    Newton,  // damped Newton (Levenberg-Marquardt) on the whole residual vector
    Jacobi,  // per-pixel Newton step, all pixels read the previous iterate
};

struct SfsOptions {
    int iterations = 200;
    SfsSolver solver = SfsSolver::Newton;
    double derivative_floor = 1e-6;
    double rel_tol = 1e-12;  // Newton: stop when sum f^2 decreases by less than this fraction
    int cg_iterations = 50;
    double cg_tol = 1e-2;
};

struct SfsReport {
    int iterations = 0;
    std::vector<double> mean_abs_residual;  // entry k: before update k+1; last: final
    std::size_t flagged = 0;                // pixels frozen after a non-finite update
    std::string stop_reason;
};

// `valid` restricts the solve (may be null); output depth is mean-centred over it.
DepthMap tsai_shah(const ImageBuffer& gray, const LightModel& light, const BinaryMask* valid = nullptr,
                   const SfsOptions& opt = {}, SfsReport* report = nullptr);

struct Point3 {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;
};

// z is shifted so its minimum over valid pixels is 1, then back-projected.
std::vector<Point3> depth_to_pointcloud(const DepthMap& d, const CameraIntrinsics& cam, double scale = 1.0);

}  // namespace endomap
