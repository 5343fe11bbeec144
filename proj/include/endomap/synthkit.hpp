#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "endomap/calibration.hpp"
#include "endomap/image.hpp"
#include "endomap/preprocess.hpp"
#include "endomap/sfs.hpp"
#include "endomap/stitcher.hpp"

namespace endomap {

// ---- analytic surfaces ----

enum class SurfaceKind { Flat, Hemisphere, Ramp, Sinusoid, CylinderInterior };

// amplitude * sin(kx x + ky y + phase)
struct SinusoidTerm {
    double amplitude = 0.0;
    double kx = 0.0;
    double ky = 0.0;
    double phase = 0.0;
};

// Depth Z(x,y) in pixel units, Z growing away from the camera.
struct AnalyticSurface {
    SurfaceKind kind = SurfaceKind::Flat;
    double cx = 0.0;      // hemisphere centre / cylinder axis position (x)
    double cy = 0.0;      // hemisphere centre
    double radius = 1.0;  // hemisphere or cylinder radius
    double slope_x = 0.0;
    double slope_y = 0.0;
    std::vector<SinusoidTerm> terms;  // Sinusoid kind, or bumps added to any kind

    static AnalyticSurface flat();
    // Z = -sqrt(R^2 - d^2): a dome bulging toward the camera.
    static AnalyticSurface hemisphere(double cx, double cy, double radius);
    static AnalyticSurface ramp(double slope_x, double slope_y);
    static AnalyticSurface sinusoid(double amplitude, double wavelength_x, double wavelength_y, double phase = 0.0);
    // Z = +sqrt(Rc^2 - (x - cx)^2): the inside of a tube whose axis runs along y.
    static AnalyticSurface cylinder_interior(double axis_x, double radius);

    bool defined(double x, double y) const;
    double z(double x, double y) const;
    void gradient(double x, double y, double& p, double& q) const;
    // z component of the unit normal, 1/sqrt(1+p^2+q^2).
    double normal_z(double x, double y) const;
};

// Seeded random bump field: `count` plane waves, wavelengths in [lmin, lmax],
// total amplitude split evenly.
std::vector<SinusoidTerm> random_bumps(int count, double amplitude, double lmin, double lmax, std::uint64_t seed);

struct RenderResult {
    ImageBuffer image;
    DepthMap depth;  // valid where the surface is defined
    Raster p;
    Raster q;
};

RenderResult render_lambertian(const AnalyticSurface& s, const LightModel& light, int width, int height);

// ---- photometric corruptions ----

// Multiply by g(r_hat) and clamp.
ImageBuffer apply_vignette(const ImageBuffer& img, const VignetteModel& model);

struct SpecularResult {
    ImageBuffer image;
    BinaryMask truth;  // blob footprints: core plus halo, d <= r + halo_width
};

// Each highlight is a saturating Gaussian core v = peak exp(-d^2 / 2s^2), with
// s chosen so v = 0.95 at d = r, plus an additive glare halo
// halo_gain exp(-(d - r)^2 / 2) that ends at d = r + halo_width. Composited as
// min(1, max(I + halo, v)). Blob discs stay inside the image.
SpecularResult inject_speculars(const ImageBuffer& img, int count, double r_min, double r_max, std::uint64_t seed,
                                double peak = 20.0, double halo_width = 2.0, double halo_gain = 0.3);

// ---- rotation sequences ----

struct Landmark {
    int frame = 0;
    int id = 0;
    Point2 canvas;
    Point2 pixel;
};

struct RotationSequenceOptions {
    int frames = 8;
    double max_angle = 0.1;            // total sweep, radians
    Eigen::Vector3d axis{1.0, 0.0, 0.0};
    double jitter = 0.0;               // per-axis std of extra rotation, radians
    std::uint64_t seed = 0;
    double landmark_spacing = 16.0;    // canvas grid spacing
};

struct RotationSequence {
    std::vector<ImageBuffer> frames;
    std::vector<Eigen::Matrix3d> rotations;  // camera k relative to the canvas view
    std::vector<Eigen::Matrix3d> canvas_to_frame;  // K R_k Kc^-1
    Eigen::Matrix3d canvas_K;
    std::vector<Landmark> landmarks;
};

// Frames of a planar canvas seen by a camera rotating about its centre. The
// canvas view shares the focal length of K, with its principal point offset
// so that the zero rotation sees the central crop.
RotationSequence rotation_sequence(const ImageBuffer& canvas, const CameraIntrinsics& cam,
                                   const RotationSequenceOptions& opt);

// Same, with the canvas given as a continuous field evaluated per sample.
RotationSequence rotation_sequence(const std::function<double(double, double)>& field, int canvas_width,
                                   int canvas_height, const CameraIntrinsics& cam,
                                   const RotationSequenceOptions& opt);

// ---- full datasets ----

struct DatasetConfig {
    std::string name = "standard";
    std::uint64_t seed = 0;
    int frames = 100;
    int width = 128;
    int height = 128;
    double focal = 1000.0;
    double k1 = -1.5;
    double step_deg = 0.23;    // sweep per frame about the x axis
    double jitter_deg = 0.02;  // per-axis rotation noise
    double cylinder_radius = 200.0;
    int bump_count = 12;
    double bump_amplitude = 0.6;
    double bump_lmin = 12.0;
    double bump_lmax = 24.0;
    LightModel light{0.8, 0.0, 0.85};
    double vignette_a = -0.3;
    double vignette_b = -0.1;
    int specular_min = 3;
    int specular_max = 6;
    double specular_rmin = 2.5;
    double specular_rmax = 5.0;
    double blur_sigma = 0.0;
    double noise_sigma = 0.004;
    int margin = 8;

    static DatasetConfig standard(std::uint64_t seed);
    // Standard scene with optical blur, stronger vignetting and more highlights.
    static DatasetConfig corrupted(std::uint64_t seed);
    static DatasetConfig specular(std::uint64_t seed);
    static DatasetConfig named(const std::string& name, std::uint64_t seed);
};

struct Dataset {
    DatasetConfig config;
    CameraIntrinsics camera;
    std::vector<ImageBuffer> frames;       // distorted, vignetted, 8-bit quantised
    std::vector<BinaryMask> specular_truth;
    std::vector<Eigen::Matrix3d> rotations;
    Eigen::Matrix3d canvas_K;
    ImageBuffer canvas_shading;            // clean truth canvas
    Raster canvas_depth;                   // truth depth on the canvas grid
};

Dataset make_dataset(const DatasetConfig& cfg);

// Directory layout: dataset.json, calibration.json, frames/frame_NNNN.png,
// truth/specular_NNNN.pgm, truth/depth.pfm, truth/canvas.png.
void write_dataset(const Dataset& d, const std::string& dir);

// Truth depth resampled onto a stitched grid. `view_to_anchor` takes a grid
// pixel to an ideal anchor-camera pixel, which reaches the truth canvas
// through Kc R_anchor^T K^-1. Invalid where the truth is not sampled.
DepthMap reference_depth(const Raster& canvas_depth, const Eigen::Matrix3d& canvas_K, const Eigen::Matrix3d& K,
                         const Eigen::Matrix3d& anchor_rotation, const Eigen::Matrix3d& view_to_anchor, int width,
                         int height);

}  // namespace endomap
