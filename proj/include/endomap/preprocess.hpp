#pragma once

#include <string>

#include "endomap/image.hpp"

namespace endomap {

// ---- reflection detection and suppression ----

// Marks pixels whose gradient magnitude exceeds the given percentile
// (linear interpolation between order statistics) of all magnitudes.
BinaryMask gradient_threshold_mask(const GradientField& grad, double percentile);

// Disc-shaped structuring element; pixels outside the image are ignored.
BinaryMask dilate(const BinaryMask& m, int radius);
BinaryMask erode(const BinaryMask& m, int radius);

// Background components (4-connected) that do not touch the border become foreground.
BinaryMask fill_holes(const BinaryMask& m);

// Closing (dilate then erode) followed by hole filling.
BinaryMask morphological_close_and_fill(const BinaryMask& m, int radius);

// I >= mean + stddev.
BinaryMask illumination_mask(const ImageBuffer& gray, const ImageStats& stats);

struct ReflectionConfig {
    double percentile = 95.0;
    int close_radius = 2;
    int dilate_radius = 2;
};

BinaryMask detect_reflections(const ImageBuffer& gray, const ReflectionConfig& cfg = {});

struct InpaintReport {
    int iterations = 0;
    double last_update = 0.0;
};

// Harmonic fill of the masked pixels (Gauss-Seidel, unmasked 4-neighbours are
// Dirichlet data, image borders are reflecting).
ImageBuffer inpaint(const ImageBuffer& img, const BinaryMask& mask, double tol = 1e-6,
                    int max_iters = 20000, InpaintReport* report = nullptr);

// ---- vignetting ----

struct VignetteModel {
    double x0 = 0.0;
    double y0 = 0.0;
    double half_diagonal = 1.0;
    double a = 0.0;
    double b = 0.0;
    double c = 0.0;
    bool rejected = false;  // fit fell back to the identity model
    std::string warning;

    static VignetteModel identity(int width, int height);

    // g(r_hat) = 1 + a r^2 + b r^4 + c r^6.
    double gain(double r_hat) const;
    double gain_at(double x, double y) const;
    bool is_identity() const { return a == 0.0 && b == 0.0 && c == 0.0; }
};

// |sum of signed radial gradients| / sum of |radial gradients|, radial
// direction taken from the image centre. 0 for a gradient-free image.
double radial_asymmetry(const ImageBuffer& gray, const BinaryMask* valid = nullptr);

struct VignetteFitOptions {
    double grid_step = 0.05;
    int bins = 40;
    double min_gain = 0.05;
};

VignetteModel fit_vignette(const ImageBuffer& gray, const BinaryMask* valid = nullptr,
                           const VignetteFitOptions& opt = {});

ImageBuffer correct_vignetting(const ImageBuffer& img, const VignetteModel& model);

// ---- enhancement ----

// img + amount * (img - blur(img)), without clamping.
Raster unsharp_mask_raw(const Raster& r, double sigma, double amount);
ImageBuffer unsharp_mask(const ImageBuffer& img, double sigma = 1.5, double amount = 0.5);

}  // namespace endomap
