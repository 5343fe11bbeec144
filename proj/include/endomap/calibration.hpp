#pragma once

#include <Eigen/Core>
#include <string>

#include "endomap/image.hpp"

namespace endomap {

// Pinhole intrinsics plus Brown radial (k1,k2,k3) and tangential (p1,p2) terms.
struct CameraIntrinsics {
    int width = 0;
    int height = 0;
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.0;
    double cy = 0.0;
    double k1 = 0.0;
    double k2 = 0.0;
    double k3 = 0.0;
    double p1 = 0.0;
    double p2 = 0.0;

    Eigen::Matrix3d K() const;
    bool has_distortion() const;

    // Ideal normalized coordinates -> distorted normalized coordinates.
    Eigen::Vector2d distort_normalized(const Eigen::Vector2d& xn) const;
    // Fixed-point inverse of distort_normalized.
    Eigen::Vector2d undistort_normalized(const Eigen::Vector2d& xd, int iterations = 30) const;

    // Same mappings in pixel units.
    Eigen::Vector2d distort_pixel(const Eigen::Vector2d& px) const;
    Eigen::Vector2d undistort_pixel(const Eigen::Vector2d& px) const;
};

// Normalized camera coordinates -> distorted pixel coordinates.
Eigen::Vector2d distort_point(const Eigen::Vector2d& xn, const CameraIntrinsics& cam);

void validate(const CameraIntrinsics& cam);

CameraIntrinsics load_calibration(const std::string& path);
void save_calibration(const CameraIntrinsics& cam, const std::string& path);

struct UndistortResult {
    ImageBuffer image;
    BinaryMask valid;  // false where the source lookup fell outside the frame
};

// Inverse warp: each ideal output pixel samples the distorted input bilinearly.
UndistortResult undistort_image(const ImageBuffer& img, const CameraIntrinsics& cam);

// Forward lens model applied to an ideal image (used to synthesize raw frames).
UndistortResult distort_image(const ImageBuffer& ideal, const CameraIntrinsics& cam);

}  // namespace endomap
