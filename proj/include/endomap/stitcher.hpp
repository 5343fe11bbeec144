#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "endomap/calibration.hpp"
#include "endomap/features.hpp"
#include "endomap/geometry.hpp"
#include "endomap/image.hpp"

namespace endomap {

// ---- homography estimation ----

// Hartley-normalised DLT; least squares when more than 4 pairs are given.
Homography33 homography_dlt(const std::vector<Point2>& a, const std::vector<Point2>& b);

// sqrt of the mean of the forward and backward squared transfer distances.
double symmetric_transfer_error(const Eigen::Matrix3d& h, const Eigen::Matrix3d& h_inv, const Point2& a,
                                const Point2& b);

struct RansacResult {
    Homography33 h;
    std::vector<int> inliers;
    int best_sample_inliers = 0;
};

RansacResult estimate_homography_ransac(const std::vector<Point2>& a, const std::vector<Point2>& b, int iters,
                                        double inlier_px, std::uint64_t seed);

// ---- poses ----

struct CameraPose {
    Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
    Eigen::Vector3d t = Eigen::Vector3d::Zero();
};

Eigen::Matrix3d rotation_from_axis_angle(const Eigen::Vector3d& w);
Eigen::Matrix3d orthonormalize(const Eigen::Matrix3d& m);
double rotation_angle(const Eigen::Matrix3d& R);

CameraPose pose_from_homography(const Homography33& h, const CameraIntrinsics& cam);

// Plane-induced homography of a pose relative to the anchor view, plane z = 1
// in anchor coordinates: K (R + t n^T) K^-1 with n = (0,0,1).
Eigen::Matrix3d pose_homography(const CameraPose& pose, const Eigen::Matrix3d& K);

// ---- bundle adjustment ----

struct BAEdge {
    int i = 0;  // pose index of the source frame
    int j = 0;  // pose index of the target frame
    std::vector<Point2> pa;
    std::vector<Point2> pb;
};

struct BAOptions {
    double lambda0 = 1e-3;
    int max_iters = 100;
    double rel_tol = 1e-8;
    double grad_tol = 1e-10;
    double lambda_max = 1e10;
};

struct BAReport {
    int iterations = 0;
    double initial_cost = 0.0;
    double final_cost = 0.0;
    std::vector<double> cost_history;  // cost after every accepted step, initial first
    bool aborted = false;
    std::string stop_reason;
};

// Sum over edges and points of squared forward + backward transfer errors.
double ba_cost(const std::vector<BAEdge>& edges, const Eigen::Matrix3d& K, const std::vector<CameraPose>& poses);

// Gradient of ba_cost with respect to the local parameters (axis-angle
// increment, translation) of every non-anchor pose, 6 entries per pose.
Eigen::VectorXd ba_gradient(const std::vector<BAEdge>& edges, const Eigen::Matrix3d& K,
                            const std::vector<CameraPose>& poses, int anchor);

BAReport bundle_adjust(const std::vector<BAEdge>& edges, const Eigen::Matrix3d& K, std::vector<CameraPose>& poses,
                       int anchor, const BAOptions& opt = {});

// ---- blending ----

struct BlendFrame {
    const ImageBuffer* image = nullptr;  // 1 or 3 channels
    const BinaryMask* valid = nullptr;   // optional
    Homography33 warp;                   // frame pixel -> canvas pixel
};

struct BlendResult {
    ImageBuffer canvas;
    BinaryMask coverage;
    std::vector<Raster> weights;  // level-0 normalised weights, when requested
};

BlendResult multiband_blend(const std::vector<BlendFrame>& frames, int canvas_width, int canvas_height, int bands,
                            bool keep_weights = false);

// ---- orchestration ----

// Top-m pool frames by match count; ties go to the lower frame id.
std::vector<int> select_candidates(int current, const std::vector<int>& pool, const std::vector<int>& counts, int m);

struct StitchConfig {
    int grid_step = 8;
    int patch_size = 16;
    double ratio = 0.75;
    int candidates = 5;        // m
    int candidate_window = 0;  // previous frames considered, 0 = all
    int min_inliers = 20;
    int ransac_iters = 1000;
    double inlier_px = 2.0;
    std::uint64_t seed = 0;
    int bands = 4;
    int canvas_cap = 8192;
    int ba_points_per_edge = 200;
    BAOptions ba;
};

struct StitchFrame {
    int id = 0;
    ImageBuffer image;
    BinaryMask valid;  // may be empty (all valid)
};

struct StitchEdge {
    int from = 0;  // frame ids
    int to = 0;
    int raw_matches = 0;
    int inliers = 0;
    Homography33 h;  // from -> to
};

struct StitchReport {
    std::vector<StitchEdge> edges;
    std::vector<std::vector<int>> components;  // frame ids
    int anchor = -1;
    BAReport ba;
    std::vector<std::string> warnings;
};

struct StitchResult {
    ImageBuffer canvas;
    BinaryMask coverage;
    std::vector<int> frame_ids;       // frames rendered into the canvas
    std::vector<Homography33> warps;  // per rendered frame, frame pixel -> canvas pixel
    std::vector<CameraPose> poses;    // per rendered frame, relative to the anchor
    Point2 origin_offset{0.0, 0.0};   // anchor pixel (0,0) lands here before scaling
    double scale = 1.0;
    StitchReport report;
};

StitchResult stitch(const std::vector<StitchFrame>& frames, const CameraIntrinsics& cam, const StitchConfig& cfg);

}  // namespace endomap
