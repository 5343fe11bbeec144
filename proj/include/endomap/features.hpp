#pragma once

#include <array>
#include <string>
#include <vector>

#include "endomap/geometry.hpp"
#include "endomap/image.hpp"

namespace endomap {

constexpr int kDescriptorDims = 64;
using Descriptor = std::array<float, kDescriptorDims>;

struct DenseDescriptorSet {
    int width = 0;
    int height = 0;
    int grid_step = 0;
    int patch_size = 0;
    std::vector<Point2> points;
    std::vector<Descriptor> descriptors;
    std::vector<std::uint8_t> usable;  // 0 for zero-response patches

    std::size_t size() const { return points.size(); }
    std::size_t usable_count() const;
};

// Upright SURF-like descriptor on a regular grid. Points sit
// patch_size/2 + max(1, patch_size/8) from every border, so the Haar boxes stay
// inside the image. Optional `valid` mask drops points whose
// patch touches an invalid pixel.
DenseDescriptorSet extract_dense(const ImageBuffer& gray, int grid_step, int patch_size,
                                 const BinaryMask* valid = nullptr);

struct Match {
    int a = 0;
    int b = 0;
    double distance = 0.0;
};

struct MatchSet {
    std::vector<Match> pairs;
    int source_width = 0;
    int source_height = 0;
    int target_width = 0;
    int target_height = 0;
};

// Nearest/second-nearest ratio test plus mutual consistency.
MatchSet match(const DenseDescriptorSet& a, const DenseDescriptorSet& b, double ratio = 0.75);

struct ReprojectionErrors {
    std::vector<double> per_match;  // NaN where the point maps to infinity
    double mean = 0.0;
    std::size_t flagged = 0;
};

ReprojectionErrors reprojection_error(const MatchSet& matches, const std::vector<Point2>& pts_a,
                                      const std::vector<Point2>& pts_b, const Homography33& h);

// Binary records, little-endian: magic, version, count, dims, then payload.
void write_descriptors(const DenseDescriptorSet& set, const std::string& path);
DenseDescriptorSet read_descriptors(const std::string& path);
void write_matches(const MatchSet& m, const std::string& path);
MatchSet read_matches(const std::string& path);

}  // namespace endomap
