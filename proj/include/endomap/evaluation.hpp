#pragma once

#include <functional>
#include <string>
#include <vector>

#include "endomap/sfs.hpp"

namespace endomap {

struct RmsResult {
    double rms = 0.0;          // aligned
    double percent = 0.0;      // aligned, percent of reference range
    double raw_rms = 0.0;      // no shift, no scale
    double raw_percent = 0.0;
    double scale = 1.0;        // least-squares scale applied to the centred depth
    double offset = 0.0;       // ref ~ scale * z + offset
    double ref_range = 0.0;
    std::size_t count = 0;     // jointly valid pixels
};

// Squared-difference RMS over jointly valid pixels, with and without the
// mean-shift plus least-squares scale alignment.
RmsResult rms_error(const DepthMap& z, const DepthMap& ref);

// Value selected by the alignment switch.
inline double selected_percent(const RmsResult& r, bool aligned) { return aligned ? r.percent : r.raw_percent; }

struct GroupOutcome {
    DepthMap depth;
    DepthMap reference;
    double coverage = 1.0;  // fraction of the canvas with reference depth
};

struct GroupResult {
    int index = 0;
    int first_frame = 0;
    int frame_count = 0;
    bool skipped = false;
    std::string reason;
    double coverage = 0.0;
    RmsResult rms;
};

struct EvalReport {
    int group_size = 0;
    bool aligned = true;
    std::vector<GroupResult> groups;
    double mean = 0.0;        // percent, over evaluated groups
    double stddev = 0.0;      // population
    double raw_mean = 0.0;
    double raw_stddev = 0.0;
    int evaluated = 0;
};

using GroupRunner = std::function<GroupOutcome(int first_frame, int frame_count)>;

// Consecutive non-overlapping groups; a trailing partial group is dropped.
// Groups whose reference covers less than 10% of the canvas are skipped.
EvalReport evaluate_groups(int total_frames, int group_size, const GroupRunner& run, bool aligned = true);

// Mean and population standard deviation.
void mean_stddev(const std::vector<double>& v, double& mean, double& stddev);

void export_ply(const std::vector<Point3>& cloud, const std::string& path);
std::vector<Point3> read_ply(const std::string& path);

}  // namespace endomap
