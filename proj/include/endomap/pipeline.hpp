#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "endomap/calibration.hpp"
#include "endomap/evaluation.hpp"
#include "endomap/preprocess.hpp"
#include "endomap/sfs.hpp"
#include "endomap/stitcher.hpp"

namespace endomap {

constexpr int kConfigSchemaVersion = 1;
constexpr int kManifestSchemaVersion = 1;

// ---- configuration ----

struct PreprocessOptions {
    bool reflection = true;
    bool vignette = true;
    bool unsharp = true;
    bool undistort = true;
    ReflectionConfig detect;
    double inpaint_tol = 1e-5;
    int inpaint_iters = 5000;
    VignetteFitOptions vignette_fit;
    double unsharp_sigma = 1.5;
    double unsharp_amount = 0.5;
};

enum class LightSource { Dataset, Estimate, Fixed };

struct SfsStageOptions {
    SfsOptions solver;
    LightSource light_source = LightSource::Dataset;
    LightModel light;  // used by LightSource::Fixed
};

struct EvaluateOptions {
    std::vector<int> group_sizes{1, 50, 100};
    bool aligned = true;
    double rms_ceiling = 100.0;  // percent; any group above it fails the stage
    bool write_depth = false;
    bool write_ply = false;
};

struct PipelineConfig {
    int schema_version = kConfigSchemaVersion;
    std::string input_dir;
    std::string calibration;  // empty: <input_dir>/calibration.json
    std::string output_dir = "run";
    std::uint64_t seed = 0;
    int threads = 1;
    PreprocessOptions preprocess;
    StitchConfig stitch;
    SfsStageOptions sfs;
    EvaluateOptions evaluate;

    // Descriptor grid 0/0 means "by frame size"; candidates come from the
    // previous ten frames.
    PipelineConfig() {
        stitch.grid_step = 0;
        stitch.patch_size = 0;
        stitch.candidate_window = 10;
    }

    std::string calibration_path() const;
    // Ranges of every parameter; with check_paths, also that inputs exist.
    void validate(bool check_paths = true) const;
};

// Stitch parameters with the descriptor grid resolved: 8/16 for frames whose
// smaller side is at least 480 px, 4/12 below.
StitchConfig effective_stitch(const PipelineConfig& c, int frame_width, int frame_height);

nlohmann::json config_to_json(const PipelineConfig& c);
// Missing keys keep their defaults; unknown keys are rejected.
PipelineConfig config_from_json(const nlohmann::json& j);
PipelineConfig load_config(const std::string& path);
void save_config(const PipelineConfig& c, const std::string& path);

// ---- inputs ----

struct InputFrame {
    int id = 0;
    std::string path;
};

struct InputSet {
    std::vector<InputFrame> frames;
    bool has_truth = false;
    LightModel light;
    Eigen::Matrix3d canvas_K = Eigen::Matrix3d::Identity();
    std::vector<Eigen::Matrix3d> rotations;  // per frame, when has_truth
    std::string truth_depth;
    std::vector<std::string> specular_masks;
};

// A directory with dataset.json (synthetic fixture) or plain numbered images
// (.png/.pgm/.ppm), sorted by file name.
InputSet scan_inputs(const std::string& dir);

// ---- in-memory stages ----

struct PreprocessedFrame {
    ImageBuffer image;      // grey, corrected
    BinaryMask reflection;  // detected highlights, raw frame geometry
    BinaryMask valid;       // undistortion validity
    VignetteModel vignette;
    double asymmetry_before = 0.0;
    double asymmetry_after = 0.0;
};

// Reflection suppression, vignetting, unsharp masking, then undistortion.
PreprocessedFrame preprocess_frame(const ImageBuffer& raw, const CameraIntrinsics& cam, const PreprocessOptions& opt);

struct Reconstruction {
    StitchResult stitch;
    ImageBuffer canvas_gray;
    LightModel light;
    bool light_fallback = false;
    DepthMap depth;
    SfsReport sfs;
};

LightModel choose_light(const SfsStageOptions& opt, const InputSet& in, const ImageBuffer& gray,
                        const BinaryMask& coverage, bool* fallback = nullptr);

// Stitch + SfS over the given frames.
Reconstruction reconstruct(const std::vector<StitchFrame>& frames, const CameraIntrinsics& cam,
                           const PipelineConfig& cfg, const InputSet& in);

// Truth depth on the reconstruction's canvas grid (requires has_truth).
DepthMap reference_for(const Reconstruction& r, const CameraIntrinsics& cam, const InputSet& in,
                       const Raster& truth_depth);

// ---- manifest ----

struct ArtifactRecord {
    std::string path;  // relative to the output directory
    std::string sha256;
};

struct StageRecord {
    std::vector<std::string> inputs;
    std::vector<ArtifactRecord> outputs;
    nlohmann::json params;
    nlohmann::json info;
    std::vector<std::string> warnings;
    double seconds = 0.0;
};

struct RunManifest {
    int schema_version = kManifestSchemaVersion;
    std::map<std::string, StageRecord> stages;

    nlohmann::json to_json() const;
    static RunManifest from_json(const nlohmann::json& j);
    static RunManifest load(const std::string& path);
    void save(const std::string& path) const;

    // Every listed output exists under `root` and matches its hash; returns
    // the offending paths.
    std::vector<std::string> verify(const std::string& root) const;
    // SHA-256 over all output records (timings excluded).
    std::string digest() const;
};

std::string sha256_file(const std::string& path);
std::string sha256_bytes(const std::string& bytes);

// ---- stage runners ----

extern const std::vector<std::string> kStageNames;  // pipeline order

class StageError : public Error {
public:
    StageError(const std::string& stage, const std::string& msg) : Error(stage + ": " + msg), stage_(stage) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

struct StageOutcome {
    StageRecord record;
    std::optional<std::vector<EvalReport>> reports;  // evaluate only
    bool ceiling_exceeded = false;
};

// Runs one stage, merging its record into <output_dir>/manifest.json.
StageOutcome run_stage(const std::string& name, const PipelineConfig& cfg);

struct PipelineOutcome {
    RunManifest manifest;
    std::optional<std::vector<EvalReport>> reports;
    bool ceiling_exceeded = false;
};

// preprocess, features, stitch, sfs, then evaluate when truth is available.
PipelineOutcome run_pipeline(const PipelineConfig& cfg);

}  // namespace endomap
