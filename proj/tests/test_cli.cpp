#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "endomap/io.hpp"
#include "endomap/pipeline.hpp"
#include "endomap/synthkit.hpp"
#include "support.hpp"

using namespace endomap;
using testutil::TempDir;
namespace fs = std::filesystem;

namespace {

// Small synthetic dataset written once per process.
const std::string& small_dataset(const std::string& name, int frames) {
    static std::map<std::string, std::string> dirs;
    static TempDir root("cli_data");
    const std::string key = name + std::to_string(frames);
    auto it = dirs.find(key);
    if (it != dirs.end()) return it->second;
    DatasetConfig c = DatasetConfig::named(name, 1);
    c.frames = frames;
    const std::string dir = root.file(key);
    write_dataset(make_dataset(c), dir);
    return dirs[key] = dir;
}

PipelineConfig config_for(const std::string& input, const std::string& out) {
    PipelineConfig c;
    c.input_dir = input;
    c.output_dir = out;
    c.sfs.solver.iterations = 60;
    c.evaluate.group_sizes = {1, 3};
    return c;
}

std::set<std::string> files_under(const std::string& root) {
    std::set<std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out.insert(fs::relative(e.path(), root).generic_string());
    return out;
}

}  // namespace

// ---- configuration ----

TEST_CASE("config JSON round trip keeps every field") {
    PipelineConfig c;
    c.input_dir = "in";
    c.seed = 42;
    c.threads = 3;
    c.preprocess.vignette = false;
    c.preprocess.detect.dilate_radius = 1;
    c.stitch.grid_step = 8;
    c.stitch.patch_size = 16;
    c.stitch.bands = 3;
    c.sfs.solver.solver = SfsSolver::Jacobi;
    c.sfs.light_source = LightSource::Fixed;
    c.sfs.light = {0.2, -1.0, 0.7};
    c.evaluate.group_sizes = {2, 5};
    c.evaluate.aligned = false;
    const nlohmann::json j = config_to_json(c);
    CHECK(j["schema_version"] == kConfigSchemaVersion);
    const PipelineConfig back = config_from_json(j);
    CHECK(config_to_json(back) == j);
    CHECK(back.stitch.seed == 42u);
    CHECK(back.sfs.solver.solver == SfsSolver::Jacobi);
    CHECK(back.evaluate.group_sizes == std::vector<int>{2, 5});

    TempDir dir("cfg");
    save_config(c, dir.file("c.json"));
    CHECK(config_to_json(load_config(dir.file("c.json"))) == j);
}

TEST_CASE("config parsing: defaults, unknown keys and bad values") {
    const PipelineConfig d = config_from_json(nlohmann::json::object());
    CHECK(d.preprocess.reflection);
    CHECK(d.preprocess.detect.dilate_radius == 2);
    CHECK(d.sfs.solver.iterations == 200);
    CHECK(d.stitch.grid_step == 0);
    CHECK(d.evaluate.group_sizes == std::vector<int>{1, 50, 100});

    const PipelineConfig partial = config_from_json({{"stitch", {{"bands", 2}}}});
    CHECK(partial.stitch.bands == 2);
    CHECK(partial.stitch.ransac_iters == d.stitch.ransac_iters);

    CHECK_THROWS_AS(config_from_json({{"colour", 1}}), FormatError);
    CHECK_THROWS_AS(config_from_json({{"stitch", {{"band", 2}}}}), FormatError);
    CHECK_THROWS_AS(config_from_json({{"schema_version", 2}}), FormatError);
    CHECK_THROWS_AS(config_from_json({{"seed", "x"}}), FormatError);
    CHECK_THROWS_AS(config_from_json({{"sfs", {{"solver", "gauss"}}}}), FormatError);
    CHECK_THROWS_AS(config_from_json({{"sfs", {{"light", "sun"}}}}), FormatError);

    TempDir dir("cfg2");
    std::ofstream(dir.file("bad.json")) << "{\"seed\": ";
    CHECK_THROWS_AS(load_config(dir.file("bad.json")), FormatError);
    CHECK_THROWS_AS(load_config(dir.file("none.json")), IoError);
}

TEST_CASE("config validation ranges and paths") {
    PipelineConfig c;
    CHECK_NOTHROW(c.validate(false));
    CHECK_THROWS(c.validate(true));  // no input directory
    auto invalid = [](auto mutate) {
        PipelineConfig c;
        mutate(c);
        CHECK_THROWS(c.validate(false));
    };
    invalid([](PipelineConfig& c) { c.threads = 0; });
    invalid([](PipelineConfig& c) { c.preprocess.detect.percentile = 100.0; });
    invalid([](PipelineConfig& c) { c.stitch.grid_step = 4; });  // patch size left on auto
    invalid([](PipelineConfig& c) { c.stitch.grid_step = 4, c.stitch.patch_size = 10; });
    invalid([](PipelineConfig& c) { c.stitch.min_inliers = 3; });
    invalid([](PipelineConfig& c) { c.sfs.solver.iterations = 0; });
    invalid([](PipelineConfig& c) { c.sfs.light_source = LightSource::Fixed, c.sfs.light.albedo = 2.0; });
    invalid([](PipelineConfig& c) { c.evaluate.group_sizes = {}; });

    TempDir dir("cfg3");
    c.input_dir = dir.path();
    CHECK_THROWS(c.validate(true));  // calibration.json missing
    std::ofstream(dir.file("calibration.json")) << "{}";
    CHECK_NOTHROW(c.validate(true));
}

TEST_CASE("effective_stitch resolves the descriptor grid by frame size") {
    PipelineConfig c;
    c.seed = 9;
    const StitchConfig small = effective_stitch(c, 128, 96);
    CHECK(small.grid_step == 4);
    CHECK(small.patch_size == 12);
    CHECK(small.seed == 9u);
    const StitchConfig large = effective_stitch(c, 640, 480);
    CHECK(large.grid_step == 8);
    CHECK(large.patch_size == 16);
    c.stitch.grid_step = 6;
    c.stitch.patch_size = 20;
    CHECK(effective_stitch(c, 640, 480).grid_step == 6);
}

// ---- inputs and manifests ----

TEST_CASE("scan_inputs: plain directories and datasets") {
    TempDir dir("scan");
    fs::create_directories(dir.file("plain"));
    save_image(ImageBuffer(4, 4, 1), dir.file("plain/b.png"));
    save_image(ImageBuffer(4, 4, 1), dir.file("plain/a.pgm"));
    save_image(ImageBuffer(4, 4, 3), dir.file("plain/c.ppm"));
    std::ofstream(dir.file("plain/notes.txt")) << "x";
    const InputSet plain = scan_inputs(dir.file("plain"));
    REQUIRE(plain.frames.size() == 3u);
    CHECK(fs::path(plain.frames[0].path).filename() == "a.pgm");
    CHECK(plain.frames[2].id == 2);
    CHECK_FALSE(plain.has_truth);

    fs::create_directories(dir.file("empty"));
    CHECK_THROWS(scan_inputs(dir.file("empty")));
    CHECK_THROWS_AS(scan_inputs(dir.file("absent")), IoError);

    const InputSet ds = scan_inputs(small_dataset("standard", 6));
    CHECK(ds.frames.size() == 6u);
    CHECK(ds.has_truth);
    CHECK(ds.rotations.size() == 6u);
    CHECK(ds.light.slant == doctest::Approx(0.8));
}

TEST_CASE("sha256 known vectors") {
    CHECK(sha256_bytes("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(sha256_bytes("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    TempDir dir("sha");
    std::ofstream(dir.file("f"), std::ios::binary) << "abc";
    CHECK(sha256_file(dir.file("f")) == sha256_bytes("abc"));
}

TEST_CASE("RunManifest round trip, verification and digest") {
    TempDir dir("manifest");
    std::ofstream(dir.file("a.txt")) << "alpha";
    RunManifest m;
    StageRecord& s = m.stages["preprocess"];
    s.outputs.push_back({"a.txt", sha256_file(dir.file("a.txt"))});
    s.params = {{"k", 1}};
    s.warnings.push_back("w");
    s.seconds = 1.5;
    m.save(dir.file("manifest.json"));
    const RunManifest back = RunManifest::load(dir.file("manifest.json"));
    CHECK(back.to_json() == m.to_json());
    CHECK(back.verify(dir.path()).empty());

    RunManifest slower = back;
    slower.stages["preprocess"].seconds = 99.0;
    CHECK(slower.digest() == m.digest());

    std::ofstream(dir.file("a.txt")) << "beta";
    CHECK(back.verify(dir.path()) == std::vector<std::string>{"a.txt"});
    fs::remove(dir.file("a.txt"));
    CHECK(back.verify(dir.path()) == std::vector<std::string>{"a.txt"});

    CHECK_THROWS_AS(RunManifest::from_json({{"schema_version", 7}, {"stages", nlohmann::json::object()}}), FormatError);
}

// ---- stages ----

TEST_CASE("run_stage: dependencies are checked") {
    TempDir out("stage_dep");
    const PipelineConfig c = config_for(small_dataset("standard", 6), out.path());
    try {
        run_stage("stitch", c);
        FAIL("stitch ran without preprocess");
    } catch (const StageError& e) {
        CHECK(e.stage() == "stitch");
        CHECK(std::string(e.what()).find("manifest") != std::string::npos);
        CHECK(std::string(e.what()).find("preprocess") != std::string::npos);
    }
    CHECK_THROWS_AS(run_stage("warp", c), Error);
}

TEST_CASE("run_stage: preprocess writes masks, listed in the manifest, and is idempotent") {
    TempDir out("stage_pre");
    const PipelineConfig c = config_for(small_dataset("specular", 3), out.path());
    const StageOutcome first = run_stage("preprocess", c);
    const RunManifest m1 = RunManifest::load(out.file("manifest.json"));
    std::set<std::string> listed;
    for (const auto& a : m1.stages.at("preprocess").outputs) listed.insert(a.path);
    for (int k = 0; k < 3; ++k) {
        const std::string mask = "preprocess/reflection_000" + std::to_string(k) + ".pgm";
        CHECK(fs::exists(out.file(mask)));
        CHECK(listed.count(mask) == 1u);
        CHECK(load_mask(out.file(mask)).count() > 0u);
    }
    CHECK(m1.verify(out.path()).empty());

    const StageOutcome second = run_stage("preprocess", c);
    REQUIRE(second.record.outputs.size() == first.record.outputs.size());
    for (std::size_t i = 0; i < first.record.outputs.size(); ++i)
        CHECK(second.record.outputs[i].sha256 == first.record.outputs[i].sha256);

    // Tampering with an artifact is caught by the next stage.
    std::ofstream(out.file("preprocess/frame_0001.png"), std::ios::app) << "x";
    CHECK_THROWS_AS(run_stage("features", c), StageError);
}

TEST_CASE("run_pipeline: empty input fails before any stage runs") {
    TempDir in("empty_in"), out("empty_out");
    std::ofstream(in.file("calibration.json")) << R"({"image_width": 8, "image_height": 8, "fx": 5, "fy": 5, "cx": 3.5, "cy": 3.5})";
    PipelineConfig c = config_for(in.path(), out.file("run"));
    CHECK_THROWS(run_pipeline(c));
    CHECK_FALSE(fs::exists(out.file("run/manifest.json")));
}

TEST_CASE("run_pipeline: small standard dataset end to end, deterministic, complete manifest") {
    TempDir a("pipe_a"), b("pipe_b");
    PipelineConfig ca = config_for(small_dataset("standard", 6), a.path());
    PipelineConfig cb = config_for(small_dataset("standard", 6), b.path());
    cb.threads = 2;
    const PipelineOutcome ra = run_pipeline(ca);
    const PipelineOutcome rb = run_pipeline(cb);
    REQUIRE(ra.reports);
    REQUIRE(ra.reports->size() == 2u);
    CHECK((*ra.reports)[0].group_size == 1);
    CHECK((*ra.reports)[0].groups.size() == 6u);
    CHECK((*ra.reports)[1].groups.size() == 2u);
    for (const auto& r : *ra.reports) {
        CHECK(r.evaluated >= 1);
        CHECK(r.stddev >= 0.0);
        CHECK(r.mean < 25.0);
    }
    CHECK_FALSE(ra.ceiling_exceeded);

    CHECK(ra.manifest.digest() == rb.manifest.digest());
    CHECK(ra.manifest.verify(a.path()).empty());
    for (const char* s : {"preprocess", "features", "stitch", "sfs", "evaluate"}) CHECK(ra.manifest.stages.count(s) == 1u);

    std::set<std::string> listed;
    for (const auto& [name, rec] : ra.manifest.stages)
        for (const auto& o : rec.outputs) listed.insert(o.path);
    std::set<std::string> present = files_under(a.path());
    present.erase("manifest.json");
    CHECK(present == listed);
}

TEST_CASE("run_pipeline: a low RMS ceiling is reported") {
    TempDir out("pipe_ceiling");
    PipelineConfig c = config_for(small_dataset("standard", 6), out.path());
    c.evaluate.group_sizes = {3};
    c.evaluate.rms_ceiling = 1e-6;
    const PipelineOutcome r = run_pipeline(c);
    CHECK(r.ceiling_exceeded);
}

TEST_CASE("run_pipeline: disabling reflection suppression on the specular fixture raises the error") {
    TempDir on("abl_on"), off("abl_off");
    PipelineConfig c_on = config_for(small_dataset("specular", 12), on.path());
    c_on.evaluate.group_sizes = {12};
    PipelineConfig c_off = c_on;
    c_off.output_dir = off.path();
    c_off.preprocess.reflection = false;
    const PipelineOutcome r_on = run_pipeline(c_on), r_off = run_pipeline(c_off);
    REQUIRE(r_on.reports);
    REQUIRE(r_off.reports);
    const double e_on = (*r_on.reports)[0].mean, e_off = (*r_off.reports)[0].mean;
    CAPTURE(e_on);
    CAPTURE(e_off);
    CHECK(e_off > e_on);
}
