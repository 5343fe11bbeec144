#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>

#include "endomap/parallel.hpp"
#include "endomap/pipeline.hpp"
#include "endomap/synthkit.hpp"

using namespace endomap;

namespace {

struct Globals {
    std::string config;
    std::string out;
    std::string input;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    bool no_reflection = false;
    bool no_vignette = false;
    bool no_unsharp = false;
};

PipelineConfig resolve(const Globals& g) {
    PipelineConfig cfg = g.config.empty() ? PipelineConfig{} : load_config(g.config);
    if (!g.input.empty()) cfg.input_dir = g.input;
    if (!g.out.empty()) cfg.output_dir = g.out;
    if (g.seed) cfg.seed = *g.seed;
    if (g.threads) cfg.threads = *g.threads;
    if (g.no_reflection) cfg.preprocess.reflection = false;
    if (g.no_vignette) cfg.preprocess.vignette = false;
    if (g.no_unsharp) cfg.preprocess.unsharp = false;
    cfg.stitch.seed = cfg.seed;
    return cfg;
}

void print_reports(const std::vector<EvalReport>& reports) {
    for (const auto& r : reports)
        std::cout << "group size " << r.group_size << ": mean " << r.mean << "% std " << r.stddev << "% over "
                  << r.evaluated << " group(s)\n";
}

void print_warnings(const StageRecord& rec, const std::string& stage) {
    for (const auto& w : rec.warnings) std::cerr << "warning [" << stage << "]: " << w << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Endoscopic surface reconstruction: preprocessing, stitching, shape from shading, evaluation"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--config", g.config, "Pipeline configuration (JSON)")->check(CLI::ExistingFile);
    app.add_option("--out", g.out, "Output directory");
    app.add_option("--input", g.input, "Input directory (overrides the config)");
    app.add_option("--seed", g.seed, "Random seed");
    app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);
    app.add_flag("--no-reflection", g.no_reflection, "Disable reflection suppression");
    app.add_flag("--no-vignette", g.no_vignette, "Disable vignetting correction");
    app.add_flag("--no-unsharp", g.no_unsharp, "Disable unsharp masking");

    std::string synth_name = "standard";
    std::optional<int> synth_frames;
    auto* synth = app.add_subcommand("synth", "Write a synthetic dataset to --out");
    synth->add_option("--name", synth_name, "standard, corrupted or specular")
        ->check(CLI::IsMember({"standard", "corrupted", "specular"}));
    synth->add_option("--frames", synth_frames, "Override the frame count")->check(CLI::PositiveNumber);

    std::string dump_path;
    auto* dump = app.add_subcommand("config", "Write the resolved configuration");
    dump->add_option("path", dump_path, "Destination file")->required();

    for (const auto& s : kStageNames) app.add_subcommand(s, "Run the '" + s + "' stage");
    app.add_subcommand("pipeline", "Run every stage in order");

    CLI11_PARSE(app, argc, argv);

    try {
        const PipelineConfig cfg = resolve(g);
        if (synth->parsed()) {
            if (g.out.empty()) throw Error("synth needs --out");
            DatasetConfig dc = DatasetConfig::named(synth_name, cfg.seed);
            if (synth_frames) dc.frames = *synth_frames;
            set_thread_count(cfg.threads);
            write_dataset(make_dataset(dc), g.out);
            std::cout << "wrote " << dc.frames << " frames to " << g.out << "\n";
            return 0;
        }
        if (dump->parsed()) {
            cfg.validate(false);
            save_config(cfg, dump_path);
            return 0;
        }
        if (app.got_subcommand("pipeline")) {
            const PipelineOutcome out = run_pipeline(cfg);
            for (const auto& [name, rec] : out.manifest.stages) print_warnings(rec, name);
            if (out.reports) print_reports(*out.reports);
            std::cout << "manifest digest " << out.manifest.digest() << "\n";
            return out.ceiling_exceeded ? 2 : 0;
        }
        for (const auto& s : kStageNames) {
            if (!app.got_subcommand(s)) continue;
            const StageOutcome out = run_stage(s, cfg);
            print_warnings(out.record, s);
            if (out.reports) print_reports(*out.reports);
            std::cout << s << ": " << out.record.outputs.size() << " artifact(s) in " << out.record.seconds << " s\n";
            return out.ceiling_exceeded ? 2 : 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
