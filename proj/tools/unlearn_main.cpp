#include "unlearn/pipeline.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using namespace unlearn;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitStage = 1;
constexpr int kExitConfig = 2;

struct Options {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::string stage;
    bool resume = false;
    bool quiet = false;
};

// --config wins; otherwise --resume (or a bare --out) picks up the effective
// config a previous run wrote into the output directory.
pipeline::ExperimentConfig resolve_config(const Options& o) {
    pipeline::ExperimentConfig cfg;
    if (!o.config.empty()) {
        cfg = pipeline::load_config(o.config);
    } else if (!o.out.empty() && fs::exists(fs::path(o.out) / "config.json")) {
        cfg = pipeline::load_config(fs::path(o.out) / "config.json");
    } else if (o.resume) {
        throw pipeline::ConfigError("--resume needs --out pointing at a directory with config.json");
    } else {
        throw pipeline::ConfigError("no config: pass --config PATH, or --out DIR of an existing run");
    }
    if (!o.out.empty()) cfg.output_dir = o.out;
    if (o.seed) cfg.seed = *o.seed;
    return cfg;
}

void add_common(CLI::App* cmd, Options& o) {
    cmd->add_option("--config", o.config, "Experiment config (JSON)");
    cmd->add_option("--out", o.out, "Output directory (overrides output_dir)");
    cmd->add_option("--seed", o.seed, "Global seed (overrides seed)");
    cmd->add_flag("--resume", o.resume, "Reuse the config stored in the output directory");
    cmd->add_flag("-q,--quiet", o.quiet, "Only log warnings and errors");
}

int execute(const std::string& command, const Options& o) {
    const pipeline::ExperimentConfig cfg = resolve_config(o);
    pipeline::Runner runner(cfg, cfg.output_dir);
    if (command == "run") {
        runner.run_all(o.stage.empty() ? std::nullopt : std::optional<std::string>(o.stage));
        if (o.stage.empty() || o.stage == "evaluate") std::fputs(eval::metrics_text(runner.report()).c_str(), stdout);
    } else if (command == "sweep") {
        const auto reports = runner.sweep();
        std::printf("%zu runs written to %s\n", reports.size(), (runner.out() / "sweep/sweep.csv").c_str());
    } else if (command == "ablate") {
        const auto reports = runner.ablate();
        std::printf("%zu runs written to %s\n", reports.size(), (runner.out() / "ablate/summary.csv").c_str());
    } else {
        runner.run_stage(command);
        if (command == "evaluate") std::fputs(eval::metrics_text(runner.report()).c_str(), stdout);
    }
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Few-shot machine unlearning by model inversion"};
    app.require_subcommand(1);
    Options o;

    CLI::App* run = app.add_subcommand("run", "train, invert, filter, unlearn and evaluate in order");
    add_common(run, o);
    run->add_option("--stage", o.stage, "Stop after this stage")
        ->check(CLI::IsMember(pipeline::stage_names()));

    const std::pair<const char*, const char*> single[] = {
        {"train", "Build the scenario, train the classifier and the oracle"},
        {"invert", "Train the conditional generator against the classifier"},
        {"filter", "Generate candidates, score them and build the unlearning set"},
        {"unlearn", "Relearn the classifier on the unlearning set"},
        {"evaluate", "Write report.json for the main run"},
        {"sweep", "Filter, unlearn and evaluate for each (rho, seed) of the sweep"},
        {"ablate", "Generator loss and filtration metric variants"},
    };
    for (const auto& [name, help] : single) add_common(app.add_subcommand(name, help), o);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitConfig;
    }
    const std::string command = app.get_subcommands().front()->get_name();
    spdlog::set_pattern("%H:%M:%S %^%l%$ %v");
    spdlog::set_level(o.quiet ? spdlog::level::warn : spdlog::level::info);

    try {
        return execute(command, o);
    } catch (const pipeline::ConfigError& e) {
        if (e.line() > 0)
            std::fprintf(stderr, "config error (line %d%s): %s\n", e.line(), e.column() > 0 ? fmt::format(", column {}", e.column()).c_str() : "",
                         e.what());
        else
            std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const pipeline::MissingArtifact& e) {
        std::fprintf(stderr, "error: %s (run the earlier stages first)\n", e.what());
        return kExitStage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitStage;
    }
}
