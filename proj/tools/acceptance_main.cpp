// Runs the acceptance scenarios end to end and prints one PASS/FAIL line per
// criterion. Tolerances are fixed below; nothing is read from the configs
// except the scenarios themselves.
#include "unlearn/eval.hpp"
#include "unlearn/pipeline.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <sys/wait.h>

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace unlearn;

namespace {

// Moons.
constexpr double kMoonsKlOracleMax = 0.05;
constexpr double kMoonsKlOriginalMin = 0.15;
// Class removal.
constexpr double kRemovalTargetAccMax = 5.0;
constexpr double kRetainDropMax = 3.0;
// Mislabel correction.
constexpr double kMislabelOracleShare = 0.85;
// Generator without the BN loss.
constexpr double kNoBnGapMin = 40.0;
constexpr std::array kTEnts{0.282, 0.5, 0.867};

struct Verdict {
    bool pass = false;
    std::string detail;
};

struct Context {
    fs::path configs;
    fs::path work;
    fs::path tests;
};

pipeline::ExperimentConfig load(const Context& ctx, const std::string& name, const std::string& out) {
    pipeline::ExperimentConfig c = pipeline::load_config(ctx.configs / name);
    c.output_dir = (ctx.work / out).string();
    return c;
}

Verdict moons(const Context& ctx) {
    pipeline::Runner r(load(ctx, "moons.json", "moons"), ctx.work / "moons");
    r.run_all();
    const eval::UnlearnReport rep = r.report();
    return {rep.kl_vs_oracle <= kMoonsKlOracleMax && rep.kl_vs_original >= kMoonsKlOriginalMin,
            fmt::format("kl_vs_oracle {:.4f} (<= {}), kl_vs_original {:.4f} (>= {}), D_e {:.1f}% vs oracle {:.1f}%",
                        rep.kl_vs_oracle, kMoonsKlOracleMax, rep.kl_vs_original, kMoonsKlOriginalMin,
                        rep.unlearned.target, rep.oracle.target)};
}

Verdict removal(const Context& ctx) {
    pipeline::Runner r(load(ctx, "digits_remove_9.json", "digits_remove_9"), ctx.work / "digits_remove_9");
    r.run_all();
    const auto reports = r.sweep();
    std::vector<real> de, dr;
    for (const auto& rep : reports) {
        de.push_back(rep.unlearned.target);
        dr.push_back(rep.unlearned.retain);
    }
    const eval::MeanStd e = eval::mean_std(de), k = eval::mean_std(dr);
    const double original = reports.front().original.retain;
    const bool pass = e.mean <= kRemovalTargetAccMax && std::abs(k.mean - original) <= kRetainDropMax;
    return {pass, fmt::format("{} seeds: D_e {:.2f} +- {:.2f}% (<= {}), D_r {:.2f} +- {:.2f}% vs original {:.2f}% (within {})",
                              reports.size(), e.mean, e.std, kRemovalTargetAccMax, k.mean, k.std, original, kRetainDropMax)};
}

Verdict mislabel(const Context& ctx) {
    pipeline::Runner r(load(ctx, "digits_mislabel_7.json", "digits_mislabel_7"), ctx.work / "digits_mislabel_7");
    r.run_all();
    const eval::UnlearnReport rep = r.report();
    const bool pass = rep.unlearned.target >= kMislabelOracleShare * rep.oracle.target &&
                      std::abs(rep.unlearned.retain - rep.oracle.retain) <= kRetainDropMax;
    return {pass, fmt::format("corrupted-class accuracy {:.2f}% vs oracle {:.2f}% (>= {:.0f}% of it; original {:.2f}%), "
                              "D_r {:.2f}% vs oracle {:.2f}% (within {})",
                              rep.unlearned.target, rep.oracle.target, 100 * kMislabelOracleShare, rep.original.target,
                              rep.unlearned.retain, rep.oracle.retain, kRetainDropMax)};
}

// Ablation variants of the class-removal scenario, keyed by variant name.
std::map<std::string, eval::UnlearnReport> ablation(const Context& ctx) {
    pipeline::Runner r(load(ctx, "digits_remove_9.json", "digits_remove_9"), ctx.work / "digits_remove_9");
    r.run_stage("train");
    r.run_stage("invert");
    std::map<std::string, eval::UnlearnReport> out;
    for (const auto& rep : r.ablate())
        if (rep.seeds.at("run") == 0) out[rep.variant] = rep;
    return out;
}

Verdict no_bn(const Context& ctx) {
    const auto a = ablation(ctx);
    if (!a.count("full") || !a.count("no-bn")) return {false, "ablation.losses in the config must include \"bn\""};
    const double full = a.at("full").unlearned.target, ablated = a.at("no-bn").unlearned.target;
    return {ablated - full >= kNoBnGapMin,
            fmt::format("D_e without l_bn {:.2f}% vs full {:.2f}% (gap {:.2f} >= {})", ablated, full, ablated - full, kNoBnGapMin)};
}

Verdict t_ent(const Context& ctx) {
    const auto a = ablation(ctx);
    Verdict v{true, ""};
    for (double t : kTEnts) {
        const std::string name = t == 0.5 ? "full" : fmt::format("t_ent-{:g}", t);
        if (!a.count(name)) return {false, "ablation.t_ents in the config must include " + fmt::format("{:g}", t)};
        const eval::UnlearnReport& rep = a.at(name);
        const bool ok = std::abs(rep.unlearned.retain - rep.original.retain) <= kRetainDropMax;
        v.pass = v.pass && ok;
        v.detail += fmt::format("{}t_ent {:g}: D_r {:.2f}% vs {:.2f}% {}", v.detail.empty() ? "" : ", ", t,
                                rep.unlearned.retain, rep.original.retain, ok ? "ok" : "out");
    }
    v.detail += fmt::format(" (within {})", kRetainDropMax);
    return v;
}

int run_binary(const fs::path& exe, const std::string& args) {
    const std::string cmd = exe.string() + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Verdict properties(const Context& ctx) {
    Verdict v{true, ""};
    const std::vector<std::pair<std::string, std::string>> suites{
        {"losses", "inversion_test"},
        {"knee", "filtration_test --gtest_filter=Knee.*"},
        {"filtration", "filtration_test --gtest_filter=-Knee.*"},
    };
    for (const auto& [label, invocation] : suites) {
        const std::string exe = invocation.substr(0, invocation.find(' '));
        const std::string args = invocation.size() > exe.size() ? invocation.substr(exe.size() + 1) : "";
        const bool ok = fs::exists(ctx.tests / exe) && run_binary(ctx.tests / exe, args) == 0;
        v.pass = v.pass && ok;
        v.detail += fmt::format("{} {}, ", label, ok ? "ok" : "FAILED");
    }
    // Two fresh moons runs with the same seed.
    std::string metrics[2];
    for (int i = 0; i < 2; ++i) {
        const std::string dir = fmt::format("determinism_{}", i);
        fs::remove_all(ctx.work / dir);
        pipeline::Runner r(load(ctx, "moons.json", dir), ctx.work / dir);
        r.run_all();
        metrics[i] = eval::metrics_text(r.report());
    }
    const bool same = metrics[0] == metrics[1];
    v.pass = v.pass && same;
    v.detail += fmt::format("determinism {}", same ? "ok" : "FAILED");
    return v;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance checks for few-shot unlearning"};
    Context ctx;
    std::string configs = UNLEARN_SOURCE_DIR "/configs", work = "acceptance", tests = UNLEARN_TESTS_DIR;
    std::set<int> only;
    bool verbose = false;
    app.add_option("--configs", configs, "Directory holding the scenario configs");
    app.add_option("--work", work, "Directory for run outputs (reused across invocations)");
    app.add_option("--tests", tests, "Directory holding the test executables");
    app.add_option("--only", only, "Criteria to check (1-6)")->check(CLI::Range(1, 6));
    app.add_flag("-v,--verbose", verbose, "Log pipeline progress");
    CLI11_PARSE(app, argc, argv);
    ctx.configs = configs;
    ctx.work = fs::absolute(work);
    ctx.tests = tests;
    spdlog::set_level(verbose ? spdlog::level::info : spdlog::level::warn);
    fs::create_directories(ctx.work);

    const std::vector<std::pair<std::string, std::function<Verdict(const Context&)>>> criteria{
        {"moons few-shot unlearning", moons},
        {"class removal, digit 9, rho 0.03", removal},
        {"mislabel correction, rho 0.03", mislabel},
        {"generator without l_bn fails to unlearn", no_bn},
        {"t_ent insensitivity", t_ent},
        {"property suites", properties},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && !only.count(id)) continue;
        const auto start = std::chrono::steady_clock::now();
        Verdict v;
        try {
            v = criteria[i].second(ctx);
        } catch (const std::exception& e) {
            v = {false, std::string("error: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        failed += !v.pass;
        std::printf("[%s] %d %s: %s (%.0f s)\n", v.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), v.detail.c_str(), secs);
        std::fflush(stdout);
    }
    return failed ? 1 : 0;
}
