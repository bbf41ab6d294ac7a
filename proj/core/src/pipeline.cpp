#include "unlearn/pipeline.hpp"

#include "unlearn/binary_io.hpp"
#include "unlearn/errors.hpp"
#include "unlearn/rng.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <unistd.h>

namespace unlearn::pipeline {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// Config plumbing
// ---------------------------------------------------------------------------

std::pair<int, int> line_col(const std::string& text, std::size_t offset) {
    int line = 1, col = 1;
    for (std::size_t i = 0; i < offset && i < text.size(); ++i) {
        if (text[i] == '\n') {
            ++line;
            col = 1;
        } else {
            ++col;
        }
    }
    return {line, col};
}

// Line of a dotted key path, found by searching each quoted key after the
// previous one. Good enough for configs that do not repeat keys out of order.
int locate(const std::string& text, const std::string& key_path) {
    if (key_path.empty()) return 0;
    std::size_t pos = 0;
    std::size_t found = std::string::npos;
    std::stringstream parts(key_path);
    std::string key;
    while (std::getline(parts, key, '.')) {
        if (key.empty() || std::isdigit(static_cast<unsigned char>(key[0]))) continue;
        const std::size_t at = text.find('"' + key + '"', pos);
        if (at == std::string::npos) break;
        found = at;
        pos = at + key.size() + 2;
    }
    return found == std::string::npos ? 0 : line_col(text, found).first;
}

std::string join_path(const std::string& base, const std::string& key) { return base.empty() ? key : base + "." + key; }

// Rejects keys absent from `shape`, recursing into nested objects.
void check_keys(const json& j, const json& shape, const std::string& path) {
    if (!j.is_object()) throw ConfigError(path + " must be an object", path);
    for (const auto& [key, value] : j.items()) {
        const std::string here = join_path(path, key);
        if (!shape.contains(key)) throw ConfigError("unknown key '" + here + "'", here);
        if (shape.at(key).is_object() && !shape.at(key).empty()) check_keys(value, shape.at(key), here);
    }
}

template <typename T>
void read_section(const json& root, const char* key, T& out) {
    if (!root.contains(key)) return;
    try {
        from_json(root.at(key), out);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(std::string(key) + ": " + e.what(), key);
    }
}

template <typename F>
void guarded(const std::string& path, F&& f) {
    try {
        f();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(path + ": " + e.what(), path);
    }
}

json scenario_shape() {
    return {{"mode", ""},          {"target_classes", json::array()}, {"source_class", 0},      {"rho", 1.0},
            {"corrupt_fraction", 1.0}, {"anchor", json::array()},       {"corrupt_count", 0}};
}

json dataset_json(const DatasetSpec& d) {
    return {{"kind", d.kind}, {"n", d.n},         {"noise", d.noise},           {"train", d.train},
            {"test", d.test}, {"train_limit", d.train_limit}, {"test_limit", d.test_limit}};
}

json config_shape() {
    ExperimentConfig d;
    json shape = to_json(d);
    shape["scenario"] = scenario_shape();
    shape["augmentations"] = json::array();
    return shape;
}

std::string hash_json(const json& j) { return io::sha256_text(j.dump()); }

std::string rho_tag(double rho) {
    std::string s = fmt::format("{:g}", rho);
    return s;
}

// ---------------------------------------------------------------------------
// Artifact helpers
// ---------------------------------------------------------------------------

// Manifest entry of a generator directory: "generator" -> "invert",
// "ablate/no-bn/generator" -> "ablate/no-bn/invert".
std::string invert_stage(const std::string& generator_dir) {
    const fs::path parent = fs::path(generator_dir).parent_path();
    return parent.empty() ? "invert" : (parent / "invert").generic_string();
}

class Stopwatch {
public:
    double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::vector<std::string> files_under(const fs::path& root, const std::string& rel) {
    std::vector<std::string> out;
    const fs::path p = root / rel;
    if (fs::is_regular_file(p)) {
        out.push_back(fs::path(rel).generic_string());
    } else if (fs::is_directory(p)) {
        for (const auto& e : fs::recursive_directory_iterator(p))
            if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root).generic_string());
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<std::size_t> complement(std::size_t n, const std::vector<std::size_t>& picked) {
    std::vector<char> mark(n, 0);
    for (std::size_t i : picked) mark[i] = 1;
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < n; ++i)
        if (!mark[i]) out.push_back(i);
    return out;
}

bool contains(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

} // namespace

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

json to_json(const ExperimentConfig& c) {
    json j{{"seed", c.seed},
           {"output_dir", c.output_dir},
           {"dataset", dataset_json(c.dataset)},
           {"scenario", c.scenario},
           {"train", c.train},
           {"oracle", c.oracle},
           {"inversion", c.inversion},
           {"filtration", c.filtration},
           {"relearn", c.relearn},
           {"sweep", {{"rhos", c.sweep.rhos}, {"seeds", c.sweep.seeds}}},
           {"ablation",
            {{"losses", c.ablation.losses}, {"metrics", c.ablation.metrics}, {"t_ents", c.ablation.t_ents}, {"seeds", c.ablation.seeds}}},
           {"generator_checkpoint", c.generator_checkpoint}};
    if (c.augmentations) j["augmentations"] = *c.augmentations;
    return j;
}

void validate(const ExperimentConfig& c) {
    const DatasetSpec& d = c.dataset;
    if (d.kind == "moons") {
        if (d.n < 4) throw ConfigError("dataset.n must be >= 4", "dataset.n");
        if (!(d.noise >= 0)) throw ConfigError("dataset.noise must be >= 0", "dataset.noise");
    } else if (d.kind == "container") {
        if (d.train.empty() || !fs::exists(fs::path(d.train) / "meta.json"))
            throw ConfigError("dataset.train: no dataset container at '" + d.train + "'", "dataset.train");
        if (d.test.empty() || !fs::exists(fs::path(d.test) / "meta.json"))
            throw ConfigError("dataset.test: no dataset container at '" + d.test + "'", "dataset.test");
    } else {
        throw ConfigError("dataset.kind must be \"moons\" or \"container\"", "dataset.kind");
    }
    const data::SplitSpec& s = c.scenario;
    if (!(s.rho > 0.0 && s.rho <= 1.0)) throw ConfigError(fmt::format("scenario.rho must lie in (0, 1], got {}", s.rho), "scenario.rho");
    if (s.target_classes.empty()) throw ConfigError("scenario.target_classes must not be empty", "scenario.target_classes");
    if (d.kind == "moons") guarded("scenario", [&] { data::validate(s, 2); });
    guarded("train", [&] { model::validate(c.train); });
    guarded("oracle", [&] { model::validate(c.oracle); });
    guarded("inversion", [&] { inversion::validate(c.inversion); });
    guarded("filtration", [&] { filtration::validate(c.filtration); });
    guarded("relearn", [&] { relearn::validate(c.relearn); });
    for (double r : c.sweep.rhos)
        if (!(r > 0.0 && r <= 1.0)) throw ConfigError(fmt::format("sweep.rhos entries must lie in (0, 1], got {}", r), "sweep.rhos");
    for (const std::string& l : c.ablation.losses)
        if (l != "bn" && l != "ent" && l != "aug" && l != "div" && l != "tv")
            throw ConfigError("ablation.losses: unknown loss '" + l + "'", "ablation.losses");
    for (const std::string& m : c.ablation.metrics)
        if (m != "rbf" && m != "cosine" && m != "l2") throw ConfigError("ablation.metrics: unknown metric '" + m + "'", "ablation.metrics");
    for (double t : c.ablation.t_ents)
        if (!(t > 0)) throw ConfigError("ablation.t_ents entries must be > 0", "ablation.t_ents");
    if (!c.generator_checkpoint.empty() && !fs::exists(fs::path(c.generator_checkpoint) / "weights.bin"))
        throw ConfigError("generator_checkpoint: no generator at '" + c.generator_checkpoint + "'", "generator_checkpoint");
}

ExperimentConfig parse_config(const std::string& text, const fs::path& base_dir) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        const auto [line, col] = line_col(text, e.byte > 0 ? e.byte - 1 : 0);
        throw ConfigError(fmt::format("invalid JSON: {}", e.what()), "", line, col);
    }
    try {
        check_keys(root, config_shape(), "");
        ExperimentConfig c;
        guarded("seed", [&] { c.seed = root.value("seed", c.seed); });
        guarded("output_dir", [&] { c.output_dir = root.value("output_dir", c.output_dir); });
        if (root.contains("dataset")) {
            const json& d = root.at("dataset");
            guarded("dataset", [&] {
                c.dataset.kind = d.value("kind", c.dataset.kind);
                c.dataset.n = d.value("n", c.dataset.n);
                c.dataset.noise = d.value("noise", c.dataset.noise);
                c.dataset.train = d.value("train", c.dataset.train);
                c.dataset.test = d.value("test", c.dataset.test);
                c.dataset.train_limit = d.value("train_limit", c.dataset.train_limit);
                c.dataset.test_limit = d.value("test_limit", c.dataset.test_limit);
            });
        }
        const auto resolve = [&](std::string& p) {
            if (!p.empty() && fs::path(p).is_relative() && !base_dir.empty()) p = fs::weakly_canonical(base_dir / p).string();
        };
        resolve(c.dataset.train);
        resolve(c.dataset.test);
        read_section(root, "scenario", c.scenario);
        if (root.contains("augmentations"))
            guarded("augmentations", [&] { c.augmentations = root.at("augmentations").get<model::AugmentationSet>(); });
        read_section(root, "train", c.train);
        read_section(root, "oracle", c.oracle);
        read_section(root, "inversion", c.inversion);
        read_section(root, "filtration", c.filtration);
        read_section(root, "relearn", c.relearn);
        if (root.contains("sweep"))
            guarded("sweep", [&] {
                const json& s = root.at("sweep");
                c.sweep.rhos = s.value("rhos", c.sweep.rhos);
                c.sweep.seeds = s.value("seeds", c.sweep.seeds);
            });
        if (root.contains("ablation"))
            guarded("ablation", [&] {
                const json& a = root.at("ablation");
                c.ablation.losses = a.value("losses", c.ablation.losses);
                c.ablation.metrics = a.value("metrics", c.ablation.metrics);
                c.ablation.t_ents = a.value("t_ents", c.ablation.t_ents);
                c.ablation.seeds = a.value("seeds", c.ablation.seeds);
            });
        guarded("generator_checkpoint", [&] { c.generator_checkpoint = root.value("generator_checkpoint", c.generator_checkpoint); });
        resolve(c.generator_checkpoint);
        validate(c);
        return c;
    } catch (const ConfigError& e) {
        if (e.line() > 0) throw;
        throw ConfigError(e.what(), e.key_path(), locate(text, e.key_path()));
    }
}

ExperimentConfig load_config(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot read config file " + file.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), file.has_parent_path() ? file.parent_path() : fs::current_path());
}

std::uint64_t stage_seed(const ExperimentConfig& c, std::string_view stage) {
    std::uint64_t own = 0;
    if (stage == "train") own = c.train.seed;
    else if (stage == "oracle") own = c.oracle.seed;
    else if (stage == "inversion") own = c.inversion.seed;
    else if (stage == "filtration") own = c.filtration.seed;
    else if (stage == "relearn") own = c.relearn.seed;
    return mix_seed(derive_seed(c.seed, stage), own);
}

// ---------------------------------------------------------------------------
// Scenario
// ---------------------------------------------------------------------------

ScenarioData build_scenario(const ExperimentConfig& c) {
    const data::SplitSpec& s = c.scenario;
    const bool moons = c.dataset.kind == "moons";
    data::LabeledDataset base, test;
    if (moons) {
        base = data::make_moons(c.dataset.n, c.dataset.noise, derive_seed(c.seed, "dataset"));
    } else {
        base = data::load_dataset(c.dataset.train);
        test = data::load_dataset(c.dataset.test);
        if (c.dataset.train_limit) base = data::balanced_prefix(base, c.dataset.train_limit);
        if (c.dataset.test_limit) test = data::balanced_prefix(test, c.dataset.test_limit);
        if (test.num_classes() != base.num_classes() || test.input_shape() != base.input_shape())
            throw ArgumentError("train and test containers disagree on classes or input shape");
    }
    data::validate(s, base.num_classes());

    ScenarioData out;
    std::vector<std::size_t> target_idx;
    data::LabeledDataset true_targets(base.num_classes(), base.input_shape());
    if (s.mode == data::ScenarioMode::ClassRemoval) {
        out.train = base;
        for (std::size_t i = 0; i < base.size(); ++i)
            if (contains(s.target_classes, base.label(i))) target_idx.push_back(i);
        out.target = base.subset(target_idx);
        true_targets = out.target;
    } else {
        const int src = *s.source_class;
        std::vector<std::size_t> idx;
        if (s.anchor) {
            idx = data::nearest_of_class(base, src, *s.anchor, static_cast<std::size_t>(s.corrupt_count));
        } else {
            for (std::size_t i = 0; i < base.size(); ++i)
                if (base.label(i) == src) idx.push_back(i);
            Rng rng(derive_seed(c.seed, "corrupt-pick"));
            std::shuffle(idx.begin(), idx.end(), rng.engine());
            idx.resize(static_cast<std::size_t>(std::lround(s.corrupt_fraction * static_cast<double>(idx.size()))));
            std::sort(idx.begin(), idx.end());
        }
        if (idx.empty()) throw ArgumentError("the scenario corrupts no items");
        data::Corruption cor = data::corrupt_labels(base, idx, src, s.target_classes, derive_seed(c.seed, "corrupt"));
        out.train = std::move(cor.corrupted);
        out.target = std::move(cor.targets);
        target_idx = cor.indices;
        true_targets = base.subset(target_idx);
    }
    if (out.target.empty()) throw ArgumentError("the scenario has an empty target set D_e");
    out.retain = out.train.subset(complement(out.train.size(), target_idx));

    if (moons) {
        // The moons task is judged on the training points themselves.
        out.test_retain = out.retain;
        out.test_target = true_targets;
        out.kl_points = out.train;
        out.kl_points_name = "train";
    } else {
        std::vector<std::size_t> t_idx;
        for (std::size_t i = 0; i < test.size(); ++i) {
            const bool hit = s.mode == data::ScenarioMode::ClassRemoval ? contains(s.target_classes, test.label(i))
                                                                        : test.label(i) == *s.source_class;
            if (hit) t_idx.push_back(i);
        }
        out.test_target = test.subset(t_idx);
        out.test_retain = test.subset(complement(test.size(), t_idx));
        out.kl_points = test;
        out.kl_points_name = "test";
    }
    return out;
}

model::AugmentationSet augmentations_for(const ExperimentConfig& c, const Shape& input_shape) {
    return c.augmentations ? *c.augmentations : model::default_augmentations(input_shape);
}

const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names{"train", "invert", "filter", "unlearn", "evaluate"};
    return names;
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

struct Runner::RunParams {
    std::string prefix;     // run directory relative to out, "" or ending in '/'
    std::string generator;  // generator directory relative to out
    std::string generator_key;
    std::string variant = "full";
    double rho = 1.0;
    std::uint64_t run_seed = 0;
    filtration::FiltrationConfig filtration;
};

Runner::Runner(ExperimentConfig cfg, fs::path out) : cfg_(std::move(cfg)), out_(std::move(out)) {
    fs::create_directories(out_);
    const fs::path lock = out_ / ".lock";
    std::FILE* f = std::fopen(lock.string().c_str(), "wx");
    if (!f)
        throw std::runtime_error("output directory " + out_.string() + " is locked by another process (remove " +
                                 lock.string() + " if it is stale)");
    std::fprintf(f, "%ld\n", static_cast<long>(::getpid()));
    std::fclose(f);
    locked_ = true;

    if (fs::exists(out_ / "manifest.json")) {
        try {
            manifest_ = json::parse(io::read_text(out_ / "manifest.json"));
        } catch (const json::exception&) {
            manifest_ = json::object();
        }
    }
    if (!manifest_.is_object()) manifest_ = json::object();
    if (!manifest_.contains("stages")) manifest_["stages"] = json::object();
    if (!manifest_.contains("history")) manifest_["history"] = json::array();
    json effective = to_json(cfg_);
    effective["output_dir"] = fs::absolute(out_).lexically_normal().string();
    io::write_text(out_ / "config.json", effective.dump(2) + "\n");
    write_manifest();
}

Runner::~Runner() {
    if (!locked_) return;
    std::error_code ec;
    fs::remove(out_ / ".lock", ec);
}

void Runner::require(const std::string& relative) const {
    if (!fs::exists(out_ / relative)) throw MissingArtifact(relative);
}

bool Runner::skip_if_current(const std::string& name, const std::string& key) {
    const json& stages = manifest_["stages"];
    if (!stages.contains(name)) return false;
    const json& entry = stages.at(name);
    if (entry.value("key", std::string()) != key) return false;
    for (const auto& [file, sha] : entry.at("outputs").items()) {
        const fs::path p = out_ / file;
        if (!fs::exists(p) || io::sha256_file(p) != sha.get<std::string>()) return false;
    }
    manifest_["history"].push_back({{"stage", name}, {"config_hash", key}, {"skipped", true}});
    spdlog::info("[{}] up to date, skipped", name);
    write_manifest();
    return true;
}

void Runner::record(const std::string& name, const std::string& key, std::uint64_t seed, double seconds,
                    const std::vector<std::string>& outputs) {
    json files = json::object();
    for (const std::string& o : outputs)
        for (const std::string& f : files_under(out_, o)) files[f] = io::sha256_file(out_ / f);
    manifest_["stages"][name] = {{"key", key}, {"config_hash", key}, {"seed", seed}, {"seconds", seconds}, {"outputs", files}};
    manifest_["history"].push_back({{"stage", name}, {"config_hash", key}, {"seed", seed}, {"seconds", seconds}, {"skipped", false}});
    spdlog::info("[{}] done in {:.1f} s", name, seconds);
    write_manifest();
}

void Runner::write_manifest() {
    // Hashes are cached by (size, mtime) so large unchanged files are not reread.
    json old = manifest_.contains("files") ? manifest_["files"] : json::object();
    json files = json::object();
    for (const auto& e : fs::recursive_directory_iterator(out_)) {
        if (!e.is_regular_file()) continue;
        const std::string rel = fs::relative(e.path(), out_).generic_string();
        if (rel == "manifest.json" || rel == ".lock") continue;
        const auto size = static_cast<std::uintmax_t>(e.file_size());
        const auto mtime = static_cast<long long>(e.last_write_time().time_since_epoch().count());
        if (old.contains(rel) && old[rel].value("size", std::uintmax_t{0}) == size && old[rel].value("mtime", 0LL) == mtime) {
            files[rel] = old[rel];
            continue;
        }
        files[rel] = {{"sha256", io::sha256_file(e.path())}, {"size", size}, {"mtime", mtime}};
    }
    manifest_["files"] = files;
    io::write_text(out_ / "manifest.json", manifest_.dump(2) + "\n");
}

std::string Runner::train_key() const {
    if (dataset_hash_.empty()) {
        if (cfg_.dataset.kind == "container") {
            std::string cat;
            for (const std::string& dir : {cfg_.dataset.train, cfg_.dataset.test})
                for (const char* f : {"meta.json", "inputs.bin", "labels.bin"}) cat += io::sha256_file(fs::path(dir) / f);
            dataset_hash_ = io::sha256_text(cat);
        } else {
            dataset_hash_ = "synthetic";
        }
    }
    json dataset = dataset_json(cfg_.dataset);
    dataset.erase("train");
    dataset.erase("test");
    dataset["content"] = dataset_hash_;
    json scenario = cfg_.scenario;
    scenario.erase("rho");
    return hash_json({{"stage", "train"},
                      {"seed", cfg_.seed},
                      {"dataset", dataset},
                      {"scenario", scenario},
                      {"augmentations", cfg_.augmentations ? json(*cfg_.augmentations) : json(nullptr)},
                      {"train", cfg_.train},
                      {"oracle", cfg_.oracle}});
}

inversion::InversionConfig Runner::resolved_inversion() const {
    inversion::InversionConfig inv = cfg_.inversion;
    inv.seed = stage_seed(cfg_, "inversion");
    return inv;
}

std::string Runner::invert_key(const inversion::InversionConfig& inv) const {
    const std::string imported = cfg_.generator_checkpoint.empty() ? "" : io::sha256_file(fs::path(cfg_.generator_checkpoint) / "weights.bin");
    return hash_json({{"stage", "invert"}, {"upstream", train_key()}, {"inversion", inv}, {"import", imported}});
}

std::string Runner::filter_key(const RunParams& p) const {
    return hash_json({{"stage", "filter"},
                      {"upstream", p.generator_key},
                      {"rho", p.rho},
                      {"run_seed", p.run_seed},
                      {"filtration", p.filtration},
                      {"targets", cfg_.scenario.target_classes}});
}

std::string Runner::unlearn_key(const RunParams& p) const {
    return hash_json({{"stage", "unlearn"}, {"upstream", filter_key(p)}, {"relearn", cfg_.relearn}});
}

std::string Runner::evaluate_key(const RunParams& p) const {
    return hash_json({{"stage", "evaluate"}, {"upstream", unlearn_key(p)}, {"variant", p.variant}});
}

Runner::RunParams Runner::main_params() const {
    RunParams p;
    p.generator = "generator";
    p.generator_key = invert_key(resolved_inversion());
    p.rho = cfg_.scenario.rho;
    p.filtration = cfg_.filtration;
    p.filtration.seed = stage_seed(cfg_, "filtration");
    return p;
}

bool Runner::stage_train() {
    const std::string key = train_key();
    if (skip_if_current("train", key)) return false;
    const Stopwatch clock;
    for (const char* d : {"data", "classifier", "oracle"}) fs::remove_all(out_ / d);

    const ScenarioData sc = build_scenario(cfg_);
    data::save_dataset(sc.train, out_ / "data/train");
    data::save_dataset(sc.retain, out_ / "data/retain");
    data::save_dataset(sc.target, out_ / "data/target");
    data::save_dataset(sc.test_retain, out_ / "data/test_retain");
    data::save_dataset(sc.test_target, out_ / "data/test_target");
    data::save_dataset(sc.kl_points, out_ / "data/kl_points");
    io::write_text(out_ / "data/kl_points/role.txt", sc.kl_points_name + "\n");
    if (sc.train.input_shape() == Shape{2}) data::export_points_csv(sc.train, out_ / "data/points.csv");

    const model::AugmentationSet aug = augmentations_for(cfg_, sc.train.input_shape());
    model::TrainConfig tc = cfg_.train;
    tc.seed = stage_seed(cfg_, "train");
    spdlog::info("[train] classifier on {} items", sc.train.size());
    model::save_classifier(model::train_classifier(sc.train, aug, tc), out_ / "classifier");

    const model::ClassifierModel w_o = model::load_classifier(out_ / "classifier");
    model::TrainConfig oc = cfg_.oracle;
    oc.seed = stage_seed(cfg_, "oracle");
    spdlog::info("[train] oracle on {} retained items", sc.retain.size());
    model::save_classifier(model::train_oracle(w_o, sc.retain, aug, oc), out_ / "oracle");
    record("train", key, tc.seed, clock.seconds(), {"data", "classifier", "oracle"});
    return true;
}

bool Runner::stage_invert(const std::string& dir, const inversion::InversionConfig& inv) {
    require("classifier/weights.bin");
    const std::string name = invert_stage(dir);
    const std::string key = invert_key(inv);
    if (skip_if_current(name, key)) return false;
    const Stopwatch clock;
    fs::remove_all(out_ / dir);
    const model::ClassifierModel w_o = model::load_classifier(out_ / "classifier");
    if (!cfg_.generator_checkpoint.empty()) {
        const inversion::ConditionalGenerator g = inversion::load_generator(cfg_.generator_checkpoint);
        if (g.output_shape() != w_o.input_shape() || g.num_classes() != w_o.num_classes)
            throw ArgumentError("imported generator does not match the classifier");
        inversion::save_generator(g, out_ / dir);
    } else {
        spdlog::info("[{}] {} steps, batch {}", name, inv.steps, inv.batch_size);
        const inversion::TrainedGenerator tg = inversion::train_generator(w_o, w_o.augmentations, inv);
        inversion::save_generator(tg.generator, out_ / dir);
        inversion::write_step_log(tg.log, out_ / dir / "steps.csv");
    }
    record(name, key, inv.seed, clock.seconds(), {dir});
    return true;
}

bool Runner::stage_filter(const RunParams& p) {
    require("classifier/weights.bin");
    require("data/target/meta.json");
    require(p.generator + "/weights.bin");
    const std::string name = p.prefix + "filter";
    const std::string key = filter_key(p);
    if (skip_if_current(name, key)) return false;
    const Stopwatch clock;
    const fs::path dir = out_ / name;
    fs::remove_all(dir);

    const model::ClassifierModel w_o = model::load_classifier(out_ / "classifier");
    const inversion::ConditionalGenerator g = inversion::load_generator(out_ / p.generator);
    const data::LabeledDataset d_e = data::load_dataset(out_ / "data/target");
    const data::LabeledDataset d_e_rho =
        data::sample_target_subset(d_e, p.rho, mix_seed(derive_seed(cfg_.seed, "rho-sample"), p.run_seed));
    if (d_e_rho.empty())
        throw ArgumentError(fmt::format("the rho = {} subset of {} target items came out empty; raise rho or change the seed",
                                        p.rho, d_e.size()));
    data::save_dataset(d_e_rho, dir / "target_rho");

    const filtration::Candidates cand = filtration::generate_candidates(g, w_o, w_o.augmentations, p.filtration);
    filtration::save_soft_dataset(cand.items, dir / "candidates");
    const filtration::Scores scores = filtration::similarity_scores(cand.items, d_e_rho, w_o, p.filtration);
    const filtration::Knee knee = filtration::knee_threshold(scores.values, p.filtration.sensitivity);
    if (!knee.found) spdlog::warn("[{}] no knee in the score curve; nothing is flagged", name);
    const filtration::UnlearnSet set =
        filtration::build_unlearn_set(cand.items, scores.values, knee.threshold, cfg_.scenario.target_classes);
    filtration::save_soft_dataset(set.items, dir / "unlearn_set");
    filtration::write_scores_csv(cand.items, scores.values, set.flags, dir / "scores.csv");
    filtration::write_threshold_json(knee, scores, p.filtration, dir / "threshold.json");
    filtration::write_sample_grid(cand.items, set.flags, dir / "samples.png");

    // Share of candidates conditioned on a forgotten class that were flagged.
    real conditioned_flagged = -1;
    if (cfg_.scenario.mode == data::ScenarioMode::ClassRemoval) {
        std::size_t total = 0, hit = 0;
        for (std::size_t i = 0; i < cand.items.size(); ++i)
            if (contains(cfg_.scenario.target_classes, cand.items.provenance(i).conditioning_label)) {
                ++total;
                hit += set.flags[i];
            }
        if (total) conditioned_flagged = static_cast<real>(hit) / static_cast<real>(total);
    }
    json stats{{"attempts", cand.stats.attempts},
               {"accepted", cand.stats.accepted},
               {"acceptance_rate", cand.stats.acceptance_rate()},
               {"truncated", cand.stats.truncated},
               {"target_subset", d_e_rho.size()},
               {"sigma", scores.sigma},
               {"unlearn_set", set.stats},
               {"target_conditioned_flagged", conditioned_flagged}};
    io::write_text(dir / "stats.json", stats.dump(2) + "\n");
    spdlog::info("[{}] |D'| = {} (acceptance {:.1f}%), |D_e,rho| = {}, flagged {}", name, cand.items.size(),
                 100.0 * cand.stats.acceptance_rate(), d_e_rho.size(), set.stats.flagged);
    record(name, key, p.filtration.seed, clock.seconds(), {name});
    return true;
}

bool Runner::stage_unlearn(const RunParams& p) {
    require("classifier/weights.bin");
    require(p.prefix + "filter/unlearn_set/meta.json");
    const std::string name = p.prefix + "unlearn";
    const std::string dir = p.prefix + "unlearned";
    const std::string key = unlearn_key(p);
    if (skip_if_current(name, key)) return false;
    const Stopwatch clock;
    fs::remove_all(out_ / dir);
    const model::ClassifierModel w_o = model::load_classifier(out_ / "classifier");
    const filtration::SoftLabeledDataset d = filtration::load_soft_dataset(out_ / p.prefix / "filter/unlearn_set");
    relearn::RelearnConfig rc = cfg_.relearn;
    rc.seed = mix_seed(stage_seed(cfg_, "relearn"), p.run_seed);
    const relearn::RelearnResult r = relearn::unlearn(w_o, d, w_o.augmentations, rc);
    model::save_classifier(r.model, out_ / dir);
    relearn::write_relearn_log(r.log, out_ / dir / "relearn_log.csv");
    record(name, key, rc.seed, clock.seconds(), {dir});
    return true;
}

bool Runner::stage_evaluate(const RunParams& p) {
    for (const char* f : {"classifier/weights.bin", "oracle/weights.bin", "data/test_retain/meta.json",
                          "data/test_target/meta.json", "data/kl_points/meta.json"})
        require(f);
    require(p.prefix + "unlearned/weights.bin");
    require(p.prefix + "filter/stats.json");
    const std::string name = p.prefix + "evaluate";
    const std::string file = p.prefix + "report.json";
    const std::string key = evaluate_key(p);
    if (skip_if_current(name, key)) return false;
    const Stopwatch clock;

    const model::ClassifierModel original = model::load_classifier(out_ / "classifier");
    const model::ClassifierModel oracle = model::load_classifier(out_ / "oracle");
    const model::ClassifierModel unlearned = model::load_classifier(out_ / p.prefix / "unlearned");
    const data::LabeledDataset test_retain = data::load_dataset(out_ / "data/test_retain");
    const data::LabeledDataset test_target = data::load_dataset(out_ / "data/test_target");
    const data::LabeledDataset kl_points = data::load_dataset(out_ / "data/kl_points");
    const json stats = json::parse(io::read_text(out_ / p.prefix / "filter/stats.json"));

    eval::UnlearnReport r;
    r.variant = p.variant;
    r.scenario = cfg_.scenario;
    r.scenario.rho = p.rho;
    r.rho = p.rho;
    const auto split = [&](const model::ClassifierModel& m) {
        return eval::SplitAccuracy{eval::accuracy(m, test_retain), eval::accuracy(m, test_target)};
    };
    r.original = split(original);
    r.oracle = split(oracle);
    r.unlearned = split(unlearned);
    r.kl_vs_oracle = eval::kl_to_reference(unlearned, oracle, kl_points);
    r.kl_vs_original = eval::kl_to_reference(unlearned, original, kl_points);
    std::string role = io::read_text(out_ / "data/kl_points/role.txt");
    role.erase(std::remove(role.begin(), role.end(), '\n'), role.end());
    r.kl_points = role;

    const json& us = stats.at("unlearn_set");
    r.filtration.candidates = us.at("flagged").get<std::size_t>() + us.at("retained").get<std::size_t>();
    r.filtration.flagged = us.at("flagged").get<std::size_t>();
    r.filtration.attempts = stats.at("attempts").get<long>();
    r.filtration.acceptance_rate = stats.at("acceptance_rate").get<real>();
    r.filtration.t_f = us.at("t_f").is_number() ? us.at("t_f").get<real>() : std::numeric_limits<real>::infinity();
    r.filtration.t_ent = p.filtration.t_ent;
    r.filtration.sigma = stats.at("sigma").get<real>();
    r.filtration.target_subset = stats.at("target_subset").get<std::size_t>();
    r.filtration.target_conditioned_flagged = stats.at("target_conditioned_flagged").get<real>();

    r.seeds = {{"global", cfg_.seed},
               {"run", p.run_seed},
               {"train", stage_seed(cfg_, "train")},
               {"oracle", stage_seed(cfg_, "oracle")},
               {"inversion", stage_seed(cfg_, "inversion")},
               {"filtration", p.filtration.seed},
               {"relearn", mix_seed(stage_seed(cfg_, "relearn"), p.run_seed)}};
    const json& stages = manifest_["stages"];
    const auto secs = [&](const std::string& s) { return stages.contains(s) ? stages[s].value("seconds", 0.0) : 0.0; };
    r.seconds = {{"train", secs("train")},
                 {"invert", secs(invert_stage(p.generator))},
                 {"filter", secs(p.prefix + "filter")},
                 {"unlearn", secs(p.prefix + "unlearn")},
                 {"evaluate", clock.seconds()}};
    io::write_text(out_ / file, json(r).dump(2) + "\n");
    spdlog::info("[{}] D_r {:.2f}% D_e {:.2f}% (original {:.2f}/{:.2f}, oracle {:.2f}/{:.2f}), KL oracle {:.4f} original {:.4f}",
                 name, r.unlearned.retain, r.unlearned.target, r.original.retain, r.original.target, r.oracle.retain,
                 r.oracle.target, r.kl_vs_oracle, r.kl_vs_original);
    record(name, key, p.run_seed, clock.seconds(), {file});
    return true;
}

eval::UnlearnReport Runner::run_unit(const RunParams& p) {
    stage_filter(p);
    stage_unlearn(p);
    stage_evaluate(p);
    return json::parse(io::read_text(out_ / p.prefix / "report.json")).get<eval::UnlearnReport>();
}

bool Runner::run_stage(const std::string& name) {
    try {
        if (name == "train") return stage_train();
        if (name == "invert") return stage_invert("generator", resolved_inversion());
        if (name == "filter") return stage_filter(main_params());
        if (name == "unlearn") return stage_unlearn(main_params());
        if (name == "evaluate") return stage_evaluate(main_params());
    } catch (const MissingArtifact&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(name, e.what());
    }
    throw ArgumentError("unknown stage '" + name + "'");
}

void Runner::run_all(const std::optional<std::string>& until) {
    if (until && std::find(stage_names().begin(), stage_names().end(), *until) == stage_names().end())
        throw ArgumentError("unknown stage '" + *until + "'");
    for (const std::string& s : stage_names()) {
        run_stage(s);
        if (until && s == *until) break;
    }
}

std::vector<eval::UnlearnReport> Runner::sweep() {
    require("classifier/weights.bin");
    require("generator/weights.bin");
    std::vector<eval::UnlearnReport> reports;
    const RunParams base = main_params();
    for (double rho : cfg_.sweep.rhos)
        for (std::uint64_t seed : cfg_.sweep.seeds) {
            RunParams p = base;
            p.rho = rho;
            p.run_seed = seed;
            p.prefix = fmt::format("sweep/rho_{}_seed_{}/", rho_tag(rho), seed);
            p.filtration.seed = mix_seed(base.filtration.seed, seed);
            try {
                reports.push_back(run_unit(p));
            } catch (const MissingArtifact&) {
                throw;
            } catch (const std::exception& e) {
                throw StageError("sweep", e.what());
            }
        }
    eval::write_sweep_csv(reports, out_ / "sweep/sweep.csv");
    json summary = json::array();
    for (double rho : cfg_.sweep.rhos) {
        std::vector<real> dr, de, klo, klr;
        for (const auto& r : reports)
            if (r.rho == rho) {
                dr.push_back(r.unlearned.retain);
                de.push_back(r.unlearned.target);
                klo.push_back(r.kl_vs_oracle);
                klr.push_back(r.kl_vs_original);
            }
        const auto ms = [](const std::vector<real>& v) {
            const eval::MeanStd m = eval::mean_std(v);
            return json{{"mean", m.mean}, {"std", m.std}};
        };
        summary.push_back({{"rho", rho}, {"runs", dr.size()}, {"acc_dr", ms(dr)}, {"acc_de", ms(de)}, {"kl_oracle", ms(klo)}, {"kl_original", ms(klr)}});
    }
    io::write_text(out_ / "sweep/summary.json", summary.dump(2) + "\n");
    write_manifest();
    return reports;
}

std::vector<eval::UnlearnReport> Runner::ablate() {
    require("classifier/weights.bin");
    struct Variant {
        std::string name;
        std::string generator;
        inversion::InversionConfig inv;
        filtration::FiltrationConfig filt;
    };
    const RunParams base = main_params();
    const inversion::InversionConfig inv0 = resolved_inversion();
    std::vector<Variant> variants{{"full", "generator", inv0, base.filtration}};
    for (const std::string& loss : cfg_.ablation.losses) {
        Variant v{"no-" + loss, "ablate/no-" + loss + "/generator", inv0, base.filtration};
        if (loss == "bn") v.inv.weights.bn = 0;
        if (loss == "ent") v.inv.weights.ent = 0;
        if (loss == "aug") v.inv.weights.aug = 0;
        if (loss == "div") v.inv.weights.div = 0;
        if (loss == "tv") v.inv.weights.tv = 0;
        variants.push_back(v);
    }
    for (const std::string& metric : cfg_.ablation.metrics) {
        Variant v{"metric-" + metric, "generator", inv0, base.filtration};
        v.filt.metric = metric;
        variants.push_back(v);
    }
    for (double t : cfg_.ablation.t_ents) {
        Variant v{"t_ent-" + rho_tag(t), "generator", inv0, base.filtration};
        v.filt.t_ent = t;
        variants.push_back(v);
    }

    std::vector<eval::UnlearnReport> reports;
    for (const Variant& v : variants) {
        try {
            stage_invert(v.generator, v.inv);
            for (std::uint64_t seed : cfg_.ablation.seeds) {
                RunParams p = base;
                p.variant = v.name;
                p.generator = v.generator;
                p.generator_key = invert_key(v.inv);
                p.run_seed = seed;
                p.filtration = v.filt;
                p.filtration.seed = mix_seed(base.filtration.seed, seed);
                p.prefix = fmt::format("ablate/{}/seed_{}/", v.name, seed);
                reports.push_back(run_unit(p));
            }
        } catch (const MissingArtifact&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError("ablate/" + v.name, e.what());
        }
    }
    std::ostringstream csv;
    csv.precision(10);
    csv << "variant,seed,acc_dr,acc_de,kl_oracle,kl_original,flagged\n";
    for (const auto& r : reports)
        csv << r.variant << ',' << r.seeds.at("run") << ',' << r.unlearned.retain << ',' << r.unlearned.target << ','
            << r.kl_vs_oracle << ',' << r.kl_vs_original << ',' << r.filtration.flagged << '\n';
    io::write_text(out_ / "ablate/summary.csv", csv.str());
    write_manifest();
    return reports;
}

eval::UnlearnReport Runner::report() const {
    require("report.json");
    return json::parse(io::read_text(out_ / "report.json")).get<eval::UnlearnReport>();
}

} // namespace unlearn::pipeline
