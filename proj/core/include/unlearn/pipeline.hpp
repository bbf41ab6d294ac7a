#pragma once

#include "unlearn/data.hpp"
#include "unlearn/eval.hpp"
#include "unlearn/filtration.hpp"
#include "unlearn/inversion.hpp"
#include "unlearn/model.hpp"
#include "unlearn/relearn.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace unlearn::pipeline {

// Malformed or invalid experiment config. `key_path` is the dotted key the
// problem was found at; `line` is 1-based, 0 when unknown.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what, std::string key_path = {}, int line = 0, int column = 0)
        : std::runtime_error(what), key_path_(std::move(key_path)), line_(line), column_(column) {}
    const std::string& key_path() const { return key_path_; }
    int line() const { return line_; }
    int column() const { return column_; }

private:
    std::string key_path_;
    int line_;
    int column_;
};

// A stage needs a file an earlier stage should have written.
class MissingArtifact : public std::runtime_error {
public:
    explicit MissingArtifact(const std::string& relative_path)
        : std::runtime_error("missing artifact " + relative_path), path_(relative_path) {}
    const std::string& path() const { return path_; }

private:
    std::string path_;
};

// Any failure inside a stage, tagged with the stage name.
class StageError : public std::runtime_error {
public:
    StageError(std::string stage, const std::string& what)
        : std::runtime_error("stage " + stage + " failed: " + what), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

struct DatasetSpec {
    std::string kind = "moons";  // "moons" | "container"
    int n = 100;                 // moons
    double noise = 0.1;          // moons
    std::string train;           // container directories
    std::string test;
    std::size_t train_limit = 0;  // class-balanced subsample, 0 keeps all
    std::size_t test_limit = 0;
};

struct SweepSpec {
    std::vector<double> rhos{0.03, 0.25, 1.0};
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
};

struct AblationSpec {
    std::vector<std::string> losses{"bn", "aug", "div", "tv"};  // generator trained without each
    std::vector<std::string> metrics{"cosine", "l2"};           // filtration distance variants
    std::vector<double> t_ents;                                 // filtration entropy thresholds
    std::vector<std::uint64_t> seeds{0};
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::string output_dir = "runs/experiment";
    DatasetSpec dataset;
    data::SplitSpec scenario;
    std::optional<model::AugmentationSet> augmentations;  // default chosen from the input shape
    model::TrainConfig train;
    model::TrainConfig oracle{.optimizer = {.kind = "sgd", .lr = 0.01, .momentum = 0.9, .weight_decay = 2e-4}, .epochs = 10};
    inversion::InversionConfig inversion;
    filtration::FiltrationConfig filtration;
    relearn::RelearnConfig relearn;
    SweepSpec sweep;
    AblationSpec ablation;
    std::string generator_checkpoint;  // import a trained generator instead of training one
};

// Parses JSON text. Unknown keys, type mismatches and invalid values raise
// ConfigError with the line of the offending key when it can be located.
// Relative dataset paths resolve against `base_dir`.
ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& file);
// Effective config with every default spelled out.
nlohmann::json to_json(const ExperimentConfig& c);
void validate(const ExperimentConfig& c);

// Seed of a named stage: the global seed mixed with the stage's own seed field.
std::uint64_t stage_seed(const ExperimentConfig& c, std::string_view stage);

// Datasets of one scenario. Evaluation splits carry true labels.
struct ScenarioData {
    data::LabeledDataset train;   // D as the classifier saw it
    data::LabeledDataset retain;  // D_r
    data::LabeledDataset target;  // D_e
    data::LabeledDataset test_retain;
    data::LabeledDataset test_target;
    data::LabeledDataset kl_points;
    std::string kl_points_name;  // "train" (moons) or "test"
};

ScenarioData build_scenario(const ExperimentConfig& c);
model::AugmentationSet augmentations_for(const ExperimentConfig& c, const Shape& input_shape);

const std::vector<std::string>& stage_names();  // train, invert, filter, unlearn, evaluate

// Owns one output directory for its lifetime (lock file) and runs stages
// against it. Every stage reads its inputs from disk, so a resumed run and a
// single uninterrupted run produce the same artifacts.
class Runner {
public:
    Runner(ExperimentConfig cfg, std::filesystem::path out);
    ~Runner();
    Runner(const Runner&) = delete;
    Runner& operator=(const Runner&) = delete;

    // Runs a single stage of the main run; prerequisites must already exist.
    // Returns false when the stage was skipped as up to date.
    bool run_stage(const std::string& name);
    // Runs the stages in order, stopping after `until` when given.
    void run_all(const std::optional<std::string>& until = std::nullopt);

    // Filter, unlearn and evaluate for each (rho, seed), sharing the trained
    // classifier and generator. Writes sweep/sweep.csv and sweep/summary.json.
    std::vector<eval::UnlearnReport> sweep();
    // Loss and metric variants under ablate/<variant>/. Writes ablate/summary.csv.
    std::vector<eval::UnlearnReport> ablate();

    eval::UnlearnReport report() const;  // the main run's report.json
    const ExperimentConfig& config() const { return cfg_; }
    const std::filesystem::path& out() const { return out_; }

private:
    struct RunParams;

    bool stage_train();
    bool stage_invert(const std::string& dir, const inversion::InversionConfig& inv);
    bool stage_filter(const RunParams& p);
    bool stage_unlearn(const RunParams& p);
    bool stage_evaluate(const RunParams& p);
    eval::UnlearnReport run_unit(const RunParams& p);
    RunParams main_params() const;
    inversion::InversionConfig resolved_inversion() const;

    std::string train_key() const;
    std::string invert_key(const inversion::InversionConfig& inv) const;
    std::string filter_key(const RunParams& p) const;
    std::string unlearn_key(const RunParams& p) const;
    std::string evaluate_key(const RunParams& p) const;

    bool skip_if_current(const std::string& name, const std::string& key);
    void record(const std::string& name, const std::string& key, std::uint64_t seed, double seconds,
                const std::vector<std::string>& outputs);
    void require(const std::string& relative) const;
    void write_manifest();

    ExperimentConfig cfg_;
    std::filesystem::path out_;
    nlohmann::json manifest_;
    bool locked_ = false;
    mutable std::string dataset_hash_;
};

} // namespace unlearn::pipeline
