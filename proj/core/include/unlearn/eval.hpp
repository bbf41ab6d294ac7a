#pragma once

#include "unlearn/data.hpp"
#include "unlearn/model.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace unlearn::eval {

// Percentage of items whose argmax prediction equals the label.
real accuracy(const model::ClassifierModel& m, const data::LabeledDataset& d);

// KL(p || q) in nats with q floored at 1e-12.
real kl_divergence(std::span<const real> p, std::span<const real> q);

// Mean over `points` of KL(ref(x) || m(x)).
real kl_to_reference(const model::ClassifierModel& m, const model::ClassifierModel& ref, const data::LabeledDataset& points);

struct SplitAccuracy {
    real retain = 0;  // D_r test split
    real target = 0;  // D_e test split
};

void to_json(nlohmann::json& j, const SplitAccuracy& a);
void from_json(const nlohmann::json& j, SplitAccuracy& a);

struct FiltrationSummary {
    std::size_t candidates = 0;  // |D'|
    std::size_t flagged = 0;     // |D_e'|
    long attempts = 0;
    real acceptance_rate = 0;
    real t_f = 0;
    real t_ent = 0;
    real sigma = 0;
    std::size_t target_subset = 0;  // |D_{e,rho}|
    // Share of kept candidates conditioned on a target class that were flagged
    // (class removal only; -1 otherwise).
    real target_conditioned_flagged = -1;
};

struct UnlearnReport {
    std::string variant = "full";
    data::SplitSpec scenario;
    real rho = 1.0;
    SplitAccuracy original, oracle, unlearned;
    real kl_vs_oracle = 0;
    real kl_vs_original = 0;
    std::string kl_points;  // which items the KL means run over
    FiltrationSummary filtration;
    std::map<std::string, std::uint64_t> seeds;
    std::map<std::string, double> seconds;  // wall clock per stage
};

// {"variant", "scenario", "rho", "seeds", "metrics": {...}, "timing": {...}}.
// Everything but "timing" is a pure function of the inputs.
void to_json(nlohmann::json& j, const UnlearnReport& r);
void from_json(const nlohmann::json& j, UnlearnReport& r);
// The "metrics" object alone, serialized.
std::string metrics_text(const UnlearnReport& r);

struct MeanStd {
    real mean = 0;
    real std = 0;  // sample standard deviation, 0 for a single value
};
MeanStd mean_std(std::span<const real> values);

// rho,seed,acc_dr,acc_de,kl_oracle,kl_original
void write_sweep_csv(const std::vector<UnlearnReport>& reports, const std::filesystem::path& file);

} // namespace unlearn::eval
