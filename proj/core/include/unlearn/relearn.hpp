#pragma once

#include "unlearn/filtration.hpp"
#include "unlearn/model.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <vector>

namespace unlearn::relearn {

struct RelearnConfig {
    optim::OptimizerConfig optimizer{.kind = "sgd", .lr = 0.003, .momentum = 0.9, .weight_decay = 2e-5};
    int epochs = 20;
    int batch_size = 64;
    std::uint64_t seed = 0;
    bool augment = true;
};

void to_json(nlohmann::json& j, const RelearnConfig& c);
void from_json(const nlohmann::json& j, RelearnConfig& c);
void validate(const RelearnConfig& c);

struct EpochLog {
    int epoch;
    real loss;  // mean soft cross-entropy over the epoch's items
};

struct RelearnResult {
    model::ClassifierModel model;
    std::vector<EpochLog> log;
};

// Retrains a copy of w_o on D_unlearn with soft-target cross-entropy
// averaged over each batch. BN running statistics follow the new data.
RelearnResult unlearn(const model::ClassifierModel& w_o, const filtration::SoftLabeledDataset& d_unlearn,
                      const model::AugmentationSet& aug, const RelearnConfig& cfg);

// epoch,loss
void write_relearn_log(const std::vector<EpochLog>& log, const std::filesystem::path& file);

} // namespace unlearn::relearn
