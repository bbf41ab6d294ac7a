#pragma once

#include "unlearn/augment.hpp"
#include "unlearn/data.hpp"
#include "unlearn/nn.hpp"
#include "unlearn/optim.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace unlearn::model {

struct TrainConfig {
    optim::OptimizerConfig optimizer{.kind = "sgd", .lr = 0.01, .momentum = 0.9, .weight_decay = 2e-4};
    int epochs = 20;
    int batch_size = 64;
    std::uint64_t seed = 0;
    bool augment = true;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void validate(const TrainConfig& c);

// f_w together with what is needed to use and persist it. BN running
// statistics live in the network; they only change inside training calls.
struct ClassifierModel {
    nn::Network net;
    int num_classes = 0;
    AugmentationSet augmentations;
    std::uint64_t seed = 0;

    const Shape& input_shape() const { return net.arch().input_shape; }
};

// MLP with 1-D batch-norm for vector inputs, three-block BN CNN for images.
nn::ArchSpec default_arch(const Shape& input_shape, int num_classes);

// Fresh model. With `zero_head` the output layer starts at zero so every
// input maps to the uniform distribution.
ClassifierModel init_classifier(const nn::ArchSpec& arch, int num_classes, std::uint64_t seed, bool zero_head = false);

// Minibatch SGD on the cross-entropy of (randomly transformed) items. Each
// item sees one transform from identity + Phi per epoch.
ClassifierModel train_classifier(const data::LabeledDataset& d, const AugmentationSet& aug, const TrainConfig& cfg,
                                 const std::optional<nn::ArchSpec>& arch = std::nullopt);

// Same objective restricted to D_r, starting from w_o's parameters.
ClassifierModel train_oracle(const ClassifierModel& w_o, const data::LabeledDataset& d_r, const AugmentationSet& aug,
                             const TrainConfig& cfg);

// Continues training `start` in place on hard labels. `what` names the stage in errors.
void fit(ClassifierModel& start, const data::LabeledDataset& d, const AugmentationSet& aug, const TrainConfig& cfg);

// Batched inference in eval mode. `batch` is [N] + input_shape.
Tensor predict_proba_batch(const ClassifierModel& m, const Tensor& batch);
Tensor logits_batch(const ClassifierModel& m, const Tensor& batch);
Tensor extract_features_batch(const ClassifierModel& m, const Tensor& batch);
std::vector<int> predict_labels(const ClassifierModel& m, const Tensor& batch);

// Single-item forms; `x` has exactly input_shape.
std::vector<real> predict_proba(const ClassifierModel& m, const Tensor& x);
std::vector<real> extract_features(const ClassifierModel& m, const Tensor& x);

// Frozen running statistics per BN layer in layer order.
const std::vector<nn::BnLayerState>& bn_statistics(const ClassifierModel& m);

// Shannon entropy in nats. Throws ArgumentError off the simplex (tolerance 1e-5).
real entropy(std::span<const real> p);

std::size_t argmax(std::span<const real> p);

// Checkpoint directory: arch.json, weights.bin (f32 LE), bn_stats.json.
void save_classifier(const ClassifierModel& m, const std::filesystem::path& dir);
ClassifierModel load_classifier(const std::filesystem::path& dir);
// Running statistics as JSON, one {running_mean, running_var} object per BN layer.
void write_bn_stats(const nn::Network& net, const std::filesystem::path& file);
void read_bn_stats(nn::Network& net, const std::filesystem::path& file);

// Rounds parameters and BN buffers through float32 so the in-memory model
// equals what a checkpoint round-trip yields.
void round_to_f32(nn::Network& net);

// Hex digest over parameters and BN statistics.
std::string fingerprint(const nn::Network& net);

} // namespace unlearn::model
