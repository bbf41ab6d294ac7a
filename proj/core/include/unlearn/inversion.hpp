#pragma once

#include "unlearn/model.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace unlearn::inversion {

// G(z, y): a learned label embedding is concatenated to z and fed through a
// body network whose output has the classifier's input shape.
class ConditionalGenerator {
public:
    ConditionalGenerator() = default;
    ConditionalGenerator(const Shape& output_shape, int num_classes, int noise_dim, std::uint64_t seed, int embed_dim = 16);

    // z is [M, noise_dim]. Training mode normalizes with batch statistics and
    // fills `stats`; eval mode uses the running ones and is deterministic per item.
    ag::Var forward(const Tensor& z, std::span<const int> labels, bool training = false,
                    std::vector<ag::BatchStats>* stats = nullptr) const;
    // Eval-mode samples without a graph.
    Tensor generate(const Tensor& z, std::span<const int> labels) const;

    std::vector<ag::Var> parameters() const;
    nn::Network& body() { return body_; }
    const nn::Network& body() const { return body_; }
    const ag::Var& embedding() const { return embedding_; }

    int noise_dim() const { return noise_dim_; }
    int embed_dim() const { return embed_dim_; }
    int num_classes() const { return num_classes_; }
    const Shape& output_shape() const { return output_shape_; }
    std::uint64_t seed() const { return seed_; }

    std::vector<real> flat_parameters() const;
    void set_flat_parameters(std::span<const real> flat);

    ConditionalGenerator(const ConditionalGenerator& other);
    ConditionalGenerator& operator=(const ConditionalGenerator& other);
    ConditionalGenerator(ConditionalGenerator&&) noexcept = default;
    ConditionalGenerator& operator=(ConditionalGenerator&&) noexcept = default;

private:
    nn::Network body_;
    ag::Var embedding_;
    Shape output_shape_;
    int num_classes_ = 0;
    int noise_dim_ = 0;
    int embed_dim_ = 0;
    std::uint64_t seed_ = 0;
};

// MLP for vector outputs; linear + two stride-2 transposed convolutions and a
// sigmoid output for [C, H, W] images with H, W divisible by 4.
nn::ArchSpec default_generator_arch(const Shape& output_shape, int input_width);

struct LossWeights {
    real bn = 10.0;
    real ent = 1.0;
    real aug = 0.03;
    real div = 1.0;
    real tv = 3.0;

    bool all_zero() const { return bn == 0 && ent == 0 && aug == 0 && div == 0 && tv == 0; }
};

struct InversionConfig {
    LossWeights weights;
    optim::OptimizerConfig optimizer{.kind = "adam", .lr = 0.002, .beta1 = 0.5, .beta2 = 0.999, .weight_decay = 2e-4};
    int steps = 1500;
    int batch_size = 64;
    int noise_dim = 64;
    std::uint64_t seed = 0;
    // "classifier": f_e at the classifier's tap; "input": the generated inputs themselves.
    std::string feature_tap = "classifier";
    // "sum": terms exactly as defined below. "mean": ent and aug are divided
    // by M, tv by M times the adjacent pixel pairs per image, and div uses
    // per-dimension distances averaged over the ordered pairs of a group.
    std::string reduction = "mean";
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);
void to_json(nlohmann::json& j, const InversionConfig& c);
void from_json(const nlohmann::json& j, InversionConfig& c);
void validate(const InversionConfig& c);

// ---------------------------------------------------------------------------
// Loss values
// ---------------------------------------------------------------------------
inline constexpr real kEntropyCap = 1e9;

struct CappedValue {
    real value = 0.0;
    bool capped = false;  // a true-label probability was 0; value clamped to kEntropyCap
};

// Sum over the batch of -ln probs[i, labels[i]]. probs is [M, K].
CappedValue entropy_loss(const Tensor& probs, std::span<const int> labels);
// Sum over items and transforms of ||f(x) - f(phi_k(x))||^2 on probabilities.
real augmentation_loss(const model::ClassifierModel& m, const Tensor& batch, const model::AugmentationSet& aug,
                       std::uint64_t seed);
// Sum over label groups of exp(-sum over ordered pairs ||z1-z2||^2 ||f1-f2||_1).
// A group with fewer than two items contributes 1.
real diversity_loss(const Tensor& noise, const Tensor& features, std::span<const int> labels);
// Sum over BN layers of squared distances between the batch moments of the
// layer input and the stored running statistics. Needs a batch of >= 2.
real bn_loss(const model::ClassifierModel& m, const Tensor& batch);
real tv_loss(const Tensor& batch);

// ---------------------------------------------------------------------------
// Differentiable terms
// ---------------------------------------------------------------------------
ag::Var augmentation_term(const model::ClassifierModel& m, const ag::Var& x, const ag::Var& probs,
                          const model::AugmentationSet& aug, std::uint64_t seed);
// With `normalized`, each group's exponent is divided by n(n-1) * dim(z) * dim(f).
ag::Var diversity_term(const Tensor& noise, const ag::Var& features, std::span<const int> labels, bool normalized = false);
ag::Var bn_term(const std::vector<nn::BnTap>& taps, const std::vector<nn::BnLayerState>& stats);

struct LossBreakdown {
    real total = 0, bn = 0, ent = 0, aug = 0, div = 0, tv = 0;

    std::map<std::string, double> as_map() const {
        return {{"total", total}, {"bn", bn}, {"ent", ent}, {"aug", aug}, {"div", div}, {"tv", tv}};
    }
};

struct ObjectiveOptions {
    LossWeights weights;
    std::string feature_tap = "classifier";
    std::string reduction = "mean";
};

// One evaluation of the weighted objective on G(z, y) with G in training
// mode. Zero-weight terms are evaluated for the breakdown but left out of the
// total. `gen_stats` receives G's BN batch statistics; `out` the unweighted
// (reduced) term values and the weighted total.
ag::Var inversion_objective(const ConditionalGenerator& g, const model::ClassifierModel& frozen,
                            const model::AugmentationSet& aug, const ObjectiveOptions& opts, const Tensor& z,
                            std::span<const int> labels, std::uint64_t aug_seed, LossBreakdown* out = nullptr,
                            std::vector<ag::BatchStats>* gen_stats = nullptr);

struct StepLog {
    long step;
    LossBreakdown losses;
};

struct TrainedGenerator {
    ConditionalGenerator generator;
    std::vector<StepLog> log;
};

// Samples z ~ N(0, I), y uniform per step and updates only G. The classifier
// is used through a frozen copy and is never modified.
TrainedGenerator train_generator(const model::ClassifierModel& classifier, const model::AugmentationSet& aug,
                                 const InversionConfig& cfg);

void write_step_log(const std::vector<StepLog>& log, const std::filesystem::path& file);

// Checkpoint: arch.json, weights.bin (body parameters, then the embedding table), bn_stats.json.
void save_generator(const ConditionalGenerator& g, const std::filesystem::path& dir);
ConditionalGenerator load_generator(const std::filesystem::path& dir);

} // namespace unlearn::inversion
