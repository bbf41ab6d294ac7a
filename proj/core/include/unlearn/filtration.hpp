#pragma once

#include "unlearn/inversion.hpp"
#include "unlearn/model.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace unlearn::filtration {

// Where a generated item came from: the seed of its draw chunk, its position
// in that chunk and the label G was conditioned on.
struct Provenance {
    std::uint64_t chunk_seed = 0;
    int draw = 0;
    int conditioning_label = 0;

    bool operator==(const Provenance&) const = default;
};

// Inputs with probability-vector labels (D', D_e', D_unlearn).
class SoftLabeledDataset {
public:
    SoftLabeledDataset() = default;
    SoftLabeledDataset(int num_classes, Shape input_shape);

    // Throws ArgumentError when `soft_label` is off the simplex (tolerance 1e-5).
    void add(Tensor input, std::vector<real> soft_label, Provenance provenance = {});

    std::size_t size() const { return inputs_.size(); }
    bool empty() const { return inputs_.empty(); }
    int num_classes() const { return num_classes_; }
    const Shape& input_shape() const { return input_shape_; }

    const Tensor& input(std::size_t i) const { return inputs_[i]; }
    const std::vector<real>& soft_label(std::size_t i) const { return labels_[i]; }
    const Provenance& provenance(std::size_t i) const { return provenance_[i]; }

    Tensor batch(std::span<const std::size_t> indices) const;
    Tensor all_inputs() const;
    // [n, K] targets of the given items.
    Tensor soft_labels(std::span<const std::size_t> indices) const;

    bool operator==(const SoftLabeledDataset&) const = default;

private:
    int num_classes_ = 0;
    Shape input_shape_;
    std::vector<Tensor> inputs_;
    std::vector<std::vector<real>> labels_;
    std::vector<Provenance> provenance_;
};

// Container: meta.json, inputs.bin (f32), soft_labels.bin (f32 [N, K]), provenance.csv.
void save_soft_dataset(const SoftLabeledDataset& d, const std::filesystem::path& dir);
SoftLabeledDataset load_soft_dataset(const std::filesystem::path& dir);

struct FiltrationConfig {
    real t_ent = 0.5;            // nats
    std::string bandwidth = "median";  // "median" | "fixed"
    real sigma = 1.0;            // used when bandwidth == "fixed"
    real sensitivity = 1.0;      // kneedle S
    int target_count = 2000;     // |D'|
    int max_attempts = 0;        // 0: 50 * target_count
    int chunk_size = 256;
    std::string metric = "rbf";  // "rbf" | "cosine" | "l2"
    std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const FiltrationConfig& c);
void from_json(const nlohmann::json& j, FiltrationConfig& c);
void validate(const FiltrationConfig& c);

struct CandidateStats {
    long attempts = 0;
    long accepted = 0;
    bool truncated = false;  // attempt cap hit before target_count

    double acceptance_rate() const { return attempts ? static_cast<double>(accepted) / static_cast<double>(attempts) : 0.0; }
};

struct Candidates {
    SoftLabeledDataset items;
    CandidateStats stats;
};

// Seed of the transform draws used when a candidate was filtered.
std::uint64_t candidate_aug_seed(const Provenance& p);

// Both predicates for one generated input: under identity and every transform
// the entropy is below t_ent and the argmax matches the identity argmax.
bool passes_filter(const model::ClassifierModel& m, const Tensor& x, const model::AugmentationSet& aug, real t_ent,
                   std::uint64_t aug_seed);

// Draws chunks of (z, y) and keeps the samples that pass the filter, labeled
// with f_w(x). Chunks run on up to `workers` threads (0: UNLEARN_NUM_WORKERS
// or the hardware concurrency); the result does not depend on the worker count.
Candidates generate_candidates(const inversion::ConditionalGenerator& g, const model::ClassifierModel& m,
                               const model::AugmentationSet& aug, const FiltrationConfig& cfg, int workers = 0);

// Worker count from UNLEARN_NUM_WORKERS, capped by the hardware concurrency.
int default_workers();

real rbf_kernel(std::span<const real> a, std::span<const real> b, real sigma);

// Median of the pairwise L2 distances between rows of `a` and rows of `b`.
real median_distance(const Tensor& a, const Tensor& b);

struct Scores {
    std::vector<real> values;  // aligned with D'
    real sigma = 0.0;          // bandwidth actually used (rbf only)
};

// Score of a row of `features` against every row of `exemplars`, summed:
// rbf kernel, cosine similarity, or negated L2 distance. Larger is closer.
Scores score_features(const Tensor& features, const Tensor& exemplars, const FiltrationConfig& cfg);

// Scores D' against D_{e,rho} in the classifier's feature space.
Scores similarity_scores(const SoftLabeledDataset& d_prime, const data::LabeledDataset& d_e_rho,
                         const model::ClassifierModel& m, const FiltrationConfig& cfg);

struct Knee {
    real threshold = std::numeric_limits<real>::infinity();
    long index = -1;  // position in ascending order, -1 when no knee was found
    bool found = false;
};

// Kneedle on the ascending-sorted scores. The knee is searched below the chord
// first (convex stretch, where the high-score tail starts) and above it only
// when the curve never dips under the chord, so concave and convex increasing
// curves both get their knee at the farthest point from the chord.
Knee knee_threshold(std::span<const real> scores, real sensitivity = 1.0);

// Zeroes the target classes and renormalizes; uniform over the rest when no mass is left.
std::vector<real> relabel(std::span<const real> soft_label, std::span<const int> target_classes);

struct ScoreSummary {
    real min = 0, max = 0, mean = 0, median = 0;
};

struct UnlearnSetStats {
    std::size_t flagged = 0;   // |D_e'|
    std::size_t retained = 0;  // |D_r'|
    real t_f = 0;
    ScoreSummary scores;
};

struct UnlearnSet {
    SoftLabeledDataset items;  // D_unlearn, in D' order
    std::vector<bool> flags;
    UnlearnSetStats stats;
};

UnlearnSet build_unlearn_set(const SoftLabeledDataset& d_prime, std::span<const real> scores, real t_f,
                             std::span<const int> target_classes);

void to_json(nlohmann::json& j, const UnlearnSetStats& s);

// index,conditioning_label,score,flagged
void write_scores_csv(const SoftLabeledDataset& d_prime, std::span<const real> scores, const std::vector<bool>& flags,
                      const std::filesystem::path& file);
void write_threshold_json(const Knee& knee, const Scores& scores, const FiltrationConfig& cfg,
                          const std::filesystem::path& file);

// Grid of up to `max_items` image samples, flagged ones framed in red. Returns
// false (writing nothing) for non-image inputs.
bool write_sample_grid(const SoftLabeledDataset& d, const std::vector<bool>& flags, const std::filesystem::path& file,
                       std::size_t max_items = 400);

} // namespace unlearn::filtration
