#pragma once

#include "unlearn/tensor.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace unlearn::data {

// Inputs with hard labels. Items keep insertion order; D, D_e, D_r and the
// sampled target subset are all values of this type.
class LabeledDataset {
public:
    LabeledDataset() = default;
    LabeledDataset(int num_classes, Shape input_shape);

    void add(Tensor input, int label);

    std::size_t size() const { return labels_.size(); }
    bool empty() const { return labels_.empty(); }
    int num_classes() const { return num_classes_; }
    const Shape& input_shape() const { return input_shape_; }

    const Tensor& input(std::size_t i) const { return inputs_[i]; }
    int label(std::size_t i) const { return labels_[i]; }
    const std::vector<int>& labels() const { return labels_; }
    const std::vector<Tensor>& inputs() const { return inputs_; }
    void set_label(std::size_t i, int label);

    // Stacked [n, input_shape...] batch of the given item indices.
    Tensor batch(std::span<const std::size_t> indices) const;
    // Stacked batch of every item.
    Tensor all_inputs() const;
    LabeledDataset subset(std::span<const std::size_t> indices) const;
    std::vector<std::size_t> class_counts() const;

    bool operator==(const LabeledDataset& other) const = default;

private:
    int num_classes_ = 0;
    Shape input_shape_;
    std::vector<Tensor> inputs_;
    std::vector<int> labels_;
};

enum class ScenarioMode { ClassRemoval, MislabelCorrection };

// Scenario descriptor. For class removal `target_classes` holds the class to
// forget. For mislabel correction `source_class` items are relabeled into
// `target_classes`; `corrupt_fraction` of the source items are corrupted
// (chosen at random), or the `corrupt_count` items nearest `anchor` when an
// anchor is given.
struct SplitSpec {
    ScenarioMode mode = ScenarioMode::ClassRemoval;
    std::vector<int> target_classes;
    std::optional<int> source_class;
    double rho = 1.0;
    double corrupt_fraction = 1.0;
    std::optional<std::vector<double>> anchor;
    int corrupt_count = 0;
};

void to_json(nlohmann::json& j, const SplitSpec& s);
void from_json(const nlohmann::json& j, SplitSpec& s);
// Throws ArgumentError on an empty target set or rho outside (0, 1].
void validate(const SplitSpec& s, int num_classes);

// Two interleaving half circles with isotropic Gaussian noise, in seeded
// shuffled order. Class 0 is the upper arc, class 1 the lower one.
LabeledDataset make_moons(int n, double noise, std::uint64_t seed);

struct Corruption {
    LabeledDataset corrupted;  // D with relabeled items
    LabeledDataset targets;    // exactly the relabeled items, with their new labels
    std::vector<std::size_t> indices;  // positions of the relabeled items in D
};

// Relabels every item of `source_class` with a label drawn uniformly from
// `target_classes`.
Corruption corrupt_labels(const LabeledDataset& d, int source_class, std::span<const int> target_classes,
                          std::uint64_t seed);
// Same, restricted to the items at `indices` (each must be of source_class).
Corruption corrupt_labels(const LabeledDataset& d, std::span<const std::size_t> indices, int source_class,
                          std::span<const int> target_classes, std::uint64_t seed);

struct Split {
    LabeledDataset retain;  // D_r
    LabeledDataset target;  // D_e
};

Split class_removal_split(const LabeledDataset& d, int target_class);

// Keeps each item independently with probability rho.
LabeledDataset sample_target_subset(const LabeledDataset& targets, double rho, std::uint64_t seed);

// Indices of the `count` items of class `cls` closest (L2) to `anchor`.
std::vector<std::size_t> nearest_of_class(const LabeledDataset& d, int cls, std::span<const double> anchor,
                                          std::size_t count);

// Deterministic per-class split: the first ceil(fraction * n_c) items of
// each class (in dataset order) go to the first part.
std::pair<LabeledDataset, LabeledDataset> stratified_split(const LabeledDataset& d, double fraction);

// Keeps at most `limit` items, class-balanced by round-robin over classes.
LabeledDataset balanced_prefix(const LabeledDataset& d, std::size_t limit);

// ---------------------------------------------------------------------------
// Container format: meta.json + inputs.bin (f32 LE) + labels.bin (u32 LE)
// ---------------------------------------------------------------------------
void save_dataset(const LabeledDataset& d, const std::filesystem::path& dir);
LabeledDataset load_dataset(const std::filesystem::path& dir);
// CSV with header x0,x1,label; only for 2-D point datasets.
void export_points_csv(const LabeledDataset& d, const std::filesystem::path& file);

// Standard IDX image/label files (as distributed for MNIST), pixels scaled to [0, 1].
LabeledDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, int num_classes = 10);

} // namespace unlearn::data
