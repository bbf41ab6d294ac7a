#pragma once

#include "unlearn/autograd.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace unlearn::model {

// One semantic-preserving input map. Kinds and the meaning of `amount`:
//   identity   -
//   shift      integer translation in [-amount, amount] per axis, zero fill
//              (same as a random crop after padding by `amount`)
//   rotate     rotation about the image center by an angle in [-amount, amount] degrees
//   hflip      horizontal mirror
//   jitter     additive Gaussian noise with stddev `amount`
// Spatial kinds need [N, C, H, W] batches; jitter and identity accept any rank.
struct Transform {
    std::string kind = "identity";
    real amount = 0.0;

    bool operator==(const Transform&) const = default;
};

void to_json(nlohmann::json& j, const Transform& t);
void from_json(const nlohmann::json& j, Transform& t);

// Ordered list of transforms. The identity is implicit: index 0 of the
// "with identity" view is always the identity, followed by `transforms`.
class AugmentationSet {
public:
    AugmentationSet() = default;
    explicit AugmentationSet(std::vector<Transform> transforms);

    const std::vector<Transform>& transforms() const { return transforms_; }
    std::size_t size() const { return transforms_.size(); }
    bool empty() const { return transforms_.empty(); }

    // Applies transform k to every item of a batch. Item i draws its random
    // parameters from (seed, i), so results are reproducible per call.
    ag::Var apply(const ag::Var& batch, std::size_t k, std::uint64_t seed) const;
    Tensor apply(const Tensor& batch, std::size_t k, std::uint64_t seed) const;

    // Applies to item i a transform drawn uniformly from identity + Phi.
    ag::Var apply_random(const ag::Var& batch, std::uint64_t seed) const;

    // Throws ArgumentError when a transform kind cannot act on inputs of this shape.
    void check_input_shape(const Shape& input_shape) const;

    bool operator==(const AugmentationSet&) const = default;

private:
    std::vector<Transform> transforms_;
};

void to_json(nlohmann::json& j, const AugmentationSet& a);
void from_json(const nlohmann::json& j, AugmentationSet& a);

// Jitter for point inputs; shift and rotation for single-channel images;
// shift and flip for multi-channel images.
AugmentationSet default_augmentations(const Shape& input_shape);

} // namespace unlearn::model
