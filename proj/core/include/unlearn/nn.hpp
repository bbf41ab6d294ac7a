#pragma once

#include "unlearn/autograd.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace unlearn::nn {

// One entry of an architecture descriptor. Only the fields relevant to
// `kind` are read:
//   linear{out} conv{out,kernel,stride,pad} convt{out,kernel,stride,pad}
//   bn relu leaky_relu{slope} tanh sigmoid maxpool{kernel} flatten
//   reshape{shape} tap (marks the feature-extraction point)
struct LayerSpec {
    std::string kind;
    int out = 0;
    int kernel = 0;
    int stride = 1;
    int pad = 0;
    real slope = 0.2;
    Shape shape;
};

struct ArchSpec {
    std::string name;
    Shape input_shape;  // per-sample, without the batch dimension
    std::vector<LayerSpec> layers;
};

void to_json(nlohmann::json& j, const LayerSpec& s);
void from_json(const nlohmann::json& j, LayerSpec& s);
void to_json(nlohmann::json& j, const ArchSpec& s);
void from_json(const nlohmann::json& j, ArchSpec& s);

struct BnLayerState {
    Tensor running_mean;
    Tensor running_var;
};

// Differentiable batch statistics of one BN layer's input.
struct BnTap {
    ag::Var mean;
    ag::Var var;
};

struct ForwardOptions {
    bool training = false;                       // batch statistics instead of running ones
    std::vector<ag::BatchStats>* batch_stats = nullptr;  // filled in training mode, one per BN layer
    std::vector<BnTap>* bn_taps = nullptr;       // differentiable input statistics per BN layer
    ag::Var* features = nullptr;                 // flattened activations at the `tap` layer
};

// Feed-forward network built from an ArchSpec. Copies are deep.
class Network {
public:
    static constexpr real kBnMomentum = 0.1;
    static constexpr real kBnEps = 1e-5;

    Network() = default;
    Network(ArchSpec arch, std::uint64_t seed);
    Network(const Network& other);
    Network& operator=(const Network& other);
    Network(Network&&) noexcept = default;
    Network& operator=(Network&&) noexcept = default;

    // x carries a leading batch dimension followed by arch().input_shape.
    ag::Var forward(const ag::Var& x, const ForwardOptions& options = {}) const;

    // Blends batch statistics from a training-mode forward into the running
    // buffers (unbiased variance, momentum kBnMomentum).
    void update_running_stats(const std::vector<ag::BatchStats>& stats, int batch_count);

    const ArchSpec& arch() const { return arch_; }
    Shape output_shape() const;
    std::optional<Shape> feature_shape() const;

    std::vector<ag::Var>& parameters() { return params_; }
    const std::vector<ag::Var>& parameters() const { return params_; }
    std::size_t parameter_count() const;
    std::vector<real> flat_parameters() const;
    void set_flat_parameters(std::span<const real> flat);
    void zero_grad();
    // Frozen networks build no graph for their own parameters.
    void set_requires_grad(bool flag);

    std::vector<BnLayerState>& bn_layers() { return bn_; }
    const std::vector<BnLayerState>& bn_layers() const { return bn_; }

    // Index of the last parameterized linear layer's weight and bias.
    std::pair<std::size_t, std::size_t> head_parameters() const;

private:
    struct Layer {
        LayerSpec spec;
        Shape in_shape;
        Shape out_shape;
        int first_param = -1;
        int bn_index = -1;
    };

    void build(std::uint64_t seed);

    ArchSpec arch_;
    std::vector<Layer> layers_;
    std::vector<ag::Var> params_;
    std::vector<BnLayerState> bn_;
};

} // namespace unlearn::nn
