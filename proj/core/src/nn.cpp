#include "unlearn/nn.hpp"

#include "unlearn/errors.hpp"
#include "unlearn/rng.hpp"

#include <nlohmann/json.hpp>

#include <cmath>

namespace unlearn::nn {

using nlohmann::json;

void to_json(json& j, const LayerSpec& s) {
    j = json{{"kind", s.kind}};
    if (s.kind == "linear") j["out"] = s.out;
    if (s.kind == "conv" || s.kind == "convt") {
        j["out"] = s.out;
        j["kernel"] = s.kernel;
        j["stride"] = s.stride;
        j["pad"] = s.pad;
    }
    if (s.kind == "maxpool") j["kernel"] = s.kernel;
    if (s.kind == "leaky_relu") j["slope"] = s.slope;
    if (s.kind == "reshape") j["shape"] = s.shape;
}

void from_json(const json& j, LayerSpec& s) {
    s = LayerSpec{};
    s.kind = j.at("kind").get<std::string>();
    s.out = j.value("out", 0);
    s.kernel = j.value("kernel", 0);
    s.stride = j.value("stride", 1);
    s.pad = j.value("pad", 0);
    s.slope = j.value("slope", 0.2);
    s.shape = j.value("shape", Shape{});
}

void to_json(json& j, const ArchSpec& s) {
    j = json{{"name", s.name}, {"input_shape", s.input_shape}, {"layers", s.layers}};
}

void from_json(const json& j, ArchSpec& s) {
    s.name = j.value("name", std::string{});
    s.input_shape = j.at("input_shape").get<Shape>();
    s.layers = j.at("layers").get<std::vector<LayerSpec>>();
}

Network::Network(ArchSpec arch, std::uint64_t seed) : arch_(std::move(arch)) { build(seed); }

Network::Network(const Network& other)
    : arch_(other.arch_), layers_(other.layers_), bn_(other.bn_) {
    params_.reserve(other.params_.size());
    for (const ag::Var& p : other.params_) params_.emplace_back(p.value(), p.requires_grad());
}

void Network::set_requires_grad(bool flag) {
    for (ag::Var& p : params_) p.node()->requires_grad = flag;
}

Network& Network::operator=(const Network& other) {
    if (this != &other) {
        Network copy(other);
        *this = std::move(copy);
    }
    return *this;
}

void Network::build(std::uint64_t seed) {
    Rng rng(seed);
    Shape shape = arch_.input_shape;
    auto uniform_param = [&](Shape s, int fan_in) {
        const real bound = 1.0 / std::sqrt(static_cast<real>(std::max(fan_in, 1)));
        Tensor t(std::move(s));
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
        params_.emplace_back(std::move(t), true);
    };
    auto fail = [&](const LayerSpec& spec, const std::string& why) {
        throw ArgumentError("layer '" + spec.kind + "' on input " + shape_to_string(shape) + ": " + why);
    };

    for (const LayerSpec& spec : arch_.layers) {
        Layer layer{spec, shape, {}, -1, -1};
        const auto rank = shape.size();
        if (spec.kind == "linear") {
            if (rank != 1) fail(spec, "expects a flat input");
            layer.first_param = static_cast<int>(params_.size());
            uniform_param(Shape{spec.out, shape[0]}, shape[0]);
            uniform_param(Shape{spec.out}, shape[0]);
            shape = Shape{spec.out};
        } else if (spec.kind == "conv") {
            if (rank != 3) fail(spec, "expects [C, H, W]");
            const int fan_in = shape[0] * spec.kernel * spec.kernel;
            layer.first_param = static_cast<int>(params_.size());
            uniform_param(Shape{spec.out, shape[0], spec.kernel, spec.kernel}, fan_in);
            uniform_param(Shape{spec.out}, fan_in);
            shape = Shape{spec.out, (shape[1] + 2 * spec.pad - spec.kernel) / spec.stride + 1,
                          (shape[2] + 2 * spec.pad - spec.kernel) / spec.stride + 1};
        } else if (spec.kind == "convt") {
            if (rank != 3) fail(spec, "expects [C, H, W]");
            const int fan_in = spec.out * spec.kernel * spec.kernel;
            layer.first_param = static_cast<int>(params_.size());
            uniform_param(Shape{shape[0], spec.out, spec.kernel, spec.kernel}, fan_in);
            uniform_param(Shape{spec.out}, fan_in);
            shape = Shape{spec.out, (shape[1] - 1) * spec.stride - 2 * spec.pad + spec.kernel,
                          (shape[2] - 1) * spec.stride - 2 * spec.pad + spec.kernel};
        } else if (spec.kind == "bn") {
            if (rank != 1 && rank != 3) fail(spec, "expects [C] or [C, H, W]");
            const int channels = shape[0];
            layer.first_param = static_cast<int>(params_.size());
            params_.emplace_back(Tensor(Shape{channels}, 1.0), true);
            params_.emplace_back(Tensor(Shape{channels}, 0.0), true);
            layer.bn_index = static_cast<int>(bn_.size());
            bn_.push_back({Tensor(Shape{channels}, 0.0), Tensor(Shape{channels}, 1.0)});
        } else if (spec.kind == "maxpool") {
            if (rank != 3) fail(spec, "expects [C, H, W]");
            shape = Shape{shape[0], shape[1] / spec.kernel, shape[2] / spec.kernel};
        } else if (spec.kind == "flatten") {
            shape = Shape{static_cast<int>(shape_size(shape))};
        } else if (spec.kind == "reshape") {
            if (shape_size(spec.shape) != shape_size(shape)) fail(spec, "element count mismatch");
            shape = spec.shape;
        } else if (spec.kind == "relu" || spec.kind == "leaky_relu" || spec.kind == "tanh" ||
                   spec.kind == "sigmoid" || spec.kind == "tap") {
        } else {
            fail(spec, "unknown layer kind");
        }
        for (int d : shape)
            if (d <= 0) fail(spec, "produces an empty shape");
        layer.out_shape = shape;
        layers_.push_back(std::move(layer));
    }
}

ag::Var Network::forward(const ag::Var& x, const ForwardOptions& options) const {
    if (x.value().rank() != static_cast<int>(arch_.input_shape.size()) + 1)
        throw ArgumentError("network input rank mismatch: got " + shape_to_string(x.shape()) + ", expected [N]+" +
                            shape_to_string(arch_.input_shape));
    for (std::size_t i = 0; i < arch_.input_shape.size(); ++i)
        if (x.dim(static_cast<int>(i) + 1) != arch_.input_shape[i])
            throw ArgumentError("network input shape mismatch: got " + shape_to_string(x.shape()) + ", expected [N]+" +
                                shape_to_string(arch_.input_shape));
    const int n = x.dim(0);
    if (options.batch_stats) options.batch_stats->clear();
    if (options.bn_taps) options.bn_taps->clear();

    ag::Var h = x;
    for (const Layer& layer : layers_) {
        const LayerSpec& s = layer.spec;
        const auto param = [&](int offset) -> const ag::Var& { return params_[layer.first_param + offset]; };
        if (s.kind == "linear") {
            h = ag::linear(h, param(0), param(1));
        } else if (s.kind == "conv") {
            h = ag::conv2d(h, param(0), param(1), {s.stride, s.pad});
        } else if (s.kind == "convt") {
            h = ag::conv_transpose2d(h, param(0), param(1), {s.stride, s.pad});
        } else if (s.kind == "bn") {
            if (options.bn_taps) options.bn_taps->push_back({ag::channel_mean(h), ag::channel_var(h)});
            if (options.training) {
                ag::BatchStats stats;
                h = ag::batch_norm_train(h, param(0), param(1), kBnEps, &stats);
                if (options.batch_stats) options.batch_stats->push_back(std::move(stats));
            } else {
                const BnLayerState& st = bn_[layer.bn_index];
                h = ag::batch_norm_eval(h, param(0), param(1), st.running_mean, st.running_var, kBnEps);
            }
        } else if (s.kind == "relu") {
            h = ag::relu(h);
        } else if (s.kind == "leaky_relu") {
            h = ag::leaky_relu(h, s.slope);
        } else if (s.kind == "tanh") {
            h = ag::tanh(h);
        } else if (s.kind == "sigmoid") {
            h = ag::sigmoid(h);
        } else if (s.kind == "maxpool") {
            h = ag::max_pool2d(h, s.kernel);
        } else if (s.kind == "flatten" || s.kind == "reshape") {
            Shape out{n};
            out.insert(out.end(), layer.out_shape.begin(), layer.out_shape.end());
            h = ag::reshape(h, std::move(out));
        } else if (s.kind == "tap") {
            if (options.features)
                *options.features = ag::reshape(h, Shape{n, static_cast<int>(shape_size(layer.in_shape))});
        }
    }
    return h;
}

void Network::update_running_stats(const std::vector<ag::BatchStats>& stats, int batch_count) {
    if (stats.size() != bn_.size()) throw ArgumentError("update_running_stats: expected one entry per BN layer");
    for (std::size_t l = 0; l < bn_.size(); ++l) {
        BnLayerState& st = bn_[l];
        // Per-channel element count is batch * spatial plane.
        std::size_t plane = 1;
        for (const Layer& layer : layers_)
            if (layer.bn_index == static_cast<int>(l))
                for (std::size_t d = 1; d < layer.in_shape.size(); ++d) plane *= static_cast<std::size_t>(layer.in_shape[d]);
        const real m = static_cast<real>(batch_count) * static_cast<real>(plane);
        const real unbias = m > 1 ? m / (m - 1) : 1.0;
        for (std::size_t c = 0; c < st.running_mean.size(); ++c) {
            st.running_mean[c] = (1 - kBnMomentum) * st.running_mean[c] + kBnMomentum * stats[l].mean[c];
            st.running_var[c] = (1 - kBnMomentum) * st.running_var[c] + kBnMomentum * stats[l].var[c] * unbias;
        }
    }
}

Shape Network::output_shape() const { return layers_.empty() ? arch_.input_shape : layers_.back().out_shape; }

std::optional<Shape> Network::feature_shape() const {
    for (const Layer& layer : layers_)
        if (layer.spec.kind == "tap") return Shape{static_cast<int>(shape_size(layer.in_shape))};
    return std::nullopt;
}

std::size_t Network::parameter_count() const {
    std::size_t n = 0;
    for (const ag::Var& p : params_) n += p.value().size();
    return n;
}

std::vector<real> Network::flat_parameters() const {
    std::vector<real> flat;
    flat.reserve(parameter_count());
    for (const ag::Var& p : params_) flat.insert(flat.end(), p.value().values().begin(), p.value().values().end());
    return flat;
}

void Network::set_flat_parameters(std::span<const real> flat) {
    if (flat.size() != parameter_count())
        throw ArgumentError("set_flat_parameters: expected " + std::to_string(parameter_count()) + " values, got " +
                            std::to_string(flat.size()));
    std::size_t offset = 0;
    for (ag::Var& p : params_) {
        Tensor& t = p.mutable_value();
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), t.size(), t.data());
        offset += t.size();
    }
}

void Network::zero_grad() {
    for (ag::Var& p : params_) p.zero_grad();
}

std::pair<std::size_t, std::size_t> Network::head_parameters() const {
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it)
        if (it->spec.kind == "linear")
            return {static_cast<std::size_t>(it->first_param), static_cast<std::size_t>(it->first_param + 1)};
    throw CapabilityError("network has no linear head");
}

} // namespace unlearn::nn
