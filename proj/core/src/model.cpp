#include "unlearn/model.hpp"

#include "unlearn/binary_io.hpp"
#include "unlearn/errors.hpp"
#include "unlearn/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace unlearn::model {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kInferenceChunk = 256;

Tensor slice_rows(const Tensor& batch, int begin, int end) {
    Shape shape = batch.shape();
    shape[0] = end - begin;
    const std::size_t stride = batch.row_size();
    return Tensor(shape, std::vector<real>(batch.values().begin() + static_cast<std::ptrdiff_t>(begin * stride),
                                           batch.values().begin() + static_cast<std::ptrdiff_t>(end * stride)));
}

void check_batch(const ClassifierModel& m, const Tensor& batch) {
    const Shape& in = m.input_shape();
    bool ok = batch.rank() == static_cast<int>(in.size()) + 1;
    for (std::size_t i = 0; ok && i < in.size(); ++i) ok = batch.dim(static_cast<int>(i) + 1) == in[i];
    if (!ok)
        throw ArgumentError("input batch " + shape_to_string(batch.shape()) + " does not match [N]+" + shape_to_string(in));
}

// Runs the network over `batch` in chunks and stacks the selected output.
template <typename Select>
Tensor chunked(const ClassifierModel& m, const Tensor& batch, int width, Select select) {
    check_batch(m, batch);
    ag::NoGradGuard guard;
    const int n = batch.dim(0);
    Tensor out(Shape{n, width});
    for (int begin = 0; begin < n; begin += kInferenceChunk) {
        const int end = std::min(n, begin + kInferenceChunk);
        const Tensor part = select(ag::constant(slice_rows(batch, begin, end)));
        std::copy(part.values().begin(), part.values().end(), out.data() + static_cast<std::size_t>(begin) * static_cast<std::size_t>(width));
    }
    return out;
}

Tensor single_batch(const ClassifierModel& m, const Tensor& x) {
    if (x.shape() != m.input_shape())
        throw ArgumentError("input " + shape_to_string(x.shape()) + " does not match " + shape_to_string(m.input_shape()));
    Shape shape{1};
    shape.insert(shape.end(), x.shape().begin(), x.shape().end());
    return x.reshaped(shape);
}

bool has_bn(const nn::Network& net) { return !net.bn_layers().empty(); }

} // namespace

void to_json(json& j, const TrainConfig& c) {
    j = {{"optimizer", c.optimizer}, {"epochs", c.epochs}, {"batch_size", c.batch_size}, {"seed", c.seed}, {"augment", c.augment}};
}

void from_json(const json& j, TrainConfig& c) {
    if (j.contains("optimizer")) {
        optim::OptimizerConfig o = c.optimizer;
        optim::from_json(j.at("optimizer"), o);
        c.optimizer = o;
    }
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.augment = j.value("augment", c.augment);
}

void validate(const TrainConfig& c) {
    optim::validate(c.optimizer);
    if (c.epochs < 0) throw ArgumentError("epochs must be >= 0");
    if (c.batch_size < 1) throw ArgumentError("batch_size must be >= 1");
}

nn::ArchSpec default_arch(const Shape& input_shape, int num_classes) {
    const auto layer = [](std::string kind, int out = 0, int kernel = 0, int pad = 0) {
        nn::LayerSpec s;
        s.kind = std::move(kind);
        s.out = out;
        s.kernel = kernel;
        s.pad = pad;
        return s;
    };
    nn::ArchSpec a;
    a.input_shape = input_shape;
    if (input_shape.size() == 1) {
        a.name = "mlp-bn";
        a.layers = {layer("linear", 64), layer("bn"), layer("relu"), layer("linear", 64), layer("bn"), layer("relu"),
                    layer("tap"), layer("linear", num_classes)};
        return a;
    }
    if (input_shape.size() != 3 || input_shape[1] % 4 || input_shape[2] % 4)
        throw ArgumentError("no default architecture for input shape " + shape_to_string(input_shape));
    a.name = "cnn-bn";
    a.layers = {layer("conv", 16, 3, 1), layer("bn"),   layer("relu"),         layer("maxpool", 0, 2),
                layer("conv", 32, 3, 1), layer("bn"),   layer("relu"),         layer("maxpool", 0, 2),
                layer("conv", 32, 3, 1), layer("bn"),   layer("relu"),         layer("flatten"),
                layer("linear", 128),    layer("relu"), layer("tap"),          layer("linear", num_classes)};
    return a;
}

ClassifierModel init_classifier(const nn::ArchSpec& arch, int num_classes, std::uint64_t seed, bool zero_head) {
    if (num_classes < 2) throw ArgumentError("a classifier needs at least two classes");
    ClassifierModel m{nn::Network(arch, seed), num_classes, {}, seed};
    const Shape out = m.net.output_shape();
    if (out != Shape{num_classes})
        throw ArgumentError("architecture output " + shape_to_string(out) + " does not match " + std::to_string(num_classes) +
                            " classes");
    if (zero_head) {
        const auto [w, b] = m.net.head_parameters();
        m.net.parameters()[w].mutable_value().fill(0.0);
        m.net.parameters()[b].mutable_value().fill(0.0);
    }
    return m;
}

void fit(ClassifierModel& m, const data::LabeledDataset& d, const AugmentationSet& aug, const TrainConfig& cfg) {
    validate(cfg);
    if (d.empty()) throw ArgumentError("training set is empty");
    if (d.input_shape() != m.input_shape())
        throw ArgumentError("dataset inputs " + shape_to_string(d.input_shape()) + " do not match model inputs " +
                            shape_to_string(m.input_shape()));
    if (d.num_classes() != m.num_classes) throw ArgumentError("dataset and model disagree on the class count");
    aug.check_input_shape(d.input_shape());
    m.augmentations = aug;
    if (cfg.epochs == 0) return;

    m.net.set_requires_grad(true);
    optim::Optimizer opt(cfg.optimizer, m.net.parameters());
    std::vector<std::size_t> order(d.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(derive_seed(cfg.seed, "shuffle"));
    // A trailing single item would give BN a zero-variance batch.
    const std::size_t min_batch = has_bn(m.net) ? 2 : 1;
    std::vector<ag::BatchStats> stats;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle.engine());
        for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
            if (end - begin < min_batch) continue;
            const std::span<const std::size_t> idx(order.data() + begin, end - begin);
            std::vector<int> labels;
            for (std::size_t i : idx) labels.push_back(d.label(i));
            ag::Var x = ag::constant(d.batch(idx));
            if (cfg.augment) x = aug.apply_random(x, mix_seed(derive_seed(cfg.seed, "augment"), static_cast<std::uint64_t>(epoch) * 1000003u + begin));
            opt.zero_grad();
            ag::Var logits = m.net.forward(x, {.training = true, .batch_stats = &stats});
            ag::Var loss = ag::scale(ag::cross_entropy_sum(logits, labels), 1.0 / static_cast<real>(idx.size()));
            if (!std::isfinite(loss.item()))
                throw TrainingError("classifier training diverged at epoch " + std::to_string(epoch), epoch,
                                    {{"ce", loss.item()}});
            ag::backward(loss);
            opt.step();
            m.net.update_running_stats(stats, static_cast<int>(idx.size()));
        }
    }
}

ClassifierModel train_classifier(const data::LabeledDataset& d, const AugmentationSet& aug, const TrainConfig& cfg,
                                 const std::optional<nn::ArchSpec>& arch) {
    if (d.empty()) throw ArgumentError("training set is empty");
    validate(cfg);
    ClassifierModel m = init_classifier(arch ? *arch : default_arch(d.input_shape(), d.num_classes()), d.num_classes(),
                                        derive_seed(cfg.seed, "init"));
    m.seed = cfg.seed;
    fit(m, d, aug, cfg);
    return m;
}

ClassifierModel train_oracle(const ClassifierModel& w_o, const data::LabeledDataset& d_r, const AugmentationSet& aug,
                             const TrainConfig& cfg) {
    ClassifierModel m = w_o;
    m.seed = cfg.seed;
    fit(m, d_r, aug, cfg);
    return m;
}

Tensor logits_batch(const ClassifierModel& m, const Tensor& batch) {
    return chunked(m, batch, m.num_classes, [&](const ag::Var& x) { return m.net.forward(x).value(); });
}

Tensor predict_proba_batch(const ClassifierModel& m, const Tensor& batch) {
    return chunked(m, batch, m.num_classes, [&](const ag::Var& x) { return ag::softmax(m.net.forward(x)).value(); });
}

Tensor extract_features_batch(const ClassifierModel& m, const Tensor& batch) {
    const std::optional<Shape> fs = m.net.feature_shape();
    if (!fs) throw CapabilityError("architecture '" + m.net.arch().name + "' has no feature tap");
    return chunked(m, batch, static_cast<int>(shape_size(*fs)), [&](const ag::Var& x) {
        ag::Var features;
        m.net.forward(x, {.features = &features});
        return features.value();
    });
}

std::vector<int> predict_labels(const ClassifierModel& m, const Tensor& batch) {
    const Tensor p = logits_batch(m, batch);
    std::vector<int> out;
    for (int i = 0; i < p.dim(0); ++i) out.push_back(static_cast<int>(argmax(p.row(static_cast<std::size_t>(i)))));
    return out;
}

std::vector<real> predict_proba(const ClassifierModel& m, const Tensor& x) {
    return predict_proba_batch(m, single_batch(m, x)).values();
}

std::vector<real> extract_features(const ClassifierModel& m, const Tensor& x) {
    return extract_features_batch(m, single_batch(m, x)).values();
}

const std::vector<nn::BnLayerState>& bn_statistics(const ClassifierModel& m) {
    if (m.net.bn_layers().empty())
        throw CapabilityError("model '" + m.net.arch().name + "' has no batch-norm layers; inversion needs their statistics");
    return m.net.bn_layers();
}

real entropy(std::span<const real> p) {
    real total = 0.0, h = 0.0;
    for (real v : p) {
        if (!(v >= 0.0)) throw ArgumentError("entropy: negative or NaN probability");
        total += v;
        if (v > 0.0) h -= v * std::log(v);
    }
    if (std::abs(total - 1.0) > 1e-5) throw ArgumentError("entropy: probabilities sum to " + std::to_string(total));
    return h;
}

std::size_t argmax(std::span<const real> p) {
    return static_cast<std::size_t>(std::distance(p.begin(), std::max_element(p.begin(), p.end())));
}

void round_to_f32(nn::Network& net) {
    for (ag::Var& p : net.parameters())
        for (real& v : p.mutable_value().span()) v = io::to_f32(v);
    for (nn::BnLayerState& s : net.bn_layers()) {
        for (real& v : s.running_mean.span()) v = io::to_f32(v);
        for (real& v : s.running_var.span()) v = io::to_f32(v);
    }
}

void write_bn_stats(const nn::Network& net, const fs::path& file) {
    json bn = json::array();
    for (const nn::BnLayerState& s : net.bn_layers()) {
        std::vector<float> mean(s.running_mean.values().begin(), s.running_mean.values().end());
        std::vector<float> var(s.running_var.values().begin(), s.running_var.values().end());
        bn.push_back({{"running_mean", mean}, {"running_var", var}});
    }
    io::write_text(file, bn.dump() + "\n");
}

void read_bn_stats(nn::Network& net, const fs::path& file) {
    const json bn = json::parse(io::read_text(file));
    auto& layers = net.bn_layers();
    if (bn.size() != layers.size()) throw ArgumentError(file.string() + ": layer count does not match the architecture");
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto mean = bn[l].at("running_mean").get<std::vector<real>>();
        const auto var = bn[l].at("running_var").get<std::vector<real>>();
        if (mean.size() != layers[l].running_mean.size() || var.size() != layers[l].running_var.size())
            throw ArgumentError(file.string() + ": channel width mismatch at layer " + std::to_string(l));
        layers[l].running_mean = Tensor(layers[l].running_mean.shape(), mean);
        layers[l].running_var = Tensor(layers[l].running_var.shape(), var);
    }
}

void save_classifier(const ClassifierModel& m, const fs::path& dir) {
    fs::create_directories(dir);
    const json arch{{"arch", m.net.arch()}, {"num_classes", m.num_classes}, {"augmentations", m.augmentations}, {"seed", m.seed}};
    io::write_text(dir / "arch.json", arch.dump(2) + "\n");
    io::write_f32(dir / "weights.bin", m.net.flat_parameters());
    write_bn_stats(m.net, dir / "bn_stats.json");
}

ClassifierModel load_classifier(const fs::path& dir) {
    for (const char* name : {"arch.json", "weights.bin", "bn_stats.json"})
        if (!fs::exists(dir / name)) throw ArgumentError("classifier checkpoint is missing " + (dir / name).string());
    const json arch = json::parse(io::read_text(dir / "arch.json"));
    ClassifierModel m = init_classifier(arch.at("arch").get<nn::ArchSpec>(), arch.at("num_classes").get<int>(),
                                        arch.value("seed", std::uint64_t{0}));
    m.seed = arch.value("seed", std::uint64_t{0});
    m.augmentations = arch.at("augmentations").get<AugmentationSet>();
    m.net.set_flat_parameters(io::read_f32(dir / "weights.bin"));
    read_bn_stats(m.net, dir / "bn_stats.json");
    return m;
}

std::string fingerprint(const nn::Network& net) {
    std::string bytes;
    const auto append = [&](std::span<const real> values) {
        bytes.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(real));
    };
    for (const ag::Var& p : net.parameters()) append(p.value().span());
    for (const nn::BnLayerState& s : net.bn_layers()) {
        append(s.running_mean.span());
        append(s.running_var.span());
    }
    return io::sha256_text(bytes);
}

} // namespace unlearn::model
