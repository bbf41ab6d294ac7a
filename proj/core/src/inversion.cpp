#include "unlearn/inversion.hpp"

#include "unlearn/binary_io.hpp"
#include "unlearn/errors.hpp"
#include "unlearn/rng.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <map>

namespace unlearn::inversion {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------
nn::ArchSpec default_generator_arch(const Shape& output_shape, int input_width) {
    const auto layer = [](std::string kind, int out = 0, int kernel = 0, int stride = 1, int pad = 0) {
        nn::LayerSpec s;
        s.kind = std::move(kind);
        s.out = out;
        s.kernel = kernel;
        s.stride = stride;
        s.pad = pad;
        return s;
    };
    nn::ArchSpec a;
    a.input_shape = {input_width};
    if (output_shape.size() == 1) {
        a.name = "generator-mlp";
        a.layers = {layer("linear", 64), layer("bn"), layer("relu"), layer("linear", 64),
                    layer("bn"),         layer("relu"), layer("linear", output_shape[0])};
        return a;
    }
    if (output_shape.size() != 3 || output_shape[1] % 4 || output_shape[2] % 4)
        throw ArgumentError("no default generator for output shape " + shape_to_string(output_shape));
    const int h = output_shape[1] / 4, w = output_shape[2] / 4;
    a.name = "generator-deconv";
    nn::LayerSpec reshape = layer("reshape");
    reshape.shape = {64, h, w};
    a.layers = {layer("linear", 64 * h * w),     layer("bn"), layer("relu"), reshape,
                layer("convt", 32, 4, 2, 1),     layer("bn"), layer("relu"),
                layer("convt", 16, 4, 2, 1),     layer("bn"), layer("relu"),
                layer("conv", output_shape[0], 3, 1, 1), layer("sigmoid")};
    return a;
}

ConditionalGenerator::ConditionalGenerator(const Shape& output_shape, int num_classes, int noise_dim, std::uint64_t seed,
                                           int embed_dim)
    : output_shape_(output_shape), num_classes_(num_classes), noise_dim_(noise_dim), embed_dim_(embed_dim), seed_(seed) {
    if (num_classes < 1 || noise_dim < 1 || embed_dim < 1) throw ArgumentError("generator dimensions must be positive");
    body_ = nn::Network(default_generator_arch(output_shape, noise_dim + embed_dim), derive_seed(seed, "body"));
    if (body_.output_shape() != output_shape) throw ArgumentError("generator body does not produce " + shape_to_string(output_shape));
    Rng rng(derive_seed(seed, "embedding"));
    Tensor table(Shape{num_classes, embed_dim});
    for (std::size_t i = 0; i < table.size(); ++i) table[i] = rng.normal();
    embedding_ = ag::Var(std::move(table), true);
}

ConditionalGenerator::ConditionalGenerator(const ConditionalGenerator& other)
    : body_(other.body_),
      embedding_(other.embedding_.defined() ? ag::Var(other.embedding_.value(), other.embedding_.requires_grad()) : ag::Var()),
      output_shape_(other.output_shape_),
      num_classes_(other.num_classes_),
      noise_dim_(other.noise_dim_),
      embed_dim_(other.embed_dim_),
      seed_(other.seed_) {}

ConditionalGenerator& ConditionalGenerator::operator=(const ConditionalGenerator& other) {
    if (this != &other) {
        ConditionalGenerator copy(other);
        *this = std::move(copy);
    }
    return *this;
}

ag::Var ConditionalGenerator::forward(const Tensor& z, std::span<const int> labels, bool training,
                                      std::vector<ag::BatchStats>* stats) const {
    if (z.rank() != 2 || z.dim(1) != noise_dim_) throw ArgumentError("noise must be [M, " + std::to_string(noise_dim_) + "]");
    if (static_cast<std::size_t>(z.dim(0)) != labels.size()) throw ArgumentError("noise and label counts differ");
    for (int y : labels)
        if (y < 0 || y >= num_classes_) throw ArgumentError("conditioning label out of range");
    ag::Var input = ag::concat_cols(ag::constant(z), ag::embedding(embedding_, labels));
    return body_.forward(input, {.training = training, .batch_stats = stats});
}

Tensor ConditionalGenerator::generate(const Tensor& z, std::span<const int> labels) const {
    ag::NoGradGuard guard;
    return forward(z, labels).value();
}

std::vector<ag::Var> ConditionalGenerator::parameters() const {
    std::vector<ag::Var> out = body_.parameters();
    out.push_back(embedding_);
    return out;
}

std::vector<real> ConditionalGenerator::flat_parameters() const {
    std::vector<real> flat = body_.flat_parameters();
    flat.insert(flat.end(), embedding_.value().values().begin(), embedding_.value().values().end());
    return flat;
}

void ConditionalGenerator::set_flat_parameters(std::span<const real> flat) {
    const std::size_t body = body_.parameter_count();
    if (flat.size() != body + embedding_.value().size())
        throw ArgumentError("generator parameter vector has " + std::to_string(flat.size()) + " entries, expected " +
                            std::to_string(body + embedding_.value().size()));
    body_.set_flat_parameters(flat.first(body));
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(body), flat.end(), embedding_.mutable_value().data());
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------
void to_json(json& j, const LossWeights& w) {
    j = {{"bn", w.bn}, {"ent", w.ent}, {"aug", w.aug}, {"div", w.div}, {"tv", w.tv}};
}

void from_json(const json& j, LossWeights& w) {
    w.bn = j.value("bn", w.bn);
    w.ent = j.value("ent", w.ent);
    w.aug = j.value("aug", w.aug);
    w.div = j.value("div", w.div);
    w.tv = j.value("tv", w.tv);
}

void to_json(json& j, const InversionConfig& c) {
    j = {{"weights", c.weights},       {"optimizer", c.optimizer}, {"steps", c.steps},
         {"batch_size", c.batch_size}, {"noise_dim", c.noise_dim}, {"seed", c.seed},
         {"feature_tap", c.feature_tap}, {"reduction", c.reduction}};
}

void from_json(const json& j, InversionConfig& c) {
    if (j.contains("weights")) {
        LossWeights w = c.weights;
        from_json(j.at("weights"), w);
        c.weights = w;
    }
    if (j.contains("optimizer")) {
        optim::OptimizerConfig o = c.optimizer;
        optim::from_json(j.at("optimizer"), o);
        c.optimizer = o;
    }
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.noise_dim = j.value("noise_dim", c.noise_dim);
    c.seed = j.value("seed", c.seed);
    c.feature_tap = j.value("feature_tap", c.feature_tap);
    c.reduction = j.value("reduction", c.reduction);
}

void validate(const InversionConfig& c) {
    const LossWeights& w = c.weights;
    for (real v : {w.bn, w.ent, w.aug, w.div, w.tv})
        if (!(v >= 0)) throw ArgumentError("loss weights must be >= 0");
    optim::validate(c.optimizer);
    if (c.batch_size < 2) throw ArgumentError("inversion batch_size must be >= 2 (diversity needs pairs)");
    if (c.steps < 0) throw ArgumentError("inversion steps must be >= 0");
    if (c.noise_dim < 1) throw ArgumentError("noise_dim must be >= 1");
    if (c.feature_tap != "classifier" && c.feature_tap != "input")
        throw ArgumentError("feature_tap must be 'classifier' or 'input'");
    if (c.reduction != "mean" && c.reduction != "sum") throw ArgumentError("reduction must be 'mean' or 'sum'");
}

// ---------------------------------------------------------------------------
// Terms
// ---------------------------------------------------------------------------
namespace {

std::map<int, std::vector<int>> group_rows(std::span<const int> labels) {
    std::map<int, std::vector<int>> groups;
    for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(static_cast<int>(i));
    return groups;
}

Tensor gather(const Tensor& t, const std::vector<int>& rows) {
    Shape shape = t.shape();
    shape[0] = static_cast<int>(rows.size());
    Tensor out(shape);
    const std::size_t stride = t.row_size();
    for (std::size_t r = 0; r < rows.size(); ++r)
        std::copy_n(t.data() + static_cast<std::size_t>(rows[r]) * stride, stride, out.data() + r * stride);
    return out;
}

ag::Var flatten_rows(const ag::Var& x) {
    return ag::reshape(x, Shape{x.dim(0), static_cast<int>(x.value().row_size())});
}

} // namespace

ag::Var augmentation_term(const model::ClassifierModel& m, const ag::Var& x, const ag::Var& probs,
                          const model::AugmentationSet& aug, std::uint64_t seed) {
    std::vector<ag::Var> terms;
    for (std::size_t k = 0; k < aug.size(); ++k) {
        ag::Var moved = ag::softmax(m.net.forward(aug.apply(x, k, mix_seed(seed, k))));
        terms.push_back(ag::sum(ag::square(ag::sub(probs, moved))));
    }
    return ag::add_n(terms);
}

ag::Var diversity_term(const Tensor& noise, const ag::Var& features, std::span<const int> labels, bool normalized) {
    if (static_cast<std::size_t>(noise.dim(0)) != labels.size() || static_cast<std::size_t>(features.dim(0)) != labels.size())
        throw ArgumentError("diversity: noise, features and labels must have the same row count");
    std::vector<ag::Var> terms;
    for (const auto& [label, rows] : group_rows(labels)) {
        if (rows.size() < 2) {
            terms.push_back(ag::constant(Tensor(Shape{1}, 1.0)));
            continue;
        }
        const real n = static_cast<real>(rows.size());
        const real scale = normalized ? 1.0 / (n * (n - 1) * noise.dim(1) * static_cast<real>(features.value().row_size())) : 1.0;
        terms.push_back(ag::diversity_group(gather(noise, rows), ag::gather_rows(features, rows), scale));
    }
    return ag::add_n(terms);
}

ag::Var bn_term(const std::vector<nn::BnTap>& taps, const std::vector<nn::BnLayerState>& stats) {
    if (taps.size() != stats.size()) throw ArgumentError("bn term: one tap per BN layer expected");
    std::vector<ag::Var> terms;
    for (std::size_t l = 0; l < taps.size(); ++l) {
        terms.push_back(ag::sum(ag::square(ag::sub(taps[l].mean, ag::constant(stats[l].running_mean)))));
        terms.push_back(ag::sum(ag::square(ag::sub(taps[l].var, ag::constant(stats[l].running_var)))));
    }
    return ag::add_n(terms);
}

CappedValue entropy_loss(const Tensor& probs, std::span<const int> labels) {
    if (probs.rank() != 2 || static_cast<std::size_t>(probs.dim(0)) != labels.size() || labels.empty())
        throw ArgumentError("entropy_loss: probs must be [M, K] with M = |labels| >= 1");
    CappedValue out;
    const int k = probs.dim(1);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= k) throw ArgumentError("entropy_loss: label out of range");
        const real p = probs[i * static_cast<std::size_t>(k) + static_cast<std::size_t>(labels[i])];
        if (!(p > 0.0)) {
            out.capped = true;
            continue;
        }
        out.value -= std::log(p);
    }
    if (out.capped || out.value > kEntropyCap) {
        out.value = kEntropyCap;
        out.capped = true;
    }
    return out;
}

real augmentation_loss(const model::ClassifierModel& m, const Tensor& batch, const model::AugmentationSet& aug,
                       std::uint64_t seed) {
    ag::NoGradGuard guard;
    const ag::Var x = ag::constant(batch);
    return augmentation_term(m, x, ag::softmax(m.net.forward(x)), aug, seed).item();
}

real diversity_loss(const Tensor& noise, const Tensor& features, std::span<const int> labels) {
    ag::NoGradGuard guard;
    return diversity_term(noise, ag::constant(features), labels).item();
}

real bn_loss(const model::ClassifierModel& m, const Tensor& batch) {
    const auto& stats = model::bn_statistics(m);
    if (batch.rank() < 1 || batch.dim(0) < 2) throw ArgumentError("bn_loss needs a batch of at least two inputs");
    ag::NoGradGuard guard;
    std::vector<nn::BnTap> taps;
    m.net.forward(ag::constant(batch), {.bn_taps = &taps});
    return bn_term(taps, stats).item();
}

real tv_loss(const Tensor& batch) {
    ag::NoGradGuard guard;
    return ag::total_variation(ag::constant(batch)).item();
}

ag::Var inversion_objective(const ConditionalGenerator& g, const model::ClassifierModel& frozen,
                            const model::AugmentationSet& aug, const ObjectiveOptions& opts, const Tensor& z,
                            std::span<const int> labels, std::uint64_t aug_seed, LossBreakdown* out,
                            std::vector<ag::BatchStats>* gen_stats) {
    const LossWeights& w = opts.weights;
    const ag::Var x = g.forward(z, labels, true, gen_stats);
    std::vector<nn::BnTap> taps;
    ag::Var features;
    const bool has_bn = !frozen.net.bn_layers().empty();
    if (w.bn > 0 && !has_bn) model::bn_statistics(frozen);  // throws CapabilityError
    const bool classifier_tap = opts.feature_tap == "classifier";
    const ag::Var logits = frozen.net.forward(
        x, {.bn_taps = has_bn ? &taps : nullptr, .features = classifier_tap ? &features : nullptr});
    if (classifier_tap && !features.defined())
        throw CapabilityError("classifier has no feature tap for the diversity loss");
    if (!classifier_tap) features = flatten_rows(x);

    ag::Var ent = ag::cross_entropy_sum(logits, labels);
    const ag::Var bn = has_bn ? bn_term(taps, frozen.net.bn_layers()) : ag::constant(Tensor(Shape{1}, 0.0));
    ag::Var augv = augmentation_term(frozen, x, ag::softmax(logits), aug, aug_seed);
    const ag::Var div = diversity_term(z, features, labels, opts.reduction == "mean");
    ag::Var tv = ag::total_variation(x);
    if (opts.reduction == "mean") {
        const real m = static_cast<real>(x.dim(0));
        ent = ag::scale(ent, 1.0 / m);
        augv = ag::scale(augv, 1.0 / m);
        if (x.value().rank() == 4) {
            const real pairs = static_cast<real>(x.dim(1)) *
                               ((x.dim(2) - 1) * x.dim(3) + x.dim(2) * (x.dim(3) - 1));
            tv = ag::scale(tv, 1.0 / (m * std::max<real>(pairs, 1.0)));
        }
    }

    std::vector<ag::Var> weighted;
    for (const auto& [weight, term] : {std::pair{w.bn, bn}, {w.ent, ent}, {w.aug, augv}, {w.div, div}, {w.tv, tv}})
        if (weight > 0) weighted.push_back(ag::scale(term, weight));
    ag::Var total = ag::add_n(weighted);
    if (out) *out = {total.item(), bn.item(), ent.item(), augv.item(), div.item(), tv.item()};
    return total;
}

TrainedGenerator train_generator(const model::ClassifierModel& classifier, const model::AugmentationSet& aug,
                                 const InversionConfig& cfg) {
    validate(cfg);
    aug.check_input_shape(classifier.input_shape());
    model::ClassifierModel frozen = classifier;
    frozen.net.set_requires_grad(false);

    TrainedGenerator result{ConditionalGenerator(classifier.input_shape(), classifier.num_classes, cfg.noise_dim,
                                                 derive_seed(cfg.seed, "generator-init")),
                            {}};
    // Weight decay alone would still move the parameters.
    if (cfg.weights.all_zero() || cfg.steps == 0) return result;

    ConditionalGenerator& g = result.generator;
    optim::Optimizer opt(cfg.optimizer, g.parameters());
    Rng rng(derive_seed(cfg.seed, "inversion"));
    const int m = cfg.batch_size;
    std::vector<ag::BatchStats> gen_stats;
    for (long step = 0; step < cfg.steps; ++step) {
        Tensor z(Shape{m, cfg.noise_dim});
        for (std::size_t i = 0; i < z.size(); ++i) z[i] = rng.normal();
        std::vector<int> labels(static_cast<std::size_t>(m));
        for (int& y : labels) y = rng.uniform_int(classifier.num_classes);
        const std::uint64_t aug_seed = rng.next();

        opt.zero_grad();
        LossBreakdown losses;
        ag::Var total = inversion_objective(g, frozen, aug, {cfg.weights, cfg.feature_tap, cfg.reduction}, z, labels,
                                            aug_seed, &losses, &gen_stats);
        if (!std::isfinite(losses.total))
            throw TrainingError("generator training produced a non-finite loss at step " + std::to_string(step), step,
                                losses.as_map());
        ag::backward(total);
        opt.step();
        g.body().update_running_stats(gen_stats, m);
        result.log.push_back({step, losses});
    }
    return result;
}

void write_step_log(const std::vector<StepLog>& log, const fs::path& file) {
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    std::ofstream out(file);
    out << "step,total,bn,ent,aug,div,tv\n";
    out.precision(10);
    for (const StepLog& s : log) {
        const LossBreakdown& l = s.losses;
        out << s.step << ',' << l.total << ',' << l.bn << ',' << l.ent << ',' << l.aug << ',' << l.div << ',' << l.tv << '\n';
    }
}

void save_generator(const ConditionalGenerator& g, const fs::path& dir) {
    fs::create_directories(dir);
    const json arch{{"arch", g.body().arch()},          {"num_classes", g.num_classes()}, {"noise_dim", g.noise_dim()},
                    {"embed_dim", g.embed_dim()},       {"output_shape", g.output_shape()}, {"seed", g.seed()}};
    io::write_text(dir / "arch.json", arch.dump(2) + "\n");
    io::write_f32(dir / "weights.bin", g.flat_parameters());
    model::write_bn_stats(g.body(), dir / "bn_stats.json");
}

ConditionalGenerator load_generator(const fs::path& dir) {
    for (const char* name : {"arch.json", "weights.bin", "bn_stats.json"})
        if (!fs::exists(dir / name)) throw ArgumentError("generator checkpoint is missing " + (dir / name).string());
    const json arch = json::parse(io::read_text(dir / "arch.json"));
    ConditionalGenerator g(arch.at("output_shape").get<Shape>(), arch.at("num_classes").get<int>(),
                           arch.at("noise_dim").get<int>(), arch.value("seed", std::uint64_t{0}),
                           arch.at("embed_dim").get<int>());
    g.set_flat_parameters(io::read_f32(dir / "weights.bin"));
    model::read_bn_stats(g.body(), dir / "bn_stats.json");
    return g;
}

} // namespace unlearn::inversion
