#include "unlearn/relearn.hpp"

#include "unlearn/binary_io.hpp"
#include "unlearn/errors.hpp"
#include "unlearn/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace unlearn::relearn {

using nlohmann::json;

void to_json(json& j, const RelearnConfig& c) {
    j = {{"optimizer", c.optimizer}, {"epochs", c.epochs}, {"batch_size", c.batch_size}, {"seed", c.seed}, {"augment", c.augment}};
}

void from_json(const json& j, RelearnConfig& c) {
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

void validate(const RelearnConfig& c) {
    optim::validate(c.optimizer);
    if (c.epochs < 0) throw ArgumentError("epochs must be >= 0");
    if (c.batch_size < 1) throw ArgumentError("batch_size must be >= 1");
}

RelearnResult unlearn(const model::ClassifierModel& w_o, const filtration::SoftLabeledDataset& d,
                      const model::AugmentationSet& aug, const RelearnConfig& cfg) {
    validate(cfg);
    if (d.empty()) throw ArgumentError("unlearning set is empty");
    if (d.input_shape() != w_o.input_shape()) throw ArgumentError("unlearning inputs do not match the model");
    if (d.num_classes() != w_o.num_classes) throw ArgumentError("unlearning set and model disagree on the class count");
    aug.check_input_shape(d.input_shape());

    RelearnResult out{w_o, {}};
    model::ClassifierModel& m = out.model;
    if (cfg.epochs == 0) return out;
    m.net.set_requires_grad(true);
    optim::Optimizer opt(cfg.optimizer, m.net.parameters());
    std::vector<std::size_t> order(d.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(derive_seed(cfg.seed, "shuffle"));
    const std::size_t min_batch = m.net.bn_layers().empty() ? 1 : 2;
    std::vector<ag::BatchStats> stats;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle.engine());
        real total = 0;
        std::size_t seen = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
            if (end - begin < min_batch) continue;
            const std::span<const std::size_t> idx(order.data() + begin, end - begin);
            ag::Var x = ag::constant(d.batch(idx));
            if (cfg.augment)
                x = aug.apply_random(x, mix_seed(derive_seed(cfg.seed, "augment"), static_cast<std::uint64_t>(epoch) * 1000003u + begin));
            opt.zero_grad();
            ag::Var logits = m.net.forward(x, {.training = true, .batch_stats = &stats});
            ag::Var loss = ag::soft_cross_entropy_mean(logits, d.soft_labels(idx));
            if (!std::isfinite(loss.item()))
                throw TrainingError("relearning diverged at epoch " + std::to_string(epoch), epoch, {{"soft_ce", loss.item()}});
            ag::backward(loss);
            opt.step();
            m.net.update_running_stats(stats, static_cast<int>(idx.size()));
            total += loss.item() * static_cast<real>(idx.size());
            seen += idx.size();
        }
        out.log.push_back({epoch, seen ? total / static_cast<real>(seen) : 0.0});
    }
    return out;
}

void write_relearn_log(const std::vector<EpochLog>& log, const std::filesystem::path& file) {
    std::ostringstream out;
    out.precision(10);
    out << "epoch,loss\n";
    for (const EpochLog& e : log) out << e.epoch << ',' << e.loss << '\n';
    io::write_text(file, out.str());
}

} // namespace unlearn::relearn
