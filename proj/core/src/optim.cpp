#include "unlearn/optim.hpp"

#include "unlearn/errors.hpp"

#include <nlohmann/json.hpp>

#include <cmath>

namespace unlearn::optim {

void to_json(nlohmann::json& j, const OptimizerConfig& c) {
    j = {{"kind", c.kind}, {"lr", c.lr}, {"weight_decay", c.weight_decay}};
    if (c.kind == "adam") {
        j["betas"] = {c.beta1, c.beta2};
        j["eps"] = c.eps;
    } else {
        j["momentum"] = c.momentum;
    }
}

void from_json(const nlohmann::json& j, OptimizerConfig& c) {
    c.kind = j.value("kind", c.kind);
    c.lr = j.value("lr", c.lr);
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.eps = j.value("eps", c.eps);
    if (j.contains("betas")) {
        const auto& b = j.at("betas");
        c.beta1 = b.at(0).get<real>();
        c.beta2 = b.at(1).get<real>();
    }
}

void validate(const OptimizerConfig& c) {
    if (!(c.lr > 0)) throw ArgumentError("optimizer learning rate must be > 0");
    if (c.kind != "sgd" && c.kind != "adam") throw ArgumentError("unknown optimizer kind '" + c.kind + "'");
    if (c.weight_decay < 0) throw ArgumentError("weight decay must be >= 0");
}

Optimizer::Optimizer(OptimizerConfig config, std::vector<ag::Var> params)
    : config_(std::move(config)), params_(std::move(params)) {
    validate(config_);
    for (const ag::Var& p : params_) {
        first_.emplace_back(p.shape(), 0.0);
        if (config_.kind == "adam") second_.emplace_back(p.shape(), 0.0);
    }
}

void Optimizer::zero_grad() {
    for (ag::Var& p : params_) p.zero_grad();
}

void Optimizer::step() {
    ++steps_;
    const bool adam = config_.kind == "adam";
    const real bc1 = adam ? 1.0 - std::pow(config_.beta1, static_cast<real>(steps_)) : 1.0;
    const real bc2 = adam ? 1.0 - std::pow(config_.beta2, static_cast<real>(steps_)) : 1.0;
    for (std::size_t k = 0; k < params_.size(); ++k) {
        ag::Var& p = params_[k];
        const Tensor& g = p.grad();
        if (g.empty()) continue;
        Tensor& w = p.mutable_value();
        Tensor& m = first_[k];
        for (std::size_t i = 0; i < w.size(); ++i) {
            const real grad = g[i] + config_.weight_decay * w[i];
            if (adam) {
                Tensor& v = second_[k];
                m[i] = config_.beta1 * m[i] + (1 - config_.beta1) * grad;
                v[i] = config_.beta2 * v[i] + (1 - config_.beta2) * grad * grad;
                w[i] -= config_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.eps);
            } else {
                m[i] = steps_ == 1 ? grad : config_.momentum * m[i] + grad;
                w[i] -= config_.lr * m[i];
            }
        }
    }
}

} // namespace unlearn::optim
