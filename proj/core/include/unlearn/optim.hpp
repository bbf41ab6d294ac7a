#pragma once

#include "unlearn/autograd.hpp"

#include <nlohmann/json_fwd.hpp>

#include <string>
#include <vector>

namespace unlearn::optim {

struct OptimizerConfig {
    std::string kind = "sgd";  // "sgd" | "adam"
    real lr = 0.01;
    real momentum = 0.9;       // sgd only
    real beta1 = 0.9;          // adam only
    real beta2 = 0.999;
    real weight_decay = 0.0;   // L2 term added to the gradient
    real eps = 1e-8;
};

void to_json(nlohmann::json& j, const OptimizerConfig& c);
void from_json(const nlohmann::json& j, OptimizerConfig& c);
// Throws ArgumentError unless lr > 0 and the kind is known.
void validate(const OptimizerConfig& c);

// Applies updates to a fixed list of parameters. Steps skip parameters whose
// gradient was never allocated.
class Optimizer {
public:
    Optimizer(OptimizerConfig config, std::vector<ag::Var> params);

    void zero_grad();
    void step();
    const OptimizerConfig& config() const { return config_; }

private:
    OptimizerConfig config_;
    std::vector<ag::Var> params_;
    std::vector<Tensor> first_;
    std::vector<Tensor> second_;
    long steps_ = 0;
};

} // namespace unlearn::optim
