#pragma once

#include "unlearn/tensor.hpp"

#include <array>
#include <functional>
#include <memory>
#include <span>
#include <vector>

// Minimal reverse-mode automatic differentiation over dense tensors.
//
// A Var is a shared handle to a graph node. Ops record a backward closure only
// when gradient recording is enabled and at least one input requires a
// gradient, so inference under NoGradGuard builds no graph and is reentrant.
namespace unlearn::ag {

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    Tensor& ensure_grad();
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);

    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    Tensor& ensure_grad() { return node_->ensure_grad(); }
    void zero_grad();

    const Shape& shape() const { return node_->value.shape(); }
    int dim(int i) const { return node_->value.dim(i); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool defined() const { return static_cast<bool>(node_); }
    real item() const;

    const std::shared_ptr<Node>& node() const { return node_; }
    static Var from_node(std::shared_ptr<Node> node);

private:
    std::shared_ptr<Node> node_;
};

// Seeds d(root)/d(root) = 1 and accumulates gradients into every reachable
// node that requires them. `root` must hold a single element.
void backward(const Var& root);

bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

Var constant(Tensor value);

// ---------------------------------------------------------------------------
// Elementwise and reductions
// ---------------------------------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, real s);
Var square(const Var& a);
Var exp(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
// Sum of scalar Vars; an empty list yields a constant zero.
Var add_n(std::span<const Var> terms);

Var relu(const Var& x);
Var leaky_relu(const Var& x, real slope);
Var tanh(const Var& x);
Var sigmoid(const Var& x);

Var reshape(const Var& x, Shape shape);
// Concatenates two [N, p] and [N, q] matrices into [N, p + q].
Var concat_cols(const Var& a, const Var& b);
Var gather_rows(const Var& x, std::span<const int> rows);
// Row-wise concatenation of equally shaped trailing dimensions.
Var concat_rows(std::span<const Var> parts);

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------
// x [N, in], weight [out, in], bias [out] -> [N, out]
Var linear(const Var& x, const Var& weight, const Var& bias);
// table [K, E], labels in [0, K) -> [N, E]
Var embedding(const Var& table, std::span<const int> labels);

struct Conv2dGeometry {
    int stride = 1;
    int pad = 0;
};
// x [N, C, H, W], weight [O, C, k, k], bias [O]
Var conv2d(const Var& x, const Var& weight, const Var& bias, Conv2dGeometry geom);
// x [N, Ci, H, W], weight [Ci, Co, k, k], bias [Co]; output (H-1)*s - 2p + k
Var conv_transpose2d(const Var& x, const Var& weight, const Var& bias, Conv2dGeometry geom);
// Non-overlapping max pooling with window = stride = `window`.
Var max_pool2d(const Var& x, int window);

// Per-channel mean over every axis except 1. x [N, C] or [N, C, H, W] -> [C]
Var channel_mean(const Var& x);
// Per-channel biased (1/m) variance over every axis except 1 -> [C]
Var channel_var(const Var& x);

// Batch-norm with batch statistics. When `stats` is non-null it receives the
// biased per-channel batch mean and variance used for normalization.
struct BatchStats {
    Tensor mean;
    Tensor var;
};
Var batch_norm_train(const Var& x, const Var& gamma, const Var& beta, real eps, BatchStats* stats);
// Batch-norm with fixed statistics.
Var batch_norm_eval(const Var& x, const Var& gamma, const Var& beta, const Tensor& mean,
                    const Tensor& var, real eps);

// ---------------------------------------------------------------------------
// Probabilities and losses
// ---------------------------------------------------------------------------
Var softmax(const Var& logits);
Var log_softmax(const Var& logits);
// Sum over rows of -log softmax(logits)[i, labels[i]].
Var cross_entropy_sum(const Var& logits, std::span<const int> labels);
// Mean over rows of -sum_c targets[i, c] * log softmax(logits)[i, c].
Var soft_cross_entropy_mean(const Var& logits, const Tensor& targets);

// ---------------------------------------------------------------------------
// Image-specific
// ---------------------------------------------------------------------------
// Sum over the batch and channels of squared differences between
// 4-neighbor pixels, each unordered pair counted once. Inputs of rank < 4
// (non-spatial) give a constant zero.
Var total_variation(const Var& x);

// Per-sample inverse affine map in pixel coordinates: output pixel (r, c)
// samples input at (a*c + b*r + tx, d*c + e*r + ty) with bilinear
// interpolation and zero fill outside the image.
using AffineMap = std::array<real, 6>;
Var warp_affine(const Var& x, std::span<const AffineMap> maps);

// exp(-scale * sum_{i != j} ||z_i - z_j||^2 * ||f_i - f_j||_1) over ordered
// pairs of one conditioning group. `noise` is constant [n, dz]; `features` [n, D].
Var diversity_group(const Tensor& noise, const Var& features, real scale = 1.0);

} // namespace unlearn::ag
