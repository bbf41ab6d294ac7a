#include "unlearn/autograd.hpp"

#include "autograd_internal.hpp"
#include "unlearn/errors.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>
#include <utility>

namespace unlearn::ag {

namespace {
thread_local bool g_grad_enabled = true;
}

Tensor& Node::ensure_grad() {
    if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor(value.shape(), 0.0);
    return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

void Var::zero_grad() {
    if (node_ && !node_->grad.empty()) node_->grad.fill(0.0);
}

real Var::item() const {
    if (node_->value.size() != 1)
        throw ArgumentError("item() on tensor of shape " + shape_to_string(shape()));
    return node_->value[0];
}

Var Var::from_node(std::shared_ptr<Node> node) {
    Var v;
    v.node_ = std::move(node);
    return v;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var constant(Tensor value) { return Var(std::move(value), false); }

namespace detail {

bool needs_graph(std::initializer_list<const Var*> inputs) {
    if (!g_grad_enabled) return false;
    for (const Var* v : inputs)
        if (v->requires_grad()) return true;
    return false;
}

Var make_result(Tensor value, std::initializer_list<const Var*> parents, BackwardFn fn) {
    if (!needs_graph(parents)) return Var(std::move(value), false);
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    for (const Var* p : parents) node->parents.push_back(p->node());
    node->backward = std::move(fn);
    return Var::from_node(std::move(node));
}

Var make_result_n(Tensor value, std::span<const Var> parents, BackwardFn fn) {
    bool any = false;
    if (g_grad_enabled)
        for (const Var& p : parents) any = any || p.requires_grad();
    if (!any) return Var(std::move(value), false);
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    for (const Var& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(fn);
    return Var::from_node(std::move(node));
}

Tensor* grad_of(Node& self, std::size_t parent) {
    Node& p = *self.parents[parent];
    if (!p.requires_grad) return nullptr;
    return &p.ensure_grad();
}

} // namespace detail

using detail::grad_of;
using detail::make_result;

void backward(const Var& root) {
    if (!root.defined()) throw ArgumentError("backward on undefined Var");
    if (root.value().size() != 1) throw ArgumentError("backward root must be a scalar");
    if (!root.requires_grad()) return;

    // Iterative post-order DFS: parents are finished before their consumers.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward && !node->grad.empty()) node->backward(*node);
    }
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------
namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape())
        throw ArgumentError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                            shape_to_string(b.shape()));
}

template <typename F, typename D>
Var unary(const Var& x, F f, D dfdx) {
    Tensor out(x.shape());
    const Tensor& in = x.value();
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
    return make_result(std::move(out), {&x}, [dfdx](Node& self) {
        Tensor* gx = grad_of(self, 0);
        if (!gx) return;
        const Tensor& in = self.parents[0]->value;
        for (std::size_t i = 0; i < in.size(); ++i) (*gx)[i] += self.grad[i] * dfdx(in[i], self.value[i]);
    });
}

} // namespace

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    return make_result(std::move(out), {&a, &b}, [](Node& self) {
        for (std::size_t k = 0; k < 2; ++k)
            if (Tensor* g = grad_of(self, k))
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
    return make_result(std::move(out), {&a, &b}, [](Node& self) {
        if (Tensor* g = grad_of(self, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
        if (Tensor* g = grad_of(self, 1))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    return make_result(std::move(out), {&a, &b}, [](Node& self) {
        const Tensor& av = self.parents[0]->value;
        const Tensor& bv = self.parents[1]->value;
        if (Tensor* g = grad_of(self, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
        if (Tensor* g = grad_of(self, 1))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
    });
}

Var scale(const Var& a, real s) {
    return unary(a, [s](real v) { return s * v; }, [s](real, real) { return s; });
}

Var square(const Var& a) {
    return unary(a, [](real v) { return v * v; }, [](real v, real) { return 2.0 * v; });
}

Var exp(const Var& a) {
    return unary(a, [](real v) { return std::exp(v); }, [](real, real out) { return out; });
}

Var relu(const Var& x) {
    return unary(x, [](real v) { return v > 0 ? v : 0.0; }, [](real v, real) { return v > 0 ? 1.0 : 0.0; });
}

Var leaky_relu(const Var& x, real slope) {
    return unary(
        x, [slope](real v) { return v > 0 ? v : slope * v; },
        [slope](real v, real) { return v > 0 ? 1.0 : slope; });
}

Var tanh(const Var& x) {
    return unary(x, [](real v) { return std::tanh(v); }, [](real, real out) { return 1.0 - out * out; });
}

Var sigmoid(const Var& x) {
    return unary(
        x, [](real v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
        [](real, real out) { return out * (1.0 - out); });
}

Var sum(const Var& a) {
    real s = 0.0;
    for (real v : a.value().values()) s += v;
    return make_result(Tensor(Shape{1}, s), {&a}, [](Node& self) {
        if (Tensor* g = grad_of(self, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[0];
    });
}

Var mean(const Var& a) {
    const auto n = static_cast<real>(std::max<std::size_t>(a.value().size(), 1));
    return scale(sum(a), 1.0 / n);
}

Var add_n(std::span<const Var> terms) {
    real s = 0.0;
    for (const Var& t : terms) s += t.item();
    return detail::make_result_n(Tensor(Shape{1}, s), terms, [](Node& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k)
            if (Tensor* g = grad_of(self, k)) (*g)[0] += self.grad[0];
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------
Var reshape(const Var& x, Shape shape) {
    Tensor out = x.value().reshaped(std::move(shape));
    return make_result(std::move(out), {&x}, [](Node& self) {
        if (Tensor* g = grad_of(self, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    });
}

Var concat_cols(const Var& a, const Var& b) {
    if (a.value().rank() != 2 || b.value().rank() != 2 || a.dim(0) != b.dim(0))
        throw ArgumentError("concat_cols expects [N, p] and [N, q]");
    const int n = a.dim(0), p = a.dim(1), q = b.dim(1);
    Tensor out(Shape{n, p + q});
    for (int i = 0; i < n; ++i) {
        std::copy_n(a.value().data() + i * p, p, out.data() + i * (p + q));
        std::copy_n(b.value().data() + i * q, q, out.data() + i * (p + q) + p);
    }
    return make_result(std::move(out), {&a, &b}, [n, p, q](Node& self) {
        if (Tensor* g = grad_of(self, 0))
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < p; ++j) (*g)[i * p + j] += self.grad[i * (p + q) + j];
        if (Tensor* g = grad_of(self, 1))
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < q; ++j) (*g)[i * q + j] += self.grad[i * (p + q) + p + j];
    });
}

Var gather_rows(const Var& x, std::span<const int> rows) {
    const std::size_t stride = x.value().row_size();
    Shape shape = x.shape();
    shape[0] = static_cast<int>(rows.size());
    Tensor out(shape);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= x.dim(0)) throw ArgumentError("gather_rows: index out of range");
        std::copy_n(x.value().data() + rows[i] * stride, stride, out.data() + i * stride);
    }
    std::vector<int> idx(rows.begin(), rows.end());
    return make_result(std::move(out), {&x}, [idx = std::move(idx), stride](Node& self) {
        Tensor* g = grad_of(self, 0);
        if (!g) return;
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < stride; ++j) (*g)[idx[i] * stride + j] += self.grad[i * stride + j];
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ArgumentError("concat_rows of nothing");
    Shape shape = parts[0].shape();
    int rows = 0;
    for (const Var& p : parts) {
        Shape s = p.shape();
        s[0] = shape[0];
        if (s != shape) throw ArgumentError("concat_rows: trailing shape mismatch");
        rows += p.dim(0);
    }
    shape[0] = rows;
    Tensor out(shape);
    std::size_t offset = 0;
    std::vector<std::size_t> offsets;
    for (const Var& p : parts) {
        offsets.push_back(offset);
        std::copy(p.value().values().begin(), p.value().values().end(), out.data() + offset);
        offset += p.value().size();
    }
    return detail::make_result_n(std::move(out), parts, [offsets = std::move(offsets)](Node& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k)
            if (Tensor* g = grad_of(self, k))
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[offsets[k] + i];
    });
}

// ---------------------------------------------------------------------------
// Dense layers
// ---------------------------------------------------------------------------
Var linear(const Var& x, const Var& weight, const Var& bias) {
    if (x.value().rank() != 2 || weight.value().rank() != 2 || x.dim(1) != weight.dim(1) ||
        bias.value().size() != static_cast<std::size_t>(weight.dim(0)))
        throw ArgumentError("linear: incompatible shapes " + shape_to_string(x.shape()) + " x " +
                            shape_to_string(weight.shape()));
    const int n = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
    Tensor out(Shape{n, out_dim});
    ConstMat X(x.value().data(), n, in);
    ConstMat W(weight.value().data(), out_dim, in);
    MapMat Y(out.data(), n, out_dim);
    Y.noalias() = X * W.transpose();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < out_dim; ++j) Y(i, j) += bias.value()[j];
    return make_result(std::move(out), {&x, &weight, &bias}, [n, in, out_dim](Node& self) {
        ConstMat dY(self.grad.data(), n, out_dim);
        if (Tensor* gx = grad_of(self, 0)) {
            ConstMat W(self.parents[1]->value.data(), out_dim, in);
            MapMat(gx->data(), n, in).noalias() += dY * W;
        }
        if (Tensor* gw = grad_of(self, 1)) {
            ConstMat X(self.parents[0]->value.data(), n, in);
            MapMat(gw->data(), out_dim, in).noalias() += dY.transpose() * X;
        }
        if (Tensor* gb = grad_of(self, 2))
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < out_dim; ++j) (*gb)[j] += dY(i, j);
    });
}

Var embedding(const Var& table, std::span<const int> labels) {
    const int k = table.dim(0), e = table.dim(1);
    Tensor out(Shape{static_cast<int>(labels.size()), e});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= k) throw ArgumentError("embedding: label out of range");
        std::copy_n(table.value().data() + labels[i] * e, e, out.data() + i * e);
    }
    std::vector<int> lab(labels.begin(), labels.end());
    return make_result(std::move(out), {&table}, [lab = std::move(lab), e](Node& self) {
        Tensor* g = grad_of(self, 0);
        if (!g) return;
        for (std::size_t i = 0; i < lab.size(); ++i)
            for (int j = 0; j < e; ++j) (*g)[lab[i] * e + j] += self.grad[i * e + j];
    });
}

// ---------------------------------------------------------------------------
// Probabilities and losses
// ---------------------------------------------------------------------------
namespace {

void row_softmax(const real* in, real* out, int k) {
    const real mx = *std::max_element(in, in + k);
    real z = 0.0;
    for (int c = 0; c < k; ++c) {
        out[c] = std::exp(in[c] - mx);
        z += out[c];
    }
    for (int c = 0; c < k; ++c) out[c] /= z;
}

void require_matrix(const Var& logits, const char* op) {
    if (logits.value().rank() != 2) throw ArgumentError(std::string(op) + " expects [N, K] logits");
}

} // namespace

Var softmax(const Var& logits) {
    require_matrix(logits, "softmax");
    const int n = logits.dim(0), k = logits.dim(1);
    Tensor out(logits.shape());
    for (int i = 0; i < n; ++i) row_softmax(logits.value().data() + i * k, out.data() + i * k, k);
    return make_result(std::move(out), {&logits}, [n, k](Node& self) {
        Tensor* g = grad_of(self, 0);
        if (!g) return;
        for (int i = 0; i < n; ++i) {
            const real* p = self.value.data() + i * k;
            const real* dy = self.grad.data() + i * k;
            real dot = 0.0;
            for (int c = 0; c < k; ++c) dot += dy[c] * p[c];
            for (int c = 0; c < k; ++c) (*g)[i * k + c] += p[c] * (dy[c] - dot);
        }
    });
}

Var log_softmax(const Var& logits) {
    require_matrix(logits, "log_softmax");
    const int n = logits.dim(0), k = logits.dim(1);
    Tensor out(logits.shape());
    for (int i = 0; i < n; ++i) {
        const real* in = logits.value().data() + i * k;
        const real mx = *std::max_element(in, in + k);
        real z = 0.0;
        for (int c = 0; c < k; ++c) z += std::exp(in[c] - mx);
        const real lz = mx + std::log(z);
        for (int c = 0; c < k; ++c) out[i * k + c] = in[c] - lz;
    }
    return make_result(std::move(out), {&logits}, [n, k](Node& self) {
        Tensor* g = grad_of(self, 0);
        if (!g) return;
        for (int i = 0; i < n; ++i) {
            const real* dy = self.grad.data() + i * k;
            real total = 0.0;
            for (int c = 0; c < k; ++c) total += dy[c];
            for (int c = 0; c < k; ++c) (*g)[i * k + c] += dy[c] - std::exp(self.value[i * k + c]) * total;
        }
    });
}

Var cross_entropy_sum(const Var& logits, std::span<const int> labels) {
    require_matrix(logits, "cross_entropy_sum");
    const int n = logits.dim(0), k = logits.dim(1);
    if (static_cast<int>(labels.size()) != n) throw ArgumentError("cross_entropy_sum: label count mismatch");
    Tensor probs(logits.shape());
    real loss = 0.0;
    for (int i = 0; i < n; ++i) {
        if (labels[i] < 0 || labels[i] >= k) throw ArgumentError("cross_entropy_sum: label out of range");
        const real* in = logits.value().data() + i * k;
        const real mx = *std::max_element(in, in + k);
        real z = 0.0;
        for (int c = 0; c < k; ++c) z += std::exp(in[c] - mx);
        loss += mx + std::log(z) - in[labels[i]];
        row_softmax(in, probs.data() + i * k, k);
    }
    std::vector<int> lab(labels.begin(), labels.end());
    return make_result(Tensor(Shape{1}, loss), {&logits},
                       [probs = std::move(probs), lab = std::move(lab), n, k](Node& self) {
                           Tensor* g = grad_of(self, 0);
                           if (!g) return;
                           const real dy = self.grad[0];
                           for (int i = 0; i < n; ++i)
                               for (int c = 0; c < k; ++c)
                                   (*g)[i * k + c] += dy * (probs[i * k + c] - (c == lab[i] ? 1.0 : 0.0));
                       });
}

Var soft_cross_entropy_mean(const Var& logits, const Tensor& targets) {
    require_matrix(logits, "soft_cross_entropy_mean");
    if (targets.shape() != logits.shape()) throw ArgumentError("soft_cross_entropy_mean: target shape mismatch");
    const int n = logits.dim(0), k = logits.dim(1);
    Tensor probs(logits.shape());
    real loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const real* in = logits.value().data() + i * k;
        const real mx = *std::max_element(in, in + k);
        real z = 0.0;
        for (int c = 0; c < k; ++c) z += std::exp(in[c] - mx);
        const real lz = mx + std::log(z);
        for (int c = 0; c < k; ++c) loss -= targets[i * k + c] * (in[c] - lz);
        row_softmax(in, probs.data() + i * k, k);
    }
    const real inv_n = n > 0 ? 1.0 / n : 0.0;
    return make_result(Tensor(Shape{1}, loss * inv_n), {&logits},
                       [probs = std::move(probs), targets, n, k, inv_n](Node& self) {
                           Tensor* g = grad_of(self, 0);
                           if (!g) return;
                           const real dy = self.grad[0] * inv_n;
                           for (int i = 0; i < n; ++i) {
                               real mass = 0.0;
                               for (int c = 0; c < k; ++c) mass += targets[i * k + c];
                               for (int c = 0; c < k; ++c)
                                   (*g)[i * k + c] += dy * (probs[i * k + c] * mass - targets[i * k + c]);
                           }
                       });
}

// ---------------------------------------------------------------------------
// Diversity
// ---------------------------------------------------------------------------
Var diversity_group(const Tensor& noise, const Var& features, real scale) {
    const int n = features.dim(0);
    if (noise.rank() != 2 || noise.dim(0) != n) throw ArgumentError("diversity_group: noise/feature count mismatch");
    const int dz = noise.dim(1);
    const int d = static_cast<int>(features.value().row_size());
    // Squared noise distances are constants of the op.
    std::vector<real> zdist(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            real s = 0.0;
            for (int t = 0; t < dz; ++t) {
                const real diff = noise[i * dz + t] - noise[j * dz + t];
                s += diff * diff;
            }
            zdist[i * n + j] = zdist[j * n + i] = s;
        }
    const real* f = features.value().data();
    real exponent = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            real l1 = 0.0;
            for (int t = 0; t < d; ++t) l1 += std::abs(f[i * d + t] - f[j * d + t]);
            exponent += 2.0 * scale * zdist[i * n + j] * l1;
        }
    const real value = std::exp(-exponent);
    return make_result(Tensor(Shape{1}, value), {&features}, [zdist = std::move(zdist), n, d, scale](Node& self) {
        Tensor* g = grad_of(self, 0);
        if (!g) return;
        const real* f = self.parents[0]->value.data();
        // d exp(-S)/dS = -exp(-S); dS/df_i = sum_j 2 * zdist(i,j) * sign(f_i - f_j)
        const real coeff = -self.value[0] * self.grad[0];
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) {
                const real w = 2.0 * scale * zdist[i * n + j] * coeff;
                for (int t = 0; t < d; ++t) {
                    const real diff = f[i * d + t] - f[j * d + t];
                    const real s = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
                    (*g)[i * d + t] += w * s;
                    (*g)[j * d + t] -= w * s;
                }
            }
    });
}

} // namespace unlearn::ag
