#pragma once

#include "unlearn/autograd.hpp"
#include "unlearn/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace unlearn::testing {

struct GradCheckResult {
    double max_rel_error = 0.0;
    int checked = 0;
};

// Compares d(loss)/d(input) against central differences on `samples`
// coordinates per input (all coordinates when samples <= 0). The relative
// error of a coordinate is |a - n| / max(|a|, |n|, floor).
inline GradCheckResult grad_check(const std::function<ag::Var(std::vector<ag::Var>&)>& loss,
                                  std::vector<ag::Var> inputs, int samples = 0, std::uint64_t seed = 7,
                                  double h = 1e-5, double floor = 1e-6) {
    for (ag::Var& v : inputs) v.zero_grad();
    ag::backward(loss(inputs));
    std::vector<Tensor> analytic;
    for (const ag::Var& v : inputs) analytic.push_back(v.grad().empty() ? Tensor(v.shape(), 0.0) : v.grad());

    GradCheckResult out;
    Rng rng(seed);
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        Tensor& w = inputs[k].mutable_value();
        std::vector<std::size_t> coords;
        if (samples <= 0 || static_cast<std::size_t>(samples) >= w.size()) {
            for (std::size_t i = 0; i < w.size(); ++i) coords.push_back(i);
        } else {
            for (int s = 0; s < samples; ++s) coords.push_back(static_cast<std::size_t>(rng.uniform_int(static_cast<int>(w.size()))));
        }
        for (std::size_t i : coords) {
            const real saved = w[i];
            real plus, minus;
            {
                ag::NoGradGuard guard;
                w[i] = saved + h;
                plus = loss(inputs).item();
                w[i] = saved - h;
                minus = loss(inputs).item();
            }
            w[i] = saved;
            const double numeric = (plus - minus) / (2 * h);
            const double a = analytic[k][i];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
            out.max_rel_error = std::max(out.max_rel_error, rel);
            ++out.checked;
        }
    }
    return out;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * scale;
    return t;
}

} // namespace unlearn::testing
