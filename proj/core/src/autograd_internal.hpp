#pragma once

#include "unlearn/autograd.hpp"

#include <Eigen/Core>

#include <initializer_list>

namespace unlearn::ag {

using RowMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMat = Eigen::Map<const RowMat>;

namespace detail {

using BackwardFn = std::function<void(Node&)>;

bool needs_graph(std::initializer_list<const Var*> inputs);
Var make_result(Tensor value, std::initializer_list<const Var*> parents, BackwardFn fn);
Var make_result_n(Tensor value, std::span<const Var> parents, BackwardFn fn);
// Gradient buffer of parent `parent`, or nullptr if it does not need one.
Tensor* grad_of(Node& self, std::size_t parent);

} // namespace detail
} // namespace unlearn::ag
