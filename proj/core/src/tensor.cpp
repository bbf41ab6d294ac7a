#include "unlearn/tensor.hpp"

#include "unlearn/errors.hpp"

#include <algorithm>

namespace unlearn {

std::string shape_to_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

Tensor::Tensor(Shape shape, real fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<real> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
        throw ArgumentError("tensor data size " + std::to_string(data_.size()) +
                            " does not match shape " + shape_to_string(shape_));
}

std::span<real> Tensor::row(std::size_t i) {
    const std::size_t n = row_size();
    return std::span<real>(data_).subspan(i * n, n);
}

std::span<const real> Tensor::row(std::size_t i) const {
    const std::size_t n = row_size();
    return std::span<const real>(data_).subspan(i * n, n);
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size())
        throw ArgumentError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
    return Tensor(std::move(shape), data_);
}

void Tensor::fill(real v) { std::fill(data_.begin(), data_.end(), v); }

Tensor stack(std::span<const Tensor> items) {
    if (items.empty()) return Tensor(Shape{0});
    Shape shape{static_cast<int>(items.size())};
    const Shape& inner = items.front().shape();
    shape.insert(shape.end(), inner.begin(), inner.end());
    std::vector<real> data;
    data.reserve(shape_size(shape));
    for (const Tensor& t : items) {
        if (t.shape() != inner)
            throw ArgumentError("stack: shape mismatch " + shape_to_string(t.shape()) + " vs " +
                                shape_to_string(inner));
        data.insert(data.end(), t.values().begin(), t.values().end());
    }
    return Tensor(std::move(shape), std::move(data));
}

} // namespace unlearn
