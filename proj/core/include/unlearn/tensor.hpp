#pragma once

#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace unlearn {

// All numerics run in double precision; checkpoints are stored as float32.
using real = double;

using Shape = std::vector<int>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t acc, int d) { return acc * static_cast<std::size_t>(d); });
}

std::string shape_to_string(const Shape& shape);

// Dense row-major tensor. Value type: copies are deep.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, real fill = 0.0);
    Tensor(Shape shape, std::vector<real> data);

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    real* data() { return data_.data(); }
    const real* data() const { return data_.data(); }
    std::span<real> span() { return data_; }
    std::span<const real> span() const { return data_; }
    const std::vector<real>& values() const { return data_; }

    real& operator[](std::size_t i) { return data_[i]; }
    real operator[](std::size_t i) const { return data_[i]; }

    // Row i of the leading dimension.
    std::span<real> row(std::size_t i);
    std::span<const real> row(std::size_t i) const;
    std::size_t row_size() const { return shape_.empty() || shape_[0] == 0 ? 0 : data_.size() / static_cast<std::size_t>(shape_[0]); }

    Tensor reshaped(Shape shape) const;
    void fill(real v);

    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    std::vector<real> data_;
};

// Stacks equally shaped tensors along a new leading dimension.
Tensor stack(std::span<const Tensor> items);

} // namespace unlearn
