#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "meltr/errors.hpp"

namespace meltr {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
bool all_finite(std::span<const double> v);

namespace detail {
struct GraphState;
}

/// Dense double-precision tensor with value semantics. A tensor is either
/// detached (plain data) or attached to a computation graph via a node handle.
/// Values are immutable and shared between copies.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double v);
    static Tensor zeros(Shape shape);
    static Tensor ones(Shape shape);
    static Tensor full(Shape shape, double v);

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t size() const;
    bool defined() const { return values_ != nullptr; }

    std::span<const double> values() const;
    double at(int64_t i) const { return values()[static_cast<size_t>(i)]; }
    // Scalar readout; requires size() == 1.
    double value() const;

    bool attached() const { return node_ >= 0 && !graph_.expired(); }
    int64_t node() const { return node_; }
    Tensor detach() const;

    // Fresh tensor with one element replaced (detached). Used by the
    // finite-difference oracles.
    Tensor with_value_at(int64_t i, double v) const;

private:
    Shape shape_;
    std::shared_ptr<const std::vector<double>> values_;
    std::weak_ptr<detail::GraphState> graph_;
    int64_t node_ = -1;

    friend class Graph;
    friend struct TensorAccess;
};

double max_abs_diff(const Tensor& a, const Tensor& b);
double max_rel_err(const Tensor& got, const Tensor& want, double floor = 1e-8);

}  // namespace meltr
