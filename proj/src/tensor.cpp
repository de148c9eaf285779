#include "meltr/tensor.hpp"

#include <cmath>
#include <sstream>

namespace meltr {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

bool all_finite(std::span<const double> v) {
    for (double x : v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
    for (int64_t d : shape_) {
        if (d <= 0) throw ShapeError("tensor: dimensions must be positive, got " + shape_str(shape_));
    }
    if (shape_numel(shape_) != static_cast<int64_t>(values.size())) {
        throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match " +
                         std::to_string(values.size()) + " values");
    }
    if (!all_finite(values)) throw NonFiniteError("tensor: non-finite input values");
    values_ = std::make_shared<const std::vector<double>>(std::move(values));
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double v) {
    std::vector<double> vals(static_cast<size_t>(shape_numel(shape)), v);
    return Tensor(std::move(shape), std::move(vals));
}

int64_t Tensor::size() const { return values_ ? static_cast<int64_t>(values_->size()) : 0; }

std::span<const double> Tensor::values() const {
    if (!values_) throw Error("tensor: undefined");
    return {values_->data(), values_->size()};
}

double Tensor::value() const {
    if (size() != 1) throw ShapeError("tensor: value() requires one element, shape is " + shape_str(shape_));
    return (*values_)[0];
}

Tensor Tensor::detach() const {
    Tensor t;
    t.shape_ = shape_;
    t.values_ = values_;
    return t;
}

Tensor Tensor::with_value_at(int64_t i, double v) const {
    std::vector<double> vals(values().begin(), values().end());
    vals[static_cast<size_t>(i)] = v;
    return Tensor(shape_, std::move(vals));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
    return m;
}

double max_rel_err(const Tensor& got, const Tensor& want, double floor) {
    if (got.shape() != want.shape()) throw ShapeError("max_rel_err: shape mismatch");
    double m = 0.0;
    for (int64_t i = 0; i < got.size(); ++i) {
        double denom = std::max(floor, std::abs(want.at(i)));
        m = std::max(m, std::abs(got.at(i) - want.at(i)) / denom);
    }
    return m;
}

}  // namespace meltr
