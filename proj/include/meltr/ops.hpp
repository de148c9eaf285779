#pragma once

#include <vector>

#include "meltr/graph.hpp"
#include "meltr/tensor.hpp"

namespace meltr {

// Differentiable operations. An op records a node when any operand is attached
// to a graph; on purely detached operands it evaluates eagerly and returns a
// detached tensor. Mixing tensors from two different live graphs is an error.
// Every result is checked for NaN/Inf and a NonFiniteError is thrown instead of
// letting them propagate.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise, equal shapes
Tensor neg(const Tensor& x);
Tensor reciprocal(const Tensor& x);

Tensor matmul(const Tensor& a, const Tensor& b);  // (m,k) x (k,n)
Tensor transpose(const Tensor& x);                // 2-D
Tensor reshape(const Tensor& x, Shape shape);
// Fill `shape` from a one-element tensor (the only broadcasting form).
Tensor broadcast(const Tensor& one, Shape shape);

Tensor sum(const Tensor& x);   // -> scalar
Tensor mean(const Tensor& x);  // -> scalar

Tensor abs(const Tensor& x);   // subgradient 0 at the kink
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor erf(const Tensor& x);
Tensor gelu(const Tensor& x);  // exact: x * Phi(x)

Tensor softmax_lastdim(const Tensor& x);
// Normalize over the last axis: (x - mu) / sqrt(var + eps). Affine gain/bias,
// when wanted, are applied by the caller.
Tensor layer_norm_lastdim(const Tensor& x, double eps = 1e-5);

Tensor embed(const Tensor& table, const std::vector<int64_t>& ids);
Tensor concat(const Tensor& a, const Tensor& b, int axis);
Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len);

// Scalar conveniences (the scalar side is a constant, not differentiable).
Tensor add(const Tensor& a, double s);
Tensor sub(const Tensor& a, double s);
Tensor sub(double s, const Tensor& a);
Tensor mul(const Tensor& a, double s);

Tensor dot(const Tensor& a, const Tensor& b);  // sum(mul(a, b))

}  // namespace meltr
