#include "meltr/ops.hpp"

#include <cmath>

#include "graph_internal.hpp"

namespace meltr {

using detail::record;

Tensor add(const Tensor& a, const Tensor& b) { return record(OpKind::kAdd, {a, b}); }
Tensor sub(const Tensor& a, const Tensor& b) { return record(OpKind::kSub, {a, b}); }
Tensor mul(const Tensor& a, const Tensor& b) { return record(OpKind::kMul, {a, b}); }
Tensor neg(const Tensor& x) { return record(OpKind::kNeg, {x}); }
Tensor reciprocal(const Tensor& x) { return record(OpKind::kReciprocal, {x}); }

Tensor matmul(const Tensor& a, const Tensor& b) { return record(OpKind::kMatmul, {a, b}); }
Tensor transpose(const Tensor& x) { return record(OpKind::kTranspose, {x}); }

Tensor reshape(const Tensor& x, Shape shape) {
    return record(OpKind::kReshape, {x}, std::vector<int64_t>(shape.begin(), shape.end()));
}

Tensor broadcast(const Tensor& one, Shape shape) {
    return record(OpKind::kBroadcast, {one}, std::vector<int64_t>(shape.begin(), shape.end()));
}

Tensor sum(const Tensor& x) { return record(OpKind::kSum, {x}); }

Tensor mean(const Tensor& x) {
    return mul(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor abs(const Tensor& x) { return record(OpKind::kAbs, {x}); }
Tensor exp(const Tensor& x) { return record(OpKind::kExp, {x}); }
Tensor log(const Tensor& x) { return record(OpKind::kLog, {x}); }
Tensor erf(const Tensor& x) { return record(OpKind::kErf, {x}); }
Tensor gelu(const Tensor& x) { return record(OpKind::kGelu, {x}); }

Tensor softmax_lastdim(const Tensor& x) { return record(OpKind::kSoftmax, {x}); }

Tensor layer_norm_lastdim(const Tensor& x, double eps) {
    if (x.rank() < 1) throw ShapeError("layer_norm: requires rank >= 1");
    int64_t cols = x.dim(x.rank() - 1);
    int64_t rows = x.size() / cols;
    Tensor x2 = reshape(x, {rows, cols});
    Tensor avg = Tensor::full({cols, 1}, 1.0 / static_cast<double>(cols));
    Tensor row_ones = Tensor::ones({1, cols});
    Tensor mu = matmul(x2, avg);                              // (rows, 1)
    Tensor centered = sub(x2, matmul(mu, row_ones));          // (rows, cols)
    Tensor var = matmul(mul(centered, centered), avg);        // (rows, 1)
    // rsqrt(var + eps) = exp(-0.5 * log(var + eps)); var + eps > 0 always.
    Tensor inv_std = exp(mul(log(add(var, eps)), -0.5));
    Tensor normed = mul(centered, matmul(inv_std, row_ones));
    return reshape(normed, x.shape());
}

Tensor embed(const Tensor& table, const std::vector<int64_t>& ids) {
    if (ids.empty()) throw ShapeError("embed: empty index list");
    return record(OpKind::kEmbed, {table}, std::vector<int64_t>(ids));
}

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
    return record(OpKind::kConcat, {a, b}, {axis});
}

Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len) {
    return record(OpKind::kSlice, {x}, {axis, start, len});
}

Tensor add(const Tensor& a, double s) { return add(a, Tensor::full(a.shape(), s)); }
Tensor sub(const Tensor& a, double s) { return sub(a, Tensor::full(a.shape(), s)); }
Tensor sub(double s, const Tensor& a) { return sub(Tensor::full(a.shape(), s), a); }
Tensor mul(const Tensor& a, double s) { return mul(a, Tensor::full(a.shape(), s)); }

Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

}  // namespace meltr
