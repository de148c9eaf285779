#include "meltr/graph.hpp"

#include <atomic>
#include <cmath>
#include <cstring>

#include "graph_internal.hpp"

namespace meltr {

const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::kLeaf: return "leaf";
        case OpKind::kConstant: return "constant";
        case OpKind::kAdd: return "add";
        case OpKind::kSub: return "sub";
        case OpKind::kMul: return "mul";
        case OpKind::kNeg: return "neg";
        case OpKind::kReciprocal: return "reciprocal";
        case OpKind::kMatmul: return "matmul";
        case OpKind::kTranspose: return "transpose";
        case OpKind::kReshape: return "reshape";
        case OpKind::kBroadcast: return "broadcast";
        case OpKind::kSum: return "sum";
        case OpKind::kAbs: return "abs";
        case OpKind::kExp: return "exp";
        case OpKind::kLog: return "log";
        case OpKind::kErf: return "erf";
        case OpKind::kGelu: return "gelu";
        case OpKind::kSoftmax: return "softmax";
        case OpKind::kEmbed: return "embed";
        case OpKind::kEmbedScatter: return "embed_scatter";
        case OpKind::kConcat: return "concat";
        case OpKind::kSlice: return "slice";
    }
    return "?";
}

namespace detail {
namespace {

[[noreturn]] void shape_fail(OpKind kind, const std::string& what) {
    throw ShapeError(std::string(op_name(kind)) + ": " + what);
}

void expect_inputs(OpKind kind, const std::vector<ValueRef>& in, size_t n) {
    if (in.size() != n) shape_fail(kind, "expected " + std::to_string(n) + " inputs");
}

void expect_rank2(OpKind kind, const ValueRef& v, const char* which) {
    if (v.shape->size() != 2) shape_fail(kind, std::string(which) + " must be 2-D, got " + shape_str(*v.shape));
}

double gelu_val(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

}  // namespace

EvalOut eval_op(OpKind kind, const std::vector<ValueRef>& in, const std::vector<int64_t>& iattrs) {
    switch (kind) {
        case OpKind::kLeaf:
        case OpKind::kConstant:
            throw GraphError("eval_op: inputs have no forward rule");

        case OpKind::kAdd:
        case OpKind::kSub:
        case OpKind::kMul: {
            expect_inputs(kind, in, 2);
            if (*in[0].shape != *in[1].shape)
                shape_fail(kind, "shape mismatch " + shape_str(*in[0].shape) + " vs " + shape_str(*in[1].shape));
            const auto& a = *in[0].values;
            const auto& b = *in[1].values;
            std::vector<double> out(a.size());
            if (kind == OpKind::kAdd) {
                for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
            } else if (kind == OpKind::kSub) {
                for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
            } else {
                for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
            }
            return {*in[0].shape, std::move(out)};
        }

        case OpKind::kNeg:
        case OpKind::kReciprocal:
        case OpKind::kAbs:
        case OpKind::kExp:
        case OpKind::kLog:
        case OpKind::kErf:
        case OpKind::kGelu: {
            expect_inputs(kind, in, 1);
            const auto& a = *in[0].values;
            std::vector<double> out(a.size());
            switch (kind) {
                case OpKind::kNeg: for (size_t i = 0; i < a.size(); ++i) out[i] = -a[i]; break;
                case OpKind::kReciprocal: for (size_t i = 0; i < a.size(); ++i) out[i] = 1.0 / a[i]; break;
                case OpKind::kAbs: for (size_t i = 0; i < a.size(); ++i) out[i] = std::abs(a[i]); break;
                case OpKind::kExp: for (size_t i = 0; i < a.size(); ++i) out[i] = std::exp(a[i]); break;
                case OpKind::kLog: for (size_t i = 0; i < a.size(); ++i) out[i] = std::log(a[i]); break;
                case OpKind::kErf: for (size_t i = 0; i < a.size(); ++i) out[i] = std::erf(a[i]); break;
                case OpKind::kGelu: for (size_t i = 0; i < a.size(); ++i) out[i] = gelu_val(a[i]); break;
                default: break;
            }
            return {*in[0].shape, std::move(out)};
        }

        case OpKind::kMatmul: {
            expect_inputs(kind, in, 2);
            expect_rank2(kind, in[0], "lhs");
            expect_rank2(kind, in[1], "rhs");
            int64_t m = (*in[0].shape)[0], k = (*in[0].shape)[1];
            int64_t k2 = (*in[1].shape)[0], n = (*in[1].shape)[1];
            if (k != k2)
                shape_fail(kind, "inner dims differ: " + shape_str(*in[0].shape) + " x " + shape_str(*in[1].shape));
            const auto& a = *in[0].values;
            const auto& b = *in[1].values;
            std::vector<double> out(static_cast<size_t>(m * n), 0.0);
            for (int64_t i = 0; i < m; ++i) {
                for (int64_t kk = 0; kk < k; ++kk) {
                    double av = a[static_cast<size_t>(i * k + kk)];
                    if (av == 0.0) continue;
                    const double* brow = b.data() + kk * n;
                    double* orow = out.data() + i * n;
                    for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
                }
            }
            return {Shape{m, n}, std::move(out)};
        }

        case OpKind::kTranspose: {
            expect_inputs(kind, in, 1);
            expect_rank2(kind, in[0], "input");
            int64_t m = (*in[0].shape)[0], n = (*in[0].shape)[1];
            const auto& a = *in[0].values;
            std::vector<double> out(a.size());
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j)
                    out[static_cast<size_t>(j * m + i)] = a[static_cast<size_t>(i * n + j)];
            return {Shape{n, m}, std::move(out)};
        }

        case OpKind::kReshape: {
            expect_inputs(kind, in, 1);
            Shape target(iattrs.begin(), iattrs.end());
            if (shape_numel(target) != in[0].numel())
                shape_fail(kind, "cannot reshape " + shape_str(*in[0].shape) + " to " + shape_str(target));
            return {std::move(target), *in[0].values};
        }

        case OpKind::kBroadcast: {
            expect_inputs(kind, in, 1);
            if (in[0].numel() != 1) shape_fail(kind, "source must have one element");
            Shape target(iattrs.begin(), iattrs.end());
            std::vector<double> out(static_cast<size_t>(shape_numel(target)), (*in[0].values)[0]);
            return {std::move(target), std::move(out)};
        }

        case OpKind::kSum: {
            expect_inputs(kind, in, 1);
            double s = 0.0;
            for (double v : *in[0].values) s += v;
            return {Shape{}, {s}};
        }

        case OpKind::kSoftmax: {
            expect_inputs(kind, in, 1);
            if (in[0].shape->empty()) shape_fail(kind, "requires rank >= 1");
            int64_t cols = in[0].shape->back();
            int64_t rows = in[0].numel() / cols;
            const auto& a = *in[0].values;
            std::vector<double> out(a.size());
            for (int64_t r = 0; r < rows; ++r) {
                const double* x = a.data() + r * cols;
                double* y = out.data() + r * cols;
                double m = x[0];
                for (int64_t j = 1; j < cols; ++j) m = std::max(m, x[j]);
                double z = 0.0;
                for (int64_t j = 0; j < cols; ++j) {
                    y[j] = std::exp(x[j] - m);
                    z += y[j];
                }
                for (int64_t j = 0; j < cols; ++j) y[j] /= z;
            }
            return {*in[0].shape, std::move(out)};
        }

        case OpKind::kEmbed: {
            expect_inputs(kind, in, 1);
            expect_rank2(kind, in[0], "table");
            int64_t v = (*in[0].shape)[0], d = (*in[0].shape)[1];
            std::vector<double> out;
            out.reserve(iattrs.size() * static_cast<size_t>(d));
            for (int64_t id : iattrs) {
                if (id < 0 || id >= v)
                    shape_fail(kind, "index " + std::to_string(id) + " out of range [0," + std::to_string(v) + ")");
                const double* row = in[0].values->data() + id * d;
                out.insert(out.end(), row, row + d);
            }
            return {Shape{static_cast<int64_t>(iattrs.size()), d}, std::move(out)};
        }

        case OpKind::kEmbedScatter: {
            // iattrs: [rows, id0, id1, ...]; input is (n_ids, d).
            expect_inputs(kind, in, 1);
            expect_rank2(kind, in[0], "input");
            int64_t rows = iattrs.at(0);
            int64_t n = (*in[0].shape)[0], d = (*in[0].shape)[1];
            if (static_cast<int64_t>(iattrs.size()) - 1 != n) shape_fail(kind, "id count mismatch");
            std::vector<double> out(static_cast<size_t>(rows * d), 0.0);
            for (int64_t i = 0; i < n; ++i) {
                int64_t id = iattrs[static_cast<size_t>(i + 1)];
                if (id < 0 || id >= rows) shape_fail(kind, "index out of range");
                const double* src = in[0].values->data() + i * d;
                double* dst = out.data() + id * d;
                for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
            }
            return {Shape{rows, d}, std::move(out)};
        }

        case OpKind::kConcat: {
            expect_inputs(kind, in, 2);
            expect_rank2(kind, in[0], "lhs");
            expect_rank2(kind, in[1], "rhs");
            int axis = static_cast<int>(iattrs.at(0));
            const Shape& sa = *in[0].shape;
            const Shape& sb = *in[1].shape;
            if (axis == 0) {
                if (sa[1] != sb[1]) shape_fail(kind, "column mismatch");
                std::vector<double> out(*in[0].values);
                out.insert(out.end(), in[1].values->begin(), in[1].values->end());
                return {Shape{sa[0] + sb[0], sa[1]}, std::move(out)};
            }
            if (axis != 1) shape_fail(kind, "axis must be 0 or 1");
            if (sa[0] != sb[0]) shape_fail(kind, "row mismatch");
            int64_t rows = sa[0], ca = sa[1], cb = sb[1];
            std::vector<double> out(static_cast<size_t>(rows * (ca + cb)));
            for (int64_t r = 0; r < rows; ++r) {
                std::memcpy(out.data() + r * (ca + cb), in[0].values->data() + r * ca,
                            static_cast<size_t>(ca) * sizeof(double));
                std::memcpy(out.data() + r * (ca + cb) + ca, in[1].values->data() + r * cb,
                            static_cast<size_t>(cb) * sizeof(double));
            }
            return {Shape{rows, ca + cb}, std::move(out)};
        }

        case OpKind::kSlice: {
            expect_inputs(kind, in, 1);
            expect_rank2(kind, in[0], "input");
            int axis = static_cast<int>(iattrs.at(0));
            int64_t start = iattrs.at(1), len = iattrs.at(2);
            const Shape& s = *in[0].shape;
            if (axis != 0 && axis != 1) shape_fail(kind, "axis must be 0 or 1");
            if (start < 0 || len <= 0 || start + len > s[static_cast<size_t>(axis)])
                shape_fail(kind, "range out of bounds");
            if (axis == 0) {
                std::vector<double> out(in[0].values->begin() + start * s[1],
                                        in[0].values->begin() + (start + len) * s[1]);
                return {Shape{len, s[1]}, std::move(out)};
            }
            std::vector<double> out(static_cast<size_t>(s[0] * len));
            for (int64_t r = 0; r < s[0]; ++r)
                for (int64_t j = 0; j < len; ++j)
                    out[static_cast<size_t>(r * len + j)] = (*in[0].values)[static_cast<size_t>(r * s[1] + start + j)];
            return {Shape{s[0], len}, std::move(out)};
        }
    }
    throw GraphError("eval_op: unknown op");
}

Tensor record(OpKind kind, const std::vector<Tensor>& in, std::vector<int64_t> iattrs) {
    std::shared_ptr<GraphState> gs;
    for (const auto& t : in) {
        if (!t.defined()) throw GraphError(std::string(op_name(kind)) + ": undefined operand");
        if (!TensorAccess::has_node(t)) continue;
        auto s = TensorAccess::state(t);
        if (!s) throw GraphError(std::string(op_name(kind)) + ": operand's graph is no longer alive");
        if (gs && s != gs) throw GraphError(std::string(op_name(kind)) + ": operands from different graphs");
        gs = s;
    }

    std::vector<ValueRef> refs;
    refs.reserve(in.size());
    for (const auto& t : in) refs.push_back({&t.shape(), TensorAccess::storage(t).get()});
    EvalOut out = eval_op(kind, refs, iattrs);
    if (!all_finite(out.values))
        throw NonFiniteError(std::string(op_name(kind)) + ": produced non-finite values");
    auto storage = std::make_shared<const std::vector<double>>(std::move(out.values));

    if (!gs) return TensorAccess::make(std::move(out.shape), std::move(storage), nullptr, -1);

    std::vector<int64_t> ids;
    ids.reserve(in.size());
    for (const auto& t : in) {
        if (TensorAccess::has_node(t)) {
            ids.push_back(t.node());
        } else {
            gs->nodes.push_back({OpKind::kConstant, {}, {}, t.shape(),
                                 TensorAccess::storage(t)});
            ids.push_back(static_cast<int64_t>(gs->nodes.size()) - 1);
        }
    }
    gs->nodes.push_back({kind, std::move(ids), std::move(iattrs), out.shape, storage});
    return TensorAccess::make(std::move(out.shape), std::move(storage), gs,
                              static_cast<int64_t>(gs->nodes.size()) - 1);
}

Tensor node_tensor(const std::shared_ptr<GraphState>& gs, int64_t id, bool attached) {
    const Node& n = gs->nodes[static_cast<size_t>(id)];
    return TensorAccess::make(n.out_shape, n.out_values, attached ? gs : nullptr, id);
}

}  // namespace detail

namespace {
std::atomic<uint64_t> g_graph_counter{0};
}

Graph::Graph() : state_(std::make_shared<detail::GraphState>()) {
    state_->generation = ++g_graph_counter;
}

Tensor Graph::leaf(const Tensor& value) {
    if (!value.defined()) throw GraphError("leaf: undefined value");
    state_->nodes.push_back({OpKind::kLeaf, {}, {}, value.shape(), TensorAccess::storage(value)});
    return detail::node_tensor(state_, static_cast<int64_t>(state_->nodes.size()) - 1, true);
}

Tensor Graph::leaf(Shape shape, std::vector<double> values) {
    return leaf(Tensor(std::move(shape), std::move(values)));
}

std::vector<Tensor> Graph::leaves(const std::vector<Tensor>& values) {
    std::vector<Tensor> out;
    out.reserve(values.size());
    for (const auto& v : values) out.push_back(leaf(v));
    return out;
}

Tensor Graph::constant(const Tensor& value) {
    if (!value.defined()) throw GraphError("constant: undefined value");
    state_->nodes.push_back({OpKind::kConstant, {}, {}, value.shape(), TensorAccess::storage(value)});
    return detail::node_tensor(state_, static_cast<int64_t>(state_->nodes.size()) - 1, true);
}

double Graph::replay_max_abs_diff() const {
    double worst = 0.0;
    for (const auto& node : state_->nodes) {
        if (node.kind == OpKind::kLeaf || node.kind == OpKind::kConstant) continue;
        std::vector<detail::ValueRef> refs;
        refs.reserve(node.inputs.size());
        for (int64_t id : node.inputs) {
            const auto& src = state_->nodes[static_cast<size_t>(id)];
            refs.push_back({&src.out_shape, src.out_values.get()});
        }
        detail::EvalOut out = detail::eval_op(node.kind, refs, node.iattrs);
        for (size_t i = 0; i < out.values.size(); ++i)
            worst = std::max(worst, std::abs(out.values[i] - (*node.out_values)[i]));
    }
    return worst;
}

}  // namespace meltr
