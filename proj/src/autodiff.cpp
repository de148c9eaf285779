#include "meltr/autodiff.hpp"

#include <cmath>
#include <optional>

#include "graph_internal.hpp"

namespace meltr {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
constexpr double kTwoOverSqrtPi = 1.12837916709551257390;

Tensor sign_constant(const Tensor& x) {
    std::vector<double> s(static_cast<size_t>(x.size()));
    for (int64_t i = 0; i < x.size(); ++i) {
        double v = x.at(i);
        s[static_cast<size_t>(i)] = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
    }
    return Tensor(x.shape(), std::move(s));
}

// Standard normal CDF / PDF as differentiable composites.
Tensor normal_cdf(const Tensor& x) { return mul(add(erf(mul(x, kInvSqrt2)), 1.0), 0.5); }
Tensor normal_pdf(const Tensor& x) { return mul(exp(mul(mul(x, x), -0.5)), kInvSqrt2Pi); }

// Broadcast a (rows,1) column across `cols` columns via matmul with ones.
Tensor cols_broadcast(const Tensor& col, int64_t cols) {
    return matmul(col, Tensor::ones({1, cols}));
}

// Per-op backward rule, expressed with the public differentiable ops so the
// backward pass itself can be recorded (second-order support). `in` holds the
// node's input tensors, `out` its output, `g` the incoming gradient.
std::vector<Tensor> backward_op(const detail::Node& node, const std::vector<Tensor>& in,
                                const Tensor& out, const Tensor& g) {
    switch (node.kind) {
        case OpKind::kLeaf:
        case OpKind::kConstant:
            return {};
        case OpKind::kAdd:
            return {g, g};
        case OpKind::kSub:
            return {g, neg(g)};
        case OpKind::kMul:
            return {mul(g, in[1]), mul(g, in[0])};
        case OpKind::kNeg:
            return {neg(g)};
        case OpKind::kReciprocal:
            return {neg(mul(mul(g, out), out))};
        case OpKind::kMatmul:
            return {matmul(g, transpose(in[1])), matmul(transpose(in[0]), g)};
        case OpKind::kTranspose:
            return {transpose(g)};
        case OpKind::kReshape:
            return {reshape(g, in[0].shape())};
        case OpKind::kBroadcast:
            return {reshape(sum(g), in[0].shape())};
        case OpKind::kSum:
            return {broadcast(g, in[0].shape())};
        case OpKind::kAbs:
            // subgradient 0 at the kink; sign treated as locally constant
            return {mul(g, sign_constant(in[0]))};
        case OpKind::kExp:
            return {mul(g, out)};
        case OpKind::kLog:
            return {mul(g, reciprocal(in[0]))};
        case OpKind::kErf:
            return {mul(g, mul(exp(neg(mul(in[0], in[0]))), kTwoOverSqrtPi))};
        case OpKind::kGelu: {
            const Tensor& x = in[0];
            return {mul(g, add(normal_cdf(x), mul(x, normal_pdf(x))))};
        }
        case OpKind::kSoftmax: {
            int64_t cols = out.dim(out.rank() - 1);
            int64_t rows = out.size() / cols;
            Tensor s2 = reshape(out, {rows, cols});
            Tensor g2 = reshape(g, {rows, cols});
            Tensor t = mul(g2, s2);
            Tensor row_dot = matmul(t, Tensor::ones({cols, 1}));  // (rows,1)
            Tensor dx = mul(sub(g2, cols_broadcast(row_dot, cols)), s2);
            return {reshape(dx, in[0].shape())};
        }
        case OpKind::kEmbed: {
            std::vector<int64_t> attrs(node.iattrs);
            attrs.insert(attrs.begin(), in[0].dim(0));
            return {detail::record(OpKind::kEmbedScatter, {g}, std::move(attrs))};
        }
        case OpKind::kEmbedScatter: {
            std::vector<int64_t> ids(node.iattrs.begin() + 1, node.iattrs.end());
            return {embed(g, ids)};
        }
        case OpKind::kConcat: {
            int axis = static_cast<int>(node.iattrs[0]);
            int64_t na = in[0].dim(axis);
            int64_t nb = in[1].dim(axis);
            return {slice(g, axis, 0, na), slice(g, axis, na, nb)};
        }
        case OpKind::kSlice: {
            int axis = static_cast<int>(node.iattrs[0]);
            int64_t start = node.iattrs[1];
            int64_t len = node.iattrs[2];
            int64_t total = in[0].dim(axis);
            Tensor padded = g;
            if (start > 0) {
                Shape zs = in[0].shape();
                zs[static_cast<size_t>(axis)] = start;
                padded = concat(Tensor::zeros(zs), padded, axis);
            }
            if (start + len < total) {
                Shape zs = in[0].shape();
                zs[static_cast<size_t>(axis)] = total - start - len;
                padded = concat(padded, Tensor::zeros(zs), axis);
            }
            return {padded};
        }
    }
    throw GraphError("backward: unknown op");
}

}  // namespace

bool GradResult::all_reached() const {
    for (bool r : reached)
        if (!r) return false;
    return true;
}

GradResult grad(const Tensor& output, const std::vector<Tensor>& wrt, GradOptions opt) {
    if (!output.defined()) throw GraphError("grad: undefined output");
    if (output.size() != 1)
        throw ShapeError("grad: output must have a single element, shape is " + shape_str(output.shape()));
    auto gs = TensorAccess::state(output);
    if (!TensorAccess::has_node(output) || !gs)
        throw GraphError("grad: output is not attached to a live graph");
    for (const auto& t : wrt) {
        if (!TensorAccess::has_node(t) || TensorAccess::state(t) != gs)
            throw GraphError("grad: wrt tensor is not attached to the output's graph");
    }

    const int64_t out_id = output.node();

    // Reachability: ancestors of the output, inputs only.
    std::vector<char> reach(static_cast<size_t>(out_id) + 1, 0);
    {
        std::vector<int64_t> stack{out_id};
        reach[static_cast<size_t>(out_id)] = 1;
        while (!stack.empty()) {
            int64_t id = stack.back();
            stack.pop_back();
            for (int64_t in_id : gs->nodes[static_cast<size_t>(id)].inputs) {
                if (!reach[static_cast<size_t>(in_id)]) {
                    reach[static_cast<size_t>(in_id)] = 1;
                    stack.push_back(in_id);
                }
            }
        }
    }

    auto tensor_for = [&](int64_t id) { return detail::node_tensor(gs, id, opt.create_graph); };

    std::vector<std::optional<Tensor>> acc(static_cast<size_t>(out_id) + 1);
    Tensor seed = Tensor::ones(output.shape());
    if (opt.create_graph) seed = TensorAccess::wrap(gs).constant(seed);
    acc[static_cast<size_t>(out_id)] = seed;

    for (int64_t id = out_id; id >= 0; --id) {
        if (!reach[static_cast<size_t>(id)] || !acc[static_cast<size_t>(id)]) continue;
        // copy: recording backward ops appends to gs->nodes and may reallocate
        const detail::Node node = gs->nodes[static_cast<size_t>(id)];
        if (node.inputs.empty()) continue;
        std::vector<Tensor> ins;
        ins.reserve(node.inputs.size());
        for (int64_t in_id : node.inputs) ins.push_back(tensor_for(in_id));
        std::vector<Tensor> gins =
            backward_op(node, ins, tensor_for(id), *acc[static_cast<size_t>(id)]);
        for (size_t k = 0; k < node.inputs.size(); ++k) {
            auto& slot = acc[static_cast<size_t>(node.inputs[k])];
            slot = slot ? add(*slot, gins[k]) : gins[k];
        }
    }

    GradResult res;
    res.grads.reserve(wrt.size());
    res.reached.reserve(wrt.size());
    for (const auto& t : wrt) {
        int64_t id = t.node();
        bool ok = id <= out_id && reach[static_cast<size_t>(id)] && acc[static_cast<size_t>(id)];
        res.reached.push_back(ok);
        if (ok) {
            res.grads.push_back(*acc[static_cast<size_t>(id)]);
        } else {
            Tensor z = Tensor::zeros(t.shape());
            if (opt.create_graph) z = TensorAccess::wrap(gs).constant(z);
            res.grads.push_back(z);
        }
    }
    return res;
}

std::vector<Tensor> hvp(const LossBuilder& loss, const std::vector<Tensor>& w,
                        const std::vector<Tensor>& v) {
    if (w.size() != v.size()) throw ShapeError("hvp: w and v length mismatch");
    for (size_t i = 0; i < w.size(); ++i) {
        if (w[i].shape() != v[i].shape()) throw ShapeError("hvp: v shape mismatch at entry " + std::to_string(i));
    }
    Graph g;
    std::vector<Tensor> wa = g.leaves(w);
    Tensor l = loss(g, wa);
    if (l.size() != 1) throw ShapeError("hvp: loss must be scalar");
    GradResult gw = grad(l, wa, {.create_graph = true});
    Tensor s;
    for (size_t i = 0; i < wa.size(); ++i) {
        Tensor term = dot(gw.grads[i], v[i].detach());
        s = s.defined() ? add(s, term) : term;
    }
    return grad(s, wa).grads;
}

std::vector<Tensor> finite_diff_grad(const LossBuilder& loss, const std::vector<Tensor>& w,
                                     double step) {
    if (step <= 0.0) throw ConfigError("finite_diff_grad: step must be positive");
    auto eval = [&](const std::vector<Tensor>& point) {
        Graph g;
        std::vector<Tensor> leaves = g.leaves(point);
        return loss(g, leaves).value();
    };
    std::vector<Tensor> out;
    out.reserve(w.size());
    for (size_t i = 0; i < w.size(); ++i) {
        std::vector<double> gvals(static_cast<size_t>(w[i].size()));
        for (int64_t j = 0; j < w[i].size(); ++j) {
            double x = w[i].at(j);
            double h = step * std::max(1.0, std::abs(x));
            std::vector<Tensor> plus = w, minus = w;
            plus[i] = w[i].with_value_at(j, x + h);
            minus[i] = w[i].with_value_at(j, x - h);
            gvals[static_cast<size_t>(j)] = (eval(plus) - eval(minus)) / (2.0 * h);
        }
        out.push_back(Tensor(w[i].shape(), std::move(gvals)));
    }
    return out;
}

std::vector<double> flatten(const std::vector<Tensor>& ts) {
    std::vector<double> flat;
    for (const auto& t : ts) flat.insert(flat.end(), t.values().begin(), t.values().end());
    return flat;
}

std::vector<Tensor> unflatten(const std::vector<double>& flat, const std::vector<Tensor>& like) {
    std::vector<Tensor> out;
    out.reserve(like.size());
    size_t pos = 0;
    for (const auto& t : like) {
        std::vector<double> vals(flat.begin() + static_cast<long>(pos),
                                 flat.begin() + static_cast<long>(pos + static_cast<size_t>(t.size())));
        pos += static_cast<size_t>(t.size());
        out.push_back(Tensor(t.shape(), std::move(vals)));
    }
    if (pos != flat.size()) throw ShapeError("unflatten: length mismatch");
    return out;
}

}  // namespace meltr
