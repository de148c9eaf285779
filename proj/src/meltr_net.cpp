#include "meltr/meltr_net.hpp"

#include <algorithm>
#include <cmath>

#include "meltr/rng.hpp"

namespace meltr {

LossVector::LossVector(std::vector<double> e, std::vector<int64_t> ids)
    : entries(std::move(e)), task_ids(std::move(ids)) {
    if (entries.empty()) throw ShapeError("loss vector: must hold at least one loss");
    if (entries.size() != task_ids.size())
        throw ShapeError("loss vector: entries and task_ids must align");
    if (!all_finite(entries)) throw NonFiniteError("loss vector: non-finite entry");
}

LossVector LossVector::of(std::vector<double> entries) {
    std::vector<int64_t> ids(entries.size());
    for (size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int64_t>(i);
    return LossVector(std::move(entries), std::move(ids));
}

double LossVector::total() const {
    double s = 0.0;
    for (double v : entries) s += v;
    return s;
}

MeltrVariant variant_from_string(const std::string& s) {
    if (s == "full") return MeltrVariant::kFull;
    if (s == "linear") return MeltrVariant::kLinear;
    if (s == "se_only") return MeltrVariant::kSeOnly;
    if (s == "te_only") return MeltrVariant::kTeOnly;
    throw ConfigError("unknown meltr variant '" + s + "'");
}

std::string to_string(MeltrVariant v) {
    switch (v) {
        case MeltrVariant::kFull: return "full";
        case MeltrVariant::kLinear: return "linear";
        case MeltrVariant::kSeOnly: return "se_only";
        case MeltrVariant::kTeOnly: return "te_only";
    }
    return "?";
}

void MeltrConfig::validate() const {
    if (d <= 0 || heads <= 0 || num_tasks <= 0 || ffn_mult <= 0)
        throw ConfigError("meltr config: dimensions must be positive");
    if (d % heads != 0) throw ConfigError("meltr config: d must be divisible by heads");
}

namespace {

Tensor trunc_normal(Rng& rng, Shape shape, double std) {
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.truncated_normal(std);
    return Tensor(std::move(shape), std::move(v));
}

Tensor kaiming_uniform(Rng& rng, Shape shape, int64_t fan_in) {
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    return Tensor(shape, rng.uniform_vec(shape_numel(shape), -bound, bound));
}

constexpr double kInitStd = 0.02;

// Row-broadcast a (1,d) vector to (n,d).
Tensor rows(const Tensor& v, int64_t n) { return matmul(Tensor::ones({n, 1}), v); }

}  // namespace

MeltrNet MeltrNet::init(const MeltrConfig& cfg, uint64_t seed) {
    cfg.validate();
    MeltrNet net;
    net.cfg = cfg;
    Rng rng(mix_seed(seed, 0x4d454c54));
    auto push = [&](const std::string& name, Tensor t) {
        net.names.push_back(name);
        net.params.push_back(std::move(t));
    };
    const int64_t d = cfg.d;
    const int64_t tasks = cfg.num_tasks;
    if (cfg.variant == MeltrVariant::kLinear) {
        push("coef", Tensor::ones({tasks, 1}));
        push("bias", Tensor::zeros({1, 1}));
        return net;
    }
    const int64_t f = d * cfg.ffn_mult;
    push("se_w1", kaiming_uniform(rng, {1, d}, 1));
    push("se_b1", Tensor::zeros({1, d}));
    push("se_w2", kaiming_uniform(rng, {d, d}, d));
    push("se_b2", Tensor::zeros({1, d}));
    push("te", Tensor({tasks, d}, rng.normal_vec(tasks * d, kInitStd)));
    push("wq", trunc_normal(rng, {d, d}, kInitStd));
    push("bq", Tensor::zeros({1, d}));
    push("wk", trunc_normal(rng, {d, d}, kInitStd));
    push("bk", Tensor::zeros({1, d}));
    push("wv", trunc_normal(rng, {d, d}, kInitStd));
    push("bv", Tensor::zeros({1, d}));
    push("wo", trunc_normal(rng, {d, d}, kInitStd));
    push("bo", Tensor::zeros({1, d}));
    push("ln1_g", Tensor::ones({1, d}));
    push("ln1_b", Tensor::zeros({1, d}));
    push("ffn_w1", trunc_normal(rng, {d, f}, kInitStd));
    push("ffn_b1", Tensor::zeros({1, f}));
    push("ffn_w2", trunc_normal(rng, {f, d}, kInitStd));
    push("ffn_b2", Tensor::zeros({1, d}));
    push("ln2_g", Tensor::ones({1, d}));
    push("ln2_b", Tensor::zeros({1, d}));
    push("pool_w", trunc_normal(rng, {d, 1}, kInitStd));
    push("pool_b", Tensor::zeros({1, 1}));
    return net;
}

int64_t MeltrNet::param_count() const {
    int64_t n = 0;
    for (const auto& p : params) n += p.size();
    return n;
}

const Tensor& MeltrNet::param(const std::string& name) const {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw ConfigError("meltr: no parameter named '" + name + "'");
    return params[static_cast<size_t>(it - names.begin())];
}

void MeltrNet::set_param(const std::string& name, Tensor value) {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw ConfigError("meltr: no parameter named '" + name + "'");
    size_t i = static_cast<size_t>(it - names.begin());
    if (value.shape() != params[i].shape()) throw ShapeError("meltr: parameter shape mismatch");
    params[i] = std::move(value);
}

namespace {

struct ParamView {
    const std::vector<Tensor>& phi;
    size_t pos = 0;
    const Tensor& next() { return phi.at(pos++); }
};

Tensor affine_ln(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    int64_t n = x.dim(0);
    return add(mul(layer_norm_lastdim(x, eps), rows(gain, n)), rows(bias, n));
}

}  // namespace

Tensor meltr_forward(const std::vector<Tensor>& losses, const std::vector<int64_t>& task_ids,
                     const std::vector<Tensor>& phi, const MeltrConfig& cfg) {
    cfg.validate();
    if (losses.empty()) throw ShapeError("meltr: at least one loss required");
    if (losses.size() != task_ids.size()) throw ShapeError("meltr: losses and task ids must align");
    for (int64_t id : task_ids) {
        if (id < 0 || id >= cfg.num_tasks) throw ShapeError("meltr: task id out of range");
    }
    const int64_t n = static_cast<int64_t>(losses.size());

    // (n,1) column of loss tokens
    Tensor lcol = reshape(losses[0], {1, 1});
    for (int64_t i = 1; i < n; ++i)
        lcol = concat(lcol, reshape(losses[static_cast<size_t>(i)], {1, 1}), 0);

    ParamView p{phi};
    if (cfg.variant == MeltrVariant::kLinear) {
        const Tensor& coef = p.next();
        const Tensor& bias = p.next();
        return add(sum(mul(lcol, embed(coef, task_ids))), reshape(bias, {}));
    }

    const Tensor& se_w1 = p.next();
    const Tensor& se_b1 = p.next();
    const Tensor& se_w2 = p.next();
    const Tensor& se_b2 = p.next();
    const Tensor& te = p.next();
    const Tensor& wq = p.next();
    const Tensor& bq = p.next();
    const Tensor& wk = p.next();
    const Tensor& bk = p.next();
    const Tensor& wv = p.next();
    const Tensor& bv = p.next();
    const Tensor& wo = p.next();
    const Tensor& bo = p.next();
    const Tensor& ln1_g = p.next();
    const Tensor& ln1_b = p.next();
    const Tensor& ffn_w1 = p.next();
    const Tensor& ffn_b1 = p.next();
    const Tensor& ffn_w2 = p.next();
    const Tensor& ffn_b2 = p.next();
    const Tensor& ln2_g = p.next();
    const Tensor& ln2_b = p.next();
    const Tensor& pool_w = p.next();
    const Tensor& pool_b = p.next();

    Tensor tokens;
    if (cfg.variant != MeltrVariant::kTeOnly) {
        Tensor h = gelu(add(matmul(lcol, se_w1), rows(se_b1, n)));
        tokens = add(matmul(h, se_w2), rows(se_b2, n));
    }
    if (cfg.variant != MeltrVariant::kSeOnly) {
        Tensor tokte = embed(te, task_ids);
        tokens = tokens.defined() ? add(tokens, tokte) : tokte;
    }

    // one encoder layer, post-LN
    Tensor q = add(matmul(tokens, wq), rows(bq, n));
    Tensor k = add(matmul(tokens, wk), rows(bk, n));
    Tensor v = add(matmul(tokens, wv), rows(bv, n));
    const int64_t dk = cfg.d / cfg.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    Tensor attn_out;
    for (int h = 0; h < cfg.heads; ++h) {
        Tensor qh = slice(q, 1, h * dk, dk);
        Tensor kh = slice(k, 1, h * dk, dk);
        Tensor vh = slice(v, 1, h * dk, dk);
        Tensor scores = mul(matmul(qh, transpose(kh)), scale);
        Tensor oh = matmul(softmax_lastdim(scores), vh);
        attn_out = attn_out.defined() ? concat(attn_out, oh, 1) : oh;
    }
    attn_out = add(matmul(attn_out, wo), rows(bo, n));
    Tensor x1 = affine_ln(add(tokens, attn_out), ln1_g, ln1_b, cfg.ln_eps);

    Tensor ff = gelu(add(matmul(x1, ffn_w1), rows(ffn_b1, n)));
    ff = add(matmul(ff, ffn_w2), rows(ffn_b2, n));
    Tensor x2 = affine_ln(add(x1, ff), ln2_g, ln2_b, cfg.ln_eps);

    Tensor pooled = matmul(Tensor::full({1, n}, 1.0 / static_cast<double>(n)), x2);
    return reshape(add(matmul(pooled, pool_w), pool_b), {});
}

double meltr_value(const LossVector& l, const MeltrNet& net) {
    std::vector<Tensor> lt;
    lt.reserve(l.entries.size());
    for (double v : l.entries) lt.push_back(Tensor::scalar(v));
    return meltr_forward(lt, l.task_ids, net.params, net.cfg).value();
}

std::vector<double> scale_embed(double loss_value, const MeltrNet& net) {
    if (!std::isfinite(loss_value)) throw NonFiniteError("scale_embed: non-finite loss");
    if (net.cfg.variant == MeltrVariant::kLinear)
        throw ConfigError("scale_embed: linear variant has no scale embedding");
    Tensor l({1, 1}, {loss_value});
    Tensor h = gelu(add(matmul(l, net.param("se_w1")), net.param("se_b1")));
    h = add(matmul(h, net.param("se_w2")), net.param("se_b2"));
    return {h.values().begin(), h.values().end()};
}

std::vector<double> task_embed(int64_t t, const MeltrNet& net) {
    if (net.cfg.variant == MeltrVariant::kLinear)
        throw ConfigError("task_embed: linear variant has no task embedding");
    Tensor row = embed(net.param("te"), {t});
    return {row.values().begin(), row.values().end()};
}

std::vector<double> probe_partials(const LossVector& l, const MeltrNet& net) {
    Graph g;
    std::vector<Tensor> leaves;
    leaves.reserve(l.entries.size());
    for (double v : l.entries) leaves.push_back(g.leaf(Tensor::scalar(v)));
    Tensor out = meltr_forward(leaves, l.task_ids, net.params, net.cfg);
    // te_only: the output carries no loss dependence at all
    if (!out.attached()) return std::vector<double>(leaves.size(), 0.0);
    auto r = grad(out, leaves);
    std::vector<double> partials(leaves.size());
    for (size_t i = 0; i < leaves.size(); ++i) partials[i] = r.grads[i].value();
    return partials;
}

std::vector<SweepRow> sweep_surface(const MeltrNet& net, int64_t sweep_task, double lo,
                                    double hi, int steps, const LossVector& baseline) {
    if (!std::isfinite(lo) || !std::isfinite(hi)) throw NonFiniteError("sweep: non-finite range");
    if (!(lo < hi)) throw ConfigError("sweep: lo must be below hi");
    if (steps < 2) throw ConfigError("sweep: need at least 2 steps");
    size_t idx = static_cast<size_t>(baseline.size());
    for (size_t i = 0; i < baseline.task_ids.size(); ++i) {
        if (baseline.task_ids[i] == sweep_task) idx = i;
    }
    if (idx == static_cast<size_t>(baseline.size()))
        throw ConfigError("sweep: task not present in baseline");
    std::vector<SweepRow> rows;
    rows.reserve(static_cast<size_t>(steps));
    for (int s = 0; s < steps; ++s) {
        double v = lo + (hi - lo) * static_cast<double>(s) / static_cast<double>(steps - 1);
        LossVector probe = baseline;
        probe.entries[idx] = v;
        double out = meltr_value(probe, net);
        double partial = probe_partials(probe, net)[idx];
        rows.push_back({sweep_task, v, out, partial});
    }
    return rows;
}

std::vector<Surface2dRow> surface_2d(const MeltrNet& net, int64_t task_a, int64_t task_b,
                                     double lo, double hi, int steps,
                                     const LossVector& baseline) {
    if (!(lo < hi)) throw ConfigError("surface: lo must be below hi");
    if (steps < 2) throw ConfigError("surface: need at least 2 steps");
    size_t ia = static_cast<size_t>(baseline.size());
    size_t ib = ia;
    for (size_t i = 0; i < baseline.task_ids.size(); ++i) {
        if (baseline.task_ids[i] == task_a) ia = i;
        if (baseline.task_ids[i] == task_b) ib = i;
    }
    if (ia == static_cast<size_t>(baseline.size()) || ib == static_cast<size_t>(baseline.size()) ||
        ia == ib)
        throw ConfigError("surface: tasks must be distinct and present in baseline");
    std::vector<Surface2dRow> grid;
    grid.reserve(static_cast<size_t>(steps) * static_cast<size_t>(steps));
    for (int sa = 0; sa < steps; ++sa) {
        double va = lo + (hi - lo) * static_cast<double>(sa) / static_cast<double>(steps - 1);
        for (int sb = 0; sb < steps; ++sb) {
            double vb = lo + (hi - lo) * static_cast<double>(sb) / static_cast<double>(steps - 1);
            LossVector probe = baseline;
            probe.entries[ia] = va;
            probe.entries[ib] = vb;
            grid.push_back({va, vb, meltr_value(probe, net)});
        }
    }
    return grid;
}

double max_mixed_second_difference(const std::vector<Surface2dRow>& grid, int steps) {
    double worst = 0.0;
    auto at = [&](int a, int b) { return grid[static_cast<size_t>(a * steps + b)].output; };
    for (int a = 0; a + 1 < steps; ++a) {
        for (int b = 0; b + 1 < steps; ++b) {
            double dd = at(a + 1, b + 1) - at(a + 1, b) - at(a, b + 1) + at(a, b);
            worst = std::max(worst, std::abs(dd));
        }
    }
    return worst;
}

}  // namespace meltr
