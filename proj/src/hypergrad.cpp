#include "meltr/hypergrad.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <sstream>

namespace meltr {

std::string to_string(const HypergradScheme& s) {
    struct V {
        std::string operator()(const IdentityLite&) const { return "identity"; }
        std::string operator()(const Neumann& n) const {
            return "neumann:" + std::to_string(n.truncation);
        }
        std::string operator()(const ConjugateGradient& c) const {
            std::ostringstream os;
            os << "cg:" << c.tol << ":" << c.maxit;
            return os.str();
        }
        std::string operator()(const Exact&) const { return "exact"; }
        std::string operator()(const Unrolled& u) const {
            return "unrolled:" + std::to_string(u.inner_steps);
        }
        std::string operator()(const Mtl& m) const {
            if (m.coeffs.empty()) return "mtl";
            std::ostringstream os;
            os << "mtl:";
            for (size_t i = 0; i < m.coeffs.size(); ++i) os << (i ? "+" : "") << m.coeffs[i];
            return os.str();
        }
    };
    return std::visit(V{}, s);
}

HypergradScheme scheme_from_string(const std::string& s) {
    auto fail = [&]() -> HypergradScheme {
        throw ConfigError("unknown scheme '" + s +
                          "' (grammar: exact | neumann:<i> | identity | cg:<tol>:<maxit> | "
                          "unrolled:<k> | mtl | mtl:<c0+c1+...>)");
    };
    auto parse_num = [&](const std::string& text, double& out) {
        size_t used = 0;
        try {
            out = std::stod(text, &used);
        } catch (const std::exception&) {
            fail();
        }
        if (used != text.size()) fail();
    };
    if (s == "exact") return Exact{};
    if (s == "identity") return IdentityLite{};
    if (s == "mtl") return Mtl{};
    if (s.rfind("neumann:", 0) == 0) {
        double i = -1;
        parse_num(s.substr(8), i);
        if (i < 0 || i != std::floor(i)) fail();
        return Neumann{static_cast<int>(i)};
    }
    if (s.rfind("cg:", 0) == 0) {
        size_t second = s.find(':', 3);
        if (second == std::string::npos) fail();
        double tol = 0, maxit = 0;
        parse_num(s.substr(3, second - 3), tol);
        parse_num(s.substr(second + 1), maxit);
        if (tol <= 0 || maxit < 1 || maxit != std::floor(maxit)) fail();
        return ConjugateGradient{tol, static_cast<int>(maxit)};
    }
    if (s.rfind("unrolled:", 0) == 0) {
        double k = 0;
        parse_num(s.substr(9), k);
        if (k < 1 || k != std::floor(k)) fail();
        return Unrolled{static_cast<int>(k)};
    }
    if (s.rfind("mtl:", 0) == 0) {
        // '+'-separated so scheme lists can stay comma-separated
        Mtl m;
        std::string rest = s.substr(4);
        size_t pos = 0;
        while (pos <= rest.size()) {
            size_t sep = rest.find('+', pos);
            std::string tok =
                rest.substr(pos, sep == std::string::npos ? std::string::npos : sep - pos);
            double c = 0;
            parse_num(tok, c);
            m.coeffs.push_back(c);
            if (sep == std::string::npos) break;
            pos = sep + 1;
        }
        if (m.coeffs.empty()) fail();
        return m;
    }
    return fail();
}

namespace {

// One recorded aux forward + differentiable backward, reused for every
// Hessian application and the final mixed-term contraction.
struct AuxSession {
    Graph g;
    std::vector<Tensor> wa, pa;
    std::vector<Tensor> gw;
    bool has_w_grad = false;

    AuxSession(const BilevelProblem& prob, const std::vector<Tensor>& w,
               const std::vector<Tensor>& phi) {
        wa = g.leaves(w);
        pa = g.leaves(phi);
        Tensor aux = prob.aux(g, wa, pa);
        if (aux.attached()) {
            auto r = grad(aux, wa, {.create_graph = true});
            gw = r.grads;
            for (bool reached : r.reached) has_w_grad = has_w_grad || reached;
        } else {
            // constant objective: zero gradients, nothing to contract
            for (const auto& t : wa) gw.push_back(g.constant(Tensor::zeros(t.shape())));
        }
    }

    Tensor dot_gw(const std::vector<double>& flat) {
        auto vs = unflatten(flat, wa);
        Tensor s;
        for (size_t i = 0; i < gw.size(); ++i) {
            Tensor term = dot(gw[i], vs[i]);
            s = s.defined() ? add(s, term) : term;
        }
        return s;
    }

    std::vector<double> apply_hess(const std::vector<double>& v) {
        return flatten(grad(dot_gw(v), wa).grads);
    }

    // grad_phi of (gw . a), with `a` held constant: the Eq. 9 contraction.
    GradResult contract(const std::vector<double>& a) { return grad(dot_gw(a), pa); }
};

std::vector<double> grad_pri_w(const BilevelProblem& prob, const std::vector<Tensor>& w) {
    Graph g;
    std::vector<Tensor> wl = g.leaves(w);
    Tensor pri = prob.pri(g, wl);
    if (!pri.attached()) return std::vector<double>(flatten(w).size(), 0.0);
    return flatten(grad(pri, wl).grads);
}

HypergradResult finish_contraction(AuxSession& session, const std::vector<double>& vec,
                                   HypergradResult res) {
    GradResult contracted = session.contract(vec);
    res.dphi.reserve(contracted.grads.size());
    for (auto& t : contracted.grads) res.dphi.push_back(neg(t.detach()));
    // Individual phi components may legitimately have zero mixed-term columns
    // (additive biases); only a fully vanished term marks the run untrainable.
    bool any_reached = false;
    for (bool r : contracted.reached) any_reached = any_reached || r;
    if (!session.has_w_grad || !any_reached) {
        res.warning = true;
        if (res.note.empty()) res.note = "mixed term vanished: meta-gradient identically zero";
    }
    return res;
}

bool is_zero(const std::vector<double>& v) {
    for (double x : v)
        if (x != 0.0) return false;
    return true;
}

}  // namespace

std::vector<double> neumann_apply(
    const std::function<std::vector<double>(const std::vector<double>&)>& hess_apply,
    const std::vector<double>& u, int truncation) {
    if (truncation < 0) throw ConfigError("neumann: truncation must be nonnegative");
    std::vector<double> term = u;
    std::vector<double> acc = u;
    for (int j = 1; j <= truncation; ++j) {
        std::vector<double> hv = hess_apply(term);
        for (size_t i = 0; i < term.size(); ++i) {
            term[i] -= hv[i];
            acc[i] += term[i];
        }
        if (!all_finite(acc) || !all_finite(term))
            throw NeumannDivergenceError("neumann: partial sums diverged at j=" +
                                         std::to_string(j));
    }
    return acc;
}

HypergradResult hypergrad_neumann(const BilevelProblem& prob, const std::vector<Tensor>& w,
                                  const std::vector<Tensor>& phi, int truncation) {
    AuxSession session(prob, w, phi);
    std::vector<double> u = grad_pri_w(prob, w);
    std::vector<double> acc =
        neumann_apply([&](const std::vector<double>& v) { return session.apply_hess(v); }, u,
                      truncation);
    return finish_contraction(session, acc, {});
}

HypergradResult hypergrad_identity(const BilevelProblem& prob, const std::vector<Tensor>& w,
                                   const std::vector<Tensor>& phi) {
    // the zeroth Neumann partial sum: P = I, one backward-of-backward, no solver
    return hypergrad_neumann(prob, w, phi, 0);
}

HypergradResult hypergrad_exact(const BilevelProblem& prob, const std::vector<Tensor>& w,
                                const std::vector<Tensor>& phi, const Exact& opt) {
    const int64_t n = static_cast<int64_t>(flatten(w).size());
    if (n > opt.max_params)
        throw SolverError("hypergrad_exact: " + std::to_string(n) +
                          " parameters exceed the dense-Hessian guard (" +
                          std::to_string(opt.max_params) + ")");
    AuxSession session(prob, w, phi);
    std::vector<double> u = grad_pri_w(prob, w);

    Eigen::MatrixXd h(n, n);
    std::vector<double> basis(static_cast<size_t>(n), 0.0);
    for (int64_t j = 0; j < n; ++j) {
        basis[static_cast<size_t>(j)] = 1.0;
        std::vector<double> col = session.apply_hess(basis);
        basis[static_cast<size_t>(j)] = 0.0;
        for (int64_t i = 0; i < n; ++i) h(i, j) = col[static_cast<size_t>(i)];
    }

    Eigen::PartialPivLU<Eigen::MatrixXd> lu(h);
    Eigen::MatrixXd inv = lu.inverse();
    double cond = h.cwiseAbs().colwise().sum().maxCoeff() *
                  inv.cwiseAbs().colwise().sum().maxCoeff();
    if (!std::isfinite(cond) || cond > opt.cond_limit)
        throw SingularHessianError("hypergrad_exact: condition estimate " +
                                   std::to_string(cond) + " exceeds 1e12");
    Eigen::Map<const Eigen::VectorXd> uvec(u.data(), n);
    Eigen::VectorXd x = lu.solve(uvec);
    return finish_contraction(session, {x.data(), x.data() + n}, {});
}

HypergradResult hypergrad_cg(const BilevelProblem& prob, const std::vector<Tensor>& w,
                             const std::vector<Tensor>& phi, double tol, int maxit) {
    if (tol <= 0 || maxit < 1) throw ConfigError("hypergrad_cg: tol > 0 and maxit >= 1 required");
    AuxSession session(prob, w, phi);
    std::vector<double> u = grad_pri_w(prob, w);
    const size_t n = u.size();

    auto norm2 = [](const std::vector<double>& v) {
        double s = 0;
        for (double x : v) s += x * x;
        return std::sqrt(s);
    };

    HypergradResult meta;
    std::vector<double> x(n, 0.0);
    if (!is_zero(u)) {
        std::vector<double> r = u, p = u;
        double rr = 0;
        for (double v : r) rr += v * v;
        const double stop = tol * std::max(1.0, norm2(u));
        int it = 0;
        while (it < maxit) {
            std::vector<double> hp = session.apply_hess(p);
            double php = 0;
            for (size_t i = 0; i < n; ++i) php += p[i] * hp[i];
            if (php <= 0.0)
                throw NegativeCurvatureError(
                    "hypergrad_cg: negative curvature encountered (aux Hessian not SPD)");
            double alpha = rr / php;
            double rr_new = 0;
            for (size_t i = 0; i < n; ++i) {
                x[i] += alpha * p[i];
                r[i] -= alpha * hp[i];
                rr_new += r[i] * r[i];
            }
            ++it;
            if (std::sqrt(rr_new) <= stop) break;
            double beta = rr_new / rr;
            for (size_t i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
            rr = rr_new;
        }
        meta.iterations = it;
        if (std::sqrt(rr) > stop && it >= maxit) {
            meta.warning = true;
            meta.note = "cg: max iterations reached, returning best iterate";
        }
    }
    return finish_contraction(session, x, std::move(meta));
}

HypergradResult hypergrad_unrolled(const BilevelProblem& prob, const std::vector<Tensor>& w,
                                   const std::vector<Tensor>& phi, int steps, double alpha) {
    if (steps < 1) throw ConfigError("hypergrad_unrolled: steps must be >= 1");
    if (steps > 32)
        throw SolverError("hypergrad_unrolled: unroll depth " + std::to_string(steps) +
                          " exceeds the memory guard (32)");
    Graph g;
    std::vector<Tensor> cur = g.leaves(w);
    std::vector<Tensor> pa = g.leaves(phi);
    bool touched_w = false;
    for (int s = 0; s < steps; ++s) {
        Tensor aux = prob.aux(g, cur, pa);
        if (!aux.attached()) break;
        auto r = grad(aux, cur, {.create_graph = true});
        for (bool reached : r.reached) touched_w = touched_w || reached;
        std::vector<Tensor> next;
        next.reserve(cur.size());
        for (size_t i = 0; i < cur.size(); ++i)
            next.push_back(sub(cur[i], mul(r.grads[i], alpha)));
        cur = std::move(next);
    }
    Tensor pri = prob.pri(g, cur);
    HypergradResult res;
    if (!pri.attached()) {
        for (const auto& t : phi) res.dphi.push_back(Tensor::zeros(t.shape()));
        res.warning = true;
        res.note = "unrolled: primary objective is constant";
        return res;
    }
    auto r = grad(pri, pa);
    for (auto& t : r.grads) res.dphi.push_back(t);
    bool any_reached = false;
    for (bool reached : r.reached) any_reached = any_reached || reached;
    if (!touched_w || !any_reached) {
        res.warning = true;
        res.note = "unrolled: meta-gradient path vanished";
    }
    return res;
}

HypergradResult compute_hypergrad(const HypergradScheme& scheme, const BilevelProblem& prob,
                                  const std::vector<Tensor>& w, const std::vector<Tensor>& phi,
                                  double alpha) {
    struct V {
        const BilevelProblem& prob;
        const std::vector<Tensor>& w;
        const std::vector<Tensor>& phi;
        double alpha;
        HypergradResult operator()(const IdentityLite&) const {
            return hypergrad_identity(prob, w, phi);
        }
        HypergradResult operator()(const Neumann& n) const {
            return hypergrad_neumann(prob, w, phi, n.truncation);
        }
        HypergradResult operator()(const ConjugateGradient& c) const {
            return hypergrad_cg(prob, w, phi, c.tol, c.maxit);
        }
        HypergradResult operator()(const Exact& e) const {
            return hypergrad_exact(prob, w, phi, e);
        }
        HypergradResult operator()(const Unrolled& u) const {
            return hypergrad_unrolled(prob, w, phi, u.inner_steps, alpha);
        }
        HypergradResult operator()(const Mtl&) const {
            HypergradResult r;
            for (const auto& t : phi) r.dphi.push_back(Tensor::zeros(t.shape()));
            r.note = "mtl: uni-level, no outer step";
            return r;
        }
    };
    return std::visit(V{prob, w, phi, alpha}, scheme);
}

std::vector<Tensor> inner_step(const LossBuilder& aux, const std::vector<Tensor>& w,
                               double alpha) {
    if (alpha <= 0) throw ConfigError("inner_step: alpha must be positive");
    Graph g;
    std::vector<Tensor> wl = g.leaves(w);
    Tensor loss = aux(g, wl);
    if (!loss.attached()) return w;  // constant objective, nothing to descend
    auto r = grad(loss, wl);
    std::vector<Tensor> out;
    out.reserve(w.size());
    for (size_t i = 0; i < w.size(); ++i) out.push_back(sub(w[i], mul(r.grads[i], alpha)));
    return out;
}

std::vector<Tensor> outer_step(const std::vector<Tensor>& phi, const std::vector<Tensor>& dphi,
                               double beta, const std::vector<Tensor>* direct) {
    if (beta <= 0) throw ConfigError("outer_step: beta must be positive");
    if (phi.size() != dphi.size()) throw ShapeError("outer_step: dphi count mismatch");
    std::vector<Tensor> out;
    out.reserve(phi.size());
    for (size_t i = 0; i < phi.size(); ++i) {
        Tensor step = dphi[i];
        if (direct) step = add(step, (*direct)[i]);
        out.push_back(sub(phi[i], mul(step, beta)));
    }
    return out;
}

}  // namespace meltr
