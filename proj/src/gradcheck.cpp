#include "meltr/gradcheck.hpp"

#include <cmath>
#include <sstream>

#include "meltr/autodiff.hpp"
#include "meltr/hypergrad.hpp"
#include "meltr/quadratic.hpp"
#include "meltr/rng.hpp"

namespace meltr {

namespace {

constexpr double kFirstOrderTol = 1e-5;
constexpr double kHvpTol = 1e-4;
constexpr double kQuadClosedFormTol = 1e-8;
constexpr double kQuadFdTol = 1e-6;

const std::vector<Shape> kShapes = {{3, 4}, {4, 4}, {5, 4}, {}};

// Random composite over the sanctioned op set, reduced to a scalar.
// `smooth` drops the |.| kinks for the second-order comparison (finite
// differences straddling a kink measure the subgradient jump, not the
// almost-everywhere-zero second derivative).
Tensor composite(const std::vector<Tensor>& w, bool smooth) {
    const Tensor& a = w[0];
    const Tensor& b = w[1];
    const Tensor& t = w[2];
    const Tensor& s = w[3];
    Tensor h = matmul(a, b);
    h = add(h, embed(t, {0, 3, 1}));
    h = gelu(h);
    h = layer_norm_lastdim(h);
    Tensor att = softmax_lastdim(mul(matmul(h, transpose(h)), 0.5));
    h = matmul(att, h);
    Tensor left = slice(h, 1, 0, 2);
    Tensor right = slice(h, 1, 2, 2);
    h = concat(mul(left, right), right, 1);
    Tensor e = exp(mul(h, 0.3));
    Tensor inner = smooth ? mul(h, h) : abs(h);
    Tensor l = log(add(inner, 1.0));
    Tensor mixed = add(mul(e, 0.1), l);
    Tensor scaled = mul(mixed, broadcast(s, mixed.shape()));
    Tensor tail = smooth ? mul(b, b) : abs(b);
    return add(mean(scaled), mul(sum(reciprocal(add(tail, 2.0))), 0.05));
}

std::vector<Tensor> random_point(Rng& rng) {
    std::vector<Tensor> w;
    for (const auto& s : kShapes) w.push_back(Tensor(s, rng.uniform_vec(shape_numel(s), -0.9, 0.9)));
    return w;
}

double rel_err(const std::vector<Tensor>& got, const std::vector<Tensor>& want) {
    double m = 0;
    for (size_t i = 0; i < got.size(); ++i)
        m = std::max(m, max_rel_err(got[i], want[i], 1.0));
    return m;
}

}  // namespace

std::string GradcheckReport::summary() const {
    std::ostringstream os;
    auto line = [&](const char* name, bool ok, double worst, double tol) {
        os << (ok ? "PASS" : "FAIL") << "  " << name << "  worst rel err " << worst << "  (tol "
           << tol << ")\n";
    };
    line("first-order vs central differences    ", pass_first_order, worst_first_order,
         kFirstOrderTol);
    line("hvp vs finite differences of gradients", pass_hvp, worst_hvp, kHvpTol);
    os << (pass_quad ? "PASS" : "FAIL") << "  quadratic hypergradient oracle         worst "
       << worst_quad_closed_form << " vs closed form (tol " << kQuadClosedFormTol << "), "
       << worst_quad_fd << " vs dense FD (tol " << kQuadFdTol << ")\n";
    return os.str();
}

GradcheckReport run_gradcheck(const GradcheckOptions& opt) {
    GradcheckReport rep;

    {
        Rng rng(20240601);
        LossBuilder full = [](Graph&, const std::vector<Tensor>& w) { return composite(w, false); };
        for (int trial = 0; trial < opt.first_order_trials; ++trial) {
            auto w = random_point(rng);
            Graph g;
            auto leaves = g.leaves(w);
            auto analytic = grad(composite(leaves, false), leaves).grads;
            if (opt.inject_sign_flip && trial == 0)
                for (auto& t : analytic) t = neg(t.detach());
            auto fd = finite_diff_grad(full, w, 1e-4);
            rep.worst_first_order = std::max(rep.worst_first_order, rel_err(analytic, fd));
        }
        rep.pass_first_order = rep.worst_first_order <= kFirstOrderTol;
    }

    {
        Rng rng(99);
        LossBuilder smooth = [](Graph&, const std::vector<Tensor>& w) { return composite(w, true); };
        for (int trial = 0; trial < opt.hvp_trials; ++trial) {
            auto w = random_point(rng);
            std::vector<Tensor> v;
            for (const auto& s : kShapes)
                v.push_back(Tensor(s, rng.uniform_vec(shape_numel(s), -1.0, 1.0)));
            auto hv = hvp(smooth, w, v);
            // central difference of the gradient in direction v
            const double h = 1e-4;
            auto shifted = [&](double sgn) {
                std::vector<Tensor> pt;
                for (size_t i = 0; i < w.size(); ++i) {
                    std::vector<double> vals(w[i].values().begin(), w[i].values().end());
                    for (int64_t j = 0; j < w[i].size(); ++j)
                        vals[static_cast<size_t>(j)] += sgn * h * v[i].at(j);
                    pt.push_back(Tensor(w[i].shape(), std::move(vals)));
                }
                Graph g;
                auto leaves = g.leaves(pt);
                return grad(composite(leaves, true), leaves).grads;
            };
            auto gp = shifted(1.0);
            auto gm = shifted(-1.0);
            std::vector<Tensor> fd;
            for (size_t i = 0; i < w.size(); ++i) {
                std::vector<double> vals(static_cast<size_t>(w[i].size()));
                for (int64_t j = 0; j < w[i].size(); ++j)
                    vals[static_cast<size_t>(j)] = (gp[i].at(j) - gm[i].at(j)) / (2 * h);
                fd.push_back(Tensor(w[i].shape(), std::move(vals)));
            }
            rep.worst_hvp = std::max(rep.worst_hvp, rel_err(hv, fd));
        }
        rep.pass_hvp = rep.worst_hvp <= kHvpTol;
    }

    {
        Rng rng(2024);
        for (int trial = 0; trial < opt.quad_instances; ++trial) {
            int64_t n = 2 + rng.index(7);
            int64_t tasks = 1 + rng.index(4);
            QuadraticTestbed tb = QuadraticTestbed::random(rng, n, tasks);
            auto oracle = quad_closed_form(tb);

            BilevelProblem prob;
            prob.aux = [&tb](Graph&, const std::vector<Tensor>& w, const std::vector<Tensor>& phi) {
                return quad_aux(tb, w[0], phi);
            };
            prob.pri = [&tb](Graph&, const std::vector<Tensor>& w) { return quad_pri(tb, w[0]); };
            std::vector<Tensor> phi;
            for (double p : tb.phi) phi.push_back(Tensor::scalar(p));
            Tensor w0({n, 1}, oracle.w_star);
            auto res = hypergrad_exact(prob, {w0}, phi);
            for (size_t t = 0; t < tb.phi.size(); ++t)
                rep.worst_quad_closed_form = std::max(
                    rep.worst_quad_closed_form,
                    std::abs(res.dphi[t].value() - oracle.hypergrad[t]));

            // dense FD over phi through the closed-form minimizer
            auto objective = [&](const std::vector<double>& p) {
                QuadraticTestbed probe = tb;
                probe.phi = p;
                auto o = quad_closed_form(probe);
                double obj = 0;
                for (int64_t i = 0; i < n; ++i) {
                    double row = 0;
                    for (int64_t j = 0; j < n; ++j)
                        row += tb.A[0].at(i * n + j) * (o.w_star[static_cast<size_t>(j)] - tb.c[0].at(j));
                    obj += 0.5 * (o.w_star[static_cast<size_t>(i)] - tb.c[0].at(i)) * row;
                }
                return obj;
            };
            for (size_t t = 0; t < tb.phi.size(); ++t) {
                double h = 1e-5 * std::max(1.0, std::abs(tb.phi[t]));
                auto up = tb.phi, dn = tb.phi;
                up[t] += h;
                dn[t] -= h;
                double fd = (objective(up) - objective(dn)) / (2 * h);
                double denom = std::max(1e-3, std::abs(fd));
                rep.worst_quad_fd =
                    std::max(rep.worst_quad_fd, std::abs(oracle.hypergrad[t] - fd) / denom);
            }
        }
        rep.pass_quad =
            rep.worst_quad_closed_form <= kQuadClosedFormTol && rep.worst_quad_fd <= kQuadFdTol;
    }

    return rep;
}

}  // namespace meltr
