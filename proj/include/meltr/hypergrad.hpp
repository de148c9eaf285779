#pragma once

#include <functional>
#include <string>
#include <variant>

#include "meltr/autodiff.hpp"

namespace meltr {

// Hypergradient approximation schemes. All AID-style schemes share the same
// factorization: an estimate P of the inverse Hessian of the aux objective is
// applied to grad_w of the primary objective, then contracted with the mixed
// term grad_phi grad_w L^aux. They differ only in P.
struct Exact {
    int64_t max_params = 200;   // dense-Hessian dimensionality guard
    double cond_limit = 1e12;
};
struct Neumann {
    int truncation = 3;
};
struct IdentityLite {};
struct ConjugateGradient {
    double tol = 1e-8;
    int maxit = 50;
};
struct Unrolled {
    int inner_steps = 1;
};
struct Mtl {
    std::vector<double> coeffs;  // empty -> all ones
};

using HypergradScheme =
    std::variant<IdentityLite, Neumann, ConjugateGradient, Exact, Unrolled, Mtl>;

std::string to_string(const HypergradScheme& s);
// Grammar: exact | neumann:<i> | identity | cg:<tol>:<maxit> | unrolled:<k>
//        | mtl | mtl:<c0,c1,...>
HypergradScheme scheme_from_string(const std::string& s);

/// Builders for the two levels. `aux` sees both decision vectors attached;
/// `pri` sees only w (its direct phi dependence, the regularizer, is handled
/// by the separate direct term in the outer step).
struct BilevelProblem {
    std::function<Tensor(Graph&, const std::vector<Tensor>& w, const std::vector<Tensor>& phi)> aux;
    std::function<Tensor(Graph&, const std::vector<Tensor>& w)> pri;
};

struct HypergradResult {
    std::vector<Tensor> dphi;  // estimate of grad_phi L^pri; descent applies the minus
    bool warning = false;      // solver fell short or the mixed term vanished
    int iterations = 0;        // CG only
    std::string note;
};

HypergradResult hypergrad_exact(const BilevelProblem& prob, const std::vector<Tensor>& w,
                                const std::vector<Tensor>& phi, const Exact& opt = {});
HypergradResult hypergrad_neumann(const BilevelProblem& prob, const std::vector<Tensor>& w,
                                  const std::vector<Tensor>& phi, int truncation);
HypergradResult hypergrad_identity(const BilevelProblem& prob, const std::vector<Tensor>& w,
                                   const std::vector<Tensor>& phi);
HypergradResult hypergrad_cg(const BilevelProblem& prob, const std::vector<Tensor>& w,
                             const std::vector<Tensor>& phi, double tol, int maxit);
HypergradResult hypergrad_unrolled(const BilevelProblem& prob, const std::vector<Tensor>& w,
                                   const std::vector<Tensor>& phi, int steps, double alpha);

/// Dispatch on the scheme tag; `alpha` is only used by Unrolled. Mtl yields a
/// zero hypergradient (uni-level training has no outer step).
HypergradResult compute_hypergrad(const HypergradScheme& scheme, const BilevelProblem& prob,
                                  const std::vector<Tensor>& w, const std::vector<Tensor>& phi,
                                  double alpha);

/// One inner update w - alpha * grad_w(aux), plain gradient descent.
std::vector<Tensor> inner_step(const LossBuilder& aux, const std::vector<Tensor>& w,
                               double alpha);

/// One outer update phi - beta * (dphi + direct). `direct` may be null.
std::vector<Tensor> outer_step(const std::vector<Tensor>& phi, const std::vector<Tensor>& dphi,
                               double beta, const std::vector<Tensor>* direct = nullptr);

/// acc = sum_{j=0..truncation} (I - H)^j u via repeated H-applications.
/// Throws NeumannDivergenceError on non-finite partial sums.
std::vector<double> neumann_apply(
    const std::function<std::vector<double>(const std::vector<double>&)>& hess_apply,
    const std::vector<double>& u, int truncation);

}  // namespace meltr
