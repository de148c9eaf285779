#pragma once

#include <functional>

#include "meltr/autodiff.hpp"
#include "meltr/rng.hpp"

namespace meltr {

/// Bi-level testbed with a known solution: per-task quadratics
/// l_t(w) = 0.5 (w - c_t)' A_t (w - c_t), combined linearly with positive
/// weights phi. The inner problem then has the closed-form minimizer
/// w*(phi) = (sum phi_t A_t)^-1 (sum phi_t A_t c_t).
struct QuadraticTestbed {
    std::vector<Tensor> A;    // (n,n) SPD
    std::vector<Tensor> c;    // (n,1)
    std::vector<double> phi;  // positive weights, aligned with tasks

    int64_t dim() const { return A.empty() ? 0 : A[0].dim(0); }
    int64_t tasks() const { return static_cast<int64_t>(A.size()); }

    // Throws SolverError unless every A_t passes a Cholesky factorization and
    // all weights are positive.
    void validate() const;

    // A_t = Q diag(lambda) Q' with random orthogonal Q and eigenvalues uniform
    // in [eig_lo, eig_hi].
    static QuadraticTestbed random(Rng& rng, int64_t n, int64_t tasks, double eig_lo = 0.2,
                                   double eig_hi = 2.0);
};

struct QuadOracle {
    std::vector<double> w_star;     // minimizer of the combined objective
    std::vector<double> hypergrad;  // d l_0(w*(phi)) / d phi_t
};

/// Exact w*(phi) and the exact hypergradient of the primary quadratic via the
/// analytic implicit-function expression with the true inverse Hessian.
QuadOracle quad_closed_form(const QuadraticTestbed& tb);

// Autodiff-side builders for the same testbed. `w` is an attached (n,1)
// column; `phi` holds attached one-element weights.
Tensor quad_task_loss(const Tensor& w, const Tensor& A, const Tensor& c);
Tensor quad_aux(const QuadraticTestbed& tb, const Tensor& w, const std::vector<Tensor>& phi);
Tensor quad_pri(const QuadraticTestbed& tb, const Tensor& w);

}  // namespace meltr
