#include "meltr/quadratic.hpp"

#include <Eigen/Dense>

namespace meltr {

namespace {

Eigen::MatrixXd to_eigen(const Tensor& t) {
    Eigen::MatrixXd m(t.dim(0), t.dim(1));
    for (int64_t i = 0; i < t.dim(0); ++i)
        for (int64_t j = 0; j < t.dim(1); ++j) m(i, j) = t.at(i * t.dim(1) + j);
    return m;
}

Tensor from_eigen(const Eigen::MatrixXd& m) {
    std::vector<double> v(static_cast<size_t>(m.rows() * m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            v[static_cast<size_t>(i * m.cols() + j)] = m(i, j);
    return Tensor({m.rows(), m.cols()}, std::move(v));
}

}  // namespace

void QuadraticTestbed::validate() const {
    if (A.empty() || A.size() != c.size() || A.size() != phi.size())
        throw ShapeError("quadratic testbed: A, c, phi must align and be nonempty");
    for (size_t t = 0; t < A.size(); ++t) {
        if (A[t].rank() != 2 || A[t].dim(0) != A[t].dim(1) || A[t].dim(0) != dim())
            throw ShapeError("quadratic testbed: A_t must be square of matching size");
        if (c[t].shape() != Shape{dim(), 1})
            throw ShapeError("quadratic testbed: c_t must be an (n,1) column");
        if (phi[t] <= 0.0) throw SolverError("quadratic testbed: weights must be positive");
        Eigen::MatrixXd m = to_eigen(A[t]);
        if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-9)
            throw SolverError("quadratic testbed: A_t not symmetric");
        Eigen::LLT<Eigen::MatrixXd> llt(m);
        if (llt.info() != Eigen::Success)
            throw SolverError("quadratic testbed: A_t failed Cholesky (not SPD)");
    }
}

QuadraticTestbed QuadraticTestbed::random(Rng& rng, int64_t n, int64_t tasks, double eig_lo,
                                          double eig_hi) {
    QuadraticTestbed tb;
    for (int64_t t = 0; t < tasks; ++t) {
        Eigen::MatrixXd gauss(n, n);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < n; ++j) gauss(i, j) = rng.normal();
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(gauss);
        Eigen::MatrixXd q = qr.householderQ();
        Eigen::VectorXd lam(n);
        for (int64_t i = 0; i < n; ++i) lam(i) = rng.uniform(eig_lo, eig_hi);
        Eigen::MatrixXd a = q * lam.asDiagonal() * q.transpose();
        a = 0.5 * (a + a.transpose());
        tb.A.push_back(from_eigen(a));
        Eigen::MatrixXd center(n, 1);
        for (int64_t i = 0; i < n; ++i) center(i, 0) = rng.uniform(-1.0, 1.0);
        tb.c.push_back(from_eigen(center));
        tb.phi.push_back(rng.uniform(0.3, 1.5));
    }
    tb.validate();
    return tb;
}

QuadOracle quad_closed_form(const QuadraticTestbed& tb) {
    tb.validate();
    const int64_t n = tb.dim();
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(n, n);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(n);
    std::vector<Eigen::MatrixXd> As;
    As.reserve(tb.A.size());
    for (size_t t = 0; t < tb.A.size(); ++t) {
        As.push_back(to_eigen(tb.A[t]));
        h += tb.phi[t] * As[t];
        b += tb.phi[t] * (As[t] * to_eigen(tb.c[t]));
    }
    Eigen::LLT<Eigen::MatrixXd> llt(h);
    if (llt.info() != Eigen::Success)
        throw SolverError("quad_closed_form: combined Hessian failed Cholesky");
    Eigen::VectorXd w_star = llt.solve(b);

    QuadOracle out;
    out.w_star.assign(w_star.data(), w_star.data() + n);
    // d l_0 / d phi_t = (w* - c_0)' A_0 H^-1 A_t (c_t - w*)
    Eigen::VectorXd gpri = As[0] * (w_star - to_eigen(tb.c[0]));
    Eigen::VectorXd hg = llt.solve(gpri);
    out.hypergrad.resize(tb.A.size());
    for (size_t t = 0; t < tb.A.size(); ++t) {
        Eigen::VectorXd dir = As[t] * (to_eigen(tb.c[t]) - w_star);
        out.hypergrad[t] = hg.dot(dir);
    }
    return out;
}

Tensor quad_task_loss(const Tensor& w, const Tensor& A, const Tensor& c) {
    Tensor diff = sub(w, c);
    return reshape(mul(matmul(transpose(diff), matmul(A, diff)), 0.5), {});
}

Tensor quad_aux(const QuadraticTestbed& tb, const Tensor& w, const std::vector<Tensor>& phi) {
    if (phi.size() != tb.A.size()) throw ShapeError("quad_aux: phi count mismatch");
    Tensor s;
    for (size_t t = 0; t < tb.A.size(); ++t) {
        Tensor term = mul(reshape(phi[t], {}), quad_task_loss(w, tb.A[t], tb.c[t]));
        s = s.defined() ? add(s, term) : term;
    }
    return s;
}

Tensor quad_pri(const QuadraticTestbed& tb, const Tensor& w) {
    return quad_task_loss(w, tb.A[0], tb.c[0]);
}

}  // namespace meltr
