#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "meltr/quadratic.hpp"
#include "meltr/suites.hpp"
#include "test_helpers.hpp"

using namespace meltr;
using namespace meltr::testing;

namespace {

// Objective value l_0(w*(phi)) through the closed-form minimizer only; used to
// cross-check the analytic hypergradient by finite differences over phi.
double quad_objective(QuadraticTestbed tb, const std::vector<double>& phi) {
    tb.phi = phi;
    auto oracle = quad_closed_form(tb);
    const int64_t n = tb.dim();
    double obj = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double row = 0.0;
        for (int64_t j = 0; j < n; ++j)
            row += tb.A[0].at(i * n + j) * (oracle.w_star[static_cast<size_t>(j)] - tb.c[0].at(j));
        obj += 0.5 * (oracle.w_star[static_cast<size_t>(i)] - tb.c[0].at(i)) * row;
    }
    return obj;
}

std::vector<double> quad_fd_hypergrad(const QuadraticTestbed& tb, double step = 1e-5) {
    std::vector<double> out(tb.phi.size());
    for (size_t t = 0; t < tb.phi.size(); ++t) {
        double h = step * std::max(1.0, std::abs(tb.phi[t]));
        auto up = tb.phi, dn = tb.phi;
        up[t] += h;
        dn[t] -= h;
        out[t] = (quad_objective(tb, up) - quad_objective(tb, dn)) / (2 * h);
    }
    return out;
}

}  // namespace

TEST_CASE("quad_closed_form on hand-checked instances") {
    SUBCASE("primary only: optimum reached, zero hypergradient") {
        QuadraticTestbed tb;
        tb.A = {Tensor({2, 2}, {1, 0, 0, 1})};
        tb.c = {Tensor({2, 1}, {0.3, -0.8})};
        tb.phi = {1.0};
        auto oracle = quad_closed_form(tb);
        CHECK(oracle.w_star[0] == doctest::Approx(0.3).epsilon(1e-12));
        CHECK(oracle.w_star[1] == doctest::Approx(-0.8).epsilon(1e-12));
        CHECK(std::abs(oracle.hypergrad[0]) <= 1e-12);
    }

    SUBCASE("two tasks with identity-like matrices") {
        QuadraticTestbed tb;
        tb.A = {Tensor({2, 2}, {1, 0, 0, 1}), Tensor({2, 2}, {2, 0, 0, 2})};
        tb.c = {Tensor({2, 1}, {1, 0}), Tensor({2, 1}, {0, 1})};
        tb.phi = {1.0, 1.0};
        auto oracle = quad_closed_form(tb);
        CHECK(oracle.w_star[0] == doctest::Approx(1.0 / 3).epsilon(1e-12));
        CHECK(oracle.w_star[1] == doctest::Approx(2.0 / 3).epsilon(1e-12));
        auto fd = quad_fd_hypergrad(tb);
        for (size_t t = 0; t < 2; ++t)
            CHECK(oracle.hypergrad[t] == doctest::Approx(fd[t]).epsilon(1e-7));
    }

    SUBCASE("scaling all weights leaves the argmin unchanged") {
        Rng rng(3);
        QuadraticTestbed tb = QuadraticTestbed::random(rng, 4, 3);
        auto base = quad_closed_form(tb);
        for (double lambda : {0.5, 2.0, 17.0}) {
            QuadraticTestbed scaled = tb;
            for (auto& p : scaled.phi) p *= lambda;
            auto o = quad_closed_form(scaled);
            for (size_t i = 0; i < base.w_star.size(); ++i)
                CHECK(o.w_star[i] == doctest::Approx(base.w_star[i]).epsilon(1e-10));
        }
    }

    SUBCASE("validation rejects non-SPD and nonpositive weights") {
        QuadraticTestbed tb;
        tb.A = {Tensor({2, 2}, {1, 0, 0, -1})};
        tb.c = {Tensor({2, 1}, {0, 0})};
        tb.phi = {1.0};
        CHECK_THROWS_AS(tb.validate(), SolverError);
        tb.A = {Tensor({2, 2}, {1, 0, 0, 1})};
        tb.phi = {0.0};
        CHECK_THROWS_AS(tb.validate(), SolverError);
    }
}

TEST_CASE("closed-form hypergradient matches dense FD over 50 random instances") {
    Rng rng(2024);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        int64_t n = 2 + rng.index(7);      // up to 8
        int64_t tasks = 1 + rng.index(4);  // up to 5
        QuadraticTestbed tb = QuadraticTestbed::random(rng, n, tasks);
        auto oracle = quad_closed_form(tb);
        auto fd = quad_fd_hypergrad(tb);
        for (size_t t = 0; t < fd.size(); ++t) {
            double denom = std::max(1e-3, std::abs(fd[t]));
            worst = std::max(worst, std::abs(oracle.hypergrad[t] - fd[t]) / denom);
        }
    }
    CHECK(worst <= 1e-6);
}

TEST_CASE("autodiff quad losses agree with the closed form at w*") {
    Rng rng(5);
    QuadraticTestbed tb = QuadraticTestbed::random(rng, 3, 2);
    auto oracle = quad_closed_form(tb);
    Graph g;
    Tensor w = g.leaf(Tensor({3, 1}, oracle.w_star));
    std::vector<Tensor> phi = {g.leaf(Tensor::scalar(tb.phi[0])),
                               g.leaf(Tensor::scalar(tb.phi[1]))};
    Tensor aux = quad_aux(tb, w, phi);
    auto gw = grad(aux, {w});
    CHECK(max_abs_diff(gw.grads[0], Tensor::zeros({3, 1})) <= 1e-10);
}

TEST_CASE("regression suite determinism and roles") {
    TaskSpec spec = make_regression_suite(11);
    REQUIRE(spec.num_tasks() == 4);
    CHECK(spec.heads[0].role == TaskRole::kPrimary);
    CHECK(spec.heads[1].role == TaskRole::kHelpful);
    CHECK(spec.heads[2].role == TaskRole::kHarmful);
    CHECK(spec.heads[3].role == TaskRole::kNeutral);

    TaskSpec again = make_regression_suite(11);
    auto s1 = spec.train_stream(7);
    auto s2 = again.train_stream(7);
    Batch b1 = s1.next();
    Batch b2 = s2.next();
    for (size_t t = 0; t < b1.targets.size(); ++t) {
        CHECK(max_abs_diff(b1.inputs[t], b2.inputs[t]) == 0.0);
        CHECK(max_abs_diff(b1.targets[t], b2.targets[t]) == 0.0);
    }

    Batch bv = spec.val_stream(7).next();
    CHECK(max_abs_diff(b1.inputs[0], bv.inputs[0]) > 0.0);
}

TEST_CASE("losses are nonnegative across suites") {
    for (const TaskSpec& spec : {make_regression_suite(3), make_classification_suite(3)}) {
        auto w = learner_init(spec, 1);
        auto stream = spec.train_stream(2);
        for (int i = 0; i < 5; ++i) {
            Graph g;
            auto losses = task_losses(g, g.leaves(w), spec, stream.next());
            for (auto& l : losses) CHECK(l.value() >= 0.0);
        }
    }
}

TEST_CASE("helpful-task loss correlates with the primary loss pointwise") {
    TaskSpec spec = make_regression_suite(21);
    auto w = learner_init(spec, 4);
    const int64_t kPoints = 1000;
    std::vector<double> pri_err, help_err;
    auto stream = spec.train_stream(99);
    Graph g;
    auto wa = g.leaves(w);
    for (int64_t got = 0; got < kPoints; got += spec.batch_size) {
        Batch b = stream.next();
        Tensor p0 = head_output(g, wa, spec, b, 0);
        Tensor p1 = head_output(g, wa, spec, b, 1);
        for (int64_t i = 0; i < spec.batch_size; ++i) {
            double e0 = p0.at(i) - b.targets[0].at(i);
            double e1 = p1.at(i) - b.targets[1].at(i);
            pri_err.push_back(e0 * e0);
            help_err.push_back(e1 * e1);
        }
    }
    double n = static_cast<double>(pri_err.size());
    double m0 = 0, m1 = 0;
    for (size_t i = 0; i < pri_err.size(); ++i) {
        m0 += pri_err[i];
        m1 += help_err[i];
    }
    m0 /= n;
    m1 /= n;
    double cov = 0, v0 = 0, v1 = 0;
    for (size_t i = 0; i < pri_err.size(); ++i) {
        cov += (pri_err[i] - m0) * (help_err[i] - m1);
        v0 += (pri_err[i] - m0) * (pri_err[i] - m0);
        v1 += (help_err[i] - m1) * (help_err[i] - m1);
    }
    double pearson = cov / std::sqrt(v0 * v1);
    CHECK(pearson > 0.5);
}

TEST_CASE("harmful-task gradients are directionally unrelated to the primary's") {
    TaskSpec spec = make_regression_suite(31);
    auto w = learner_init(spec, 6);
    auto stream = spec.train_stream(13);
    double mean_cos = 0.0;
    const int kBatches = 100;
    for (int i = 0; i < kBatches; ++i) {
        Batch b = stream.next();
        Graph g;
        auto wa = g.leaves(w);
        auto losses = task_losses(g, wa, spec, b);
        auto g0 = grad(losses[0], wa).grads;
        auto g2 = grad(losses[2], wa).grads;
        mean_cos += cosine(flatten(g0), flatten(g2));
    }
    mean_cos /= kBatches;
    CHECK(std::abs(mean_cos) < 0.1);
}

TEST_CASE("classification suite") {
    TaskSpec spec = make_classification_suite(5);
    REQUIRE(spec.num_tasks() == 3);
    CHECK(spec.backbone == std::vector<int64_t>{2, 32, 32});

    SUBCASE("rotation by zero degrees keeps the point, label 0") {
        auto stream = spec.train_stream(1);
        bool saw_label0 = false;
        for (int tries = 0; tries < 5 && !saw_label0; ++tries) {
            Batch b = stream.next();
            for (int64_t i = 0; i < spec.batch_size; ++i) {
                if (b.targets[2].at(i * 4 + 0) == 1.0) {
                    saw_label0 = true;
                    CHECK(b.inputs[2].at(2 * i) ==
                          doctest::Approx(b.inputs[0].at(2 * i)).epsilon(1e-12));
                    CHECK(b.inputs[2].at(2 * i + 1) ==
                          doctest::Approx(b.inputs[0].at(2 * i + 1)).epsilon(1e-12));
                }
            }
        }
        CHECK(saw_label0);
    }

    SUBCASE("mixup with coefficient 1 reduces to the plain primary loss") {
        auto w = learner_init(spec, 2);
        Batch b = spec.train_stream(3).next();
        Batch degenerate = b;
        degenerate.inputs[1] = b.inputs[0];
        degenerate.targets[1] = b.targets[0];
        Graph g;
        auto losses = task_losses(g, g.leaves(w), spec, degenerate);
        CHECK(losses[1].value() == doctest::Approx(losses[0].value()).epsilon(1e-12));
    }

    SUBCASE("primary-only training reaches > 90% accuracy") {
        auto w = learner_init(spec, 7);
        auto stream = spec.train_stream(8);
        const double lr = 0.05;
        for (int step = 0; step < 400; ++step) {
            Batch b = stream.next();
            Graph g;
            auto wa = g.leaves(w);
            auto losses = task_losses(g, wa, spec, b);
            auto gw = grad(losses[0], wa).grads;
            for (size_t i = 0; i < w.size(); ++i) w[i] = sub(w[i], mul(gw[i], lr));
        }
        auto eval = spec.val_stream(9);
        int64_t hits = 0, total = 0;
        for (int e = 0; e < 10; ++e) {
            Batch b = eval.next();
            Graph g;
            Tensor logits = head_output(g, g.leaves(w), spec, b, 0);
            for (int64_t i = 0; i < spec.batch_size; ++i) {
                int64_t arg = 0, want = 0;
                for (int64_t c = 1; c < 4; ++c) {
                    if (logits.at(i * 4 + c) > logits.at(i * 4 + arg)) arg = c;
                    if (b.targets[0].at(i * 4 + c) > b.targets[0].at(i * 4 + want)) want = c;
                }
                hits += (arg == want);
                ++total;
            }
        }
        CHECK(static_cast<double>(hits) / static_cast<double>(total) > 0.9);
    }
}

TEST_CASE("reduced regression learner stays under the exact-solver guard") {
    TaskSpec reduced = make_regression_suite(1, 4, {.in = 4, .hidden = 5, .feat = 4});
    CHECK(learner_param_count(reduced) <= 200);
    TaskSpec full = make_regression_suite(1);
    CHECK(learner_param_count(full) <= 2000);
}
