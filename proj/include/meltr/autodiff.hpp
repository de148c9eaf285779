#pragma once

#include <functional>
#include <vector>

#include "meltr/graph.hpp"
#include "meltr/ops.hpp"

namespace meltr {

struct GradOptions {
    // Record the backward pass into the graph so the returned gradients are
    // themselves differentiable.
    bool create_graph = false;
};

struct GradResult {
    std::vector<Tensor> grads;  // aligned with wrt, same shapes
    std::vector<bool> reached;  // false -> zero gradient was substituted
    bool all_reached() const;
};

/// Reverse-mode gradient of a one-element output with respect to attached
/// tensors. Unreachable wrt entries yield zeros with reached=false rather than
/// an error (a constant objective is legitimate, e.g. the TE-only ablation).
GradResult grad(const Tensor& output, const std::vector<Tensor>& wrt,
                GradOptions opt = {});

// Builds a scalar loss from attached parameters on the given graph.
using LossBuilder =
    std::function<Tensor(Graph&, const std::vector<Tensor>&)>;

/// Hessian-vector product (d^2 L / dw^2) v via grad-of-(grad . v); the Hessian
/// is never materialized.
std::vector<Tensor> hvp(const LossBuilder& loss, const std::vector<Tensor>& w,
                        const std::vector<Tensor>& v);

/// Central-difference gradient estimate, element by element, with per-element
/// step h_i = step * max(1, |w_i|).
std::vector<Tensor> finite_diff_grad(const LossBuilder& loss,
                                     const std::vector<Tensor>& w, double step);

// Flatten/unflatten helpers shared by the hypergradient solvers.
std::vector<double> flatten(const std::vector<Tensor>& ts);
std::vector<Tensor> unflatten(const std::vector<double>& flat,
                              const std::vector<Tensor>& like);

}  // namespace meltr
