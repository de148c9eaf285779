#pragma once

#include "meltr/meltr_net.hpp"

namespace meltr {

/// The assembled objectives of one step, kept for reporting.
struct LossBundle {
    Tensor aux;   // MELTR(l; phi)
    Tensor pri;   // l_0 + gamma * reg
    Tensor reg;   // |MELTR(l; phi) - sum_t l_t|
    LossVector raw;
    double gamma = 0.0;
};

/// |MELTR(l; phi) - sum_t l_t| from an already-computed aux scalar.
Tensor reg_loss(const std::vector<Tensor>& losses, const Tensor& meltr_out);

/// l_0 + gamma * reg_loss. gamma must be nonnegative; gamma == 0 short-circuits
/// to l_0 so a disabled regularizer leaves no trace in the graph.
Tensor primary_loss(const std::vector<Tensor>& losses, const Tensor& meltr_out, double gamma);

/// sum_t coeffs_t * l_t — the fixed-weight multi-task comparator.
Tensor fixed_weight_combiner(const std::vector<Tensor>& losses, const std::vector<double>& coeffs);

LossBundle assemble_losses(const LossVector& raw, const std::vector<Tensor>& losses,
                           const Tensor& meltr_out, double gamma);

// gamma grids: the ablation grid and the narrower search set.
inline const std::vector<double> kGammaAblationGrid = {0.0, 0.001, 0.01, 0.1, 1.0, 10.0, 100.0};
inline const std::vector<double> kGammaSearchSet = {0.1, 0.3, 0.5};

}  // namespace meltr
