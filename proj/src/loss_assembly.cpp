#include "meltr/loss_assembly.hpp"

namespace meltr {

namespace {

Tensor sum_losses(const std::vector<Tensor>& losses) {
    if (losses.empty()) throw ShapeError("loss assembly: empty loss list");
    Tensor s = losses[0];
    for (size_t i = 1; i < losses.size(); ++i) s = add(s, losses[i]);
    return s;
}

}  // namespace

Tensor reg_loss(const std::vector<Tensor>& losses, const Tensor& meltr_out) {
    return abs(sub(meltr_out, sum_losses(losses)));
}

Tensor primary_loss(const std::vector<Tensor>& losses, const Tensor& meltr_out, double gamma) {
    if (gamma < 0.0) throw ConfigError("primary_loss: gamma must be nonnegative");
    if (losses.empty()) throw ShapeError("primary_loss: empty loss list");
    if (gamma == 0.0) return losses[0];
    return add(losses[0], mul(reg_loss(losses, meltr_out), gamma));
}

Tensor fixed_weight_combiner(const std::vector<Tensor>& losses, const std::vector<double>& coeffs) {
    if (losses.size() != coeffs.size())
        throw ShapeError("fixed_weight_combiner: coefficient count mismatch");
    if (losses.empty()) throw ShapeError("fixed_weight_combiner: empty loss list");
    Tensor s = mul(losses[0], coeffs[0]);
    for (size_t i = 1; i < losses.size(); ++i) s = add(s, mul(losses[i], coeffs[i]));
    return s;
}

LossBundle assemble_losses(const LossVector& raw, const std::vector<Tensor>& losses,
                           const Tensor& meltr_out, double gamma) {
    LossBundle b;
    b.aux = meltr_out;
    b.reg = reg_loss(losses, meltr_out);
    b.pri = primary_loss(losses, meltr_out, gamma);
    b.raw = raw;
    b.gamma = gamma;
    return b;
}

}  // namespace meltr
