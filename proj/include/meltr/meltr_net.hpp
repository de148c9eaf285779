#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "meltr/autodiff.hpp"

namespace meltr {

/// Ordered loss values; index 0 is the primary task.
struct LossVector {
    std::vector<double> entries;
    std::vector<int64_t> task_ids;

    LossVector() = default;
    LossVector(std::vector<double> entries, std::vector<int64_t> task_ids);
    // task_ids 0..n-1 in order
    static LossVector of(std::vector<double> entries);

    int64_t size() const { return static_cast<int64_t>(entries.size()); }
    double total() const;
};

enum class MeltrVariant { kFull, kLinear, kSeOnly, kTeOnly };

MeltrVariant variant_from_string(const std::string& s);
std::string to_string(MeltrVariant v);

struct MeltrConfig {
    int d = 32;
    int heads = 4;
    int num_tasks = 2;  // T + 1 rows in the task-embedding table
    MeltrVariant variant = MeltrVariant::kFull;
    int ffn_mult = 4;
    double ln_eps = 1e-5;

    void validate() const;
};

/// The loss-combining network: scale-embeds each loss value, adds a task
/// embedding, runs one transformer encoder layer and mean-pools to a scalar.
/// Parameters are stored detached; each training step attaches them to a fresh
/// graph (as leaves when they are differentiated, as constants otherwise).
struct MeltrNet {
    MeltrConfig cfg;
    std::vector<Tensor> params;
    std::vector<std::string> names;

    static MeltrNet init(const MeltrConfig& cfg, uint64_t seed);

    int64_t param_count() const;
    const Tensor& param(const std::string& name) const;
    void set_param(const std::string& name, Tensor value);
};

/// L^aux as an attached scalar. `losses` are one-element attached tensors (or
/// constants) aligned with `task_ids`; `phi` follows MeltrNet's param layout.
Tensor meltr_forward(const std::vector<Tensor>& losses, const std::vector<int64_t>& task_ids,
                     const std::vector<Tensor>& phi, const MeltrConfig& cfg);

/// Plain evaluation at fixed parameters.
double meltr_value(const LossVector& l, const MeltrNet& net);

// d-vector scale embedding of one loss value (row of the vectorized SE MLP).
std::vector<double> scale_embed(double loss_value, const MeltrNet& net);
// Row t of the task-embedding table.
std::vector<double> task_embed(int64_t t, const MeltrNet& net);

/// All partial derivatives d MELTR / d l_t in one backward pass.
std::vector<double> probe_partials(const LossVector& l, const MeltrNet& net);

struct SweepRow {
    int64_t task_id;
    double loss_value;
    double output;
    double partial;
};

/// 1-D sweep: vary one task's loss over [lo, hi] with the others held at the
/// baseline, recording output and partial at each grid point.
std::vector<SweepRow> sweep_surface(const MeltrNet& net, int64_t sweep_task, double lo,
                                    double hi, int steps, const LossVector& baseline);

struct Surface2dRow {
    double loss_a;
    double loss_b;
    double output;
};

std::vector<Surface2dRow> surface_2d(const MeltrNet& net, int64_t task_a, int64_t task_b,
                                     double lo, double hi, int steps,
                                     const LossVector& baseline);

/// Largest |f(a+1,b+1) - f(a+1,b) - f(a,b+1) + f(a,b)| over a steps x steps
/// grid; zero for a function affine in each input.
double max_mixed_second_difference(const std::vector<Surface2dRow>& grid, int steps);

}  // namespace meltr
