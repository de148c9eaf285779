#pragma once

#include <functional>
#include <optional>

#include <json.hpp>

#include "meltr/hypergrad.hpp"
#include "meltr/loss_assembly.hpp"
#include "meltr/meltr_net.hpp"
#include "meltr/suites.hpp"

namespace meltr {

// Paper-scale optimizer constants; desk-scale defaults live in TrainConfig.
inline constexpr double kPaperAlpha = 3e-5;
inline constexpr double kPaperBeta = 1e-4;
inline constexpr int kDefaultInnerIters = 3;       // K
inline constexpr int kDefaultNeumannTruncation = 3;

enum class Optimizer { kSgd, kAdam };

const char* to_string(Optimizer o);
Optimizer optimizer_from_string(const std::string& s);

// Observer hook for tests and tracing: fired after every inner/outer step.
struct StepEvent {
    int epoch = 0;
    int step = 0;
    int inner_k = -1;  // -1 for the outer step
    bool is_outer = false;
    std::vector<double> losses;  // per-task values on the step's batch
    std::vector<double> w_flat;  // learner parameters after the update
};

struct TrainConfig {
    std::string suite = "regression";
    HypergradScheme scheme = IdentityLite{};
    double alpha = 0.05;
    double beta = 0.001;
    double gamma = 0.3;
    int k_inner = kDefaultInnerIters;
    int epochs = 30;
    int steps_per_epoch = 25;
    uint64_t seed = 1;
    bool include_direct_reg_grad = true;
    bool shared_outer_batch = false;
    Optimizer optimizer = Optimizer::kSgd;
    bool lr_decay = false;
    int meltr_d = 32;
    int meltr_heads = 4;
    MeltrVariant variant = MeltrVariant::kFull;
    bool track_cos_to_exact = false;
    int eval_batches = 8;
    // Test hook: remove the regularizer from the training path entirely (the
    // gamma = 0 run must be bit-identical to this).
    bool stub_regularizer = false;
    std::function<void(const StepEvent&)> observer;  // not serialized

    void validate() const;
};

nlohmann::json config_to_json(const TrainConfig& cfg);

struct EpochRecord {
    int epoch = 0;
    double train_pri = 0;
    double val_pri = 0;
    double reg_gap = 0;
    double wall_ms = 0;
    double outer_ms_mean = 0;
    std::vector<double> mean_partials;  // per task
};

struct LossRangeStats {
    double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
};

struct RunRecord {
    nlohmann::json config;
    nlohmann::json suite_meta;
    std::vector<EpochRecord> epochs;
    std::vector<LossRangeStats> final_ranges;  // per task, final epoch samples
    std::vector<double> final_loss_means;      // per task (sweep baseline)
    std::vector<double> outer_ms;              // raw per-outer-step timings
    bool diverged = false;
    std::string divergence_note;
    std::vector<std::string> warnings;
    MeltrNet meltr;                // final meta-parameters
    std::vector<Tensor> learner;   // final learner parameters
    std::optional<double> cos_to_exact;  // mean over final-epoch outer steps

    double final_val_pri() const;
    nlohmann::json to_json() const;
    static RunRecord from_json(const nlohmann::json& j);
};

/// Algorithm: per meta-step, K plain inner updates of the learner on the aux
/// objective, then one hypergradient outer update of phi. L^pri is evaluated
/// on a validation batch (a shared-batch mode is available for literal
/// single-batch fidelity). Aborts with a diagnostic record on divergence.
RunRecord train_loop(const TrainConfig& cfg, const TaskSpec& task);

}  // namespace meltr
