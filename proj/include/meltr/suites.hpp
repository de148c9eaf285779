#pragma once

#include <functional>
#include <string>

#include <json.hpp>

#include "meltr/autodiff.hpp"
#include "meltr/rng.hpp"

namespace meltr {

enum class TaskRole { kPrimary, kHelpful, kHarmful, kNeutral };
const char* to_string(TaskRole r);

enum class HeadKind { kMse, kCrossEntropy };

struct TaskHead {
    std::string name;
    HeadKind kind = HeadKind::kMse;
    TaskRole role = TaskRole::kNeutral;
    int64_t out_dim = 1;
    int shares_params_with = -1;  // reuse another head's projection (mixup)
};

/// One batch of per-task (input, target) pairs, aligned with TaskSpec::heads.
/// Tasks may alias the same input tensor.
struct Batch {
    std::vector<Tensor> inputs;   // (B, in_dim)
    std::vector<Tensor> targets;  // (B, head.out_dim)
};

/// Deterministic batch source; value-typed so every train loop clones its own.
class BatchStream {
public:
    BatchStream(uint64_t seed, std::function<Batch(Rng&)> gen)
        : rng_(seed), gen_(std::move(gen)) {}
    Batch next() { return gen_(rng_); }

private:
    Rng rng_;
    std::function<Batch(Rng&)> gen_;
};

/// A synthetic multi-task problem: a shared MLP backbone, one lightweight head
/// per task (index 0 primary), and a seeded batch generator.
struct TaskSpec {
    std::string name;
    std::vector<int64_t> backbone;  // [in, hidden..., feat]
    std::vector<TaskHead> heads;
    int64_t batch_size = 16;
    std::function<Batch(Rng&)> gen;
    nlohmann::json metadata;

    int64_t num_tasks() const { return static_cast<int64_t>(heads.size()); }
    BatchStream train_stream(uint64_t seed) const;
    BatchStream val_stream(uint64_t seed) const;
};

struct RegressionDims {
    int64_t in = 8;
    int64_t hidden = 16;
    int64_t feat = 8;
};

/// Regression suite with designed task roles: primary = fit a fixed random
/// teacher; helpful = same teacher plus small noise; harmful = an independent
/// teacher; neutral = input reconstruction.
TaskSpec make_regression_suite(uint64_t seed, int64_t n_tasks = 4, RegressionDims dims = {});

/// 2-D four-blob classification; aux 1 = mixup cross-entropy on the primary
/// head, aux 2 = rotation prediction (0/90/180/270) with its own head.
TaskSpec make_classification_suite(uint64_t seed);

// Learner parameters: backbone (W, b) pairs, then per unique head (W, b).
std::vector<Tensor> learner_init(const TaskSpec& spec, uint64_t seed);
int64_t learner_param_count(const TaskSpec& spec);

/// All task losses on one batch, attached to g. Losses are nonnegative.
std::vector<Tensor> task_losses(Graph& g, const std::vector<Tensor>& w, const TaskSpec& spec,
                                const Batch& batch);

/// Raw head output (predictions or logits) for one task.
Tensor head_output(Graph& g, const std::vector<Tensor>& w, const TaskSpec& spec,
                   const Batch& batch, int64_t task);

}  // namespace meltr
