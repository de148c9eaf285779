#include "meltr/suites.hpp"

#include <cmath>
#include <memory>

namespace meltr {

const char* to_string(TaskRole r) {
    switch (r) {
        case TaskRole::kPrimary: return "primary";
        case TaskRole::kHelpful: return "helpful";
        case TaskRole::kHarmful: return "harmful";
        case TaskRole::kNeutral: return "neutral";
    }
    return "?";
}

namespace {

constexpr uint64_t kTrainSalt = 0x7261696eULL;  // "rain"
constexpr uint64_t kValSalt = 0x76616c69ULL;    // "vali"
constexpr double kHeadInitScale = 0.1;

Tensor rows_bias(const Tensor& b, int64_t n) { return matmul(Tensor::ones({n, 1}), b); }

Tensor kaiming(Rng& rng, Shape shape, int64_t fan_in) {
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    return Tensor(shape, rng.uniform_vec(shape_numel(shape), -bound, bound));
}

// Fixed random tanh network used as a data-generating target function.
// Evaluated in plain arithmetic; it is data, not part of any gradient path.
struct Teacher {
    int64_t in = 0;
    int64_t k = 0;
    std::vector<double> w1;  // (in, k)
    std::vector<double> w2;  // (k)
    double scale = 1.0;

    // sharpness scales the input weights: outputs stay unit-variance after
    // calibration, but the function oscillates faster, so fitting it bends the
    // shared backbone harder.
    static Teacher random(Rng& rng, int64_t in, int64_t k, double sharpness = 1.0) {
        Teacher t;
        t.in = in;
        t.k = k;
        t.w1 = rng.normal_vec(in * k, sharpness / std::sqrt(static_cast<double>(in)));
        t.w2 = rng.normal_vec(k, 1.0 / std::sqrt(static_cast<double>(k)));
        return t;
    }

    double eval(const double* x) const {
        double out = 0.0;
        for (int64_t j = 0; j < k; ++j) {
            double h = 0.0;
            for (int64_t i = 0; i < in; ++i) h += x[i] * w1[static_cast<size_t>(i * k + j)];
            out += std::tanh(h) * w2[static_cast<size_t>(j)];
        }
        return out / scale;
    }

    // Normalize so outputs over a fixed probe set have unit variance.
    void calibrate(Rng& rng, int64_t probes = 512) {
        double s1 = 0.0, s2 = 0.0;
        std::vector<double> x(static_cast<size_t>(in));
        for (int64_t p = 0; p < probes; ++p) {
            for (auto& v : x) v = rng.normal();
            double y = eval(x.data());
            s1 += y;
            s2 += y * y;
        }
        double mean = s1 / static_cast<double>(probes);
        double var = s2 / static_cast<double>(probes) - mean * mean;
        scale = std::sqrt(std::max(var, 1e-12));
    }
};

int64_t backbone_layers(const TaskSpec& spec) {
    return static_cast<int64_t>(spec.backbone.size()) - 1;
}

// Forward through the shared backbone; gelu after every layer.
Tensor backbone_features(const std::vector<Tensor>& w, const TaskSpec& spec, const Tensor& x) {
    Tensor h = x;
    for (int64_t l = 0; l < backbone_layers(spec); ++l) {
        const Tensor& wl = w[static_cast<size_t>(2 * l)];
        const Tensor& bl = w[static_cast<size_t>(2 * l + 1)];
        h = gelu(add(matmul(h, wl), rows_bias(bl, h.dim(0))));
    }
    return h;
}

// Index of the (W, b) pair owned by `task`, following the shares chain.
size_t head_param_index(const TaskSpec& spec, int64_t task) {
    int64_t owner = task;
    while (spec.heads[static_cast<size_t>(owner)].shares_params_with >= 0)
        owner = spec.heads[static_cast<size_t>(owner)].shares_params_with;
    size_t idx = static_cast<size_t>(2 * backbone_layers(spec));
    for (int64_t t = 0; t < owner; ++t) {
        if (spec.heads[static_cast<size_t>(t)].shares_params_with < 0) idx += 2;
    }
    return idx;
}

Tensor ce_loss(const Tensor& logits, const Tensor& targets) {
    Tensor logp = log(softmax_lastdim(logits));
    double inv_b = 1.0 / static_cast<double>(logits.dim(0));
    return neg(mul(sum(mul(targets, logp)), inv_b));
}

}  // namespace

BatchStream TaskSpec::train_stream(uint64_t seed) const {
    return BatchStream(mix_seed(seed, kTrainSalt), gen);
}

BatchStream TaskSpec::val_stream(uint64_t seed) const {
    return BatchStream(mix_seed(seed, kValSalt), gen);
}

std::vector<Tensor> learner_init(const TaskSpec& spec, uint64_t seed) {
    // Heads start an order of magnitude below the backbone so initial
    // per-task losses are dominated by their targets, not by head noise.
    Rng rng(mix_seed(seed, 0x6c65726eULL));  // "lern"
    std::vector<Tensor> w;
    for (int64_t l = 0; l < backbone_layers(spec); ++l) {
        int64_t in = spec.backbone[static_cast<size_t>(l)];
        int64_t out = spec.backbone[static_cast<size_t>(l + 1)];
        w.push_back(kaiming(rng, {in, out}, in));
        w.push_back(Tensor::zeros({1, out}));
    }
    int64_t feat = spec.backbone.back();
    for (const auto& head : spec.heads) {
        if (head.shares_params_with >= 0) continue;
        w.push_back(mul(kaiming(rng, {feat, head.out_dim}, feat), kHeadInitScale));
        w.push_back(Tensor::zeros({1, head.out_dim}));
    }
    return w;
}

int64_t learner_param_count(const TaskSpec& spec) {
    auto w = learner_init(spec, 0);
    int64_t n = 0;
    for (const auto& t : w) n += t.size();
    return n;
}

Tensor head_output(Graph& g, const std::vector<Tensor>& w, const TaskSpec& spec,
                   const Batch& batch, int64_t task) {
    (void)g;
    const Tensor& x = batch.inputs.at(static_cast<size_t>(task));
    Tensor feat = backbone_features(w, spec, x);
    size_t hi = head_param_index(spec, task);
    return add(matmul(feat, w.at(hi)), rows_bias(w.at(hi + 1), feat.dim(0)));
}

std::vector<Tensor> task_losses(Graph& g, const std::vector<Tensor>& w, const TaskSpec& spec,
                                const Batch& batch) {
    if (batch.inputs.size() != spec.heads.size() || batch.targets.size() != spec.heads.size())
        throw ShapeError("task_losses: batch does not match the task spec");
    std::vector<Tensor> losses;
    losses.reserve(spec.heads.size());
    for (int64_t t = 0; t < spec.num_tasks(); ++t) {
        Tensor out = head_output(g, w, spec, batch, t);
        const Tensor& y = batch.targets[static_cast<size_t>(t)];
        if (spec.heads[static_cast<size_t>(t)].kind == HeadKind::kMse) {
            Tensor diff = sub(out, y);
            losses.push_back(mean(mul(diff, diff)));
        } else {
            losses.push_back(ce_loss(out, y));
        }
    }
    return losses;
}

TaskSpec make_regression_suite(uint64_t seed, int64_t n_tasks, RegressionDims dims) {
    if (n_tasks < 2) throw ConfigError("regression suite: need a primary and at least one aux task");
    if (dims.in > 64 || dims.hidden > 64 || dims.feat > 64 || dims.in < 1 || dims.hidden < 1 ||
        dims.feat < 1)
        throw ConfigError("regression suite: dims must be in [1, 64]");

    const double kHelpfulNoiseStd = 0.1;   // times the (unit) target std
    const double kHarmfulSharpness = 3.0;  // input-weight scale of harmful teachers

    Rng setup(mix_seed(seed, 0x72656772ULL));  // "regr"
    auto primary_teacher = std::make_shared<Teacher>(Teacher::random(setup, dims.in, 8));
    primary_teacher->calibrate(setup);

    // Fresh independent teachers for every harmful slot.
    auto harmful_teachers = std::make_shared<std::vector<Teacher>>();
    std::vector<TaskHead> heads;
    heads.push_back({"primary", HeadKind::kMse, TaskRole::kPrimary, 1, -1});
    for (int64_t t = 1; t < n_tasks; ++t) {
        int64_t slot = t - 1;
        if (slot % 3 == 0) {
            heads.push_back({"helpful", HeadKind::kMse, TaskRole::kHelpful, 1, -1});
        } else if (slot % 3 == 1) {
            heads.push_back({"harmful", HeadKind::kMse, TaskRole::kHarmful, 1, -1});
            Teacher ht = Teacher::random(setup, dims.in, 8, kHarmfulSharpness);
            ht.calibrate(setup);
            harmful_teachers->push_back(ht);
        } else {
            heads.push_back({"reconstruct", HeadKind::kMse, TaskRole::kNeutral, dims.in, -1});
        }
    }

    TaskSpec spec;
    spec.name = "regression";
    spec.backbone = {dims.in, dims.hidden, dims.feat};
    spec.heads = heads;
    spec.batch_size = 16;

    const int64_t batch = spec.batch_size;
    const int64_t in_dim = dims.in;
    auto heads_copy = heads;
    spec.gen = [=](Rng& rng) {
        std::vector<double> xv = rng.normal_vec(batch * in_dim, 1.0);
        Tensor x({batch, in_dim}, xv);
        Batch b;
        size_t harmful_idx = 0;
        for (const auto& head : heads_copy) {
            b.inputs.push_back(x);
            switch (head.role) {
                case TaskRole::kPrimary:
                case TaskRole::kHelpful: {
                    std::vector<double> y(static_cast<size_t>(batch));
                    for (int64_t i = 0; i < batch; ++i) {
                        y[static_cast<size_t>(i)] = primary_teacher->eval(xv.data() + i * in_dim);
                        if (head.role == TaskRole::kHelpful)
                            y[static_cast<size_t>(i)] += kHelpfulNoiseStd * rng.normal();
                    }
                    b.targets.push_back(Tensor({batch, 1}, std::move(y)));
                    break;
                }
                case TaskRole::kHarmful: {
                    const Teacher& teach = (*harmful_teachers)[harmful_idx++];
                    std::vector<double> y(static_cast<size_t>(batch));
                    for (int64_t i = 0; i < batch; ++i)
                        y[static_cast<size_t>(i)] = teach.eval(xv.data() + i * in_dim);
                    b.targets.push_back(Tensor({batch, 1}, std::move(y)));
                    break;
                }
                case TaskRole::kNeutral:
                    b.targets.push_back(x);
                    break;
            }
        }
        return b;
    };

    nlohmann::json roles = nlohmann::json::array();
    for (const auto& h : heads) roles.push_back(to_string(h.role));
    spec.metadata = {{"name", spec.name},
                     {"seed", seed},
                     {"backbone", spec.backbone},
                     {"batch_size", spec.batch_size},
                     {"roles", roles},
                     {"helpful_noise_std", kHelpfulNoiseStd},
                     {"harmful_sharpness", kHarmfulSharpness},
                     {"param_count", 0}};
    spec.metadata["param_count"] = learner_param_count(spec);
    return spec;
}

TaskSpec make_classification_suite(uint64_t seed) {
    const int64_t kClasses = 4;
    const double kBlobRadius = 2.0;
    const double kBlobStd = 0.45;

    TaskSpec spec;
    spec.name = "classification";
    spec.backbone = {2, 32, 32};
    spec.heads = {
        {"primary_ce", HeadKind::kCrossEntropy, TaskRole::kPrimary, kClasses, -1},
        {"mixup", HeadKind::kCrossEntropy, TaskRole::kHelpful, kClasses, 0},
        {"rotation", HeadKind::kCrossEntropy, TaskRole::kNeutral, 4, -1},
    };
    spec.batch_size = 32;

    const int64_t batch = spec.batch_size;
    spec.gen = [=](Rng& rng) {
        std::vector<double> xv(static_cast<size_t>(batch * 2));
        std::vector<double> yv(static_cast<size_t>(batch * kClasses), 0.0);
        std::vector<int64_t> cls(static_cast<size_t>(batch));
        for (int64_t i = 0; i < batch; ++i) {
            int64_t c = rng.index(kClasses);
            cls[static_cast<size_t>(i)] = c;
            double angle = (0.25 + 0.5 * static_cast<double>(c)) * M_PI;
            xv[static_cast<size_t>(2 * i)] = kBlobRadius * std::cos(angle) + kBlobStd * rng.normal();
            xv[static_cast<size_t>(2 * i + 1)] = kBlobRadius * std::sin(angle) + kBlobStd * rng.normal();
            yv[static_cast<size_t>(i * kClasses + c)] = 1.0;
        }
        Tensor x({batch, 2}, xv);
        Tensor y({batch, kClasses}, yv);

        // mixup: convex combination of each sample with a permuted partner
        auto perm = rng.permutation(batch);
        double lam = rng.uniform(0.0, 1.0);
        std::vector<double> mx(static_cast<size_t>(batch * 2));
        std::vector<double> my(static_cast<size_t>(batch * kClasses));
        for (int64_t i = 0; i < batch; ++i) {
            int64_t j = perm[static_cast<size_t>(i)];
            for (int64_t d = 0; d < 2; ++d)
                mx[static_cast<size_t>(2 * i + d)] = lam * xv[static_cast<size_t>(2 * i + d)] +
                                                     (1 - lam) * xv[static_cast<size_t>(2 * j + d)];
            for (int64_t c = 0; c < kClasses; ++c)
                my[static_cast<size_t>(i * kClasses + c)] =
                    lam * yv[static_cast<size_t>(i * kClasses + c)] +
                    (1 - lam) * yv[static_cast<size_t>(j * kClasses + c)];
        }

        // rotation prediction: rotate each point by k * 90 degrees
        std::vector<double> rx(static_cast<size_t>(batch * 2));
        std::vector<double> ry(static_cast<size_t>(batch * 4), 0.0);
        for (int64_t i = 0; i < batch; ++i) {
            int64_t r = rng.index(4);
            double ca = std::cos(0.5 * M_PI * static_cast<double>(r));
            double sa = std::sin(0.5 * M_PI * static_cast<double>(r));
            double px = xv[static_cast<size_t>(2 * i)], py = xv[static_cast<size_t>(2 * i + 1)];
            rx[static_cast<size_t>(2 * i)] = ca * px - sa * py;
            rx[static_cast<size_t>(2 * i + 1)] = sa * px + ca * py;
            ry[static_cast<size_t>(i * 4 + r)] = 1.0;
        }

        Batch b;
        b.inputs = {x, Tensor({batch, 2}, mx), Tensor({batch, 2}, rx)};
        b.targets = {y, Tensor({batch, kClasses}, my), Tensor({batch, 4}, ry)};
        return b;
    };

    spec.metadata = {{"name", spec.name},
                     {"seed", seed},
                     {"backbone", spec.backbone},
                     {"batch_size", spec.batch_size},
                     {"roles", {"primary", "helpful", "neutral"}},
                     {"classes", kClasses},
                     {"blob_radius", kBlobRadius},
                     {"blob_std", kBlobStd},
                     {"param_count", 0}};
    spec.metadata["param_count"] = learner_param_count(spec);
    return spec;
}

}  // namespace meltr
