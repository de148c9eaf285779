#include "meltr/train_loop.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace meltr {

using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

constexpr double kDivergenceCap = 1e6;

// Adam with bias correction; one state per parameter list.
struct AdamState {
    std::vector<std::vector<double>> m, v;
    int64_t t = 0;
    static constexpr double kB1 = 0.9, kB2 = 0.999, kEps = 1e-8;

    void ensure(const std::vector<Tensor>& params) {
        if (!m.empty()) return;
        for (const auto& p : params) {
            m.emplace_back(static_cast<size_t>(p.size()), 0.0);
            v.emplace_back(static_cast<size_t>(p.size()), 0.0);
        }
    }

    std::vector<Tensor> step(const std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                             double lr) {
        ensure(params);
        ++t;
        double c1 = 1.0 - std::pow(kB1, static_cast<double>(t));
        double c2 = 1.0 - std::pow(kB2, static_cast<double>(t));
        std::vector<Tensor> out;
        out.reserve(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            std::vector<double> vals(params[i].values().begin(), params[i].values().end());
            for (int64_t j = 0; j < params[i].size(); ++j) {
                double g = grads[i].at(j);
                auto ju = static_cast<size_t>(j);
                m[i][ju] = kB1 * m[i][ju] + (1 - kB1) * g;
                v[i][ju] = kB2 * v[i][ju] + (1 - kB2) * g * g;
                vals[ju] -= lr * (m[i][ju] / c1) / (std::sqrt(v[i][ju] / c2) + kEps);
            }
            out.push_back(Tensor(params[i].shape(), std::move(vals)));
        }
        return out;
    }
};

std::vector<double> loss_values(const std::vector<Tensor>& losses) {
    std::vector<double> v(losses.size());
    for (size_t i = 0; i < losses.size(); ++i) v[i] = losses[i].value();
    return v;
}

LossRangeStats quantiles(std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    auto q = [&](double p) {
        double idx = p * static_cast<double>(xs.size() - 1);
        size_t lo = static_cast<size_t>(std::floor(idx));
        size_t hi = static_cast<size_t>(std::ceil(idx));
        double frac = idx - std::floor(idx);
        return xs[lo] * (1 - frac) + xs[hi] * frac;
    };
    return {xs.front(), q(0.25), q(0.5), q(0.75), xs.back()};
}

json tensor_to_json(const Tensor& t) {
    return {{"shape", t.shape()},
            {"values", std::vector<double>(t.values().begin(), t.values().end())}};
}

Tensor tensor_from_json(const json& j) {
    return Tensor(j.at("shape").get<Shape>(), j.at("values").get<std::vector<double>>());
}

}  // namespace

const char* to_string(Optimizer o) { return o == Optimizer::kSgd ? "sgd" : "adam"; }

Optimizer optimizer_from_string(const std::string& s) {
    if (s == "sgd") return Optimizer::kSgd;
    if (s == "adam") return Optimizer::kAdam;
    throw ConfigError("unknown optimizer '" + s + "'");
}

void TrainConfig::validate() const {
    if (alpha <= 0) throw ConfigError("config: alpha must be positive");
    if (beta < 0) throw ConfigError("config: beta must be nonnegative");
    if (gamma < 0) throw ConfigError("config: gamma must be nonnegative");
    if (k_inner < 1) throw ConfigError("config: K must be at least 1");
    if (epochs < 1 || steps_per_epoch < 1 || eval_batches < 1)
        throw ConfigError("config: epochs, steps_per_epoch, eval_batches must be at least 1");
    MeltrConfig probe{.d = meltr_d, .heads = meltr_heads, .num_tasks = 1, .variant = variant};
    probe.validate();
}

json config_to_json(const TrainConfig& cfg) {
    return {{"suite", cfg.suite},
            {"scheme", to_string(cfg.scheme)},
            {"alpha", cfg.alpha},
            {"beta", cfg.beta},
            {"gamma", cfg.gamma},
            {"K", cfg.k_inner},
            {"epochs", cfg.epochs},
            {"steps_per_epoch", cfg.steps_per_epoch},
            {"seed", cfg.seed},
            {"optimizer", to_string(cfg.optimizer)},
            {"lr_decay", cfg.lr_decay},
            {"eval_batches", cfg.eval_batches},
            {"track_cos_to_exact", cfg.track_cos_to_exact},
            {"meltr", {{"d", cfg.meltr_d}, {"heads", cfg.meltr_heads}, {"variant", to_string(cfg.variant)}}},
            {"flags",
             {{"direct_reg_grad", cfg.include_direct_reg_grad},
              {"shared_outer_batch", cfg.shared_outer_batch}}}};
}

double RunRecord::final_val_pri() const {
    if (epochs.empty()) return std::numeric_limits<double>::quiet_NaN();
    return epochs.back().val_pri;
}

json RunRecord::to_json() const {
    json je = json::array();
    for (const auto& e : epochs) {
        je.push_back({{"epoch", e.epoch},
                      {"train_pri", e.train_pri},
                      {"val_pri", e.val_pri},
                      {"reg_gap", e.reg_gap},
                      {"wall_ms", e.wall_ms},
                      {"outer_ms_mean", e.outer_ms_mean},
                      {"mean_partials", e.mean_partials}});
    }
    json jr = json::array();
    for (const auto& r : final_ranges)
        jr.push_back({{"min", r.min}, {"q1", r.q1}, {"median", r.median}, {"q3", r.q3}, {"max", r.max}});
    json jm;
    jm["cfg"] = {{"d", meltr.cfg.d},
                 {"heads", meltr.cfg.heads},
                 {"num_tasks", meltr.cfg.num_tasks},
                 {"variant", meltr::to_string(meltr.cfg.variant)},
                 {"ffn_mult", meltr.cfg.ffn_mult},
                 {"ln_eps", meltr.cfg.ln_eps}};
    jm["params"] = json::object();
    for (size_t i = 0; i < meltr.params.size(); ++i)
        jm["params"][meltr.names[i]] = tensor_to_json(meltr.params[i]);
    json jl = json::array();
    for (const auto& t : learner) jl.push_back(tensor_to_json(t));

    json out = {{"schema", "meltr-run-v1"},
                {"config", config},
                {"suite", suite_meta},
                {"epochs", je},
                {"final_ranges", jr},
                {"final_loss_means", final_loss_means},
                {"outer_ms", outer_ms},
                {"diverged", diverged},
                {"divergence_note", divergence_note},
                {"warnings", warnings},
                {"meltr", jm},
                {"learner", jl}};
    out["cos_to_exact"] = cos_to_exact ? json(*cos_to_exact) : json(nullptr);
    return out;
}

RunRecord RunRecord::from_json(const json& j) {
    RunRecord r;
    r.config = j.at("config");
    r.suite_meta = j.at("suite");
    for (const auto& je : j.at("epochs")) {
        EpochRecord e;
        e.epoch = je.at("epoch").get<int>();
        e.train_pri = je.at("train_pri").get<double>();
        e.val_pri = je.at("val_pri").get<double>();
        e.reg_gap = je.at("reg_gap").get<double>();
        e.wall_ms = je.at("wall_ms").get<double>();
        e.outer_ms_mean = je.at("outer_ms_mean").get<double>();
        e.mean_partials = je.at("mean_partials").get<std::vector<double>>();
        r.epochs.push_back(std::move(e));
    }
    for (const auto& jr : j.at("final_ranges"))
        r.final_ranges.push_back({jr.at("min").get<double>(), jr.at("q1").get<double>(),
                                  jr.at("median").get<double>(), jr.at("q3").get<double>(),
                                  jr.at("max").get<double>()});
    r.final_loss_means = j.at("final_loss_means").get<std::vector<double>>();
    r.outer_ms = j.at("outer_ms").get<std::vector<double>>();
    r.diverged = j.at("diverged").get<bool>();
    r.divergence_note = j.at("divergence_note").get<std::string>();
    r.warnings = j.at("warnings").get<std::vector<std::string>>();
    const json& jm = j.at("meltr");
    r.meltr.cfg.d = jm.at("cfg").at("d").get<int>();
    r.meltr.cfg.heads = jm.at("cfg").at("heads").get<int>();
    r.meltr.cfg.num_tasks = jm.at("cfg").at("num_tasks").get<int>();
    r.meltr.cfg.variant = variant_from_string(jm.at("cfg").at("variant").get<std::string>());
    r.meltr.cfg.ffn_mult = jm.at("cfg").at("ffn_mult").get<int>();
    r.meltr.cfg.ln_eps = jm.at("cfg").at("ln_eps").get<double>();
    MeltrNet fresh = MeltrNet::init(r.meltr.cfg, 0);
    r.meltr.names = fresh.names;
    for (const auto& name : r.meltr.names)
        r.meltr.params.push_back(tensor_from_json(jm.at("params").at(name)));
    for (const auto& jt : j.at("learner")) r.learner.push_back(tensor_from_json(jt));
    if (!j.at("cos_to_exact").is_null()) r.cos_to_exact = j.at("cos_to_exact").get<double>();
    return r;
}

RunRecord train_loop(const TrainConfig& cfg, const TaskSpec& task) {
    cfg.validate();
    const int64_t n_tasks = task.num_tasks();
    std::vector<int64_t> task_ids(static_cast<size_t>(n_tasks));
    for (int64_t t = 0; t < n_tasks; ++t) task_ids[static_cast<size_t>(t)] = t;

    const bool is_mtl = std::holds_alternative<Mtl>(cfg.scheme);
    std::vector<double> mtl_coeffs;
    if (is_mtl) {
        mtl_coeffs = std::get<Mtl>(cfg.scheme).coeffs;
        if (mtl_coeffs.empty()) mtl_coeffs.assign(static_cast<size_t>(n_tasks), 1.0);
        if (static_cast<int64_t>(mtl_coeffs.size()) != n_tasks)
            throw ConfigError("config: mtl coefficient count does not match the suite's tasks");
    }

    MeltrConfig mcfg{.d = cfg.meltr_d,
                     .heads = cfg.meltr_heads,
                     .num_tasks = static_cast<int>(n_tasks),
                     .variant = cfg.variant};
    MeltrNet net = MeltrNet::init(mcfg, mix_seed(cfg.seed, 0x706869ULL));  // "phi"
    std::vector<Tensor> w = learner_init(task, cfg.seed);
    const int64_t w_count = static_cast<int64_t>(flatten(w).size());

    BatchStream inner_stream = task.train_stream(cfg.seed);
    BatchStream outer_stream = task.train_stream(mix_seed(cfg.seed, 1));
    BatchStream meta_stream = task.val_stream(cfg.seed);
    std::vector<Batch> eval_train, eval_val;
    {
        BatchStream et = task.train_stream(mix_seed(cfg.seed, 2));
        BatchStream ev = task.val_stream(mix_seed(cfg.seed, 3));
        for (int i = 0; i < cfg.eval_batches; ++i) {
            eval_train.push_back(et.next());
            eval_val.push_back(ev.next());
        }
    }

    RunRecord rec;
    rec.config = config_to_json(cfg);
    rec.suite_meta = task.metadata;
    auto note_warning = [&](const std::string& msg) {
        if (std::find(rec.warnings.begin(), rec.warnings.end(), msg) == rec.warnings.end())
            rec.warnings.push_back(msg);
    };

    AdamState adam_w, adam_phi;
    const int64_t total_inner = static_cast<int64_t>(cfg.epochs) * cfg.steps_per_epoch * cfg.k_inner;
    const int64_t total_outer = static_cast<int64_t>(cfg.epochs) * cfg.steps_per_epoch;
    int64_t inner_done = 0, outer_done = 0;

    auto lr_at = [&](double base, int64_t done, int64_t total) {
        if (!cfg.lr_decay) return base;
        return base * (1.0 - static_cast<double>(done) / static_cast<double>(total + 1));
    };

    // aux objective: MELTR over the task losses, or the fixed-weight combiner
    auto build_aux = [&](Graph& g, const std::vector<Tensor>& wv, const std::vector<Tensor>& pv,
                         const Batch& batch) {
        auto losses = task_losses(g, wv, task, batch);
        if (is_mtl) return fixed_weight_combiner(losses, mtl_coeffs);
        return meltr_forward(losses, task_ids, pv, mcfg);
    };

    auto eval_mean_pri = [&](const std::vector<Batch>& batches) {
        double s = 0;
        for (const auto& b : batches) {
            Graph g;
            s += task_losses(g, w, task, b)[0].value();
        }
        return s / static_cast<double>(batches.size());
    };

    auto eval_reg_gap = [&]() {
        if (is_mtl) return 0.0;
        double s = 0;
        for (const auto& b : eval_val) {
            Graph g;
            auto losses = task_losses(g, w, task, b);
            LossVector lv(loss_values(losses), task_ids);
            s += std::abs(meltr_value(lv, net) - lv.total());
        }
        return s / static_cast<double>(eval_val.size());
    };

    auto check_divergence = [&](const std::vector<double>& losses) {
        for (double v : losses) {
            if (!std::isfinite(v) || v > kDivergenceCap)
                throw NonFiniteError("loss exceeded the divergence cap");
        }
    };

    double cos_sum = 0.0;
    int cos_count = 0;

    try {
        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            auto epoch_t0 = Clock::now();
            std::vector<double> partial_sums(static_cast<size_t>(n_tasks), 0.0);
            int partial_count = 0;
            std::vector<std::vector<double>> loss_samples(static_cast<size_t>(n_tasks));
            std::vector<double> epoch_outer_ms;

            for (int step = 0; step < cfg.steps_per_epoch; ++step) {
                for (int k = 0; k < cfg.k_inner; ++k) {
                    Batch batch = inner_stream.next();
                    Graph g;
                    auto wa = g.leaves(w);
                    auto losses = task_losses(g, wa, task, batch);
                    auto vals = loss_values(losses);
                    check_divergence(vals);
                    for (int64_t t = 0; t < n_tasks; ++t)
                        loss_samples[static_cast<size_t>(t)].push_back(vals[static_cast<size_t>(t)]);
                    Tensor aux = is_mtl ? fixed_weight_combiner(losses, mtl_coeffs)
                                        : meltr_forward(losses, task_ids, net.params, mcfg);
                    double lr = lr_at(cfg.alpha, inner_done, total_inner);
                    if (aux.attached()) {
                        auto gw = grad(aux, wa).grads;
                        if (cfg.optimizer == Optimizer::kSgd) {
                            for (size_t i = 0; i < w.size(); ++i)
                                w[i] = sub(w[i], mul(gw[i].detach(), lr));
                        } else {
                            w = adam_w.step(w, gw, lr);
                        }
                    }
                    ++inner_done;
                    if (cfg.observer)
                        cfg.observer({epoch, step, k, false, vals, flatten(w)});
                }

                if (!is_mtl) {
                    auto outer_t0 = Clock::now();
                    Batch train_batch = outer_stream.next();
                    Batch val_batch = cfg.shared_outer_batch ? train_batch : meta_stream.next();

                    BilevelProblem prob;
                    prob.aux = [&](Graph& g, const std::vector<Tensor>& wv,
                                   const std::vector<Tensor>& pv) {
                        return build_aux(g, wv, pv, train_batch);
                    };
                    prob.pri = [&](Graph& g, const std::vector<Tensor>& wv) {
                        auto losses = task_losses(g, wv, task, val_batch);
                        if (cfg.gamma == 0.0 || cfg.stub_regularizer) return losses[0];
                        Tensor aux_out = meltr_forward(losses, task_ids, net.params, mcfg);
                        return primary_loss(losses, aux_out, cfg.gamma);
                    };

                    // Solver failures (negative curvature on a nonconvex aux
                    // Hessian, diverging Neumann sums) zero the indirect
                    // estimate for this step; the direct regularizer term is
                    // independent of the solve and still applies. Non-finite
                    // losses abort the run below.
                    HypergradResult hg;
                    bool solver_failed = false;
                    try {
                        hg = compute_hypergrad(cfg.scheme, prob, w, net.params, cfg.alpha);
                    } catch (const SolverError& e) {
                        solver_failed = true;
                        hg.dphi.clear();
                        for (const auto& p : net.params) hg.dphi.push_back(Tensor::zeros(p.shape()));
                        note_warning(std::string("indirect hypergradient dropped: ") + e.what());
                    }
                    if (hg.warning && !hg.note.empty()) note_warning(hg.note);

                    std::vector<Tensor> direct;
                    bool use_direct = cfg.include_direct_reg_grad && cfg.gamma > 0.0 &&
                                      !cfg.stub_regularizer;
                    if (use_direct) {
                        Graph g;
                        auto pa = g.leaves(net.params);
                        std::vector<Tensor> loss_consts;
                        {
                            Graph gw2;
                            auto vlosses = task_losses(gw2, w, task, val_batch);
                            for (auto& l : vlosses) loss_consts.push_back(l.detach());
                        }
                        Tensor aux_out = meltr_forward(loss_consts, task_ids, pa, mcfg);
                        Tensor reg = mul(reg_loss(loss_consts, aux_out), cfg.gamma);
                        auto dr = grad(reg, pa);
                        for (auto& t : dr.grads) direct.push_back(t.detach());
                    }

                    double beta_t = lr_at(cfg.beta, outer_done, total_outer);
                    if (cfg.beta > 0.0) {
                        if (cfg.optimizer == Optimizer::kSgd) {
                            net.params = outer_step(net.params, hg.dphi, beta_t,
                                                    use_direct ? &direct : nullptr);
                        } else {
                            std::vector<Tensor> total = hg.dphi;
                            if (use_direct)
                                for (size_t i = 0; i < total.size(); ++i)
                                    total[i] = add(total[i], direct[i]);
                            net.params = adam_phi.step(net.params, total, beta_t);
                        }
                    }
                    epoch_outer_ms.push_back(ms_since(outer_t0));
                    ++outer_done;

                    // Fig. 4-style trace: partials at the outer batch's losses
                    std::vector<double> vals;
                    {
                        Graph g;
                        vals = loss_values(task_losses(g, w, task, train_batch));
                    }
                    check_divergence(vals);
                    auto partials = probe_partials(LossVector(vals, task_ids), net);
                    for (int64_t t = 0; t < n_tasks; ++t)
                        partial_sums[static_cast<size_t>(t)] += partials[static_cast<size_t>(t)];
                    ++partial_count;

                    if (!solver_failed && cfg.track_cos_to_exact && epoch == cfg.epochs - 1 &&
                        w_count <= 200 && !std::holds_alternative<Exact>(cfg.scheme)) {
                        auto exact = hypergrad_exact(prob, w, net.params);
                        cos_sum += [&] {
                            auto a = flatten(hg.dphi);
                            auto b = flatten(exact.dphi);
                            double num = 0, na = 0, nb = 0;
                            for (size_t i = 0; i < a.size(); ++i) {
                                num += a[i] * b[i];
                                na += a[i] * a[i];
                                nb += b[i] * b[i];
                            }
                            return (na == 0 || nb == 0) ? 0.0 : num / std::sqrt(na * nb);
                        }();
                        ++cos_count;
                    }
                    if (cfg.observer) cfg.observer({epoch, step, -1, true, vals, flatten(w)});
                } else {
                    for (int64_t t = 0; t < n_tasks; ++t)
                        partial_sums[static_cast<size_t>(t)] += mtl_coeffs[static_cast<size_t>(t)];
                    ++partial_count;
                }
            }

            EpochRecord er;
            er.epoch = epoch;
            er.train_pri = eval_mean_pri(eval_train);
            er.val_pri = eval_mean_pri(eval_val);
            er.reg_gap = eval_reg_gap();
            er.wall_ms = ms_since(epoch_t0);
            er.outer_ms_mean = epoch_outer_ms.empty()
                                   ? 0.0
                                   : std::accumulate(epoch_outer_ms.begin(), epoch_outer_ms.end(), 0.0) /
                                         static_cast<double>(epoch_outer_ms.size());
            for (double s : partial_sums)
                er.mean_partials.push_back(partial_count ? s / partial_count : 0.0);
            rec.epochs.push_back(er);
            rec.outer_ms.insert(rec.outer_ms.end(), epoch_outer_ms.begin(), epoch_outer_ms.end());

            if (!std::isfinite(er.val_pri) || er.val_pri > kDivergenceCap)
                throw NonFiniteError("validation primary loss exceeded the divergence cap");

            if (epoch == cfg.epochs - 1) {
                for (int64_t t = 0; t < n_tasks; ++t) {
                    const auto& xs = loss_samples[static_cast<size_t>(t)];
                    rec.final_ranges.push_back(quantiles(xs));
                    rec.final_loss_means.push_back(
                        std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size()));
                }
            }
        }
    } catch (const Error& e) {
        rec.diverged = true;
        rec.divergence_note = e.what();
    }

    if (cos_count > 0) rec.cos_to_exact = cos_sum / cos_count;
    rec.meltr = net;
    rec.learner = w;
    return rec;
}

}  // namespace meltr
