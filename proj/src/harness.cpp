#include "meltr/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <numeric>
#include <thread>

#include "meltr/gradcheck.hpp"

namespace meltr {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

double median(std::vector<double> xs) {
    if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(xs.begin(), xs.end());
    size_t n = xs.size();
    return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

namespace {

void expect_keys(const json& obj, const std::vector<std::string>& allowed,
                 const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
            throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
    }
}

template <typename T>
T get_or(const json& obj, const std::string& key, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config: bad value for '" + key + "'");
    }
}

void write_text_atomic(const fs::path& path, const std::string& text) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw Error("cannot write " + tmp.string());
        out << text;
    }
    fs::rename(tmp, path);
}

}  // namespace

TrainConfig parse_run_config(const json& doc) {
    if (!doc.is_object()) throw ConfigError("config: document must be a JSON object");
    expect_keys(doc,
                {"suite", "scheme", "alpha", "beta", "gamma", "K", "epochs", "steps_per_epoch",
                 "seed", "optimizer", "lr_decay", "eval_batches", "track_cos_to_exact",
                 "mtl_coeffs", "meltr", "flags"},
                "the top level");
    TrainConfig cfg;
    if (!doc.contains("suite")) throw ConfigError("config: missing required key 'suite'");
    cfg.suite = doc.at("suite").get<std::string>();
    if (doc.contains("scheme")) cfg.scheme = scheme_from_string(doc.at("scheme").get<std::string>());
    if (doc.contains("mtl_coeffs")) {
        if (!std::holds_alternative<Mtl>(cfg.scheme))
            throw ConfigError("config: mtl_coeffs requires scheme 'mtl'");
        cfg.scheme = Mtl{doc.at("mtl_coeffs").get<std::vector<double>>()};
    }
    cfg.alpha = get_or(doc, "alpha", cfg.alpha);
    cfg.beta = get_or(doc, "beta", cfg.beta);
    cfg.gamma = get_or(doc, "gamma", cfg.gamma);
    cfg.k_inner = get_or(doc, "K", cfg.k_inner);
    cfg.epochs = get_or(doc, "epochs", cfg.epochs);
    cfg.steps_per_epoch = get_or(doc, "steps_per_epoch", cfg.steps_per_epoch);
    cfg.seed = get_or(doc, "seed", cfg.seed);
    cfg.eval_batches = get_or(doc, "eval_batches", cfg.eval_batches);
    cfg.track_cos_to_exact = get_or(doc, "track_cos_to_exact", cfg.track_cos_to_exact);
    if (doc.contains("optimizer"))
        cfg.optimizer = optimizer_from_string(doc.at("optimizer").get<std::string>());
    cfg.lr_decay = get_or(doc, "lr_decay", cfg.lr_decay);
    if (doc.contains("meltr")) {
        const json& m = doc.at("meltr");
        expect_keys(m, {"d", "heads", "variant"}, "'meltr'");
        cfg.meltr_d = get_or(m, "d", cfg.meltr_d);
        cfg.meltr_heads = get_or(m, "heads", cfg.meltr_heads);
        if (m.contains("variant"))
            cfg.variant = variant_from_string(m.at("variant").get<std::string>());
    }
    if (doc.contains("flags")) {
        const json& f = doc.at("flags");
        expect_keys(f, {"direct_reg_grad", "shared_outer_batch"}, "'flags'");
        cfg.include_direct_reg_grad = get_or(f, "direct_reg_grad", cfg.include_direct_reg_grad);
        cfg.shared_outer_batch = get_or(f, "shared_outer_batch", cfg.shared_outer_batch);
    }
    cfg.validate();
    return cfg;
}

TaskSpec suite_by_name(const std::string& name, uint64_t seed) {
    if (name == "regression") return make_regression_suite(seed);
    if (name == "regression3") return make_regression_suite(seed, 3);
    if (name == "regression_reduced")
        return make_regression_suite(seed, 4, {.in = 4, .hidden = 5, .feat = 4});
    if (name == "classification") return make_classification_suite(seed);
    throw ConfigError("unknown suite '" + name +
                      "' (available: regression, regression3, regression_reduced, "
                      "classification)");
}

void write_run_artifacts(const RunRecord& rec, const std::string& dir) {
    fs::create_directories(dir);
    fs::path base(dir);

    std::string metrics = "epoch,train_pri,val_pri,reg,wall_ms\n";
    for (const auto& e : rec.epochs) {
        metrics += std::to_string(e.epoch) + "," + fmt_double(e.train_pri) + "," +
                   fmt_double(e.val_pri) + "," + fmt_double(e.reg_gap) + "," +
                   fmt_double(e.wall_ms) + "\n";
    }
    write_text_atomic(base / "metrics.csv", metrics);

    std::string partials = "epoch,task_id,mean_partial\n";
    for (const auto& e : rec.epochs) {
        for (size_t t = 0; t < e.mean_partials.size(); ++t)
            partials += std::to_string(e.epoch) + "," + std::to_string(t) + "," +
                        fmt_double(e.mean_partials[t]) + "\n";
    }
    write_text_atomic(base / "partials.csv", partials);

    std::string ranges = "task_id,min,q1,median,q3,max\n";
    for (size_t t = 0; t < rec.final_ranges.size(); ++t) {
        const auto& r = rec.final_ranges[t];
        ranges += std::to_string(t) + "," + fmt_double(r.min) + "," + fmt_double(r.q1) + "," +
                  fmt_double(r.median) + "," + fmt_double(r.q3) + "," + fmt_double(r.max) + "\n";
    }
    write_text_atomic(base / "loss_ranges.csv", ranges);

    // run.json last: its presence marks the cell complete
    write_text_atomic(base / "run.json", rec.to_json().dump(1));
}

CellResult run_cell(const TrainConfig& cfg, const std::string& dir, bool resume) {
    fs::path marker = fs::path(dir) / "run.json";
    if (resume && fs::exists(marker)) {
        std::ifstream in(marker);
        json j = json::parse(in);
        return {RunRecord::from_json(j), true};
    }
    TaskSpec task = suite_by_name(cfg.suite, cfg.seed);
    RunRecord rec = train_loop(cfg, task);
    write_run_artifacts(rec, dir);
    return {rec, false};
}

namespace {

// Dispatch independent cells to a small worker pool; workers share nothing,
// results land in pre-sized slots, aggregation happens after the join.
std::vector<CellResult> run_grid(const std::vector<TrainConfig>& cells,
                                 const std::vector<std::string>& dirs, const GridOptions& opt) {
    std::vector<CellResult> results(cells.size());
    std::vector<std::string> errors(cells.size());
    std::atomic<size_t> next{0};
    int jobs = opt.jobs > 0 ? opt.jobs
                            : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    jobs = std::min<int>(jobs, static_cast<int>(cells.size()));
    auto worker = [&] {
        for (;;) {
            size_t i = next.fetch_add(1);
            if (i >= cells.size()) return;
            try {
                results[i] = run_cell(cells[i], dirs[i], opt.resume);
            } catch (const std::exception& e) {
                errors[i] = e.what();
            }
        }
    };
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    for (size_t i = 0; i < errors.size(); ++i) {
        if (!errors[i].empty())
            throw Error("grid cell " + dirs[i] + " failed: " + errors[i]);
    }
    return results;
}

}  // namespace

int cmd_run(const std::string& config_path, const std::string& out_dir) {
    TrainConfig cfg;
    try {
        std::ifstream in(config_path);
        if (!in) {
            std::cerr << "error: cannot open config " << config_path << "\n";
            return 1;
        }
        json doc = json::parse(in);
        cfg = parse_run_config(doc);
        if (const char* env = std::getenv("MELTR_SEED")) {
            cfg.seed = static_cast<uint64_t>(std::stoull(env));
        }
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    }
    TaskSpec task = suite_by_name(cfg.suite, cfg.seed);
    RunRecord rec = train_loop(cfg, task);
    write_run_artifacts(rec, out_dir);
    for (const auto& w : rec.warnings) std::cerr << "warning: " << w << "\n";
    if (rec.diverged) {
        std::cerr << "diverged: " << rec.divergence_note << "\n";
        return 2;
    }
    std::cout << out_dir << "\n";
    return 0;
}

int cmd_compare(const std::vector<std::string>& schemes, const std::string& suite,
                const std::vector<uint64_t>& seeds, const GridOptions& opt) {
    if (schemes.size() < 2) {
        std::cerr << "error: compare needs at least two schemes\n";
        return 1;
    }
    std::vector<TrainConfig> cells;
    std::vector<std::string> dirs;
    for (const auto& scheme : schemes) {
        for (uint64_t seed : seeds) {
            TrainConfig cfg = opt.base;
            cfg.suite = suite;
            cfg.scheme = scheme_from_string(scheme);
            cfg.seed = seed;
            bool solver = !std::holds_alternative<Mtl>(cfg.scheme) &&
                          !std::holds_alternative<Exact>(cfg.scheme);
            cfg.track_cos_to_exact =
                solver && learner_param_count(suite_by_name(suite, seed)) <= 200;
            cells.push_back(cfg);
            dirs.push_back(opt.out_dir + "/compare/" + scheme + "__seed" + std::to_string(seed));
        }
    }
    auto results = run_grid(cells, dirs, opt);

    std::string csv = "scheme,seed,val_pri,ms_per_epoch,cos_to_exact\n";
    size_t i = 0;
    for (const auto& scheme : schemes) {
        for (uint64_t seed : seeds) {
            const RunRecord& rec = results[i++].record;
            std::vector<double> wall;
            for (const auto& e : rec.epochs) wall.push_back(e.wall_ms);
            double ms = wall.empty() ? 0.0
                                     : std::accumulate(wall.begin(), wall.end(), 0.0) /
                                           static_cast<double>(wall.size());
            csv += scheme + "," + std::to_string(seed) + "," +
                   (rec.diverged ? "nan" : fmt_double(rec.final_val_pri())) + "," +
                   fmt_double(ms) + "," +
                   (rec.cos_to_exact ? fmt_double(*rec.cos_to_exact) : "") + "\n";
        }
    }
    fs::create_directories(opt.out_dir);
    write_text_atomic(fs::path(opt.out_dir) / "compare.csv", csv);
    std::cout << (fs::path(opt.out_dir) / "compare.csv").string() << "\n";
    return 0;
}

int cmd_ablate_gamma(const std::vector<double>& gammas, const std::string& suite,
                     const std::vector<uint64_t>& seeds, const GridOptions& opt) {
    if (gammas.empty()) {
        std::cerr << "error: no gamma values given\n";
        return 1;
    }
    std::vector<TrainConfig> cells;
    std::vector<std::string> dirs;
    for (double gamma : gammas) {
        for (uint64_t seed : seeds) {
            TrainConfig cfg = opt.base;
            cfg.suite = suite;
            cfg.gamma = gamma;
            cfg.seed = seed;
            cells.push_back(cfg);
            dirs.push_back(opt.out_dir + "/gamma/g" + fmt_double(gamma) + "__seed" +
                           std::to_string(seed));
        }
    }
    auto results = run_grid(cells, dirs, opt);

    std::string csv = "gamma,val_pri,reg_gap\n";
    size_t i = 0;
    for (double gamma : gammas) {
        std::vector<double> vals, gaps;
        for (size_t s = 0; s < seeds.size(); ++s) {
            const RunRecord& rec = results[i++].record;
            if (rec.diverged) continue;
            vals.push_back(rec.final_val_pri());
            gaps.push_back(rec.epochs.back().reg_gap);
        }
        csv += fmt_double(gamma) + "," + fmt_double(median(vals)) + "," +
               fmt_double(median(gaps)) + "\n";
    }
    fs::create_directories(opt.out_dir);
    write_text_atomic(fs::path(opt.out_dir) / "gamma.csv", csv);
    std::cout << (fs::path(opt.out_dir) / "gamma.csv").string() << "\n";
    return 0;
}

int cmd_ablate_arch(const std::vector<std::string>& variants, const std::string& suite,
                    const std::vector<uint64_t>& seeds, const GridOptions& opt) {
    for (const auto& v : variants) (void)variant_from_string(v);  // fail fast
    std::vector<TrainConfig> cells;
    std::vector<std::string> dirs;
    for (const auto& v : variants) {
        for (uint64_t seed : seeds) {
            TrainConfig cfg = opt.base;
            cfg.suite = suite;
            cfg.variant = variant_from_string(v);
            cfg.seed = seed;
            cells.push_back(cfg);
            dirs.push_back(opt.out_dir + "/arch/" + v + "__seed" + std::to_string(seed));
        }
    }
    auto results = run_grid(cells, dirs, opt);

    std::string csv = "variant,val_pri,status\n";
    size_t i = 0;
    for (const auto& v : variants) {
        std::vector<double> vals;
        bool untrainable = false;
        for (size_t s = 0; s < seeds.size(); ++s) {
            const RunRecord& rec = results[i++].record;
            for (const auto& w : rec.warnings)
                untrainable =
                    untrainable || w.find("meta-gradient identically zero") != std::string::npos;
            if (!rec.diverged) vals.push_back(rec.final_val_pri());
        }
        csv += v + "," + fmt_double(median(vals)) + "," + (untrainable ? "untrainable" : "ok") +
               "\n";
    }
    fs::create_directories(opt.out_dir);
    write_text_atomic(fs::path(opt.out_dir) / "arch.csv", csv);
    std::cout << (fs::path(opt.out_dir) / "arch.csv").string() << "\n";
    return 0;
}

int cmd_trace(const std::string& run_dir) {
    fs::path marker = fs::path(run_dir) / "run.json";
    if (!fs::exists(marker)) {
        std::cerr << "error: no run.json snapshot in " << run_dir << "\n";
        return 1;
    }
    std::ifstream in(marker);
    RunRecord rec = RunRecord::from_json(json::parse(in));
    const int64_t tasks = rec.meltr.cfg.num_tasks;
    if (rec.final_loss_means.size() != static_cast<size_t>(tasks)) {
        std::cerr << "error: snapshot lacks final loss means\n";
        return 1;
    }
    fs::path out = fs::path(run_dir) / "trace";
    fs::create_directories(out);

    std::vector<int64_t> ids(static_cast<size_t>(tasks));
    for (int64_t t = 0; t < tasks; ++t) ids[static_cast<size_t>(t)] = t;
    LossVector baseline(rec.final_loss_means, ids);

    const double kLo = 0.0, kHi = 3.0;
    const int kSteps = 31;
    for (int64_t t = 0; t < tasks; ++t) {
        auto rows = sweep_surface(rec.meltr, t, kLo, kHi, kSteps, baseline);
        std::string csv = "task_id,loss_value,meltr_output,partial\n";
        for (const auto& r : rows)
            csv += std::to_string(r.task_id) + "," + fmt_double(r.loss_value) + "," +
                   fmt_double(r.output) + "," + fmt_double(r.partial) + "\n";
        write_text_atomic(out / ("sweep_task" + std::to_string(t) + ".csv"), csv);
    }

    // 2-D surface over (primary, most-harmful task); harmful by annotated role,
    // else the task with the lowest final mean partial.
    int64_t partner = -1;
    if (rec.suite_meta.contains("roles")) {
        auto roles = rec.suite_meta.at("roles").get<std::vector<std::string>>();
        for (size_t t = 0; t < roles.size(); ++t)
            if (roles[t] == "harmful") partner = static_cast<int64_t>(t);
    }
    if (partner < 0 && !rec.epochs.empty()) {
        const auto& parts = rec.epochs.back().mean_partials;
        partner = 1;
        for (size_t t = 1; t < parts.size(); ++t)
            if (parts[t] < parts[static_cast<size_t>(partner)]) partner = static_cast<int64_t>(t);
    }
    if (partner > 0) {
        auto grid = surface_2d(rec.meltr, 0, partner, kLo, kHi, kSteps, baseline);
        std::string csv = "loss_a,loss_b,meltr_output\n";
        for (const auto& r : grid)
            csv += fmt_double(r.loss_a) + "," + fmt_double(r.loss_b) + "," + fmt_double(r.output) +
                   "\n";
        write_text_atomic(out / "surface2d.csv", csv);
    }

    std::string partials = "epoch,task_id,mean_partial\n";
    for (const auto& e : rec.epochs)
        for (size_t t = 0; t < e.mean_partials.size(); ++t)
            partials += std::to_string(e.epoch) + "," + std::to_string(t) + "," +
                        fmt_double(e.mean_partials[t]) + "\n";
    write_text_atomic(out / "partials.csv", partials);

    std::string ranges = "task_id,min,q1,median,q3,max\n";
    for (size_t t = 0; t < rec.final_ranges.size(); ++t) {
        const auto& r = rec.final_ranges[t];
        ranges += std::to_string(t) + "," + fmt_double(r.min) + "," + fmt_double(r.q1) + "," +
                  fmt_double(r.median) + "," + fmt_double(r.q3) + "," + fmt_double(r.max) + "\n";
    }
    write_text_atomic(out / "loss_ranges.csv", ranges);

    std::cout << out.string() << "\n";
    return 0;
}

int cmd_gradcheck(bool inject_sign_flip) {
    GradcheckReport rep = run_gradcheck({.inject_sign_flip = inject_sign_flip});
    std::cout << rep.summary();
    return rep.passed() ? 0 : 1;
}

}  // namespace meltr
