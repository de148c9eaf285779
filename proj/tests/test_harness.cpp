#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "meltr/gradcheck.hpp"
#include "meltr/harness.hpp"

using namespace meltr;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("meltr_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(reinterpret_cast<uintptr_t>(this)));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

TrainConfig tiny_base() {
    TrainConfig cfg;
    cfg.suite = "regression_reduced";
    cfg.epochs = 2;
    cfg.steps_per_epoch = 3;
    cfg.eval_batches = 2;
    cfg.meltr_d = 16;
    cfg.meltr_heads = 4;
    return cfg;
}

std::vector<std::string> read_lines(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return lines;
}

}  // namespace

TEST_CASE("strict config parsing") {
    json good = {{"suite", "regression"}, {"scheme", "neumann:3"}, {"seed", 7}};
    TrainConfig cfg = parse_run_config(good);
    CHECK(cfg.suite == "regression");
    CHECK(std::get<Neumann>(cfg.scheme).truncation == 3);
    CHECK(cfg.seed == 7);
    CHECK(cfg.gamma == 0.3);  // default

    SUBCASE("unknown top-level key") {
        json bad = good;
        bad["gama"] = 0.1;  // typo must not silently pass
        CHECK_THROWS_AS(parse_run_config(bad), ConfigError);
    }
    SUBCASE("unknown nested key") {
        json bad = good;
        bad["meltr"] = {{"d", 16}, {"heds", 4}};
        CHECK_THROWS_AS(parse_run_config(bad), ConfigError);
    }
    SUBCASE("missing suite") {
        CHECK_THROWS_AS(parse_run_config(json{{"scheme", "identity"}}), ConfigError);
    }
    SUBCASE("bad value type") {
        json bad = good;
        bad["alpha"] = "fast";
        CHECK_THROWS_AS(parse_run_config(bad), ConfigError);
    }
    SUBCASE("mtl_coeffs requires the mtl scheme") {
        json bad = good;
        bad["mtl_coeffs"] = {1.0, 0.0};
        CHECK_THROWS_AS(parse_run_config(bad), ConfigError);
    }
    SUBCASE("full document round-trip") {
        json full = {{"suite", "regression"},
                     {"scheme", "mtl"},
                     {"mtl_coeffs", {1.0, 0.0, 0.0, 0.0}},
                     {"alpha", 0.01},
                     {"beta", 0.002},
                     {"gamma", 0.1},
                     {"K", 2},
                     {"epochs", 3},
                     {"steps_per_epoch", 4},
                     {"seed", 9},
                     {"optimizer", "adam"},
                     {"lr_decay", true},
                     {"eval_batches", 2},
                     {"track_cos_to_exact", false},
                     {"meltr", {{"d", 16}, {"heads", 4}, {"variant", "linear"}}},
                     {"flags", {{"direct_reg_grad", false}, {"shared_outer_batch", true}}}};
        TrainConfig c = parse_run_config(full);
        CHECK(std::get<Mtl>(c.scheme).coeffs == std::vector<double>{1, 0, 0, 0});
        CHECK(c.optimizer == Optimizer::kAdam);
        CHECK(c.variant == MeltrVariant::kLinear);
        CHECK(c.shared_outer_batch);
        CHECK_FALSE(c.include_direct_reg_grad);
    }
}

TEST_CASE("suite_by_name") {
    CHECK(suite_by_name("regression", 1).num_tasks() == 4);
    CHECK(suite_by_name("regression_reduced", 1).metadata.at("param_count").get<int64_t>() <= 200);
    CHECK(suite_by_name("classification", 1).num_tasks() == 3);
    CHECK_THROWS_AS(suite_by_name("imagenet", 1), ConfigError);
}

TEST_CASE("run artifacts have the pinned formats") {
    TempDir tmp;
    TrainConfig cfg = tiny_base();
    auto cell = run_cell(cfg, (tmp.path / "cell").string(), false);
    REQUIRE_FALSE(cell.record.diverged);

    auto metrics = read_lines(tmp.path / "cell" / "metrics.csv");
    CHECK(metrics[0] == "epoch,train_pri,val_pri,reg,wall_ms");
    CHECK(metrics.size() == 1 + static_cast<size_t>(cfg.epochs));

    auto partials = read_lines(tmp.path / "cell" / "partials.csv");
    CHECK(partials[0] == "epoch,task_id,mean_partial");
    CHECK(partials.size() == 1 + static_cast<size_t>(cfg.epochs) * 4);

    auto ranges = read_lines(tmp.path / "cell" / "loss_ranges.csv");
    CHECK(ranges[0] == "task_id,min,q1,median,q3,max");
    CHECK(ranges.size() == 1 + 4);

    CHECK(fs::exists(tmp.path / "cell" / "run.json"));
}

TEST_CASE("resume skips completed cells and reproduces the record") {
    TempDir tmp;
    TrainConfig cfg = tiny_base();
    std::string dir = (tmp.path / "cell").string();
    auto first = run_cell(cfg, dir, true);
    CHECK_FALSE(first.skipped);
    auto mtime = fs::last_write_time(fs::path(dir) / "run.json");

    auto second = run_cell(cfg, dir, true);
    CHECK(second.skipped);
    CHECK(fs::last_write_time(fs::path(dir) / "run.json") == mtime);
    CHECK(second.record.final_val_pri() == first.record.final_val_pri());

    // without --resume the cell retrains (and rewrites)
    auto third = run_cell(cfg, dir, false);
    CHECK_FALSE(third.skipped);
    CHECK(third.record.final_val_pri() == first.record.final_val_pri());
}

TEST_CASE("cmd_run exit codes") {
    TempDir tmp;
    json good = {{"suite", "regression_reduced"}, {"scheme", "identity"}, {"seed", 1},
                 {"epochs", 2},  {"steps_per_epoch", 3},     {"eval_batches", 2},
                 {"meltr", {{"d", 16}, {"heads", 4}}}};
    fs::path cfg_path = tmp.path / "cfg.json";
    std::ofstream(cfg_path) << good.dump();
    CHECK(cmd_run(cfg_path.string(), (tmp.path / "ok").string()) == 0);
    auto metrics = read_lines(tmp.path / "ok" / "metrics.csv");
    CHECK(metrics.size() == 1 + 2);  // row-count contract: one per epoch

    json bad = good;
    bad["unknown_key"] = 1;
    std::ofstream(tmp.path / "bad.json") << bad.dump();
    CHECK(cmd_run((tmp.path / "bad.json").string(), (tmp.path / "x").string()) == 1);

    CHECK(cmd_run((tmp.path / "missing.json").string(), (tmp.path / "y").string()) == 1);

    json diverge = good;
    diverge["alpha"] = 1e4;
    diverge["epochs"] = 4;
    std::ofstream(tmp.path / "div.json") << diverge.dump();
    CHECK(cmd_run((tmp.path / "div.json").string(), (tmp.path / "z").string()) == 2);
}

TEST_CASE("MELTR_SEED environment variable overrides the config seed") {
    TempDir tmp;
    json doc = {{"suite", "regression_reduced"}, {"scheme", "identity"}, {"seed", 1},
                {"epochs", 1},  {"steps_per_epoch", 2},     {"eval_batches", 2},
                {"meltr", {{"d", 16}, {"heads", 4}}}};
    fs::path cfg_path = tmp.path / "cfg.json";
    std::ofstream(cfg_path) << doc.dump();

    ::setenv("MELTR_SEED", "99", 1);
    CHECK(cmd_run(cfg_path.string(), (tmp.path / "env").string()) == 0);
    ::unsetenv("MELTR_SEED");
    std::ifstream in(tmp.path / "env" / "run.json");
    json rec = json::parse(in);
    CHECK(rec.at("config").at("seed").get<uint64_t>() == 99);
}

TEST_CASE("te_only run warns and keeps flat partials") {
    TempDir tmp;
    TrainConfig cfg = tiny_base();
    cfg.variant = MeltrVariant::kTeOnly;
    auto cell = run_cell(cfg, (tmp.path / "te").string(), false);
    bool warned = false;
    for (const auto& w : cell.record.warnings)
        warned = warned || w.find("meta-gradient identically zero") != std::string::npos;
    CHECK(warned);
    for (const auto& e : cell.record.epochs)
        for (double p : e.mean_partials) CHECK(p == 0.0);
}

TEST_CASE("cmd_compare emits one row per (scheme, seed)") {
    TempDir tmp;
    GridOptions opt;
    opt.out_dir = (tmp.path / "out").string();
    opt.jobs = 2;
    opt.base = tiny_base();
    CHECK(cmd_compare({"mtl", "identity"}, "regression_reduced", {1, 2}, opt) == 0);
    auto lines = read_lines(fs::path(opt.out_dir) / "compare.csv");
    REQUIRE(lines.size() == 5);
    CHECK(lines[0] == "scheme,seed,val_pri,ms_per_epoch,cos_to_exact");
    CHECK(lines[1].rfind("mtl,1,", 0) == 0);
    CHECK(lines[4].rfind("identity,2,", 0) == 0);
    // reduced learner: identity rows carry a cosine-to-exact figure
    CHECK(lines[4].back() != ',');

    CHECK(cmd_compare({"identity"}, "regression_reduced", {1}, opt) == 1);
}

TEST_CASE("cmd_compare resume performs no retraining") {
    TempDir tmp;
    GridOptions opt;
    opt.out_dir = (tmp.path / "out").string();
    opt.jobs = 1;
    opt.base = tiny_base();
    REQUIRE(cmd_compare({"mtl", "identity"}, "regression_reduced", {1}, opt) == 0);
    auto stamp =
        fs::last_write_time(fs::path(opt.out_dir) / "compare" / "identity__seed1" / "run.json");
    opt.resume = true;
    REQUIRE(cmd_compare({"mtl", "identity"}, "regression_reduced", {1}, opt) == 0);
    CHECK(fs::last_write_time(fs::path(opt.out_dir) / "compare" / "identity__seed1" / "run.json") ==
          stamp);
}

TEST_CASE("cmd_ablate_gamma emits the pinned grid and header") {
    TempDir tmp;
    GridOptions opt;
    opt.out_dir = (tmp.path / "out").string();
    opt.jobs = 2;
    opt.base = tiny_base();
    CHECK(cmd_ablate_gamma({0.0, 0.1}, "regression_reduced", {1, 2}, opt) == 0);
    auto lines = read_lines(fs::path(opt.out_dir) / "gamma.csv");
    REQUIRE(lines.size() == 3);
    CHECK(lines[0] == "gamma,val_pri,reg_gap");
    CHECK(lines[1].rfind("0,", 0) == 0);
    CHECK(cmd_ablate_gamma({}, "regression_reduced", {1}, opt) == 1);
}

TEST_CASE("cmd_ablate_arch flags te_only as untrainable") {
    TempDir tmp;
    GridOptions opt;
    opt.out_dir = (tmp.path / "out").string();
    opt.jobs = 2;
    opt.base = tiny_base();
    CHECK(cmd_ablate_arch({"linear", "te_only"}, "regression_reduced", {1}, opt) == 0);
    auto lines = read_lines(fs::path(opt.out_dir) / "arch.csv");
    REQUIRE(lines.size() == 3);
    CHECK(lines[0] == "variant,val_pri,status");
    CHECK(lines[1].rfind("linear,", 0) == 0);
    CHECK(lines[1].substr(lines[1].size() - 3) == ",ok");
    CHECK(lines[2].rfind("te_only,", 0) == 0);
    CHECK(lines[2].find("untrainable") != std::string::npos);
}

TEST_CASE("cmd_trace emits sweeps, the 2-D surface and stats") {
    TempDir tmp;
    TrainConfig cfg = tiny_base();
    std::string dir = (tmp.path / "cell").string();
    run_cell(cfg, dir, false);
    CHECK(cmd_trace(dir) == 0);
    for (int t = 0; t < 4; ++t) {
        auto lines = read_lines(fs::path(dir) / "trace" / ("sweep_task" + std::to_string(t) + ".csv"));
        REQUIRE(lines.size() == 32);  // header + 31 grid points over [0, 3]
        CHECK(lines[0] == "task_id,loss_value,meltr_output,partial");
        CHECK(lines[1].rfind(std::to_string(t) + ",0,", 0) == 0);
        CHECK(lines[31].rfind(std::to_string(t) + ",3,", 0) == 0);
    }
    auto surface = read_lines(fs::path(dir) / "trace" / "surface2d.csv");
    CHECK(surface[0] == "loss_a,loss_b,meltr_output");
    CHECK(surface.size() == 1 + 31 * 31);
    CHECK(fs::exists(fs::path(dir) / "trace" / "partials.csv"));
    CHECK(fs::exists(fs::path(dir) / "trace" / "loss_ranges.csv"));

    CHECK(cmd_trace((tmp.path / "nowhere").string()) == 1);
}

TEST_CASE("csv outputs are deterministic apart from wall-clock columns") {
    TempDir tmp;
    TrainConfig cfg = tiny_base();
    run_cell(cfg, (tmp.path / "a").string(), false);
    run_cell(cfg, (tmp.path / "b").string(), false);
    auto a = read_lines(tmp.path / "a" / "metrics.csv");
    auto b = read_lines(tmp.path / "b" / "metrics.csv");
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        // drop the trailing wall_ms column
        auto strip = [](const std::string& s) { return s.substr(0, s.rfind(',')); };
        CHECK(strip(a[i]) == strip(b[i]));
    }
    CHECK(read_lines(tmp.path / "a" / "partials.csv") == read_lines(tmp.path / "b" / "partials.csv"));
    CHECK(read_lines(tmp.path / "a" / "loss_ranges.csv") ==
          read_lines(tmp.path / "b" / "loss_ranges.csv"));
}

TEST_CASE("gradcheck runner passes clean and fails under an injected sign flip") {
    GradcheckOptions quick;
    quick.first_order_trials = 10;
    quick.hvp_trials = 5;
    quick.quad_instances = 10;
    GradcheckReport rep = run_gradcheck(quick);
    CHECK(rep.passed());
    CHECK(rep.summary().find("PASS") != std::string::npos);
    CHECK(rep.worst_first_order > 0.0);  // report carries the measured worst case

    quick.inject_sign_flip = true;
    GradcheckReport sabotaged = run_gradcheck(quick);
    CHECK_FALSE(sabotaged.passed());
    CHECK_FALSE(sabotaged.pass_first_order);
}
