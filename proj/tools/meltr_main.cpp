#include <CLI11.hpp>
#include <iostream>
#include <string>
#include <vector>

#include "meltr/harness.hpp"
#include "meltr/loss_assembly.hpp"

namespace {

std::vector<uint64_t> parse_seeds(const std::string& list) {
    std::vector<uint64_t> seeds;
    size_t pos = 0;
    while (pos <= list.size()) {
        size_t comma = list.find(',', pos);
        std::string tok =
            list.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        if (!tok.empty()) seeds.push_back(std::stoull(tok));
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    if (seeds.empty()) throw meltr::ConfigError("no seeds given");
    return seeds;
}

std::vector<std::string> split_list(const std::string& list) {
    std::vector<std::string> out;
    size_t pos = 0;
    while (pos <= list.size()) {
        size_t comma = list.find(',', pos);
        std::string tok =
            list.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        if (!tok.empty()) out.push_back(tok);
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"meltr: bi-level auxiliary-loss optimization harness"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out", run_dir;
    std::string suite = "regression";
    std::string seeds_list = "1,2,3,4,5";
    std::string schemes_list, gammas_list, variants_list;
    int jobs = 0;
    bool resume = false;
    bool inject_sign_flip = false;
    meltr::GridOptions grid;

    auto add_grid_flags = [&](CLI::App* cmd) {
        cmd->add_option("--out", out_dir, "output directory");
        cmd->add_option("--suite", suite, "suite: regression | regression_reduced | classification");
        cmd->add_option("--seeds", seeds_list, "comma-separated seeds");
        cmd->add_option("--jobs", jobs, "worker count (default: hardware concurrency)");
        cmd->add_flag("--resume", resume, "skip cells whose run.json already exists");
        cmd->add_option("--epochs", grid.base.epochs, "epochs per run");
        cmd->add_option("--steps", grid.base.steps_per_epoch, "meta-steps per epoch");
        cmd->add_option("--alpha", grid.base.alpha, "inner learning rate");
        cmd->add_option("--beta", grid.base.beta, "outer learning rate");
        cmd->add_option("--gamma", grid.base.gamma, "regularization strength");
        cmd->add_option("--d", grid.base.meltr_d, "meltr width");
        cmd->add_option("--heads", grid.base.meltr_heads, "meltr attention heads");
        cmd->add_option("--k", grid.base.k_inner, "inner steps per outer step");
        cmd->add_option_function<std::string>(
            "--optimizer",
            [&grid](const std::string& name) {
                grid.base.optimizer = meltr::optimizer_from_string(name);
            },
            "sgd | adam");
    };

    CLI::App* run = app.add_subcommand("run", "train one configuration from a JSON config");
    run->add_option("--config", config_path, "JSON config path")->required();
    run->add_option("--out", out_dir, "output directory");

    CLI::App* compare = app.add_subcommand("compare", "compare hypergradient schemes");
    compare->add_option("--schemes", schemes_list, "comma-separated scheme list")->required();
    add_grid_flags(compare);

    CLI::App* ablate_gamma =
        app.add_subcommand("ablate-gamma", "sweep the regularization strength");
    ablate_gamma->add_option("--gammas", gammas_list,
                             "comma-separated gamma list (default: the ablation grid)");
    add_grid_flags(ablate_gamma);

    CLI::App* ablate_arch = app.add_subcommand("ablate-arch", "sweep architecture variants");
    ablate_arch->add_option("--variants", variants_list,
                            "subset of full,linear,se_only,te_only (default: all)");
    add_grid_flags(ablate_arch);

    CLI::App* trace = app.add_subcommand("trace", "emit sweep/surface/partials CSVs for a run");
    trace->add_option("run_dir", run_dir, "directory containing run.json")->required();

    CLI::App* gradcheck = app.add_subcommand("gradcheck", "run the gradient oracle suites");
    gradcheck->add_flag("--inject-sign-flip", inject_sign_flip,
                        "test fixture: corrupt one gradient and expect failure");

    CLI11_PARSE(app, argc, argv);

    try {
        grid.out_dir = out_dir;
        grid.jobs = jobs;
        grid.resume = resume;
        if (run->parsed()) return meltr::cmd_run(config_path, out_dir);
        if (compare->parsed())
            return meltr::cmd_compare(split_list(schemes_list), suite, parse_seeds(seeds_list),
                                      grid);
        if (ablate_gamma->parsed()) {
            std::vector<double> gammas = meltr::kGammaAblationGrid;
            if (!gammas_list.empty()) {
                gammas.clear();
                for (const auto& tok : split_list(gammas_list)) gammas.push_back(std::stod(tok));
            }
            return meltr::cmd_ablate_gamma(gammas, suite, parse_seeds(seeds_list), grid);
        }
        if (ablate_arch->parsed()) {
            std::vector<std::string> variants = {"full", "linear", "se_only", "te_only"};
            if (!variants_list.empty()) variants = split_list(variants_list);
            return meltr::cmd_ablate_arch(variants, suite, parse_seeds(seeds_list), grid);
        }
        if (trace->parsed()) return meltr::cmd_trace(run_dir);
        if (gradcheck->parsed()) return meltr::cmd_gradcheck(inject_sign_flip);
    } catch (const meltr::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
