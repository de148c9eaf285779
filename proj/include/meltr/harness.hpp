#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "meltr/train_loop.hpp"

namespace meltr {

/// Strict parse of a run-config document: every key must be known, values
/// must be well-typed and in range. Recognized keys:
///   suite, scheme, alpha, beta, gamma, K, epochs, steps_per_epoch, seed,
///   optimizer, lr_decay, eval_batches, track_cos_to_exact, mtl_coeffs,
///   meltr { d, heads, variant }, flags { direct_reg_grad, shared_outer_batch }
TrainConfig parse_run_config(const nlohmann::json& doc);

/// Canned suites: "regression", "regression_reduced", "classification".
TaskSpec suite_by_name(const std::string& name, uint64_t seed);

/// Train one grid cell into `dir` (run.json + CSVs). With resume=true a cell
/// whose run.json already exists is loaded instead of retrained.
struct CellResult {
    RunRecord record;
    bool skipped = false;  // satisfied from an existing run.json
};
CellResult run_cell(const TrainConfig& cfg, const std::string& dir, bool resume);

void write_run_artifacts(const RunRecord& rec, const std::string& dir);

struct GridOptions {
    std::string out_dir = "out";
    int jobs = 0;  // 0 -> hardware concurrency
    bool resume = false;
    TrainConfig base;  // scheme/gamma/variant/seed are overridden per cell
};

// Exit codes: 0 success, 1 config/usage error, 2 divergence (cmd_run only).
int cmd_run(const std::string& config_path, const std::string& out_dir);
int cmd_compare(const std::vector<std::string>& schemes, const std::string& suite,
                const std::vector<uint64_t>& seeds, const GridOptions& opt);
int cmd_ablate_gamma(const std::vector<double>& gammas, const std::string& suite,
                     const std::vector<uint64_t>& seeds, const GridOptions& opt);
int cmd_ablate_arch(const std::vector<std::string>& variants, const std::string& suite,
                    const std::vector<uint64_t>& seeds, const GridOptions& opt);
int cmd_trace(const std::string& run_dir);
int cmd_gradcheck(bool inject_sign_flip = false);

// Shared formatting/aggregation helpers (also used by the test suites).
std::string fmt_double(double v);
double median(std::vector<double> xs);

}  // namespace meltr
