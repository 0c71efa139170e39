#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "adatrans/data_model.hpp"

namespace adatrans {

// Grid policies: `full` pins every transfer factor at 1, `none` at 0,
// `ablate-lK` pins only level K at 0 and learns the rest.
enum class GridPolicy { Adaptive, Full, None, AblateL1, AblateL2, AblateL3 };

std::string policy_name(GridPolicy p);
GridPolicy policy_from_name(const std::string& name);

struct ExperimentConfig {
  std::string mode = "synthetic-1src";  // synthetic-multisrc | twins-sim | custom-csv
  std::vector<double> deltas = {0.0, 0.5, 1.0, 1.5, 2.0};
  std::vector<int> source_counts = {0, 2, 4};
  std::vector<double> multisrc_deltas = {2.0, 1.5, 1.0, 0.5};
  int n_source = 1000;
  int n_target = 1000;
  int n_train = 50, n_val = 100, n_test = 850;
  int replicates = 10;
  std::vector<GridPolicy> policies = {GridPolicy::Adaptive};
  std::uint64_t seed = 1;
  std::string out_dir = "out";

  // model and optimizer settings
  int L = 5;
  int restarts = 5;
  int max_iters = 2000;
  double lr = 1e-2;
  double tol = 1e-6;
  std::vector<double> gamma_grid = {1e-2};
  double aux_gamma = 1e-2;
  int anchor_budget = 2000;
  bool learn_sigma_q = true;
  bool learn_lengthscales = true;
  int d_z = 2;
  double sigma_z = 2.8284271247461903;
  int samples = 500;
  bool marginalize_w = false;

  bool wall_clock = true;  // off -> wall_ms column written as 0
  int jobs = 0;            // 0 = hardware concurrency

  double twins_b_t = 0.2;
  std::string twins_csv;  // empty -> bundled stand-in table
  int twins_folds = 9;
  int fold_train = 100, fold_val = 100, fold_test = 700;

  std::string manifest;  // custom-csv mode

  int max_m() const;
};

// Flat `key = value` file; '#' starts a comment. Unknown keys are an error.
ExperimentConfig load_config_file(const std::string& path);
void apply_config_key(ExperimentConfig& cfg, const std::string& key, const std::string& value);

struct ResultRow {
  std::string mode;
  double delta_or_sources = 0.0;
  std::string policy;
  int replicate = 0;
  std::optional<double> sqrt_pehe;
  std::optional<double> ate_error;
  std::vector<std::optional<double>> lambda_ts, delta_ts, eta_ts;  // per source
  long wall_ms = 0;
  bool failed = false;
  std::string failure;
};

// Runs the configured grid (cells in parallel, aggregation in cell order),
// writes results.csv and the plot-data files into cfg.out_dir, and returns
// the rows. One failed cell marks its row and never aborts the grid.
std::vector<ResultRow> run_experiment(const ExperimentConfig& cfg);

void write_results_csv(const std::vector<ResultRow>& rows, const ExperimentConfig& cfg,
                       const std::string& path);

void emit_plotdata(const std::vector<ResultRow>& rows, const ExperimentConfig& cfg,
                   const std::string& out_dir);

}  // namespace adatrans
