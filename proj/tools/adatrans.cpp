#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "adatrans/auxiliary.hpp"
#include "adatrans/confounder.hpp"
#include "adatrans/data_model.hpp"
#include "adatrans/effect.hpp"
#include "adatrans/harness.hpp"
#include "adatrans/metrics.hpp"
#include "adatrans/rng.hpp"
#include "adatrans/serialize.hpp"
#include "adatrans/synth_gen.hpp"

namespace fs = std::filesystem;
using namespace adatrans;

namespace {

ExperimentConfig build_config(const std::string& config_path,
                              const std::vector<std::string>& overrides) {
  ExperimentConfig cfg;
  if (!config_path.empty()) cfg = load_config_file(config_path);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override must be key=value: " + kv);
    apply_config_key(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

int cmd_gen(const ExperimentConfig& cfg) {
  if (cfg.mode == "synthetic-1src" || cfg.mode == "synthetic-multisrc") {
    SynthParams params = SynthParams::defaults(Rng(cfg.seed).stream("gt").next_u64());
    params.n_per_pop = cfg.n_source;
    DiscrepancySpec spec;
    if (cfg.mode == "synthetic-1src") {
      spec.deltas = {cfg.deltas.empty() ? 0.0 : cfg.deltas.front()};
    } else {
      spec.deltas = cfg.multisrc_deltas;
    }
    const MultiSourceDataset data = make_multisource(
        params, PopVectors::default_target(),
        spec, Rng(cfg.seed).stream("data").next_u64(), cfg.n_target);
    std::vector<std::string> echo;
    echo.push_back("# generator echo");
    echo.push_back("gen.mode = " + cfg.mode);
    echo.push_back("gen.seed = " + std::to_string(cfg.seed));
    echo.push_back("gen.sigma_z = " + format_double(params.sigma_z));
    echo.push_back("gen.sigma_y = " + format_double(params.sigma_y));
    echo.push_back("gen.b0 = " + format_double(params.b0));
    echo.push_back("gen.c0 = " + format_double(params.c0));
    echo.push_back("gen.d0 = " + format_double(params.d0));
    for (int j = 0; j < params.d_x; ++j) {
      std::string row = "gen.a0_" + std::to_string(j) + " = " + format_double(params.a0(j));
      echo.push_back(row);
      std::string a1 = "gen.a1_" + std::to_string(j) + " =";
      for (int k = 0; k < params.d_z; ++k) a1 += " " + format_double(params.a1(j, k));
      echo.push_back(a1);
    }
    std::size_t s = 0;
    for (double d : spec.deltas) {
      echo.push_back("gen.delta_s" + std::to_string(++s) + " = " + format_double(d));
    }
    save_dataset(data, cfg.out_dir, echo);
  } else if (cfg.mode == "twins-sim") {
    const TwinsTable table = cfg.twins_csv.empty()
                                 ? make_twins_standin(Rng(cfg.seed).stream("standin").next_u64())
                                 : load_twins_table(cfg.twins_csv);
    TwinsSimSpec spec;
    spec.b_t = cfg.twins_b_t;
    spec.delta_s = cfg.deltas.empty() ? 0.0 : cfg.deltas.front();
    const MultiSourceDataset data =
        twins_simulate(table, spec, Rng(cfg.seed).stream("data").next_u64());
    save_dataset(data, cfg.out_dir,
                 {"# generator echo", "gen.mode = twins-sim",
                  "gen.seed = " + std::to_string(cfg.seed),
                  "gen.b_t = " + format_double(spec.b_t),
                  "gen.delta_s = " + format_double(spec.delta_s)});
  } else {
    throw ConfigError("gen supports synthetic-1src, synthetic-multisrc, twins-sim");
  }
  std::cout << "wrote dataset to " << cfg.out_dir << "\n";
  return 0;
}

int cmd_fit(const ExperimentConfig& cfg, const std::string& manifest,
            const std::string& model_out, const std::string& policy) {
  const MultiSourceDataset data = load_dataset(manifest);
  const TargetSplit split = split_target(
      data, {cfg.n_train, cfg.n_val, cfg.n_test, Rng(cfg.seed).stream("split").next_u64()});
  const GridPolicy gp = policy_from_name(policy);

  auto lp = [&](int level) {
    if (gp == GridPolicy::Full) return TransferPolicy::Full;
    if (gp == GridPolicy::None) return TransferPolicy::None;
    if ((gp == GridPolicy::AblateL1 && level == 1) ||
        (gp == GridPolicy::AblateL2 && level == 2) ||
        (gp == GridPolicy::AblateL3 && level == 3)) {
      return TransferPolicy::None;
    }
    return TransferPolicy::Adaptive;
  };

  ConfounderFitConfig c1;
  c1.structural.d_z = cfg.d_z;
  c1.structural.sigma_z = cfg.sigma_z;
  c1.structural.outcome_kind = data.schema.outcome_kind;
  c1.L = cfg.L;
  c1.restarts = cfg.restarts;
  c1.opt.lr = cfg.lr;
  c1.opt.max_iters = cfg.max_iters;
  c1.opt.rel_tol = cfg.tol;
  c1.gamma_grid = cfg.gamma_grid;
  c1.anchor_budget = cfg.anchor_budget;
  c1.learn_sigma_q = cfg.learn_sigma_q;
  c1.learn_lengthscales = cfg.learn_lengthscales;
  c1.policy = lp(1);
  c1.seed = Rng(cfg.seed).stream("fit-l1").next_u64();

  AuxFitConfig c2;
  c2.restarts = cfg.restarts;
  c2.opt.lr = cfg.lr;
  c2.opt.max_iters = cfg.max_iters;
  c2.opt.rel_tol = cfg.tol;
  c2.gamma = cfg.aux_gamma;
  c2.anchor_budget = cfg.anchor_budget;
  c2.learn_lengthscales = cfg.learn_lengthscales;
  c2.policy = lp(2);
  c2.seed = Rng(cfg.seed).stream("fit-l2").next_u64();
  AuxFitConfig c3 = c2;
  c3.policy = lp(3);
  c3.seed = Rng(cfg.seed).stream("fit-l3").next_u64();

  ModelBundle bundle;
  bundle.confounder = fit_confounder(split.train, c1, &split.val.target);
  bundle.outcome = fit_outcome(split.train, c2, &split.val.target);
  bundle.propensity = fit_propensity(split.train, c3, &split.val.target);
  save_bundle(bundle, model_out, "policy=" + policy, cfg.seed);

  const Eigen::MatrixXd lm = bundle.confounder.lambda.matrix();
  std::cout << "fitted levels on " << data.total_n() << " rows (m=" << data.m() << ")\n";
  for (int s = 1; s <= data.m(); ++s) {
    std::cout << "  lambda_ts_" << s << " = " << lm(0, s)
              << "  delta_ts_" << s << " = " << bundle.outcome.delta.matrix()(0, s)
              << "  eta_ts_" << s << " = " << bundle.propensity.eta.matrix()(0, s) << "\n";
  }
  std::cout << "model written to " << model_out << "\n";
  return 0;
}

int cmd_estimate(const ExperimentConfig& cfg, const std::string& model_path,
                 const std::string& manifest, const std::string& out_csv) {
  const ModelBundle bundle = load_bundle(model_path);
  const MultiSourceDataset data = load_dataset(manifest);
  const TargetSplit split = split_target(
      data, {cfg.n_train, cfg.n_val, cfg.n_test, Rng(cfg.seed).stream("split").next_u64()});
  EstimatorOptions opts;
  opts.samples = cfg.samples;
  opts.marginalize_w = cfg.marginalize_w;
  const EffectEstimate est = estimate_ate(split.test.target.x, bundle, opts,
                                          Rng(cfg.seed).stream("est").next_u64());
  write_ite_csv(est, out_csv);
  std::cout << "ate = " << est.ate << " over " << est.ite.size() << " test rows (S = "
            << opts.samples << ")\n";
  if (split.test.target.has_truth()) {
    std::cout << "sqrt_pehe = "
              << sqrt_pehe(*split.test.target.y0_true, *split.test.target.y1_true, est.ite)
              << ", ate_error = "
              << ate_error(*split.test.target.y0_true, *split.test.target.y1_true, est.ite)
              << "\n";
  }
  return 0;
}

int cmd_metrics(const std::string& pred_csv, const std::string& data_csv) {
  // pred: row_id,ite,se aligned with the data rows
  std::ifstream in(pred_csv);
  if (!in) throw IOFailure("cannot open " + pred_csv);
  std::string line;
  std::getline(in, line);
  std::vector<double> ite;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    double id, v, se;
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf", &id, &v, &se) == 3) ite.push_back(v);
  }

  std::ifstream din(data_csv);
  if (!din) throw IOFailure("cannot open " + data_csv);
  std::getline(din, line);
  std::stringstream hdr(line);
  std::vector<std::string> cols;
  std::string col;
  while (std::getline(hdr, col, ',')) cols.push_back(col);
  int i0 = -1, i1 = -1;
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] == "y0_true") i0 = static_cast<int>(i);
    if (cols[i] == "y1_true") i1 = static_cast<int>(i);
  }
  if (i0 < 0 || i1 < 0) throw SchemaMismatch(data_csv + " lacks ground-truth columns");
  std::vector<double> y0, y1;
  while (std::getline(din, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::vector<std::string> fields;
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    y0.push_back(std::stod(fields[static_cast<std::size_t>(i0)]));
    y1.push_back(std::stod(fields[static_cast<std::size_t>(i1)]));
  }
  const auto n = static_cast<Eigen::Index>(ite.size());
  if (static_cast<std::size_t>(n) != y0.size()) {
    throw LengthMismatch("prediction and data row counts differ");
  }
  Eigen::VectorXd vi(n), v0(n), v1(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    vi(i) = ite[static_cast<std::size_t>(i)];
    v0(i) = y0[static_cast<std::size_t>(i)];
    v1(i) = y1[static_cast<std::size_t>(i)];
  }
  std::cout << "sqrt_pehe = " << sqrt_pehe(v0, v1, vi) << "\n";
  std::cout << "ate_error = " << ate_error(v0, v1, vi) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adatrans: adaptive multi-source treatment-effect estimation"};
  app.require_subcommand(1);

  std::string config_path, manifest, model_path, out_path, pred_csv, data_csv;
  std::string policy = "adaptive";
  std::vector<std::string> overrides;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "flat key = value config file");
    sub->add_option("--set", overrides, "config override key=value (repeatable)");
  };
  auto add_shortcuts = [&](CLI::App* sub) {
    sub->add_option_function<std::string>(
        "--seed", [&](const std::string& v) { overrides.push_back("seed=" + v); });
    sub->add_option_function<std::string>(
        "--out", [&](const std::string& v) { overrides.push_back("out_dir=" + v); });
    sub->add_option_function<std::string>(
        "--mode", [&](const std::string& v) { overrides.push_back("mode=" + v); });
    sub->add_option_function<std::string>(
        "--replicates", [&](const std::string& v) { overrides.push_back("replicates=" + v); });
  };

  CLI::App* gen = app.add_subcommand("gen", "generate a dataset (CSV files + manifest)");
  add_common(gen);
  add_shortcuts(gen);

  CLI::App* fit = app.add_subcommand("fit", "fit the three levels and write a model archive");
  add_common(fit);
  add_shortcuts(fit);
  fit->add_option("--manifest", manifest, "dataset manifest")->required();
  fit->add_option("--model-out", out_path, "output model path")->default_val("model.json");
  fit->add_option("--policy", policy,
                  "adaptive|full|none|ablate-l1|ablate-l2|ablate-l3");

  CLI::App* est = app.add_subcommand("estimate", "estimate effects on the target test split");
  add_common(est);
  add_shortcuts(est);
  est->add_option("--model", model_path, "model archive")->required();
  est->add_option("--manifest", manifest, "dataset manifest")->required();
  est->add_option("--out-csv", out_path, "ITE output CSV")->default_val("ite.csv");

  CLI::App* exp = app.add_subcommand("experiment", "run a replication grid");
  add_common(exp);
  add_shortcuts(exp);
  exp->add_option_function<std::string>(
      "--policy", [&](const std::string& v) { overrides.push_back("policy=" + v); });

  CLI::App* met = app.add_subcommand("metrics", "compute metrics from an ITE CSV");
  met->add_option("--pred", pred_csv, "row_id,ite,se CSV")->required();
  met->add_option("--data", data_csv, "population CSV with ground-truth columns")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen(build_config(config_path, overrides));
    if (fit->parsed()) return cmd_fit(build_config(config_path, overrides), manifest, out_path, policy);
    if (est->parsed()) {
      return cmd_estimate(build_config(config_path, overrides), model_path, manifest, out_path);
    }
    if (exp->parsed()) {
      const ExperimentConfig cfg = build_config(config_path, overrides);
      const auto rows = run_experiment(cfg);
      int failed = 0;
      for (const auto& r : rows) failed += r.failed ? 1 : 0;
      std::cout << "wrote " << rows.size() << " result rows to " << cfg.out_dir
                << "/results.csv (" << failed << " failed cells)\n";
      return failed == 0 ? 0 : 2;
    }
    if (met->parsed()) return cmd_metrics(pred_csv, data_csv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
