#include "adatrans/harness.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <thread>

#include "adatrans/auxiliary.hpp"
#include "adatrans/confounder.hpp"
#include "adatrans/effect.hpp"
#include "adatrans/metrics.hpp"
#include "adatrans/rng.hpp"
#include "adatrans/synth_gen.hpp"

namespace adatrans {

namespace fs = std::filesystem;

std::string policy_name(GridPolicy p) {
  switch (p) {
    case GridPolicy::Adaptive: return "adaptive";
    case GridPolicy::Full: return "full";
    case GridPolicy::None: return "none";
    case GridPolicy::AblateL1: return "ablate-l1";
    case GridPolicy::AblateL2: return "ablate-l2";
    case GridPolicy::AblateL3: return "ablate-l3";
  }
  return "adaptive";
}

GridPolicy policy_from_name(const std::string& name) {
  if (name == "adaptive") return GridPolicy::Adaptive;
  if (name == "full") return GridPolicy::Full;
  if (name == "none") return GridPolicy::None;
  if (name == "ablate-l1") return GridPolicy::AblateL1;
  if (name == "ablate-l2") return GridPolicy::AblateL2;
  if (name == "ablate-l3") return GridPolicy::AblateL3;
  throw ConfigError("unknown policy '" + name + "'");
}

int ExperimentConfig::max_m() const {
  if (mode == "synthetic-1src" || mode == "twins-sim") return 1;
  if (mode == "synthetic-multisrc") {
    int mx = 0;
    for (int c : source_counts) mx = std::max(mx, c);
    return mx;
  }
  return 8;  // custom data: generous fixed width
}

namespace {

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  auto e = s.find_last_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!trim(cur).empty() || !out.empty()) out.push_back(trim(cur));
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "off" || v == "0" || v == "no") return false;
  throw ConfigError("expected a boolean, got '" + v + "'");
}

std::vector<double> parse_double_list(const std::string& v) {
  std::vector<double> out;
  for (const auto& t : split_csv(v)) {
    if (!t.empty()) out.push_back(std::stod(t));
  }
  return out;
}

std::vector<int> parse_int_list(const std::string& v) {
  std::vector<int> out;
  for (const auto& t : split_csv(v)) {
    if (!t.empty()) out.push_back(std::stoi(t));
  }
  return out;
}

std::string fmt_opt(const std::optional<double>& v) {
  return v.has_value() ? format_double(*v) : std::string("NA");
}

}  // namespace

void apply_config_key(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "mode") cfg.mode = value;
  else if (key == "deltas") cfg.deltas = parse_double_list(value);
  else if (key == "source_counts") cfg.source_counts = parse_int_list(value);
  else if (key == "multisrc_deltas") cfg.multisrc_deltas = parse_double_list(value);
  else if (key == "n_source") cfg.n_source = std::stoi(value);
  else if (key == "n_target") cfg.n_target = std::stoi(value);
  else if (key == "n_train") cfg.n_train = std::stoi(value);
  else if (key == "n_val") cfg.n_val = std::stoi(value);
  else if (key == "n_test") cfg.n_test = std::stoi(value);
  else if (key == "replicates") cfg.replicates = std::stoi(value);
  else if (key == "policy") cfg.policies = {policy_from_name(value)};
  else if (key == "policies") {
    cfg.policies.clear();
    for (const auto& t : split_csv(value)) cfg.policies.push_back(policy_from_name(t));
  } else if (key == "seed") cfg.seed = std::stoull(value);
  else if (key == "out_dir") cfg.out_dir = value;
  else if (key == "L") cfg.L = std::stoi(value);
  else if (key == "restarts") cfg.restarts = std::stoi(value);
  else if (key == "max_iters") cfg.max_iters = std::stoi(value);
  else if (key == "lr") cfg.lr = std::stod(value);
  else if (key == "tol") cfg.tol = std::stod(value);
  else if (key == "gamma_grid") cfg.gamma_grid = parse_double_list(value);
  else if (key == "aux_gamma") cfg.aux_gamma = std::stod(value);
  else if (key == "anchor_budget") cfg.anchor_budget = std::stoi(value);
  else if (key == "learn_sigma_q") cfg.learn_sigma_q = parse_bool(value);
  else if (key == "learn_lengthscales") cfg.learn_lengthscales = parse_bool(value);
  else if (key == "d_z") cfg.d_z = std::stoi(value);
  else if (key == "sigma_z") cfg.sigma_z = std::stod(value);
  else if (key == "samples") cfg.samples = std::stoi(value);
  else if (key == "marginalize_w") cfg.marginalize_w = parse_bool(value);
  else if (key == "wall_clock") cfg.wall_clock = parse_bool(value);
  else if (key == "jobs") cfg.jobs = std::stoi(value);
  else if (key == "twins_b_t") cfg.twins_b_t = std::stod(value);
  else if (key == "twins_csv") cfg.twins_csv = value;
  else if (key == "twins_folds") cfg.twins_folds = std::stoi(value);
  else if (key == "fold_train") cfg.fold_train = std::stoi(value);
  else if (key == "fold_val") cfg.fold_val = std::stoi(value);
  else if (key == "fold_test") cfg.fold_test = std::stoi(value);
  else if (key == "manifest") cfg.manifest = value;
  else throw ConfigError("unknown config key '" + key + "'");
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IOFailure("cannot open config " + path);
  ExperimentConfig cfg;
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line without '=': " + t);
    apply_config_key(cfg, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return cfg;
}

namespace {

struct LevelPolicies {
  TransferPolicy l1 = TransferPolicy::Adaptive;
  TransferPolicy l2 = TransferPolicy::Adaptive;
  TransferPolicy l3 = TransferPolicy::Adaptive;
};

LevelPolicies level_policies(GridPolicy p) {
  LevelPolicies lp;
  switch (p) {
    case GridPolicy::Adaptive: break;
    case GridPolicy::Full:
      lp.l1 = lp.l2 = lp.l3 = TransferPolicy::Full;
      break;
    case GridPolicy::None:
      lp.l1 = lp.l2 = lp.l3 = TransferPolicy::None;
      break;
    case GridPolicy::AblateL1: lp.l1 = TransferPolicy::None; break;
    case GridPolicy::AblateL2: lp.l2 = TransferPolicy::None; break;
    case GridPolicy::AblateL3: lp.l3 = TransferPolicy::None; break;
  }
  return lp;
}

struct CellSpec {
  double delta_or_sources = 0.0;
  int grid_index = 0;
  GridPolicy policy = GridPolicy::Adaptive;
  int replicate = 0;
  bool naive_companion = false;  // twins mode also reports the naive estimator
};

struct FitSeeds {
  std::uint64_t l1, l2, l3, est;
};

struct CellOutcome {
  double pehe = 0.0, ate_err = 0.0;
  std::vector<double> lambda_ts, delta_ts, eta_ts;
  double naive_ate_err = 0.0;
  bool has_truth = false;
};

std::vector<std::optional<double>> to_opt(const std::vector<double>& v, int width) {
  std::vector<std::optional<double>> out(static_cast<std::size_t>(width));
  for (std::size_t i = 0; i < v.size() && i < out.size(); ++i) out[i] = v[i];
  return out;
}

CellOutcome run_cell_on_data(const MultiSourceDataset& train, const PopulationData& val,
                             const PopulationData& test, const ExperimentConfig& cfg,
                             GridPolicy policy, const FitSeeds& seeds) {
  const LevelPolicies lp = level_policies(policy);

  ConfounderFitConfig c1;
  c1.structural.d_z = cfg.d_z;
  c1.structural.sigma_z = cfg.sigma_z;
  c1.structural.outcome_kind = train.schema.outcome_kind;
  c1.L = cfg.L;
  c1.restarts = cfg.restarts;
  c1.opt.lr = cfg.lr;
  c1.opt.max_iters = cfg.max_iters;
  c1.opt.rel_tol = cfg.tol;
  c1.gamma_grid = cfg.gamma_grid;
  c1.anchor_budget = cfg.anchor_budget;
  c1.learn_sigma_q = cfg.learn_sigma_q;
  c1.learn_lengthscales = cfg.learn_lengthscales;
  c1.policy = lp.l1;
  c1.seed = seeds.l1;

  AuxFitConfig c2;
  c2.restarts = cfg.restarts;
  c2.opt.lr = cfg.lr;
  c2.opt.max_iters = cfg.max_iters;
  c2.opt.rel_tol = cfg.tol;
  c2.gamma = cfg.aux_gamma;
  c2.anchor_budget = cfg.anchor_budget;
  c2.learn_lengthscales = cfg.learn_lengthscales;
  c2.policy = lp.l2;
  c2.seed = seeds.l2;

  AuxFitConfig c3 = c2;
  c3.policy = lp.l3;
  c3.seed = seeds.l3;

  ModelBundle bundle;
  bundle.confounder = fit_confounder(train, c1, &val);
  bundle.outcome = fit_outcome(train, c2, &val);
  bundle.propensity = fit_propensity(train, c3, &val);

  EstimatorOptions opts;
  opts.samples = cfg.samples;
  opts.marginalize_w = cfg.marginalize_w;
  const EffectEstimate est = estimate_ate(test.x, bundle, opts, seeds.est);

  CellOutcome out;
  out.has_truth = test.has_truth();
  if (out.has_truth) {
    out.pehe = sqrt_pehe(*test.y0_true, *test.y1_true, est.ite);
    out.ate_err = ate_error(*test.y0_true, *test.y1_true, est.ite);
  }
  const int m = train.m();
  const Eigen::MatrixXd l1m = bundle.confounder.lambda.matrix();
  const Eigen::MatrixXd l2m = bundle.outcome.delta.matrix();
  const Eigen::MatrixXd l3m = bundle.propensity.eta.matrix();
  for (int s = 0; s < m; ++s) {
    out.lambda_ts.push_back(l1m(0, s + 1));
    out.delta_ts.push_back(l2m(0, s + 1));
    out.eta_ts.push_back(l3m(0, s + 1));
  }
  return out;
}

double truth_ate(const PopulationData& test) {
  return (*test.y1_true - *test.y0_true).mean();
}

}  // namespace

std::vector<ResultRow> run_experiment(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  const Rng master(cfg.seed);

  // grid values per mode
  std::vector<double> grid;
  if (cfg.mode == "synthetic-1src" || cfg.mode == "twins-sim") {
    grid = cfg.deltas;
    if (grid.empty()) throw ConfigError("delta grid is empty");
  } else if (cfg.mode == "synthetic-multisrc") {
    for (int c : cfg.source_counts) grid.push_back(static_cast<double>(c));
    if (grid.empty()) throw ConfigError("source_counts is empty");
  } else if (cfg.mode == "custom-csv") {
    grid = {0.0};
  } else {
    throw ConfigError("unknown mode '" + cfg.mode + "'");
  }

  std::vector<CellSpec> cells;
  for (std::size_t gi = 0; gi < grid.size(); ++gi) {
    for (const GridPolicy pol : cfg.policies) {
      for (int rep = 0; rep < cfg.replicates; ++rep) {
        CellSpec c;
        c.delta_or_sources = grid[gi];
        c.grid_index = static_cast<int>(gi);
        c.policy = pol;
        c.replicate = rep;
        c.naive_companion = cfg.mode == "twins-sim";
        cells.push_back(c);
      }
    }
  }

  // fixed ground-truth parameters shared by every synthetic cell
  SynthParams params = SynthParams::defaults(master.stream("gt").next_u64());
  params.d_z = 2;  // the generator's latent dimension is part of the protocol
  params.n_per_pop = cfg.n_source;
  const PopVectors target_vecs = PopVectors::default_target();

  // both rows (cell + optional naive companion) are indexed up front so the
  // output order never depends on scheduling
  const int rows_per_cell = cfg.mode == "twins-sim" ? 2 : 1;
  std::vector<ResultRow> rows(cells.size() * static_cast<std::size_t>(rows_per_cell));

  auto run_one = [&](std::size_t ci) {
    const CellSpec& cell = cells[ci];
    ResultRow& row = rows[ci * static_cast<std::size_t>(rows_per_cell)];
    row.mode = cfg.mode;
    row.delta_or_sources = cell.delta_or_sources;
    row.policy = policy_name(cell.policy);
    row.replicate = cell.replicate;
    const int width = cfg.max_m();
    row.lambda_ts.assign(static_cast<std::size_t>(width), std::nullopt);
    row.delta_ts.assign(static_cast<std::size_t>(width), std::nullopt);
    row.eta_ts.assign(static_cast<std::size_t>(width), std::nullopt);
    ResultRow* naive_row = nullptr;
    if (rows_per_cell == 2) {
      naive_row = &rows[ci * 2 + 1];
      *naive_row = row;
      naive_row->policy = "naive";
    }

    const auto t0 = std::chrono::steady_clock::now();
    try {
      const std::uint64_t data_seed =
          mix_seed(master.stream("data").next_u64(),
                   mix_seed(static_cast<std::uint64_t>(cell.grid_index),
                            static_cast<std::uint64_t>(cell.replicate)));
      const std::uint64_t split_seed =
          mix_seed(master.stream("split").next_u64(),
                   mix_seed(static_cast<std::uint64_t>(cell.grid_index),
                            static_cast<std::uint64_t>(cell.replicate)));
      FitSeeds seeds;
      auto cell_stream = [&](const char* tag) {
        return mix_seed(master.stream(tag).next_u64(),
                        mix_seed(static_cast<std::uint64_t>(cell.grid_index),
                                 static_cast<std::uint64_t>(cell.replicate)));
      };
      seeds.l1 = cell_stream("fit-l1");
      seeds.l2 = cell_stream("fit-l2");
      seeds.l3 = cell_stream("fit-l3");
      seeds.est = cell_stream("est");

      if (cfg.mode == "synthetic-1src" || cfg.mode == "synthetic-multisrc") {
        DiscrepancySpec spec;
        if (cfg.mode == "synthetic-1src") {
          spec.deltas = {cell.delta_or_sources};
        } else {
          const int m = static_cast<int>(cell.delta_or_sources);
          if (m > static_cast<int>(cfg.multisrc_deltas.size())) {
            throw ConfigError("source count exceeds the multisrc_deltas list");
          }
          // the first m entries of the configured per-source shifts
          spec.deltas.assign(cfg.multisrc_deltas.begin(),
                             cfg.multisrc_deltas.begin() + m);
        }
        const MultiSourceDataset data =
            make_multisource(params, target_vecs, spec, data_seed, cfg.n_target);
        const TargetSplit split =
            split_target(data, {cfg.n_train, cfg.n_val, cfg.n_test, split_seed});
        const CellOutcome res = run_cell_on_data(split.train, split.val.target,
                                                 split.test.target, cfg, cell.policy, seeds);
        row.sqrt_pehe = res.pehe;
        row.ate_error = res.ate_err;
        row.lambda_ts = to_opt(res.lambda_ts, width);
        row.delta_ts = to_opt(res.delta_ts, width);
        row.eta_ts = to_opt(res.eta_ts, width);
      } else if (cfg.mode == "twins-sim") {
        const TwinsTable table = cfg.twins_csv.empty()
                                     ? make_twins_standin(master.stream("standin").next_u64())
                                     : load_twins_table(cfg.twins_csv);
        TwinsSimSpec tspec;
        tspec.b_t = cfg.twins_b_t;
        tspec.delta_s = cell.delta_or_sources;
        const MultiSourceDataset data = twins_simulate(table, tspec, data_seed);

        // seeded shuffle once, then contiguous fold blocks
        std::vector<int> order(static_cast<std::size_t>(data.target.n()));
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        Rng shuffle_rng(split_seed);
        shuffle_inplace(order, shuffle_rng);

        MetricResult fold_metrics;
        std::vector<double> fold_naive;
        std::vector<double> fl, fd, fe;
        const int folds = std::max(1, cfg.twins_folds);
        for (int f = 0; f < folds; ++f) {
          auto block = [&](int start, int count) {
            std::vector<int> idx;
            for (int i = 0; i < count; ++i) {
              idx.push_back(order[static_cast<std::size_t>(
                  (start + i) % static_cast<int>(order.size()))]);
            }
            std::sort(idx.begin(), idx.end());
            return idx;
          };
          const int base = f * cfg.fold_train;
          const std::vector<int> train_idx = block(base, cfg.fold_train);
          const std::vector<int> val_idx = block(base + cfg.fold_train, cfg.fold_val);
          const std::vector<int> test_idx =
              block(base + cfg.fold_train + cfg.fold_val, cfg.fold_test);

          MultiSourceDataset train;
          train.schema = data.schema;
          train.target = data.target.take_rows(train_idx);
          train.sources = data.sources;
          const PopulationData val = data.target.take_rows(val_idx);
          const PopulationData test = data.target.take_rows(test_idx);

          FitSeeds fseeds = seeds;
          fseeds.l1 = mix_seed(seeds.l1, static_cast<std::uint64_t>(f));
          fseeds.l2 = mix_seed(seeds.l2, static_cast<std::uint64_t>(f));
          fseeds.l3 = mix_seed(seeds.l3, static_cast<std::uint64_t>(f));
          fseeds.est = mix_seed(seeds.est, static_cast<std::uint64_t>(f));
          const CellOutcome res =
              run_cell_on_data(train, val, test, cfg, cell.policy, fseeds);
          fold_metrics.add(res.pehe, res.ate_err);
          if (!res.lambda_ts.empty()) {
            fl.push_back(res.lambda_ts[0]);
            fd.push_back(res.delta_ts[0]);
            fe.push_back(res.eta_ts[0]);
          }
          fold_naive.push_back(std::abs(naive_ate(train.target) - truth_ate(test)));
        }
        fold_metrics.finalize();
        row.sqrt_pehe = fold_metrics.pehe_mean;
        row.ate_error = fold_metrics.ate_error_mean;
        if (!fl.empty()) {
          row.lambda_ts = to_opt({mean_of(fl)}, width);
          row.delta_ts = to_opt({mean_of(fd)}, width);
          row.eta_ts = to_opt({mean_of(fe)}, width);
        }
        if (naive_row != nullptr) {
          naive_row->ate_error = mean_of(fold_naive);
        }
      } else {  // custom-csv
        if (cfg.manifest.empty()) throw ConfigError("custom-csv mode needs `manifest`");
        const MultiSourceDataset data = load_dataset(cfg.manifest);
        const TargetSplit split =
            split_target(data, {cfg.n_train, cfg.n_val, cfg.n_test, split_seed});
        const CellOutcome res = run_cell_on_data(split.train, split.val.target,
                                                 split.test.target, cfg, cell.policy, seeds);
        if (res.has_truth) {
          row.sqrt_pehe = res.pehe;
          row.ate_error = res.ate_err;
        }
        row.lambda_ts = to_opt(res.lambda_ts, width);
        row.delta_ts = to_opt(res.delta_ts, width);
        row.eta_ts = to_opt(res.eta_ts, width);
      }
    } catch (const std::exception& e) {
      row.failed = true;
      row.failure = e.what();
      if (naive_row != nullptr) {
        naive_row->failed = true;
        naive_row->failure = row.failure;
      }
    }
    const auto t1 = std::chrono::steady_clock::now();
    if (cfg.wall_clock) {
      row.wall_ms =
          std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count();
      if (naive_row != nullptr) naive_row->wall_ms = row.wall_ms;
    }
  };

  int jobs = cfg.jobs > 0 ? cfg.jobs
                          : static_cast<int>(std::thread::hardware_concurrency());
  jobs = std::max(1, std::min<int>(jobs, static_cast<int>(cells.size())));
  if (jobs == 1) {
    for (std::size_t ci = 0; ci < cells.size(); ++ci) run_one(ci);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    workers.reserve(static_cast<std::size_t>(jobs));
    for (int t = 0; t < jobs; ++t) {
      workers.emplace_back([&] {
        for (;;) {
          const std::size_t ci = next.fetch_add(1);
          if (ci >= cells.size()) return;
          run_one(ci);
        }
      });
    }
    for (auto& w : workers) w.join();
  }

  write_results_csv(rows, cfg, (fs::path(cfg.out_dir) / "results.csv").string());
  emit_plotdata(rows, cfg, cfg.out_dir);

  std::ofstream flog(fs::path(cfg.out_dir) / "failures.log");
  for (const auto& r : rows) {
    if (r.failed) {
      flog << r.mode << " " << format_double(r.delta_or_sources) << " " << r.policy << " rep "
           << r.replicate << ": " << r.failure << "\n";
    }
  }
  return rows;
}

void write_results_csv(const std::vector<ResultRow>& rows, const ExperimentConfig& cfg,
                       const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IOFailure("cannot write " + path);
  const int width = cfg.max_m();
  out << "mode,delta_or_sources,policy,replicate,sqrt_pehe,ate_error";
  for (int s = 1; s <= width; ++s) out << ",lambda_ts_" << s;
  for (int s = 1; s <= width; ++s) out << ",delta_ts_" << s;
  for (int s = 1; s <= width; ++s) out << ",eta_ts_" << s;
  out << ",wall_ms\n";
  for (const auto& r : rows) {
    out << r.mode << "," << format_double(r.delta_or_sources) << "," << r.policy << ","
        << r.replicate << "," << fmt_opt(r.sqrt_pehe) << "," << fmt_opt(r.ate_error);
    auto emit = [&](const std::vector<std::optional<double>>& v) {
      for (int s = 0; s < width; ++s) {
        out << ","
            << (s < static_cast<int>(v.size()) ? fmt_opt(v[static_cast<std::size_t>(s)])
                                               : std::string("NA"));
      }
    };
    emit(r.lambda_ts);
    emit(r.delta_ts);
    emit(r.eta_ts);
    out << "," << r.wall_ms << "\n";
  }
}

namespace {

struct Agg {
  std::vector<double> pehe, ate, lam, del, eta;
};

}  // namespace

void emit_plotdata(const std::vector<ResultRow>& rows, const ExperimentConfig& cfg,
                   const std::string& out_dir) {
  if (rows.empty()) throw IOFailure("no results to emit");
  const fs::path base(out_dir);

  // aggregate by (policy, grid value)
  std::map<std::pair<std::string, double>, Agg> agg;
  for (const auto& r : rows) {
    if (r.failed) continue;
    Agg& a = agg[{r.policy, r.delta_or_sources}];
    if (r.sqrt_pehe) a.pehe.push_back(*r.sqrt_pehe);
    if (r.ate_error) a.ate.push_back(*r.ate_error);
    for (const auto& v : r.lambda_ts)
      if (v) a.lam.push_back(*v);
    for (const auto& v : r.delta_ts)
      if (v) a.del.push_back(*v);
    for (const auto& v : r.eta_ts)
      if (v) a.eta.push_back(*v);
  }

  const bool by_sources = cfg.mode == "synthetic-multisrc";
  auto metric_file = [&](const std::string& name, bool use_pehe) {
    std::ofstream out(base / name);
    out << (by_sources ? "sources" : "delta") << " policy mean se\n";
    for (const auto& [key, a] : agg) {
      const auto& v = use_pehe ? a.pehe : a.ate;
      out << format_double(key.second) << " " << key.first << " ";
      if (v.empty()) {
        out << "NA NA\n";
        continue;
      }
      out << format_double(mean_of(v)) << " ";
      const auto se = se_of(v);
      out << (se ? format_double(*se) : std::string("NA")) << "\n";
    }
  };
  metric_file(by_sources ? "plot_pehe_vs_sources.dat" : "plot_pehe_vs_delta.dat", true);
  metric_file(by_sources ? "plot_ate_vs_sources.dat" : "plot_ate_vs_delta.dat", false);

  // fitted transfer factors per grid value (adaptive policy rows)
  {
    std::ofstream out(base / "plot_factors_vs_delta.dat");
    out << (by_sources ? "sources" : "delta")
        << " lambda_mean lambda_se delta_mean delta_se eta_mean eta_se\n";
    for (const auto& [key, a] : agg) {
      if (key.first != "adaptive") continue;
      out << format_double(key.second);
      for (const auto* v : {&a.lam, &a.del, &a.eta}) {
        if (v->empty()) {
          out << " NA NA";
        } else {
          out << " " << format_double(mean_of(*v));
          const auto se = se_of(*v);
          out << " " << (se ? format_double(*se) : std::string("NA"));
        }
      }
      out << "\n";
    }
  }
}

}  // namespace adatrans
