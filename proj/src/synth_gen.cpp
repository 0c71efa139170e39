#include "adatrans/synth_gen.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "adatrans/rng.hpp"

namespace adatrans {

double logistic(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

double softplus(double t) {
  if (t > 30.0) return t;
  return std::log1p(std::exp(t));
}

SynthParams SynthParams::defaults(std::uint64_t seed) {
  SynthParams p;
  Rng rng = Rng(seed).stream("ground-truth-a");
  const double sd = std::sqrt(2.0);
  p.a0.resize(p.d_x);
  p.a1.resize(p.d_x, p.d_z);
  for (int j = 0; j < p.d_x; ++j) {
    p.a0(j) = sd * rng.normal();
    for (int k = 0; k < p.d_z; ++k) p.a1(j, k) = sd * rng.normal();
  }
  return p;
}

PopVectors PopVectors::default_target() {
  PopVectors v;
  v.b1.resize(2);
  v.b1 << 1.1, 1.7;
  v.c1.resize(2);
  v.c1 << 1.5, 1.8;
  v.d1.resize(2);
  v.d1 << 1.5, 2.8;
  return v;
}

PopVectors PopVectors::shifted(double delta) const {
  PopVectors v;
  v.b1 = b1.array() + delta;
  v.c1 = c1.array() + delta;
  v.d1 = d1.array() + delta;
  return v;
}

PopulationData generate_population(const SynthParams& params, const PopVectors& vecs, int n,
                                   std::uint64_t seed, const std::string& pop_id) {
  if (params.a0.size() != params.d_x || params.a1.rows() != params.d_x ||
      params.a1.cols() != params.d_z) {
    throw ShapeMismatch("a0/a1 dimensions disagree with d_x/d_z");
  }
  if (vecs.b1.size() != params.d_z || vecs.c1.size() != params.d_z ||
      vecs.d1.size() != params.d_z) {
    throw ShapeMismatch("population vectors must have d_z entries");
  }
  if (n < 1) throw ShapeMismatch("population size must be >= 1");

  PopulationData pop;
  pop.pop_id = pop_id;
  pop.x.resize(n, params.d_x);
  pop.w.resize(n);
  pop.y.resize(n);
  pop.y0_true = Eigen::VectorXd(n);
  pop.y1_true = Eigen::VectorXd(n);

  Rng rng(seed);
  Eigen::VectorXd z(params.d_z);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < params.d_z; ++k) z(k) = params.sigma_z * rng.normal();
    for (int j = 0; j < params.d_x; ++j) {
      pop.x(i, j) = rng.bernoulli(logistic(params.a0(j) + z.dot(params.a1.row(j))));
    }
    pop.w(i) = rng.bernoulli(logistic(params.b0 + z.dot(vecs.b1)));
    const double y0 = softplus(params.c0 + z.dot(vecs.c1)) + params.sigma_y * rng.normal();
    const double y1 = softplus(params.d0 + z.dot(vecs.d1)) + params.sigma_y * rng.normal();
    (*pop.y0_true)(i) = y0;
    (*pop.y1_true)(i) = y1;
    pop.y(i) = pop.w(i) == 1.0 ? y1 : y0;
  }
  return pop;
}

MultiSourceDataset make_multisource(const SynthParams& params, const PopVectors& target_vecs,
                                    const DiscrepancySpec& spec, std::uint64_t seed,
                                    int n_target) {
  MultiSourceDataset data;
  data.schema.outcome_kind = OutcomeKind::Continuous;
  data.schema.proxy_types.assign(static_cast<std::size_t>(params.d_x), ProxyType::Binary);

  const int nt = n_target < 0 ? params.n_per_pop : n_target;
  // population k gets sub-seed mix(seed, k): a counter scheme, so appending a
  // source never perturbs earlier populations
  data.target = generate_population(params, target_vecs, nt, mix_seed(seed, 0), "t");
  for (std::size_t s = 0; s < spec.deltas.size(); ++s) {
    const auto vecs = target_vecs.shifted(spec.deltas[s]);
    data.sources.push_back(generate_population(params, vecs, params.n_per_pop,
                                               mix_seed(seed, static_cast<std::uint64_t>(s + 1)),
                                               "s" + std::to_string(s + 1)));
  }
  return data;
}

TwinsTable make_twins_standin(std::uint64_t seed) {
  constexpr int kPairs = 4821;
  // gestation-week category weights, skewed toward later weeks
  const double weights[10] = {0.01, 0.02, 0.03, 0.05, 0.08, 0.12, 0.16, 0.20, 0.19, 0.14};
  double cum[10];
  double acc = 0.0;
  for (int k = 0; k < 10; ++k) {
    acc += weights[k];
    cum[k] = acc;
  }

  TwinsTable t;
  t.z.resize(kPairs);
  t.y0.resize(kPairs);
  t.y1.resize(kPairs);
  Rng rng = Rng(seed).stream("twins-standin");
  for (int i = 0; i < kPairs; ++i) {
    const double u = rng.uniform01();
    int z = 9;
    for (int k = 0; k < 10; ++k) {
      if (u < cum[k]) {
        z = k;
        break;
      }
    }
    // mortality decreasing in gestation weeks; the heavier twin fares better
    const double p0 = 0.35 - 0.028 * z;
    const double p1 = p0 * (0.72 + 0.02 * z);
    t.z(i) = z;
    t.y0(i) = rng.bernoulli(p0);
    t.y1(i) = rng.bernoulli(p1);
  }
  return t;
}

TwinsTable load_twins_table(const std::string& csv_path, const std::string& z_column) {
  std::ifstream in(csv_path);
  if (!in) throw IOFailure("cannot open " + csv_path);
  std::string line;
  if (!std::getline(in, line)) throw EmptyPopulation(csv_path + " has no header");
  const std::string expect = z_column + ",y0_true,y1_true";
  std::string got = line;
  if (!got.empty() && got.back() == '\r') got.pop_back();
  if (got != expect) {
    throw SchemaMismatch(csv_path + ": expected header '" + expect + "', got '" + got + "'");
  }
  std::vector<std::array<double, 3>> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    std::array<double, 3> r{};
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf", &r[0], &r[1], &r[2]) != 3) {
      throw SchemaMismatch(csv_path + ": bad row '" + line + "'");
    }
    rows.push_back(r);
  }
  if (rows.empty()) throw EmptyPopulation(csv_path + " has no data rows");
  TwinsTable t;
  const auto n = static_cast<int>(rows.size());
  t.z.resize(n);
  t.y0.resize(n);
  t.y1.resize(n);
  for (int i = 0; i < n; ++i) {
    const double z = rows[static_cast<std::size_t>(i)][0];
    if (z != std::floor(z) || z < 0.0 || z > 9.0) {
      throw BadCategory("z value " + format_double(z) + " outside {0..9}");
    }
    t.z(i) = static_cast<int>(z);
    t.y0(i) = rows[static_cast<std::size_t>(i)][1];
    t.y1(i) = rows[static_cast<std::size_t>(i)][2];
  }
  return t;
}

MultiSourceDataset twins_simulate(const TwinsTable& table, const TwinsSimSpec& spec,
                                  std::uint64_t seed) {
  const int n = table.n();
  for (int i = 0; i < n; ++i) {
    if (table.z(i) < 0 || table.z(i) > 9) {
      throw BadCategory("z value " + std::to_string(table.z(i)) + " outside {0..9}");
    }
  }
  const int d_x = 10 * spec.replication;

  // partition pairs before any treatment draw
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  Rng part_rng = Rng(seed).stream("partition");
  shuffle_inplace(idx, part_rng);
  const int n_target = static_cast<int>(std::lround(spec.target_fraction * n));
  std::vector<int> target_rows(idx.begin(), idx.begin() + n_target);
  std::vector<int> source_rows(idx.begin() + n_target, idx.end());
  std::sort(target_rows.begin(), target_rows.end());
  std::sort(source_rows.begin(), source_rows.end());

  auto build = [&](const std::vector<int>& rows, double b, const std::string& pop_id,
                   Rng rng) {
    PopulationData pop;
    pop.pop_id = pop_id;
    const auto k = static_cast<Eigen::Index>(rows.size());
    pop.x = Eigen::MatrixXd::Zero(k, d_x);
    pop.w.resize(k);
    pop.y.resize(k);
    pop.y0_true = Eigen::VectorXd(k);
    pop.y1_true = Eigen::VectorXd(k);
    for (Eigen::Index i = 0; i < k; ++i) {
      const int r = rows[static_cast<std::size_t>(i)];
      const int z = table.z(r);
      const double p = logistic(b * (0.1 * z - 0.1));
      const double w = rng.bernoulli(p);
      pop.w(i) = w;
      (*pop.y0_true)(i) = table.y0(r);
      (*pop.y1_true)(i) = table.y1(r);
      pop.y(i) = w == 1.0 ? table.y1(r) : table.y0(r);
      for (int rep = 0; rep < spec.replication; ++rep) pop.x(i, rep * 10 + z) = 1.0;
    }
    return pop;
  };

  MultiSourceDataset data;
  data.schema.outcome_kind = OutcomeKind::Binary;
  data.schema.proxy_types.assign(static_cast<std::size_t>(d_x), ProxyType::Binary);
  data.target = build(target_rows, spec.b_t, "t", Rng(seed).stream("treat-t"));
  data.sources.push_back(
      build(source_rows, spec.b_t + spec.delta_s, "s1", Rng(seed).stream("treat-s")));
  return data;
}

}  // namespace adatrans
