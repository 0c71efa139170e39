#include <doctest.h>

#include <cmath>

#include "adatrans/rng.hpp"
#include "adatrans/synth_gen.hpp"

using namespace adatrans;

TEST_CASE("generate_population emits the documented shapes and identities") {
  SynthParams p = SynthParams::defaults(1);
  const PopulationData pop = generate_population(p, PopVectors::default_target(), 1000, 9, "t");
  CHECK(pop.n() == 1000);
  CHECK(pop.d_x() == 30);
  for (int i = 0; i < pop.n(); ++i) {
    const double expect = pop.w(i) == 1.0 ? (*pop.y1_true)(i) : (*pop.y0_true)(i);
    REQUIRE(pop.y(i) == expect);  // observed outcome equals the selected arm, exactly
    for (int j = 0; j < pop.d_x(); ++j) {
      REQUIRE((pop.x(i, j) == 0.0 || pop.x(i, j) == 1.0));
    }
  }
}

TEST_CASE("zero slopes with equal intercepts give a centered effect") {
  SynthParams p = SynthParams::defaults(2);
  p.c0 = p.d0 = 1.0;
  PopVectors v;
  v.b1 = Eigen::VectorXd::Zero(2);
  v.c1 = Eigen::VectorXd::Zero(2);
  v.d1 = Eigen::VectorXd::Zero(2);
  const int n = 4000;
  const PopulationData pop = generate_population(p, v, n, 21, "t");
  const double mean_effect = (*pop.y1_true - *pop.y0_true).mean();
  CHECK(std::abs(mean_effect) < 4.0 * p.sigma_y / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("fixed seed reproduces the dataset exactly") {
  SynthParams p = SynthParams::defaults(3);
  const PopulationData a = generate_population(p, PopVectors::default_target(), 200, 77, "t");
  const PopulationData b = generate_population(p, PopVectors::default_target(), 200, 77, "t");
  CHECK(a.x == b.x);
  CHECK(a.w == b.w);
  CHECK(a.y == b.y);
}

TEST_CASE("make_multisource applies shifts and a counter seed scheme") {
  SynthParams p = SynthParams::defaults(4);
  p.n_per_pop = 50;
  DiscrepancySpec spec;
  spec.deltas = {2.0, 1.5, 1.0, 0.5};
  const MultiSourceDataset data =
      make_multisource(p, PopVectors::default_target(), spec, 5, 40);
  REQUIRE(data.m() == 4);
  CHECK(data.target.n() == 40);
  for (const auto& s : data.sources) CHECK(s.n() == 50);

  // adding a source must not perturb earlier populations
  DiscrepancySpec spec2;
  spec2.deltas = {2.0, 1.5, 1.0, 0.5, 0.25};
  const MultiSourceDataset data2 =
      make_multisource(p, PopVectors::default_target(), spec2, 5, 40);
  CHECK(data2.target.y == data.target.y);
  CHECK(data2.sources[3].y == data.sources[3].y);

  // no sources at all is a valid ablation setup
  const MultiSourceDataset none =
      make_multisource(p, PopVectors::default_target(), DiscrepancySpec{}, 5, 40);
  CHECK(none.m() == 0);
}

TEST_CASE("a zero shift produces a source indistinguishable in distribution") {
  SynthParams p = SynthParams::defaults(6);
  p.n_per_pop = 4000;
  DiscrepancySpec spec;
  spec.deltas = {0.0};
  const MultiSourceDataset data =
      make_multisource(p, PopVectors::default_target(), spec, 13, 4000);
  const double mt = data.target.y.mean();
  const double ms = data.sources[0].y.mean();
  auto sd = [](const Eigen::VectorXd& v) {
    const double m = v.mean();
    return std::sqrt((v.array() - m).square().sum() / (v.size() - 1.0));
  };
  const double pooled_se = std::sqrt(sd(data.target.y) * sd(data.target.y) / data.target.n() +
                                     sd(data.sources[0].y) * sd(data.sources[0].y) /
                                         data.sources[0].n());
  CHECK(std::abs(mt - ms) < 4.0 * pooled_se);
}

TEST_CASE("proxy marginals match an independent Monte-Carlo estimate") {
  // empirical P(x_j = 1) vs E_z[logistic(a0_j + z.a1_j)] by a separate stream
  SynthParams p = SynthParams::defaults(8);
  const int n = 100000;
  const PopulationData pop = generate_population(p, PopVectors::default_target(), n, 31, "t");

  Rng oracle(987654);
  const int n_mc = 100000;
  for (int j : {0, 7, 19}) {
    double acc = 0.0, acc2 = 0.0;
    for (int s = 0; s < n_mc; ++s) {
      Eigen::VectorXd z(2);
      z << p.sigma_z * oracle.normal(), p.sigma_z * oracle.normal();
      const double q = logistic(p.a0(j) + z.dot(p.a1.row(j)));
      acc += q;
      acc2 += q * q;
    }
    const double mc_mean = acc / n_mc;
    const double mc_se = std::sqrt((acc2 / n_mc - mc_mean * mc_mean) / n_mc);
    const double emp = pop.x.col(j).mean();
    const double emp_se = std::sqrt(emp * (1.0 - emp) / n);
    const double combined = std::sqrt(mc_se * mc_se + emp_se * emp_se);
    CHECK(std::abs(emp - mc_mean) < 3.0 * combined);
  }
}

TEST_CASE("twins_simulate partitions, encodes and draws as documented") {
  const TwinsTable table = make_twins_standin(17);
  REQUIRE(table.n() == 4821);

  TwinsSimSpec spec;
  spec.b_t = 0.2;
  spec.delta_s = 0.5;
  const MultiSourceDataset data = twins_simulate(table, spec, 23);
  CHECK(data.target.n() == 900);
  REQUIRE(data.m() == 1);
  CHECK(data.sources[0].n() == 3921);
  CHECK(data.d_x() == 30);
  CHECK(data.schema.outcome_kind == OutcomeKind::Binary);

  // exactly one 1 per replication block
  for (int i = 0; i < data.target.n(); ++i) {
    CHECK(data.target.x.row(i).sum() == 3.0);
    for (int rep = 0; rep < 3; ++rep) {
      CHECK(data.target.x.row(i).segment(rep * 10, 10).sum() == 1.0);
    }
  }

  const MultiSourceDataset again = twins_simulate(table, spec, 23);
  CHECK(again.target.w == data.target.w);
  CHECK(again.sources[0].w == data.sources[0].w);
}

TEST_CASE("twins treatment marginal matches the logistic at z = 1") {
  // z = 1 makes the logit exactly 0, so P(w=1) = 1/2
  const int n = 20000;
  TwinsTable table;
  table.z = Eigen::VectorXi::Ones(n);
  table.y0 = Eigen::VectorXd::Zero(n);
  table.y1 = Eigen::VectorXd::Zero(n);
  TwinsSimSpec spec;
  spec.b_t = 0.2;
  spec.delta_s = 0.0;
  const MultiSourceDataset data = twins_simulate(table, spec, 3);
  const double frac =
      (data.target.w.sum() + data.sources[0].w.sum()) / static_cast<double>(n);
  CHECK(std::abs(frac - 0.5) < 4.0 * std::sqrt(0.25 / n));
}

TEST_CASE("twins_simulate rejects out-of-range categories") {
  TwinsTable table;
  table.z = Eigen::VectorXi::Constant(5, 12);
  table.y0 = Eigen::VectorXd::Zero(5);
  table.y1 = Eigen::VectorXd::Zero(5);
  CHECK_THROWS_AS(twins_simulate(table, TwinsSimSpec{}, 1), BadCategory);
}
