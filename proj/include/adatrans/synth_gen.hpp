#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "adatrans/data_model.hpp"

namespace adatrans {

// Ground-truth parameters of the synthetic generative process:
//   z ~ N(0, sigma_z^2 I), x_j ~ Bern(logistic(a0_j + z.a1_j)),
//   w ~ Bern(logistic(b0 + z.b1)), y(0) ~ N(softplus(c0 + z.c1), sigma_y^2),
//   y(1) ~ N(softplus(d0 + z.d1), sigma_y^2), y = w y(1) + (1-w) y(0).
struct SynthParams {
  double sigma_z = 2.8284271247461903;  // sqrt(8)
  double sigma_y = 1.4142135623730951;  // sqrt(2)
  double b0 = 0.5;
  double c0 = 0.7;
  double d0 = 2.0;
  Eigen::VectorXd a0;  // d_x
  Eigen::MatrixXd a1;  // d_x x d_z
  int d_z = 2;
  int d_x = 30;
  int n_per_pop = 1000;

  // a0_j ~ N(0, 2), a1_j ~ N(0, 2 I); drawn once under `seed` so runs replay.
  static SynthParams defaults(std::uint64_t seed);
};

// Per-population slope vectors of the treatment and the two outcome surfaces.
struct PopVectors {
  Eigen::VectorXd b1, c1, d1;  // each d_z

  static PopVectors default_target();  // b1=[1.1,1.7], c1=[1.5,1.8], d1=[1.5,2.8]
  PopVectors shifted(double delta) const;
};

// Additive shifts applied to (b1, c1, d1) of each source population.
struct DiscrepancySpec {
  std::vector<double> deltas;
};

PopulationData generate_population(const SynthParams& params, const PopVectors& vecs, int n,
                                   std::uint64_t seed, const std::string& pop_id);

// Target plus one shifted source per delta. Per-population seeds derive from
// the master seed by population index, so adding a source leaves earlier
// populations' draws untouched. n_target < 0 means params.n_per_pop.
MultiSourceDataset make_multisource(const SynthParams& params, const PopVectors& target_vecs,
                                    const DiscrepancySpec& spec, std::uint64_t seed,
                                    int n_target = -1);

// ---------------------------------------------------------------------------
// Twins-style latent-confounder simulation: a categorical confounder
// z in {0..9} with both potential outcomes recorded per pair.

struct TwinsTable {
  Eigen::VectorXi z;
  Eigen::VectorXd y0, y1;

  int n() const { return static_cast<int>(z.size()); }
};

struct TwinsSimSpec {
  double b_t = 0.2;
  double delta_s = 0.0;
  int replication = 3;
  // The published partition is 3921/4821 source rows; the nominal "81/19"
  // rounds that, so the exact ratio is the default.
  double target_fraction = 900.0 / 4821.0;
};

// Bundled synthetic stand-in for the real extract: 4821 pairs, categorical z
// with death probability decreasing in z. Real data plugs in through
// load_twins_table with the same columns.
TwinsTable make_twins_standin(std::uint64_t seed);

// CSV with header `<z_column>,y0_true,y1_true`.
TwinsTable load_twins_table(const std::string& csv_path, const std::string& z_column = "z");

// Seeded shuffle partitions pairs into source/target before the treatment
// draw; w | z ~ Bern(logistic(b_d (0.1 z - 0.1))) with b_t for the target and
// b_t + delta_s for the source; proxies are one-hot(z) replicated
// `replication` times; the kept twin's outcome is the drawn w's.
MultiSourceDataset twins_simulate(const TwinsTable& table, const TwinsSimSpec& spec,
                                  std::uint64_t seed);

double logistic(double t);
double softplus(double t);

}  // namespace adatrans
