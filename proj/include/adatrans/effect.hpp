#pragma once

#include <Eigen/Dense>
#include <cstdint>

#include "adatrans/auxiliary.hpp"
#include "adatrans/confounder.hpp"
#include "adatrans/data_model.hpp"

namespace adatrans {

struct ModelBundle {
  ConfounderModel confounder;
  OutcomeRegressor outcome;
  PropensityModel propensity;
};

struct EffectEstimate {
  Eigen::VectorXd ite;
  double ate = 0.0;  // mean(ite), exact
  Eigen::VectorXd mc_se;
  int n_samples = 0;
};

struct IteResult {
  double ite = 0.0;
  double se = 0.0;
};

struct EstimatorOptions {
  int samples = 500;
  // replace the treatment draw with an exact average over both arms
  bool marginalize_w = false;
};

// Forward-sampling composition of the three levels: draw w~ from the
// propensity model, y~ from the outcome regressor, z~ from the variational
// posterior, and average expected_outcome(1, z~) - expected_outcome(0, z~).
IteResult estimate_ite(const Eigen::VectorXd& x_star, const ModelBundle& models,
                       const EstimatorOptions& opts, std::uint64_t seed);

// Per-row sub-seeds derive from (seed, row content hash), so the ATE is
// invariant to row permutations and duplicated rows get identical entries.
EffectEstimate estimate_ate(const Eigen::MatrixXd& x_star, const ModelBundle& models,
                            const EstimatorOptions& opts, std::uint64_t seed);

// mean(y | w = 1) - mean(y | w = 0) on the observed outcomes.
double naive_ate(const PopulationData& target);

void write_ite_csv(const EffectEstimate& est, const std::string& path);

}  // namespace adatrans
