#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>

#include "adatrans/confounder.hpp"
#include "adatrans/data_model.hpp"
#include "adatrans/kernel.hpp"
#include "adatrans/optimizer.hpp"
#include "adatrans/standardize.hpp"

namespace adatrans {

struct AuxFitConfig {
  int restarts = 5;
  AdamOptions opt;
  double gamma = 1e-2;
  int anchor_budget = 2000;
  bool anchors_target_only = false;  // forced on under TransferPolicy::None
  bool learn_lengthscales = true;
  double beta_init_scale = 0.1;
  TransferPolicy policy = TransferPolicy::Adaptive;
  std::uint64_t seed = 0;
};

// Outcome-given-proxies regressor p~(y | x, w) with
// g(x, w) = w g1(x) + (1-w) g0(x) in representer form over proxy anchors.
struct OutcomeRegressor {
  OutcomeKind outcome_kind = OutcomeKind::Continuous;
  Eigen::VectorXd beta_g0, beta_g1;
  BaseKernelSpec psi_y;  // shared by both arms
  TransferFactors delta = TransferFactors::pinned(FactorLevel::L2Delta, 0, 1.0);
  TaggedPoints anchors;  // standardized proxies
  ColumnStandardizer x_std;
  Standardizer y_std;
  double sigma_y_tilde = 1.0;  // continuous case, standardized scale
  double gamma_y0 = 1e-2, gamma_y1 = 1e-2;

  // continuous: conditional mean (raw scale); binary: logit
  double g(const Eigen::VectorXd& x, int w) const;
  Eigen::VectorXd g_batch(const Eigen::MatrixXd& x, int w) const;
};

struct OutcomePrediction {
  double mean = 0.0;  // continuous
  double prob = 0.0;  // binary
};

OutcomeRegressor fit_outcome(const MultiSourceDataset& data, const AuxFitConfig& cfg,
                             const PopulationData* val_target = nullptr);

OutcomePrediction predict_outcome(const Eigen::VectorXd& x, int w, const OutcomeRegressor& model);

double sample_outcome(const Eigen::VectorXd& x, int w, const OutcomeRegressor& model,
                      std::uint64_t seed);

// Propensity model p~(w | x) = Bern(logistic(h(x))).
struct PropensityModel {
  Eigen::VectorXd beta_h;
  BaseKernelSpec psi_w;
  TransferFactors eta = TransferFactors::pinned(FactorLevel::L3Eta, 0, 1.0);
  TaggedPoints anchors;
  ColumnStandardizer x_std;
  double gamma_w = 1e-2;

  double h(const Eigen::VectorXd& x) const;
  Eigen::VectorXd h_batch(const Eigen::MatrixXd& x) const;
  double propensity(const Eigen::VectorXd& x) const;
};

PropensityModel fit_propensity(const MultiSourceDataset& data, const AuxFitConfig& cfg,
                               const PopulationData* val_target = nullptr);

int sample_treatment(const Eigen::VectorXd& x, const PropensityModel& model, std::uint64_t seed);

}  // namespace adatrans
