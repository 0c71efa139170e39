#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "adatrans/data_model.hpp"
#include "adatrans/kernel.hpp"
#include "adatrans/optimizer.hpp"
#include "adatrans/standardize.hpp"

namespace adatrans {

struct StructuralConfig {
  int d_z = 2;
  double sigma_z = 2.8284271247461903;  // prior std, mean fixed at 0
  OutcomeKind outcome_kind = OutcomeKind::Continuous;
  double sigma_y = 1.0;  // continuous outcome noise on the standardized scale
};

// Mean-field posterior q(z | x, w, y) = N(f_q, sigma_q^2 I) with
// f_q = w f_q1([x; y~]) + (1 - w) f_q0([x; y~]).
struct VariationalState {
  Eigen::MatrixXd alpha_q0;  // N_q x d_z
  Eigen::MatrixXd alpha_q1;
  double sigma_q = 1.0;
  BaseKernelSpec k_q0, k_q1;
};

struct LikelihoodState {
  Eigen::VectorXd alpha_y0, alpha_y1, alpha_w;  // M_a
  Eigen::MatrixXd alpha_x;                      // M_a x d_x
  BaseKernelSpec k_y0, k_y1, k_w, k_x;
};

struct Regularizers {
  double y0 = 1e-2, y1 = 1e-2, q0 = 1e-2, q1 = 1e-2, x = 1e-2, w = 1e-2;

  static Regularizers uniform(double g) { return {g, g, g, g, g, g}; }
};

// Monte-Carlo augmentation: L latent draws per observation with the noise
// fixed for the whole fit; z[l] = f_q(x,w,y) + sigma_q * eps[l] is
// rematerialized from the current state at every evaluation. Observations are
// grouped by population (target first). The eps stream is keyed by row
// content, so identical physical rows receive identical noise regardless of
// how populations are tagged or ordered.
struct AugmentedDataset {
  Eigen::MatrixXd x;   // N x d_x
  Eigen::VectorXd w;   // N
  Eigen::VectorXd y;   // N, raw scale
  std::vector<int> pop_of_obs;
  std::vector<std::pair<int, int>> pop_spans;  // per population [begin, end)
  int num_pops = 1;
  int L = 1;
  Eigen::MatrixXd eps;  // (N*L) x d_z, row o*L + l

  int n_obs() const { return static_cast<int>(w.size()); }
  int n_rows() const { return n_obs() * L; }
};

AugmentedDataset resample_augmented(const MultiSourceDataset& data, int L, int d_z,
                                    std::uint64_t seed);

// Closed-form KL( N(m, sq^2 I) || N(0, sz^2 I) ).
double gaussian_kl(const Eigen::VectorXd& m, double sigma_q, double sigma_z);

enum class LikBlock { Y0, Y1, W, X };

struct Level1Params {
  VariationalState var;
  LikelihoodState lik;
  TransferFactors lambda = TransferFactors::pinned(FactorLevel::L1Lambda, 0, 1.0);
};

// Regularized negative Monte-Carlo ELBO over the augmented dataset, with all
// six functions in representer form over the anchor sets. Owns the fixed
// tables (kernel inputs, squared distances on the q side, anchor maps) and
// evaluates J and its analytic gradient for the optimizer. Not thread-safe
// per instance; use one instance per concurrent fit.
class ConfounderProblem {
 public:
  ConfounderProblem(AugmentedDataset aug, std::vector<ProxyType> proxy_types,
                    StructuralConfig config, Regularizers gammas, Standardizer y_std,
                    std::vector<int> z_anchor_rows, std::vector<int> q_anchor_obs,
                    bool learn_lengthscales, bool learn_sigma_q);

  int n_obs() const { return aug_.n_obs(); }
  int n_rows() const { return aug_.n_rows(); }
  int n_z_anchors() const { return static_cast<int>(z_anchor_rows_.size()); }
  int n_q_anchors() const { return static_cast<int>(q_anchor_obs_.size()); }
  const AugmentedDataset& aug() const { return aug_; }
  const StructuralConfig& config() const { return config_; }
  const Regularizers& gammas() const { return gammas_; }
  const Standardizer& y_standardizer() const { return y_std_; }
  const std::vector<int>& z_anchor_rows() const { return z_anchor_rows_; }
  const std::vector<int>& q_anchor_obs() const { return q_anchor_obs_; }

  // Flat parameter vector: [alpha_y0, alpha_y1, alpha_w, alpha_x, alpha_q0,
  // alpha_q1, (log lengthscales), (log sigma_q), (lambda logits)].
  int dim(const Level1Params& shape) const;
  Eigen::VectorXd pack(const Level1Params& p) const;
  Level1Params unpack(const Eigen::VectorXd& x, const Level1Params& shape) const;

  // J = neg_elbo + sum_c gamma_c |f_c|^2; gradient optional.
  double objective(const Eigen::VectorXd& x, const Level1Params& shape,
                   Eigen::VectorXd* grad) const;
  double objective(const Level1Params& p) const;
  double neg_elbo(const Level1Params& p) const;

  // f_q means for every observation under the given state.
  Eigen::MatrixXd posterior_means(const Level1Params& p) const;
  // z rows materialized from the fixed eps under the given state.
  Eigen::MatrixXd materialize_z(const Level1Params& p) const;

  // Minimum eigenvalue of the exact Hessian block
  // D^T diag(weights) D + 2 gamma K for the requested likelihood block, at
  // fixed variational parameters. For the proxy block the minimum is taken
  // over output columns.
  double hessian_block_min_eig(const Level1Params& p, LikBlock block) const;

  Objective as_objective(const Level1Params& shape) const;

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
  AugmentedDataset aug_;
  std::vector<ProxyType> proxy_types_;
  StructuralConfig config_;
  Regularizers gammas_;
  Standardizer y_std_;
  std::vector<int> z_anchor_rows_;
  std::vector<int> q_anchor_obs_;
  bool learn_lengthscales_ = true;
  bool learn_sigma_q_ = true;
};

enum class TransferPolicy { Adaptive, Full, None };

struct ConfounderFitConfig {
  StructuralConfig structural;
  int L = 5;
  int restarts = 5;
  AdamOptions opt;
  std::vector<double> gamma_grid = {1e-2};
  int anchor_budget = 2000;
  bool anchors_target_only = false;  // forced on under TransferPolicy::None
  bool learn_sigma_q = true;
  bool learn_lengthscales = true;
  double sigma_q_init = 1.0;
  double alpha_q_init_scale = 0.3;
  TransferPolicy policy = TransferPolicy::Adaptive;
  std::uint64_t seed = 0;
};

// Fitted level-1 object: all six representer expansions, their anchors with
// population tags, the variational scale, and the transfer factors.
struct ConfounderModel {
  StructuralConfig config;
  std::vector<ProxyType> proxy_types;
  Eigen::VectorXd alpha_y0, alpha_y1, alpha_w;
  Eigen::MatrixXd alpha_x;   // M_a x d_x
  Eigen::MatrixXd alpha_q0;  // N_q x d_z
  Eigen::MatrixXd alpha_q1;
  BaseKernelSpec k_y0, k_y1, k_w, k_x, k_q0, k_q1;
  double sigma_q = 1.0;
  TransferFactors lambda = TransferFactors::pinned(FactorLevel::L1Lambda, 0, 1.0);
  TaggedPoints z_anchors;  // final latent anchor positions
  TaggedPoints q_anchors;  // [x; y~] anchor inputs
  Standardizer y_std;

  // posterior mean f_q(x, w, y) for a target-population point
  Eigen::VectorXd f_q(const Eigen::VectorXd& x, double w, double y_raw) const;
  Eigen::MatrixXd f_q_batch(const Eigen::MatrixXd& x, const Eigen::VectorXd& w,
                            const Eigen::VectorXd& y_raw) const;

  // outcome function on the standardized (continuous) or logit (binary) scale
  double f_y(int w, const Eigen::VectorXd& z) const;
  Eigen::VectorXd f_y_batch(int w, const Eigen::MatrixXd& z) const;

  // E[y | do-level w, z] on the raw outcome scale
  double expected_outcome(int w, const Eigen::VectorXd& z) const;
  Eigen::VectorXd expected_outcome_batch(int w, const Eigen::MatrixXd& z) const;
};

struct RestartRecord {
  int gamma_index = 0;
  int restart = 0;
  double final_j = 0.0;
  double val_score = 0.0;
  std::vector<double> trace;
  bool finite = true;
};

struct ConfounderFitReport {
  std::vector<RestartRecord> restarts;
  int chosen = -1;
};

ConfounderModel fit_confounder(const MultiSourceDataset& data, const ConfounderFitConfig& cfg,
                               const PopulationData* val_target = nullptr,
                               ConfounderFitReport* report = nullptr);

// Held-out criterion used for restart selection: negative Monte-Carlo ELBO of
// the validation rows under the fitted functions, with freshly seeded noise.
double validation_neg_elbo(const ConfounderModel& model, const PopulationData& val_target,
                           int L, std::uint64_t seed);

}  // namespace adatrans
