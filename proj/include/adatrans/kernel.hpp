#pragma once

#include <Eigen/Dense>
#include <vector>

#include "adatrans/errors.hpp"

namespace adatrans {

enum class KernelFamily { RBF, Linear };

struct BaseKernelSpec {
  KernelFamily family = KernelFamily::RBF;
  double lengthscale = 1.0;  // RBF only
  double amplitude = 1.0;
};

enum class FactorLevel { L1Lambda, L2Delta, L3Eta };

// Cross-population similarity coefficients in [0, 1], one per unordered pair
// of the (m+1) populations, with the diagonal fixed at 1. The learnable form
// keeps the full (m+1)x(m+1) matrix positive semidefinite by building it as
// G G^T from a lower-triangular G whose rows are unit vectors with
// nonnegative entries: row i spends a sigmoid fraction of its remaining
// length on each earlier column (stick breaking). For m = 1 this is exactly
// value = sigmoid(theta) on the single cross pair.
class TransferFactors {
 public:
  enum class Mode { Adaptive, Pinned, Fixed };

  static TransferFactors adaptive(FactorLevel level, int m, double init_logit = 0.0);
  static TransferFactors pinned(FactorLevel level, int m, double value);
  static TransferFactors fixed_matrix(FactorLevel level, const Eigen::MatrixXd& values);

  FactorLevel level() const { return level_; }
  Mode mode() const { return mode_; }
  int num_pops() const { return num_pops_; }
  bool learnable() const { return mode_ == Mode::Adaptive && free_count() > 0; }
  // m(m+1)/2 free coefficients when adaptive, else 0.
  int free_count() const;

  const Eigen::VectorXd& thetas() const { return thetas_; }
  void set_thetas(const Eigen::VectorXd& t);

  // The (m+1)x(m+1) factor matrix; diagonal exactly 1.
  Eigen::MatrixXd matrix() const;
  double value(int d1, int d2) const { return matrix()(d1, d2); }

  // Chain rule: given dJ/dLambda accumulated entrywise over the full matrix
  // (ordered entries, no symmetrization), returns dJ/dtheta.
  Eigen::VectorXd chain_theta_grad(const Eigen::MatrixXd& dJ_dLambda) const;

 private:
  TransferFactors() = default;
  Eigen::MatrixXd rows_matrix() const;  // the lower-triangular unit-row G

  FactorLevel level_ = FactorLevel::L1Lambda;
  Mode mode_ = Mode::Pinned;
  int num_pops_ = 1;
  Eigen::VectorXd thetas_;      // packed rows i=1..m, row i has i entries
  double pinned_value_ = 1.0;
  Eigen::MatrixXd fixed_;
};

struct TaggedPoints {
  Eigen::MatrixXd points;      // N x p
  std::vector<int> pop_index;  // per row, in [0, num_pops)

  int n() const { return static_cast<int>(points.rows()); }
  int dim() const { return static_cast<int>(points.cols()); }
};

double base_eval(const BaseKernelSpec& spec, const Eigen::VectorXd& u, const Eigen::VectorXd& v);

double transfer_eval(const BaseKernelSpec& spec, const TransferFactors& factors,
                     const Eigen::VectorXd& u, int d1, const Eigen::VectorXd& v, int d2);

// Entry (i, j) = transfer_eval on rows i of A and j of B.
Eigen::MatrixXd gram(const BaseKernelSpec& spec, const TransferFactors& factors,
                     const TaggedPoints& A, const TaggedPoints& B);

// gram(A, A) with jitter 1e-6 * amplitude on the diagonal.
Eigen::MatrixXd gram_sym(const BaseKernelSpec& spec, const TransferFactors& factors,
                         const TaggedPoints& A);

// Squared Euclidean distances, entry (i, j) = |a_i - b_j|^2, clamped at 0.
Eigen::MatrixXd pairwise_sqdist(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B);

inline double kernel_jitter(const BaseKernelSpec& spec) { return 1e-6 * spec.amplitude; }

}  // namespace adatrans
