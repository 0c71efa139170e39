#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

namespace adatrans {

struct AdamOptions {
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int max_iters = 2000;
  // stop when |dJ| < rel_tol * (1 + |J|) for tol_window consecutive iterations
  double rel_tol = 1e-6;
  int tol_window = 20;
  // accepted steps may not increase the objective; a proposal that does is
  // retried at half the step scale
  int max_backtracks = 12;
};

struct OptimResult {
  Eigen::VectorXd x;
  double value = 0.0;
  std::vector<double> trace;  // accepted objective values, trace[0] = J(x0)
  int iters = 0;
  bool converged = false;
};

// f(x, grad) returns J and, when grad != nullptr, fills the gradient.
using Objective = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)>;

// Adam direction with backtracking acceptance. Throws NonFiniteLoss /
// NonFiniteGradient if the starting point is not finite.
OptimResult minimize_adam(const Objective& f, Eigen::VectorXd x0, const AdamOptions& opts);

}  // namespace adatrans
