#pragma once

#include <Eigen/Dense>
#include <optional>
#include <vector>

namespace adatrans {

// sqrt of mean squared error between true and estimated per-individual effects
double sqrt_pehe(const Eigen::VectorXd& y0_true, const Eigen::VectorXd& y1_true,
                 const Eigen::VectorXd& ite_hat);

// |mean(y1 - y0) - mean(ite_hat)|
double ate_error(const Eigen::VectorXd& y0_true, const Eigen::VectorXd& y1_true,
                 const Eigen::VectorXd& ite_hat);

struct MetricResult {
  std::vector<double> per_replicate_pehe;
  std::vector<double> per_replicate_ate_error;
  double pehe_mean = 0.0;
  double ate_error_mean = 0.0;
  std::optional<double> pehe_se;       // absent with < 2 replicates
  std::optional<double> ate_error_se;

  void add(double pehe, double ate_err);
  void finalize();
};

double mean_of(const std::vector<double>& v);
// standard error of the mean over replicates
std::optional<double> se_of(const std::vector<double>& v);

}  // namespace adatrans
