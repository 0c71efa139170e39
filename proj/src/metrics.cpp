#include "adatrans/metrics.hpp"

#include <cmath>

#include "adatrans/errors.hpp"

namespace adatrans {

double sqrt_pehe(const Eigen::VectorXd& y0_true, const Eigen::VectorXd& y1_true,
                 const Eigen::VectorXd& ite_hat) {
  if (y0_true.size() != y1_true.size() || y0_true.size() != ite_hat.size() ||
      y0_true.size() == 0) {
    throw LengthMismatch("sqrt_pehe inputs must share a positive length");
  }
  const Eigen::ArrayXd err = (y1_true - y0_true - ite_hat).array();
  return std::sqrt(err.square().mean());
}

double ate_error(const Eigen::VectorXd& y0_true, const Eigen::VectorXd& y1_true,
                 const Eigen::VectorXd& ite_hat) {
  if (y0_true.size() != y1_true.size() || y0_true.size() != ite_hat.size() ||
      y0_true.size() == 0) {
    throw LengthMismatch("ate_error inputs must share a positive length");
  }
  return std::abs((y1_true - y0_true).mean() - ite_hat.mean());
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::optional<double> se_of(const std::vector<double>& v) {
  const auto n = static_cast<double>(v.size());
  if (v.size() < 2) return std::nullopt;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / (n - 1.0) / n);
}

void MetricResult::add(double pehe, double ate_err) {
  per_replicate_pehe.push_back(pehe);
  per_replicate_ate_error.push_back(ate_err);
}

void MetricResult::finalize() {
  pehe_mean = mean_of(per_replicate_pehe);
  ate_error_mean = mean_of(per_replicate_ate_error);
  pehe_se = se_of(per_replicate_pehe);
  ate_error_se = se_of(per_replicate_ate_error);
}

}  // namespace adatrans
