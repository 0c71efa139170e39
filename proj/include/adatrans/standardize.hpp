#pragma once

#include <Eigen/Dense>
#include <cmath>

namespace adatrans {

// Affine y -> (y - mean) / std map. Degenerate columns fall back to std = 1.
struct Standardizer {
  double mean = 0.0;
  double std = 1.0;

  double apply(double v) const { return (v - mean) / std; }
  double invert(double v) const { return v * std + mean; }

  static Standardizer fit(const Eigen::VectorXd& v) {
    Standardizer s;
    if (v.size() == 0) return s;
    s.mean = v.mean();
    const double var = (v.array() - s.mean).square().sum() / static_cast<double>(v.size());
    s.std = std::sqrt(var);
    if (!(s.std > 1e-12)) s.std = 1.0;
    return s;
  }
};

// Per-column standardizer for proxy matrices.
struct ColumnStandardizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;

  Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const {
    return (x.rowwise() - mean.transpose()).array().rowwise() / std.transpose().array();
  }
  Eigen::VectorXd apply_row(const Eigen::VectorXd& row) const {
    return (row - mean).cwiseQuotient(std);
  }

  static ColumnStandardizer fit(const Eigen::MatrixXd& x) {
    ColumnStandardizer s;
    const auto n = static_cast<double>(x.rows());
    s.mean = x.colwise().mean();
    s.std.resize(x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double var = (x.col(j).array() - s.mean(j)).square().sum() / n;
      const double sd = std::sqrt(var);
      s.std(j) = sd > 1e-12 ? sd : 1.0;
    }
    return s;
  }
};

}  // namespace adatrans
