#include <doctest.h>

#include <cmath>

#include "adatrans/errors.hpp"
#include "adatrans/optimizer.hpp"

using namespace adatrans;

TEST_CASE("adam minimizes a quadratic and the trace never increases") {
  const Eigen::VectorXd target = (Eigen::VectorXd(3) << 1.0, -2.0, 0.5).finished();
  auto f = [&](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
    const Eigen::VectorXd d = x - target;
    if (g != nullptr) *g = 2.0 * d;
    return d.squaredNorm();
  };
  AdamOptions opts;
  opts.lr = 0.05;
  opts.max_iters = 2000;
  const OptimResult res = minimize_adam(f, Eigen::VectorXd::Zero(3), opts);
  CHECK((res.x - target).norm() < 1e-3);
  for (std::size_t i = 1; i < res.trace.size(); ++i) {
    CHECK(res.trace[i] <= res.trace[i - 1] + 1e-9 * (1.0 + std::abs(res.trace[i - 1])));
  }
  CHECK(res.converged);
}

TEST_CASE("backtracking tames an objective with a narrow valley") {
  // Rosenbrock-like: plain Adam at this lr overshoots without step control
  auto f = [](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
    const double a = x(0), b = x(1);
    const double v = 100.0 * (b - a * a) * (b - a * a) + (1.0 - a) * (1.0 - a);
    if (g != nullptr) {
      (*g)(0) = -400.0 * a * (b - a * a) - 2.0 * (1.0 - a);
      (*g)(1) = 200.0 * (b - a * a);
    }
    return v;
  };
  AdamOptions opts;
  opts.lr = 0.1;
  opts.max_iters = 3000;
  opts.tol_window = 50;
  const OptimResult res = minimize_adam(f, Eigen::VectorXd::Zero(2), opts);
  for (std::size_t i = 1; i < res.trace.size(); ++i) {
    CHECK(res.trace[i] <= res.trace[i - 1] + 1e-9 * (1.0 + std::abs(res.trace[i - 1])));
  }
  CHECK(res.value < 1e-2);
}

TEST_CASE("non-finite start throws") {
  auto f = [](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
    if (g != nullptr) g->setZero(x.size());
    return std::numeric_limits<double>::quiet_NaN();
  };
  CHECK_THROWS_AS(minimize_adam(f, Eigen::VectorXd::Zero(2), AdamOptions{}), NonFiniteLoss);
}
