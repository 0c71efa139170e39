#include "adatrans/optimizer.hpp"

#include <cmath>

#include "adatrans/errors.hpp"

namespace adatrans {

OptimResult minimize_adam(const Objective& f, Eigen::VectorXd x0, const AdamOptions& opts) {
  const auto dim = x0.size();
  Eigen::VectorXd grad(dim);
  const double value = f(x0, &grad);
  if (!std::isfinite(value)) throw NonFiniteLoss("objective not finite at the starting point");
  if (!grad.allFinite()) throw NonFiniteGradient("gradient not finite at the starting point");

  OptimResult res;
  res.x = std::move(x0);
  res.value = value;
  res.trace.push_back(value);

  Eigen::VectorXd m = Eigen::VectorXd::Zero(dim);
  Eigen::VectorXd v = Eigen::VectorXd::Zero(dim);
  double scale = 1.0;
  int calm = 0;

  for (int it = 1; it <= opts.max_iters; ++it) {
    m = opts.beta1 * m + (1.0 - opts.beta1) * grad;
    v = opts.beta2 * v + (1.0 - opts.beta2) * grad.cwiseProduct(grad);
    const double bc1 = 1.0 - std::pow(opts.beta1, it);
    const double bc2 = 1.0 - std::pow(opts.beta2, it);
    const Eigen::VectorXd dir =
        (m / bc1).cwiseQuotient(((v / bc2).cwiseSqrt().array() + opts.eps).matrix());

    double new_value = 0.0;
    Eigen::VectorXd candidate;
    Eigen::VectorXd cand_grad(dim);
    bool accepted = false;
    bool have_grad = false;
    for (int bt = 0; bt <= opts.max_backtracks; ++bt) {
      candidate = res.x - (scale * opts.lr) * dir;
      // first try carries the gradient so the common path costs one eval
      have_grad = (bt == 0);
      new_value = f(candidate, have_grad ? &cand_grad : nullptr);
      if (std::isfinite(new_value) && new_value <= res.value + 1e-12 * (1.0 + std::abs(res.value))) {
        accepted = true;
        break;
      }
      scale *= 0.5;
    }

    double delta = 0.0;
    if (accepted) {
      delta = res.value - new_value;
      res.x = std::move(candidate);
      res.value = new_value;
      scale = std::min(1.0, scale * 1.5);
      if (!have_grad) (void)f(res.x, &cand_grad);
      grad = std::move(cand_grad);
      if (!grad.allFinite()) throw NonFiniteGradient("gradient became non-finite");
    }
    res.trace.push_back(res.value);
    res.iters = it;

    if (std::abs(delta) < opts.rel_tol * (1.0 + std::abs(res.value))) {
      if (++calm >= opts.tol_window) {
        res.converged = true;
        break;
      }
    } else {
      calm = 0;
    }
  }
  return res;
}

}  // namespace adatrans
