#include "adatrans/auxiliary.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "adatrans/rng.hpp"
#include "adatrans/synth_gen.hpp"

namespace adatrans {

namespace {

Eigen::ArrayXd logistic_arr(const Eigen::ArrayXd& t) {
  return 0.5 * (1.0 + (0.5 * t).tanh());
}

Eigen::ArrayXd softplus_arr(const Eigen::ArrayXd& t) {
  return t.max(0.0) + (-t.abs()).exp().log1p();
}

void apply_factor_blocks(Eigen::MatrixXd& K, const std::vector<int>& row_pops,
                         const std::vector<int>& col_pops, const Eigen::MatrixXd& lambda) {
  if (lambda.rows() == 1) return;
  bool all_one = true;
  for (int a = 0; a < lambda.rows() && all_one; ++a)
    for (int b = 0; b < lambda.cols() && all_one; ++b)
      if (lambda(a, b) != 1.0) all_one = false;
  if (all_one) return;
  for (Eigen::Index i = 0; i < K.rows(); ++i) {
    const int pa = row_pops[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < K.cols(); ++j) {
      const int pb = col_pops[static_cast<std::size_t>(j)];
      if (pa != pb) K(i, j) *= lambda(pa, pb);
    }
  }
}

// Shared machinery for both auxiliary levels: a gated (or plain) kernel
// expansion over fixed proxy inputs with Bernoulli or Gaussian likelihood,
// RKHS penalties, and transfer factors on cross-population entries.
struct AuxProblem {
  Eigen::MatrixXd X;  // standardized inputs, n x d
  Eigen::VectorXd w;  // gate (outcome level) — empty for the propensity level
  Eigen::VectorXd target;  // y (likelihood scale) or w
  std::vector<int> pops;
  std::vector<int> anchor_rows;
  std::vector<int> anchor_pops;
  Eigen::MatrixXd D2, D2a;
  bool gated = false;
  bool bernoulli = false;
  double gamma0 = 1e-2, gamma1 = 1e-2;
  bool learn_ell = true;
  double amplitude = 1.0;
  int n_theta = 0;
  TransferFactors factors = TransferFactors::pinned(FactorLevel::L2Delta, 0, 1.0);

  int n() const { return static_cast<int>(X.rows()); }
  int na() const { return static_cast<int>(anchor_rows.size()); }
  // layout: [beta0 (na), beta1 (na if gated), log ell (opt), thetas (opt)]
  int dim() const {
    return na() * (gated ? 2 : 1) + (learn_ell ? 1 : 0) + n_theta;
  }

  double eval(const Eigen::VectorXd& p, Eigen::VectorXd* grad) const {
    const int A = na();
    const Eigen::VectorXd beta0 = p.segment(0, A);
    const Eigen::VectorXd beta1 = gated ? p.segment(A, A).eval() : Eigen::VectorXd();
    int at = gated ? 2 * A : A;
    const double ell = learn_ell ? std::exp(p(at)) : amplitude_ell_;
    if (learn_ell) ++at;
    TransferFactors f = factors;
    if (n_theta > 0) f.set_thetas(p.segment(at, n_theta));
    const Eigen::MatrixXd lambda = f.matrix();

    Eigen::MatrixXd K =
        (amplitude * (-D2 / (2.0 * ell * ell)).array().exp()).matrix();
    apply_factor_blocks(K, pops, anchor_pops, lambda);
    Eigen::MatrixXd Ka =
        (amplitude * (-D2a / (2.0 * ell * ell)).array().exp()).matrix();
    apply_factor_blocks(Ka, anchor_pops, anchor_pops, lambda);
    Ka.diagonal().array() += 1e-6 * amplitude;

    const Eigen::VectorXd f0 = K * beta0;
    Eigen::VectorXd t;
    if (gated) {
      const Eigen::VectorXd f1 = K * beta1;
      t = w.cwiseProduct(f1) + (Eigen::VectorXd::Ones(n()) - w).cwiseProduct(f0);
    } else {
      t = f0;
    }

    double J = 0.0;
    Eigen::VectorXd dt(n());
    if (bernoulli) {
      J += (softplus_arr(t.array()) - target.array() * t.array()).sum();
      dt = (logistic_arr(t.array()) - target.array()).matrix();
    } else {
      const Eigen::VectorXd resid = t - target;
      J += 0.5 * resid.squaredNorm();
      dt = resid;
    }
    J += gamma0 * beta0.dot(Ka * beta0);
    if (gated) J += gamma1 * beta1.dot(Ka * beta1);
    if (!std::isfinite(J)) return std::numeric_limits<double>::infinity();
    if (grad == nullptr) return J;

    grad->resize(dim());
    Eigen::VectorXd g0 = gated ? (Eigen::VectorXd::Ones(n()) - w).cwiseProduct(dt).eval() : dt;
    grad->segment(0, A) = K.transpose() * g0 + 2.0 * gamma0 * (Ka * beta0);
    Eigen::VectorXd g1;
    if (gated) {
      g1 = w.cwiseProduct(dt);
      grad->segment(A, A) = K.transpose() * g1 + 2.0 * gamma1 * (Ka * beta1);
    }
    int gat = gated ? 2 * A : A;
    if (learn_ell) {
      const Eigen::MatrixXd KD2 = K.cwiseProduct(D2);
      double s = g0.dot(KD2 * beta0);
      if (gated) s += g1.dot(KD2 * beta1);
      const Eigen::MatrixXd KaD2 = Ka.cwiseProduct(D2a);
      s += gamma0 * beta0.dot(KaD2 * beta0);
      if (gated) s += gamma1 * beta1.dot(KaD2 * beta1);
      (*grad)(gat) = s / (ell * ell);
      ++gat;
    }
    if (n_theta > 0) {
      const int P = static_cast<int>(lambda.rows());
      Eigen::MatrixXd dLam = Eigen::MatrixXd::Zero(P, P);
      for (Eigen::Index i = 0; i < K.rows(); ++i) {
        const int pa = pops[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < K.cols(); ++j) {
          const int pb = anchor_pops[static_cast<std::size_t>(j)];
          if (pa == pb) continue;
          const double lam = lambda(pa, pb);
          const double base = lam > 1e-12
                                  ? K(i, j) / lam
                                  : amplitude * std::exp(-D2(i, j) / (2.0 * ell * ell));
          double sij = g0(i) * beta0(j);
          if (gated) sij += g1(i) * beta1(j);
          dLam(pa, pb) += sij * base;
        }
      }
      for (Eigen::Index i = 0; i < Ka.rows(); ++i) {
        const int pa = anchor_pops[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < Ka.cols(); ++j) {
          const int pb = anchor_pops[static_cast<std::size_t>(j)];
          if (pa == pb) continue;
          const double lam = lambda(pa, pb);
          const double base = lam > 1e-12
                                  ? Ka(i, j) / lam
                                  : amplitude * std::exp(-D2a(i, j) / (2.0 * ell * ell));
          double sij = gamma0 * beta0(i) * beta0(j);
          if (gated) sij += gamma1 * beta1(i) * beta1(j);
          dLam(pa, pb) += sij * base;
        }
      }
      grad->segment(gat, n_theta) = f.chain_theta_grad(dLam);
    }
    return J;
  }

  double amplitude_ell_ = 1.0;  // fixed lengthscale when not learned
};

struct AuxData {
  Eigen::MatrixXd X;  // standardized
  Eigen::VectorXd w, yv;
  std::vector<int> pops;
  ColumnStandardizer x_std;
  int t_begin = 0, t_end = 0;
};

AuxData stack_aux(const MultiSourceDataset& data, bool standardize_y,
                  const Standardizer& y_std) {
  AuxData out;
  const int N = data.total_n();
  out.X.resize(N, data.d_x());
  out.w.resize(N);
  out.yv.resize(N);
  out.pops.resize(static_cast<std::size_t>(N));
  int at = 0;
  for (int d = 0; d <= data.m(); ++d) {
    const PopulationData& pop = data.population(d);
    for (int i = 0; i < pop.n(); ++i, ++at) {
      out.X.row(at) = pop.x.row(i);
      out.w(at) = pop.w(i);
      out.yv(at) = standardize_y ? y_std.apply(pop.y(i)) : pop.y(i);
      out.pops[static_cast<std::size_t>(at)] = d;
    }
    if (d == 0) out.t_end = at;
  }
  // standardize proxies on target-train statistics
  out.x_std = ColumnStandardizer::fit(data.target.x);
  out.X = out.x_std.apply(out.X);
  return out;
}

double median_dist(const Eigen::MatrixXd& pts, Rng rng) {
  const int n = static_cast<int>(pts.rows());
  const int cap = std::min(n, 256);
  std::vector<int> rows = sample_without_replacement(n, cap, rng);
  std::vector<double> d;
  for (int i = 0; i < cap; ++i)
    for (int j = i + 1; j < cap; ++j)
      d.push_back((pts.row(rows[static_cast<std::size_t>(i)]) -
                   pts.row(rows[static_cast<std::size_t>(j)]))
                      .norm());
  if (d.empty()) return 1.0;
  std::nth_element(d.begin(), d.begin() + static_cast<long>(d.size()) / 2, d.end());
  double med = d[d.size() / 2];
  if (!(med > 1e-8)) {
    double mean = 0.0;
    for (double v : d) mean += v;
    med = d.empty() ? 1.0 : mean / static_cast<double>(d.size());
  }
  return med > 1e-8 ? med : 1.0;
}

std::vector<int> pick_anchors(int n_target_end, int n_total, const AuxFitConfig& cfg, Rng rng) {
  const bool target_only = cfg.anchors_target_only || cfg.policy == TransferPolicy::None;
  const int hi = target_only ? n_target_end : n_total;
  std::vector<int> rows;
  if (hi <= cfg.anchor_budget) {
    rows.resize(static_cast<std::size_t>(hi));
    for (int i = 0; i < hi; ++i) rows[static_cast<std::size_t>(i)] = i;
  } else {
    rows = sample_without_replacement(hi, cfg.anchor_budget, rng);
  }
  return rows;
}

TransferFactors make_factors(FactorLevel level, TransferPolicy policy, int m) {
  switch (policy) {
    case TransferPolicy::Adaptive:
      return TransferFactors::adaptive(level, m);
    case TransferPolicy::Full:
      return TransferFactors::pinned(level, m, 1.0);
    case TransferPolicy::None:
      return TransferFactors::pinned(level, m, 0.0);
  }
  return TransferFactors::pinned(level, m, 1.0);
}

struct AuxFitOutcome {
  Eigen::VectorXd params;
  TransferFactors factors = TransferFactors::pinned(FactorLevel::L2Delta, 0, 1.0);
  double ell = 1.0;
};

AuxFitOutcome run_aux_fit(AuxProblem& prob, const AuxFitConfig& cfg,
                          const std::function<double(const Eigen::VectorXd&)>& val_score) {
  const int A = prob.na();
  const int nbeta = A * (prob.gated ? 2 : 1);
  double best_score = std::numeric_limits<double>::infinity();
  Eigen::VectorXd best_x;
  bool ok = false;

  for (int r = 0; r < cfg.restarts; ++r) {
    Eigen::VectorXd x0 = Eigen::VectorXd::Zero(prob.dim());
    Rng rng(mix_seed(mix_seed(cfg.seed, hash_str("aux-init")), static_cast<std::uint64_t>(r)));
    const double scale = cfg.beta_init_scale / std::sqrt(static_cast<double>(A));
    for (int i = 0; i < nbeta; ++i) x0(i) = scale * rng.normal();
    int at = nbeta;
    if (prob.learn_ell) x0(at++) = std::log(prob.amplitude_ell_);
    // thetas start at 0 (factors 0.5)

    try {
      OptimResult res = minimize_adam(
          [&](const Eigen::VectorXd& x, Eigen::VectorXd* g) { return prob.eval(x, g); }, x0,
          cfg.opt);
      if (!std::isfinite(res.value)) continue;
      const double score = val_score ? val_score(res.x) : res.value;
      if (std::isfinite(score) && score < best_score) {
        best_score = score;
        best_x = res.x;
        ok = true;
      }
    } catch (const NonFiniteLoss&) {
    } catch (const NonFiniteGradient&) {
    }
  }
  if (!ok) throw NoConvergence("no finite restart in the auxiliary fit");

  AuxFitOutcome out;
  out.params = best_x;
  int at = nbeta;
  out.ell = prob.learn_ell ? std::exp(best_x(at)) : prob.amplitude_ell_;
  if (prob.learn_ell) ++at;
  out.factors = prob.factors;
  if (prob.n_theta > 0) out.factors.set_thetas(best_x.segment(at, prob.n_theta));
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

Eigen::VectorXd OutcomeRegressor::g_batch(const Eigen::MatrixXd& x, int w) const {
  const Eigen::MatrixXd Xs = x_std.apply(x);
  Eigen::MatrixXd K = (psi_y.amplitude *
                       (-pairwise_sqdist(Xs, anchors.points) /
                        (2.0 * psi_y.lengthscale * psi_y.lengthscale))
                           .array()
                           .exp())
                          .matrix();
  const Eigen::MatrixXd lambda = delta.matrix();
  for (int j = 0; j < anchors.n(); ++j) {
    const int pb = anchors.pop_index[static_cast<std::size_t>(j)];
    if (pb != 0) K.col(j) *= lambda(0, pb);
  }
  Eigen::VectorXd f = K * (w == 1 ? beta_g1 : beta_g0);
  if (outcome_kind == OutcomeKind::Continuous) {
    for (Eigen::Index i = 0; i < f.size(); ++i) f(i) = y_std.invert(f(i));
  }
  return f;
}

double OutcomeRegressor::g(const Eigen::VectorXd& x, int w) const {
  return g_batch(x.transpose(), w)(0);
}

OutcomeRegressor fit_outcome(const MultiSourceDataset& data, const AuxFitConfig& cfg,
                             const PopulationData* val_target) {
  const Standardizer y_std = Standardizer::fit(data.target.y);
  const bool cont = data.schema.outcome_kind == OutcomeKind::Continuous;
  AuxData ad = stack_aux(data, cont, y_std);
  Rng master(cfg.seed);

  AuxProblem prob;
  prob.gated = true;
  prob.bernoulli = !cont;
  prob.gamma0 = cfg.gamma;
  prob.gamma1 = cfg.gamma;
  prob.learn_ell = cfg.learn_lengthscales;
  prob.X = ad.X;
  prob.w = ad.w;
  prob.target = ad.yv;
  prob.pops = ad.pops;
  prob.anchor_rows = pick_anchors(ad.t_end, static_cast<int>(ad.X.rows()), cfg,
                                  master.stream("anchors"));
  prob.anchor_pops.resize(prob.anchor_rows.size());
  Eigen::MatrixXd Xa(static_cast<Eigen::Index>(prob.anchor_rows.size()), ad.X.cols());
  for (std::size_t j = 0; j < prob.anchor_rows.size(); ++j) {
    Xa.row(static_cast<Eigen::Index>(j)) = ad.X.row(prob.anchor_rows[j]);
    prob.anchor_pops[j] = ad.pops[static_cast<std::size_t>(prob.anchor_rows[j])];
  }
  prob.D2 = pairwise_sqdist(ad.X, Xa);
  prob.D2a = pairwise_sqdist(Xa, Xa);
  prob.amplitude_ell_ = median_dist(ad.X, master.stream("ls"));
  prob.factors = make_factors(FactorLevel::L2Delta, cfg.policy, data.m());
  prob.n_theta = prob.factors.free_count();

  std::function<double(const Eigen::VectorXd&)> val_score;
  if (val_target != nullptr && val_target->n() > 0) {
    const Eigen::MatrixXd Xv = ad.x_std.apply(val_target->x);
    Eigen::VectorXd yv(val_target->n());
    for (int i = 0; i < val_target->n(); ++i) {
      yv(i) = cont ? y_std.apply(val_target->y(i)) : val_target->y(i);
    }
    const Eigen::VectorXd wv = val_target->w;
    val_score = [&prob, Xv, yv, wv, cont](const Eigen::VectorXd& x) {
      const int A = prob.na();
      Eigen::VectorXd beta0 = x.segment(0, A);
      Eigen::VectorXd beta1 = x.segment(A, A);
      int at = 2 * A;
      const double ell = prob.learn_ell ? std::exp(x(at)) : prob.amplitude_ell_;
      if (prob.learn_ell) ++at;
      TransferFactors f = prob.factors;
      if (prob.n_theta > 0) f.set_thetas(x.segment(at, prob.n_theta));
      const Eigen::MatrixXd lambda = f.matrix();
      Eigen::MatrixXd Xa2(static_cast<Eigen::Index>(prob.anchor_rows.size()), prob.X.cols());
      for (std::size_t j = 0; j < prob.anchor_rows.size(); ++j)
        Xa2.row(static_cast<Eigen::Index>(j)) = prob.X.row(prob.anchor_rows[j]);
      Eigen::MatrixXd K = (prob.amplitude *
                           (-pairwise_sqdist(Xv, Xa2) / (2.0 * ell * ell)).array().exp())
                              .matrix();
      for (std::size_t j = 0; j < prob.anchor_pops.size(); ++j) {
        const int pb = prob.anchor_pops[j];
        if (pb != 0) K.col(static_cast<Eigen::Index>(j)) *= lambda(0, pb);
      }
      const Eigen::VectorXd t = wv.cwiseProduct(K * beta1) +
                                (Eigen::VectorXd::Ones(wv.size()) - wv).cwiseProduct(K * beta0);
      if (cont) return 0.5 * (t - yv).squaredNorm();
      return (softplus_arr(t.array()) - yv.array() * t.array()).sum();
    };
  }

  AuxFitOutcome fit = run_aux_fit(prob, cfg, val_score);

  OutcomeRegressor model;
  model.outcome_kind = data.schema.outcome_kind;
  const int A = prob.na();
  model.beta_g0 = fit.params.segment(0, A);
  model.beta_g1 = fit.params.segment(A, A);
  model.psi_y.lengthscale = fit.ell;
  model.delta = fit.factors;
  model.anchors.points = Xa;
  model.anchors.pop_index = prob.anchor_pops;
  model.x_std = ad.x_std;
  model.y_std = y_std;
  model.gamma_y0 = cfg.gamma;
  model.gamma_y1 = cfg.gamma;
  if (cont) {
    // residual std on the target training rows, standardized scale
    Eigen::VectorXd resid(data.target.n());
    for (int i = 0; i < data.target.n(); ++i) {
      const double pred = model.g(data.target.x.row(i), static_cast<int>(data.target.w(i)));
      resid(i) = y_std.apply(data.target.y(i)) - y_std.apply(pred);
    }
    const double var = resid.squaredNorm() / std::max(1, data.target.n());
    model.sigma_y_tilde = std::sqrt(std::max(var, 1e-12));
  }
  return model;
}

OutcomePrediction predict_outcome(const Eigen::VectorXd& x, int w, const OutcomeRegressor& model) {
  OutcomePrediction out;
  const double g = model.g(x, w);
  if (model.outcome_kind == OutcomeKind::Continuous) {
    out.mean = g;
  } else {
    out.prob = logistic(g);
  }
  return out;
}

double sample_outcome(const Eigen::VectorXd& x, int w, const OutcomeRegressor& model,
                      std::uint64_t seed) {
  Rng rng(seed);
  if (model.outcome_kind == OutcomeKind::Continuous) {
    const double mean_std = model.y_std.apply(model.g(x, w));
    return model.y_std.invert(mean_std + model.sigma_y_tilde * rng.normal());
  }
  return rng.bernoulli(logistic(model.g(x, w)));
}

// ---------------------------------------------------------------------------

Eigen::VectorXd PropensityModel::h_batch(const Eigen::MatrixXd& x) const {
  const Eigen::MatrixXd Xs = x_std.apply(x);
  Eigen::MatrixXd K = (psi_w.amplitude *
                       (-pairwise_sqdist(Xs, anchors.points) /
                        (2.0 * psi_w.lengthscale * psi_w.lengthscale))
                           .array()
                           .exp())
                          .matrix();
  const Eigen::MatrixXd lambda = eta.matrix();
  for (int j = 0; j < anchors.n(); ++j) {
    const int pb = anchors.pop_index[static_cast<std::size_t>(j)];
    if (pb != 0) K.col(j) *= lambda(0, pb);
  }
  return K * beta_h;
}

double PropensityModel::h(const Eigen::VectorXd& x) const { return h_batch(x.transpose())(0); }

double PropensityModel::propensity(const Eigen::VectorXd& x) const { return logistic(h(x)); }

PropensityModel fit_propensity(const MultiSourceDataset& data, const AuxFitConfig& cfg,
                               const PopulationData* val_target) {
  AuxData ad = stack_aux(data, false, Standardizer{});
  {
    const double mean_w = ad.w.mean();
    if (mean_w == 0.0 || mean_w == 1.0) {
      throw DegenerateTreatment("treatment is constant in the pooled training set");
    }
  }
  Rng master(cfg.seed);

  AuxProblem prob;
  prob.gated = false;
  prob.bernoulli = true;
  prob.gamma0 = cfg.gamma;
  prob.learn_ell = cfg.learn_lengthscales;
  prob.X = ad.X;
  prob.target = ad.w;
  prob.pops = ad.pops;
  prob.anchor_rows = pick_anchors(ad.t_end, static_cast<int>(ad.X.rows()), cfg,
                                  master.stream("anchors"));
  prob.anchor_pops.resize(prob.anchor_rows.size());
  Eigen::MatrixXd Xa(static_cast<Eigen::Index>(prob.anchor_rows.size()), ad.X.cols());
  for (std::size_t j = 0; j < prob.anchor_rows.size(); ++j) {
    Xa.row(static_cast<Eigen::Index>(j)) = ad.X.row(prob.anchor_rows[j]);
    prob.anchor_pops[j] = ad.pops[static_cast<std::size_t>(prob.anchor_rows[j])];
  }
  prob.D2 = pairwise_sqdist(ad.X, Xa);
  prob.D2a = pairwise_sqdist(Xa, Xa);
  prob.amplitude_ell_ = median_dist(ad.X, master.stream("ls"));
  prob.factors = make_factors(FactorLevel::L3Eta, cfg.policy, data.m());
  prob.n_theta = prob.factors.free_count();

  std::function<double(const Eigen::VectorXd&)> val_score;
  if (val_target != nullptr && val_target->n() > 0) {
    const Eigen::MatrixXd Xv = ad.x_std.apply(val_target->x);
    const Eigen::VectorXd wv = val_target->w;
    val_score = [&prob, Xv, wv](const Eigen::VectorXd& x) {
      const int A = prob.na();
      Eigen::VectorXd beta = x.segment(0, A);
      int at = A;
      const double ell = prob.learn_ell ? std::exp(x(at)) : prob.amplitude_ell_;
      if (prob.learn_ell) ++at;
      TransferFactors f = prob.factors;
      if (prob.n_theta > 0) f.set_thetas(x.segment(at, prob.n_theta));
      const Eigen::MatrixXd lambda = f.matrix();
      Eigen::MatrixXd Xa2(static_cast<Eigen::Index>(prob.anchor_rows.size()), prob.X.cols());
      for (std::size_t j = 0; j < prob.anchor_rows.size(); ++j)
        Xa2.row(static_cast<Eigen::Index>(j)) = prob.X.row(prob.anchor_rows[j]);
      Eigen::MatrixXd K = (prob.amplitude *
                           (-pairwise_sqdist(Xv, Xa2) / (2.0 * ell * ell)).array().exp())
                              .matrix();
      for (std::size_t j = 0; j < prob.anchor_pops.size(); ++j) {
        const int pb = prob.anchor_pops[j];
        if (pb != 0) K.col(static_cast<Eigen::Index>(j)) *= lambda(0, pb);
      }
      const Eigen::VectorXd t = K * beta;
      return (softplus_arr(t.array()) - wv.array() * t.array()).sum();
    };
  }

  AuxFitOutcome fit = run_aux_fit(prob, cfg, val_score);

  PropensityModel model;
  model.beta_h = fit.params.segment(0, prob.na());
  model.psi_w.lengthscale = fit.ell;
  model.eta = fit.factors;
  model.anchors.points = Xa;
  model.anchors.pop_index = prob.anchor_pops;
  model.x_std = ad.x_std;
  model.gamma_w = cfg.gamma;
  return model;
}

int sample_treatment(const Eigen::VectorXd& x, const PropensityModel& model, std::uint64_t seed) {
  Rng rng(seed);
  return rng.bernoulli(model.propensity(x));
}

}  // namespace adatrans
