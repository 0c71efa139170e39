#include <doctest.h>

#include <cmath>

#include "adatrans/confounder.hpp"
#include "adatrans/rng.hpp"
#include "adatrans/synth_gen.hpp"

using namespace adatrans;

namespace {

// Small random multi-population dataset with mixed proxy column types.
MultiSourceDataset tiny_dataset(int n_target, int n_source, int m, int d_x, bool binary_y,
                                bool mixed_x, std::uint64_t seed) {
  Rng rng(seed);
  MultiSourceDataset data;
  data.schema.outcome_kind = binary_y ? OutcomeKind::Binary : OutcomeKind::Continuous;
  for (int j = 0; j < d_x; ++j) {
    const bool bin = !mixed_x || j % 2 == 0;
    data.schema.proxy_types.push_back(bin ? ProxyType::Binary : ProxyType::Continuous);
  }
  auto make_pop = [&](int n, const std::string& id) {
    PopulationData pop;
    pop.pop_id = id;
    pop.x.resize(n, d_x);
    pop.w.resize(n);
    pop.y.resize(n);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < d_x; ++j) {
        pop.x(i, j) = data.schema.proxy_types[static_cast<std::size_t>(j)] == ProxyType::Binary
                          ? rng.bernoulli(0.5)
                          : rng.normal();
      }
      pop.w(i) = rng.bernoulli(0.5);
      pop.y(i) = binary_y ? rng.bernoulli(0.4) : rng.normal();
    }
    return pop;
  };
  data.target = make_pop(n_target, "t");
  for (int s = 0; s < m; ++s) data.sources.push_back(make_pop(n_source, "s" + std::to_string(s + 1)));
  // at least one row in each treatment arm so both outcome blocks are live
  data.target.w(0) = 0.0;
  if (n_target > 1) data.target.w(1) = 1.0;
  return data;
}

struct TinyProblem {
  AugmentedDataset aug;
  ConfounderProblem problem;
  Level1Params params;
};

TinyProblem make_problem(const MultiSourceDataset& data, int L, int d_z, bool adaptive,
                         double gamma, std::uint64_t seed, bool learn_ls = true,
                         bool learn_sq = true) {
  StructuralConfig sc;
  sc.d_z = d_z;
  sc.sigma_z = std::sqrt(8.0);
  sc.outcome_kind = data.schema.outcome_kind;
  AugmentedDataset aug = resample_augmented(data, L, d_z, seed);

  std::vector<int> za(static_cast<std::size_t>(aug.n_rows()));
  for (std::size_t i = 0; i < za.size(); ++i) za[i] = static_cast<int>(i);
  std::vector<int> qa(static_cast<std::size_t>(aug.n_obs()));
  for (std::size_t i = 0; i < qa.size(); ++i) qa[i] = static_cast<int>(i);

  ConfounderProblem problem(aug, data.schema.proxy_types, sc, Regularizers::uniform(gamma),
                            Standardizer::fit(data.target.y), za, qa, learn_ls, learn_sq);

  Level1Params p;
  p.var.alpha_q0 = Eigen::MatrixXd::Zero(problem.n_q_anchors(), d_z);
  p.var.alpha_q1 = Eigen::MatrixXd::Zero(problem.n_q_anchors(), d_z);
  p.var.sigma_q = 0.9;
  p.var.k_q0.lengthscale = 2.0;
  p.var.k_q1.lengthscale = 1.7;
  p.lik.alpha_y0 = Eigen::VectorXd::Zero(problem.n_z_anchors());
  p.lik.alpha_y1 = Eigen::VectorXd::Zero(problem.n_z_anchors());
  p.lik.alpha_w = Eigen::VectorXd::Zero(problem.n_z_anchors());
  p.lik.alpha_x = Eigen::MatrixXd::Zero(problem.n_z_anchors(), data.d_x());
  p.lik.k_y0.lengthscale = 1.2;
  p.lik.k_y1.lengthscale = 1.4;
  p.lik.k_w.lengthscale = 1.1;
  p.lik.k_x.lengthscale = 1.3;
  p.lambda = adaptive ? TransferFactors::adaptive(FactorLevel::L1Lambda, data.m())
                      : TransferFactors::pinned(FactorLevel::L1Lambda, data.m(), 1.0);
  return TinyProblem{std::move(aug), std::move(problem), std::move(p)};
}

void randomize(Eigen::VectorXd& x, Rng& rng, double scale) {
  for (Eigen::Index i = 0; i < x.size(); ++i) x(i) += scale * rng.normal();
}

double max_grad_rel_err(const ConfounderProblem& problem, const Level1Params& shape,
                        const Eigen::VectorXd& x) {
  Eigen::VectorXd grad;
  problem.objective(x, shape, &grad);
  const double h = 1e-5;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Eigen::VectorXd xp = x, xm = x;
    xp(i) += h;
    xm(i) -= h;
    const double fd =
        (problem.objective(xp, shape, nullptr) - problem.objective(xm, shape, nullptr)) /
        (2.0 * h);
    const double rel = std::abs(grad(i) - fd) / std::max({1.0, std::abs(grad(i)), std::abs(fd)});
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace

TEST_CASE("gaussian KL closed form matches Monte-Carlo and hand values") {
  // d_z = 2, m = (1, 0), sigma_q = 1, sigma_z = sqrt(8)
  Eigen::VectorXd m(2);
  m << 1.0, 0.0;
  const double sz = std::sqrt(8.0);
  const double expect = 2.0 * (std::log(sz) + 1.0 / 16.0 - 0.5) + 1.0 / 16.0;
  CHECK(gaussian_kl(m, 1.0, sz) == doctest::Approx(expect).epsilon(1e-12));

  // Monte-Carlo oracle: E_q[log q - log p] over draws from q
  Rng rng(4242);
  const int n = 1000000;
  double acc = 0.0, acc2 = 0.0;
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd z(2);
    for (int d = 0; d < 2; ++d) z(d) = m(d) + rng.normal();
    const double logq = -0.5 * (z - m).squaredNorm() - std::log(2.0 * M_PI);
    const double logp = -0.5 * z.squaredNorm() / (sz * sz) - std::log(2.0 * M_PI * sz * sz);
    const double v = logq - logp;
    acc += v;
    acc2 += v * v;
  }
  const double mc = acc / n;
  const double se = std::sqrt((acc2 / n - mc * mc) / n);
  CHECK(std::abs(mc - gaussian_kl(m, 1.0, sz)) < 3.0 * se);

  // q identical to the prior: KL is exactly zero
  CHECK(gaussian_kl(Eigen::VectorXd::Zero(2), sz, sz) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(gaussian_kl(m, 0.5, sz) > 0.0);
}

TEST_CASE("resample_augmented: shapes, determinism, degenerate noise") {
  const MultiSourceDataset data = tiny_dataset(6, 4, 1, 3, false, true, 21);
  AugmentedDataset aug = resample_augmented(data, 5, 2, 99);
  CHECK(aug.n_obs() == 10);
  CHECK(aug.n_rows() == 50);

  AugmentedDataset again = resample_augmented(data, 5, 2, 99);
  CHECK(aug.eps == again.eps);

  auto tp = make_problem(data, 1, 2, false, 1e-2, 99);
  tp.params.var.sigma_q = 1e-12;
  Rng rng(3);
  for (Eigen::Index i = 0; i < tp.params.var.alpha_q0.size(); ++i) {
    tp.params.var.alpha_q0.data()[i] = 0.3 * rng.normal();
    tp.params.var.alpha_q1.data()[i] = 0.3 * rng.normal();
  }
  const Eigen::MatrixXd Z = tp.problem.materialize_z(tp.params);
  const Eigen::MatrixXd mq = tp.problem.posterior_means(tp.params);
  for (int o = 0; o < tp.problem.n_obs(); ++o) {
    CHECK((Z.row(o) - mq.row(o)).norm() < 1e-10);
  }
}

TEST_CASE("neg_elbo special values") {
  const MultiSourceDataset data = tiny_dataset(8, 0, 0, 2, true, false, 7);
  auto tp = make_problem(data, 2, 2, false, 1e-2, 5);

  // q == prior: zero KL, so neg_elbo equals the pure likelihood part;
  // f_w == 0 contributes exactly log(2) per augmented row
  tp.params.var.sigma_q = std::sqrt(8.0);
  const double j = tp.problem.neg_elbo(tp.params);

  // with all alphas zero every binary block contributes softplus(0) = log 2
  // per row (y, w and the two binary x columns), KL contributes zero
  const double log2 = std::log(2.0);
  const double expect = 4.0 * log2 * tp.problem.n_rows() / tp.aug.L;
  CHECK(j == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("objective equals neg_elbo plus quadratic penalties that scale correctly") {
  const MultiSourceDataset data = tiny_dataset(6, 5, 1, 3, false, true, 13);
  auto tp = make_problem(data, 2, 2, false, 0.05, 31);
  Rng rng(17);
  randomize(tp.params.lik.alpha_y0, rng, 0.2);

  const double j0 = tp.problem.objective(tp.params);
  const double e0 = tp.problem.neg_elbo(tp.params);
  const double reg0 = j0 - e0;
  CHECK(reg0 > 0.0);

  // doubling one coefficient block quadruples its penalty
  Level1Params doubled = tp.params;
  doubled.lik.alpha_y0 *= 2.0;
  const double reg1 = tp.problem.objective(doubled) - tp.problem.neg_elbo(doubled);
  CHECK(reg1 == doctest::Approx(4.0 * reg0).epsilon(1e-9));

  // all-zero coefficients: J reduces to the neg-elbo exactly
  Level1Params zero = tp.params;
  zero.lik.alpha_y0.setZero();
  CHECK(tp.problem.objective(zero) ==
        doctest::Approx(tp.problem.neg_elbo(zero)).epsilon(1e-12));
}

TEST_CASE("binary blocks at zero coefficients: gradient equals the appendix value") {
  // d/dalpha of -w^T log phi(D alpha) at alpha = 0 is -D^T (w * 1/2); with the
  // 1/L likelihood weight and both Bernoulli terms the result is
  // K^T (phi(0) - w) / L
  const MultiSourceDataset data = tiny_dataset(5, 0, 0, 2, true, false, 3);
  auto tp = make_problem(data, 2, 2, false, 1e-3, 11, false, false);
  Eigen::VectorXd grad;
  const Eigen::VectorXd x = tp.problem.pack(tp.params);
  tp.problem.objective(x, tp.params, &grad);

  // alpha_w block: gradient = K_w^T (0.5 - w_aug)/L + 0 (alpha_w = 0)
  const Eigen::MatrixXd Z = tp.problem.materialize_z(tp.params);
  TaggedPoints zt{Z, std::vector<int>(static_cast<std::size_t>(Z.rows()), 0)};
  const Eigen::MatrixXd Kw = gram(tp.params.lik.k_w, tp.params.lambda, zt, zt);
  Eigen::VectorXd waug(tp.problem.n_rows());
  for (int o = 0; o < tp.problem.n_obs(); ++o)
    for (int l = 0; l < tp.aug.L; ++l) waug(o * tp.aug.L + l) = tp.aug.w(o);
  const Eigen::VectorXd expect =
      Kw.transpose() * ((Eigen::VectorXd::Constant(tp.problem.n_rows(), 0.5) - waug) /
                        tp.aug.L);
  const int Ma = tp.problem.n_z_anchors();
  const Eigen::VectorXd got = grad.segment(2 * Ma, Ma);
  CHECK((got - expect).lpNorm<Eigen::Infinity>() < 1e-10);
}

TEST_CASE("analytic gradient matches central differences on random instances") {
  // continuous and binary outcomes, with and without sources, mixed proxies
  int checked = 0;
  for (int rep = 0; rep < 6; ++rep) {
    const bool binary_y = rep % 2 == 1;
    const int m = rep % 3;
    const MultiSourceDataset data =
        tiny_dataset(4 + rep % 3, 3, m, 2 + rep % 2, binary_y, true, 100 + rep);
    auto tp = make_problem(data, 2, 2, m > 0, 0.02 + 0.01 * rep, 200 + rep);

    Rng rng(300 + rep);
    Eigen::VectorXd x = tp.problem.pack(tp.params);
    randomize(x, rng, 0.25);
    CHECK(max_grad_rel_err(tp.problem, tp.params, x) < 1e-4);
    ++checked;
  }
  CHECK(checked == 6);
}

TEST_CASE("gradient is exact at a far-from-zero point with pinned factors") {
  const MultiSourceDataset data = tiny_dataset(5, 4, 1, 3, false, true, 55);
  auto tp = make_problem(data, 3, 2, false, 0.01, 66);
  Rng rng(77);
  Eigen::VectorXd x = tp.problem.pack(tp.params);
  randomize(x, rng, 0.6);
  CHECK(max_grad_rel_err(tp.problem, tp.params, x) < 1e-4);
}

TEST_CASE("hessian blocks are PSD at fixed variational parameters") {
  for (int rep = 0; rep < 6; ++rep) {
    const bool binary_y = rep % 2 == 0;
    const MultiSourceDataset data =
        tiny_dataset(5, 4, rep % 2, 2, binary_y, true, 400 + rep);
    auto tp = make_problem(data, 2, 2, false, 0.02, 500 + rep);
    Rng rng(600 + rep);
    Eigen::VectorXd x = tp.problem.pack(tp.params);
    randomize(x, rng, 0.4);
    const Level1Params at = tp.problem.unpack(x, tp.params);
    for (LikBlock b : {LikBlock::Y0, LikBlock::Y1, LikBlock::W, LikBlock::X}) {
      CHECK(tp.problem.hessian_block_min_eig(at, b) >= -1e-8);
    }
  }
}

TEST_CASE("zero data weights leave the pure regularizer Hessian") {
  // all rows treated: the y0 block sees no data, so H = 2 gamma K, PSD
  MultiSourceDataset data = tiny_dataset(6, 0, 0, 2, false, false, 9);
  data.target.w.setOnes();
  auto tp = make_problem(data, 2, 2, false, 0.03, 10);
  const double me = tp.problem.hessian_block_min_eig(tp.params, LikBlock::Y0);
  CHECK(me >= -1e-10);
}

TEST_CASE("objective is invariant to permuting rows within a population") {
  const MultiSourceDataset data = tiny_dataset(6, 5, 1, 3, false, true, 88);
  auto tp = make_problem(data, 2, 2, false, 0.02, 44);
  Rng rng(12);
  Eigen::VectorXd x = tp.problem.pack(tp.params);
  randomize(x, rng, 0.3);
  const Level1Params p = tp.problem.unpack(x, tp.params);
  const double j1 = tp.problem.objective(p);

  // rotate the target rows by one; eps keying follows the row content so the
  // same anchors (by content) receive the same coefficients
  MultiSourceDataset rotated = data;
  std::vector<int> order;
  for (int i = 1; i < data.target.n(); ++i) order.push_back(i);
  order.push_back(0);
  rotated.target = data.target.take_rows(order);
  auto tp2 = make_problem(rotated, 2, 2, false, 0.02, 44);

  // permute coefficient rows consistently: anchor o of the rotated problem is
  // row order[o] of the original
  Level1Params p2 = tp2.params;
  const int L = tp.aug.L;
  const int nt = data.target.n();
  auto src_obs = [&](int o) { return o < nt ? order[static_cast<std::size_t>(o)] : o; };
  for (int o = 0; o < tp2.problem.n_obs(); ++o) {
    p2.var.alpha_q0.row(o) = p.var.alpha_q0.row(src_obs(o));
    p2.var.alpha_q1.row(o) = p.var.alpha_q1.row(src_obs(o));
    for (int l = 0; l < L; ++l) {
      const int r2 = o * L + l;
      const int r1 = src_obs(o) * L + l;
      p2.lik.alpha_y0(r2) = p.lik.alpha_y0(r1);
      p2.lik.alpha_y1(r2) = p.lik.alpha_y1(r1);
      p2.lik.alpha_w(r2) = p.lik.alpha_w(r1);
      p2.lik.alpha_x.row(r2) = p.lik.alpha_x.row(r1);
    }
  }
  p2.var.sigma_q = p.var.sigma_q;
  p2.var.k_q0 = p.var.k_q0;
  p2.var.k_q1 = p.var.k_q1;
  p2.lik.k_y0 = p.lik.k_y0;
  p2.lik.k_y1 = p.lik.k_y1;
  p2.lik.k_w = p.lik.k_w;
  p2.lik.k_x = p.lik.k_x;
  const double j2 = tp2.problem.objective(p2);
  CHECK(j2 == doctest::Approx(j1).epsilon(1e-10));
}

TEST_CASE("f_q gating and single-anchor evaluation") {
  ConfounderModel model;
  model.config.d_z = 1;
  model.config.outcome_kind = OutcomeKind::Continuous;
  model.proxy_types = {ProxyType::Binary, ProxyType::Binary};
  model.y_std = Standardizer{};  // identity
  model.k_q0.lengthscale = 1.0;
  model.k_q1.lengthscale = 1.0;
  model.q_anchors.points = Eigen::MatrixXd::Zero(1, 3);
  model.q_anchors.pop_index = {0};
  model.alpha_q0 = Eigen::MatrixXd::Constant(1, 1, 2.0);
  model.alpha_q1 = Eigen::MatrixXd::Constant(1, 1, -1.0);
  model.lambda = TransferFactors::pinned(FactorLevel::L1Lambda, 0, 1.0);
  model.z_anchors.points = Eigen::MatrixXd::Zero(1, 1);
  model.z_anchors.pop_index = {0};
  model.alpha_y0 = Eigen::VectorXd::Zero(1);
  model.alpha_y1 = Eigen::VectorXd::Zero(1);
  model.alpha_w = Eigen::VectorXd::Zero(1);
  model.alpha_x = Eigen::MatrixXd::Zero(1, 2);

  const Eigen::VectorXd x0 = Eigen::VectorXd::Zero(2);
  // anchor self-evaluation: f = alpha * amplitude
  CHECK(model.f_q(x0, 0, 0.0)(0) == doctest::Approx(2.0));
  CHECK(model.f_q(x0, 1, 0.0)(0) == doctest::Approx(-1.0));

  // w = 1 must not depend on alpha_q0
  model.alpha_q0(0, 0) = 123.0;
  CHECK(model.f_q(x0, 1, 0.0)(0) == doctest::Approx(-1.0));

  // all-zero coefficients give the prior mean
  model.alpha_q0.setZero();
  model.alpha_q1.setZero();
  CHECK(model.f_q(x0, 0, 0.7)(0) == 0.0);
}

TEST_CASE("expected_outcome gating identity and closed forms") {
  ConfounderModel model;
  model.config.d_z = 1;
  model.config.outcome_kind = OutcomeKind::Binary;
  model.proxy_types = {ProxyType::Binary};
  model.z_anchors.points = Eigen::MatrixXd::Zero(1, 1);
  model.z_anchors.pop_index = {0};
  model.alpha_y0 = Eigen::VectorXd::Zero(1);
  model.alpha_y1 = Eigen::VectorXd::Zero(1);
  model.alpha_w = Eigen::VectorXd::Zero(1);
  model.alpha_x = Eigen::MatrixXd::Zero(1, 1);
  model.alpha_q0 = Eigen::MatrixXd::Zero(1, 1);
  model.alpha_q1 = Eigen::MatrixXd::Zero(1, 1);
  model.q_anchors.points = Eigen::MatrixXd::Zero(1, 2);
  model.q_anchors.pop_index = {0};
  model.lambda = TransferFactors::pinned(FactorLevel::L1Lambda, 0, 1.0);

  Eigen::VectorXd z(1);
  z << 0.4;
  // zero outcome function, binary: probability one half
  CHECK(model.expected_outcome(0, z) == doctest::Approx(0.5));
  CHECK(model.expected_outcome(1, z) == doctest::Approx(0.5));

  // equal arms mean zero treatment effect everywhere
  model.alpha_y0(0) = 0.8;
  model.alpha_y1(0) = 0.8;
  for (double zi : {-1.0, 0.0, 2.0}) {
    z << zi;
    CHECK(model.expected_outcome(1, z) == doctest::Approx(model.expected_outcome(0, z)));
  }

  // continuous single anchor: alpha = 2 at the anchor returns 2
  model.config.outcome_kind = OutcomeKind::Continuous;
  model.alpha_y1(0) = 2.0;
  z << 0.0;
  CHECK(model.expected_outcome(1, z) == doctest::Approx(2.0));
}

TEST_CASE("heavy regularization drives the coefficients to zero in a fit") {
  const MultiSourceDataset data = tiny_dataset(20, 0, 0, 3, false, true, 71);
  ConfounderFitConfig cfg;
  cfg.structural.d_z = 2;
  cfg.structural.outcome_kind = OutcomeKind::Continuous;
  cfg.L = 2;
  cfg.restarts = 1;
  cfg.gamma_grid = {1e6};
  cfg.opt.max_iters = 600;
  cfg.opt.lr = 0.05;
  cfg.seed = 5;
  const ConfounderModel model = fit_confounder(data, cfg);
  CHECK(model.alpha_y0.norm() < 1e-3);
  CHECK(model.alpha_y1.norm() < 1e-3);
  CHECK(model.alpha_w.norm() < 1e-3);
  CHECK(model.alpha_x.norm() < 1e-3);
  CHECK(model.alpha_q0.norm() < 1e-3);
  CHECK(model.alpha_q1.norm() < 1e-3);
}

TEST_CASE("fit is deterministic and records a non-increasing trace per restart") {
  const MultiSourceDataset data = tiny_dataset(12, 10, 1, 3, false, true, 61);
  ConfounderFitConfig cfg;
  cfg.structural.d_z = 2;
  cfg.structural.outcome_kind = OutcomeKind::Continuous;
  cfg.L = 2;
  cfg.restarts = 2;
  cfg.opt.max_iters = 120;
  cfg.seed = 31;
  ConfounderFitReport rep1, rep2;
  const ConfounderModel m1 = fit_confounder(data, cfg, nullptr, &rep1);
  const ConfounderModel m2 = fit_confounder(data, cfg, nullptr, &rep2);
  CHECK(m1.alpha_y0 == m2.alpha_y0);
  CHECK(m1.alpha_q0 == m2.alpha_q0);
  CHECK(m1.sigma_q == m2.sigma_q);
  CHECK(rep1.chosen == rep2.chosen);
  REQUIRE(rep1.restarts.size() == 2);
  for (const auto& r : rep1.restarts) {
    for (std::size_t i = 1; i < r.trace.size(); ++i) {
      CHECK(r.trace[i] <= r.trace[i - 1] + 1e-9 * (1.0 + std::abs(r.trace[i - 1])));
    }
  }
}
