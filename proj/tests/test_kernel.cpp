#include <doctest.h>

#include <Eigen/Eigenvalues>
#include <cmath>

#include "adatrans/kernel.hpp"
#include "adatrans/rng.hpp"

using namespace adatrans;

namespace {

TaggedPoints random_points(int n, int dim, int num_pops, Rng& rng) {
  TaggedPoints t;
  t.points.resize(n, dim);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < dim; ++j) t.points(i, j) = rng.normal();
  t.pop_index.resize(static_cast<std::size_t>(n));
  // grouped: population p owns a contiguous chunk
  for (int i = 0; i < n; ++i) t.pop_index[static_cast<std::size_t>(i)] = i * num_pops / n;
  return t;
}

}  // namespace

TEST_CASE("base_eval closed forms") {
  BaseKernelSpec rbf;
  Eigen::VectorXd u(2), v(2);
  u << 1.0, 2.0;
  v = u;
  CHECK(base_eval(rbf, u, v) == doctest::Approx(1.0));

  v << 2.0, 3.0;  // squared distance 2
  CHECK(base_eval(rbf, u, v) == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));

  BaseKernelSpec lin;
  lin.family = KernelFamily::Linear;
  Eigen::VectorXd z = Eigen::VectorXd::Zero(3);
  CHECK(base_eval(lin, z, z) == doctest::Approx(1.0));

  Eigen::VectorXd w3(3);
  w3.setOnes();
  CHECK_THROWS_AS(base_eval(rbf, u, w3), DimMismatch);
}

TEST_CASE("transfer_eval scales cross-population similarity only") {
  BaseKernelSpec rbf;
  Eigen::VectorXd u(2), v(2);
  u << 0.0, 0.0;
  v << 1.0, 0.0;
  const double base = base_eval(rbf, u, v);

  auto lam = TransferFactors::pinned(FactorLevel::L1Lambda, 1, 1.0);
  CHECK(transfer_eval(rbf, lam, u, 0, v, 1) == doctest::Approx(base));

  auto none = TransferFactors::pinned(FactorLevel::L1Lambda, 1, 0.0);
  CHECK(transfer_eval(rbf, none, u, 0, v, 1) == 0.0);
  CHECK(transfer_eval(rbf, none, u, 0, v, 0) == doctest::Approx(base));

  Eigen::MatrixXd vals(2, 2);
  vals << 1.0, 0.5, 0.5, 1.0;
  auto half = TransferFactors::fixed_matrix(FactorLevel::L1Lambda, vals);
  // factor 0.5 on a base value of 0.8 gives 0.4
  BaseKernelSpec k8;
  k8.lengthscale = std::sqrt(-0.5 / std::log(0.8));
  CHECK(base_eval(k8, u, v) == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(transfer_eval(k8, half, u, 0, v, 1) == doctest::Approx(0.4).epsilon(1e-12));
}

TEST_CASE("adaptive factors: sigmoid recovery at m = 1 and PSD matrix") {
  auto f = TransferFactors::adaptive(FactorLevel::L1Lambda, 1);
  Eigen::VectorXd th(1);
  th << 0.3;
  f.set_thetas(th);
  const double expect = 1.0 / (1.0 + std::exp(-0.3));
  CHECK(f.matrix()(0, 1) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(f.matrix()(1, 0) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(f.matrix()(0, 0) == 1.0);
  CHECK(f.free_count() == 1);

  auto f3 = TransferFactors::adaptive(FactorLevel::L1Lambda, 3);
  CHECK(f3.free_count() == 6);
  Rng rng(2);
  Eigen::VectorXd th3(6);
  for (int i = 0; i < 6; ++i) th3(i) = 2.0 * rng.normal();
  f3.set_thetas(th3);
  const Eigen::MatrixXd lam = f3.matrix();
  CHECK(lam.isApprox(lam.transpose(), 1e-14));
  for (int i = 0; i < 4; ++i) {
    CHECK(lam(i, i) == 1.0);
    for (int j = 0; j < 4; ++j) {
      CHECK(lam(i, j) >= 0.0);
      CHECK(lam(i, j) <= 1.0 + 1e-12);
    }
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(lam, Eigen::EigenvaluesOnly);
  CHECK(es.eigenvalues().minCoeff() >= -1e-10);
}

TEST_CASE("factor theta gradient matches finite differences") {
  for (int m : {1, 2, 3}) {
    auto f = TransferFactors::adaptive(FactorLevel::L1Lambda, m);
    Rng rng(100 + m);
    Eigen::VectorXd th(f.free_count());
    for (int i = 0; i < th.size(); ++i) th(i) = rng.normal();
    f.set_thetas(th);

    // random upstream sensitivities on the full matrix
    const int P = m + 1;
    Eigen::MatrixXd G(P, P);
    for (int i = 0; i < P; ++i)
      for (int j = 0; j < P; ++j) G(i, j) = rng.normal();

    const Eigen::VectorXd grad = f.chain_theta_grad(G);
    auto value = [&](const Eigen::VectorXd& t) {
      auto g = TransferFactors::adaptive(FactorLevel::L1Lambda, m);
      g.set_thetas(t);
      return (G.array() * g.matrix().array()).sum();
    };
    const double h = 1e-6;
    for (int i = 0; i < th.size(); ++i) {
      Eigen::VectorXd tp = th, tm = th;
      tp(i) += h;
      tm(i) -= h;
      const double fd = (value(tp) - value(tm)) / (2.0 * h);
      CHECK(grad(i) == doctest::Approx(fd).epsilon(1e-5));
    }
  }
}

TEST_CASE("gram structure: single population, block diagonal, PSD under jitter") {
  Rng rng(5);
  BaseKernelSpec rbf;
  rbf.lengthscale = 1.3;

  const TaggedPoints one = random_points(12, 3, 1, rng);
  auto full = TransferFactors::pinned(FactorLevel::L1Lambda, 0, 1.0);
  const Eigen::MatrixXd K1 = gram(rbf, full, one, one);
  CHECK(K1.diagonal().isApproxToConstant(rbf.amplitude, 1e-14));
  CHECK(K1.isApprox(K1.transpose(), 1e-14));

  const TaggedPoints two = random_points(14, 3, 2, rng);
  auto none = TransferFactors::pinned(FactorLevel::L1Lambda, 1, 0.0);
  const Eigen::MatrixXd K2 = gram(rbf, none, two, two);
  for (int i = 0; i < two.n(); ++i) {
    for (int j = 0; j < two.n(); ++j) {
      if (two.pop_index[static_cast<std::size_t>(i)] !=
          two.pop_index[static_cast<std::size_t>(j)]) {
        CHECK(K2(i, j) == 0.0);
      }
    }
  }

  // three populations, random logits: jittered gram stays PSD
  for (int rep = 0; rep < 10; ++rep) {
    Rng r2(50 + rep);
    const TaggedPoints three = random_points(30, 2, 3, r2);
    auto f = TransferFactors::adaptive(FactorLevel::L1Lambda, 2);
    Eigen::VectorXd th(3);
    for (int i = 0; i < 3; ++i) th(i) = 2.5 * r2.normal();
    f.set_thetas(th);
    const Eigen::MatrixXd K = gram_sym(rbf, f, three);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(K, Eigen::EigenvaluesOnly);
    CHECK(es.eigenvalues().minCoeff() >= -1e-8);
  }
}

TEST_CASE("cross-block entries are nondecreasing in the transfer factor") {
  Rng rng(9);
  BaseKernelSpec rbf;
  const TaggedPoints two = random_points(10, 2, 2, rng);
  auto make = [&](double theta) {
    auto f = TransferFactors::adaptive(FactorLevel::L1Lambda, 1);
    Eigen::VectorXd th(1);
    th << theta;
    f.set_thetas(th);
    return gram(rbf, f, two, two);
  };
  const Eigen::MatrixXd lo = make(-1.0);
  const Eigen::MatrixXd hi = make(1.0);
  for (int i = 0; i < two.n(); ++i) {
    for (int j = 0; j < two.n(); ++j) {
      if (two.pop_index[static_cast<std::size_t>(i)] !=
          two.pop_index[static_cast<std::size_t>(j)]) {
        CHECK(hi(i, j) >= lo(i, j));
      } else {
        CHECK(hi(i, j) == lo(i, j));
      }
    }
  }
}

TEST_CASE("gram equals the Schur product of base gram and factor blocks") {
  Rng rng(31);
  BaseKernelSpec rbf;
  rbf.lengthscale = 0.8;
  const TaggedPoints pts = random_points(20, 2, 3, rng);
  auto f = TransferFactors::adaptive(FactorLevel::L1Lambda, 2);
  Eigen::VectorXd th(3);
  th << 0.2, -0.4, 1.0;
  f.set_thetas(th);
  const Eigen::MatrixXd K = gram(rbf, f, pts, pts);
  auto ones = TransferFactors::pinned(FactorLevel::L1Lambda, 2, 1.0);
  const Eigen::MatrixXd base = gram(rbf, ones, pts, pts);
  const Eigen::MatrixXd lam = f.matrix();
  for (int i = 0; i < pts.n(); ++i) {
    for (int j = 0; j < pts.n(); ++j) {
      const double expect = base(i, j) * lam(pts.pop_index[static_cast<std::size_t>(i)],
                                             pts.pop_index[static_cast<std::size_t>(j)]);
      CHECK(K(i, j) == doctest::Approx(expect).epsilon(1e-13));
    }
  }
}
