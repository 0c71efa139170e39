#include "adatrans/confounder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>

#include "adatrans/rng.hpp"

namespace adatrans {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

Eigen::ArrayXd logistic_arr(const Eigen::ArrayXd& t) {
  return 0.5 * (1.0 + (0.5 * t).tanh());
}

Eigen::ArrayXd softplus_arr(const Eigen::ArrayXd& t) {
  // log(1 + e^t) = max(t, 0) + log1p(e^{-|t|})
  return t.max(0.0) + (-t.abs()).exp().log1p();
}

std::vector<std::pair<int, int>> spans_from_pops(const std::vector<int>& pops, int num_pops) {
  std::vector<std::pair<int, int>> spans(static_cast<std::size_t>(num_pops), {0, 0});
  int i = 0;
  const int n = static_cast<int>(pops.size());
  for (int p = 0; p < num_pops; ++p) {
    const int begin = i;
    while (i < n && pops[static_cast<std::size_t>(i)] == p) ++i;
    spans[static_cast<std::size_t>(p)] = {begin, i};
  }
  if (i != n) throw ShapeMismatch("population indices are not grouped in order");
  return spans;
}

void apply_factor_blocks(Eigen::MatrixXd& K, const std::vector<std::pair<int, int>>& row_spans,
                         const std::vector<std::pair<int, int>>& col_spans,
                         const Eigen::MatrixXd& lambda) {
  const int P = static_cast<int>(lambda.rows());
  for (int a = 0; a < P; ++a) {
    for (int b = 0; b < P; ++b) {
      if (a == b) continue;
      const double f = lambda(a, b);
      if (f == 1.0) continue;
      const auto [r0, r1] = row_spans[static_cast<std::size_t>(a)];
      const auto [c0, c1] = col_spans[static_cast<std::size_t>(b)];
      if (r1 > r0 && c1 > c0) K.block(r0, c0, r1 - r0, c1 - c0) *= f;
    }
  }
}

Eigen::MatrixXd rbf_from_sqdist(const Eigen::MatrixXd& D2, double lengthscale, double amplitude) {
  return amplitude * (-D2 / (2.0 * lengthscale * lengthscale)).array().exp().matrix();
}

}  // namespace

double gaussian_kl(const Eigen::VectorXd& m, double sigma_q, double sigma_z) {
  const double dz = static_cast<double>(m.size());
  return dz * (std::log(sigma_z / sigma_q) + sigma_q * sigma_q / (2.0 * sigma_z * sigma_z) - 0.5) +
         m.squaredNorm() / (2.0 * sigma_z * sigma_z);
}

AugmentedDataset resample_augmented(const MultiSourceDataset& data, int L, int d_z,
                                    std::uint64_t seed) {
  if (L < 1) throw ShapeMismatch("L must be >= 1");
  AugmentedDataset aug;
  aug.L = L;
  aug.num_pops = data.m() + 1;
  const int dx = data.d_x();
  const int N = data.total_n();
  aug.x.resize(N, dx);
  aug.w.resize(N);
  aug.y.resize(N);
  aug.pop_of_obs.resize(static_cast<std::size_t>(N));

  int at = 0;
  for (int d = 0; d < aug.num_pops; ++d) {
    const PopulationData& pop = data.population(d);
    const int begin = at;
    for (int i = 0; i < pop.n(); ++i, ++at) {
      aug.x.row(at) = pop.x.row(i);
      aug.w(at) = pop.w(i);
      aug.y(at) = pop.y(i);
      aug.pop_of_obs[static_cast<std::size_t>(at)] = d;
    }
    aug.pop_spans.emplace_back(begin, at);
  }

  // Noise streams are keyed by (row content, occurrence within population):
  // the same physical row gets the same eps regardless of population tags.
  aug.eps.resize(N * L, d_z);
  std::map<std::uint64_t, int> seen;
  std::vector<double> rowbytes(static_cast<std::size_t>(dx) + 2);
  int o = 0;
  for (int d = 0; d < aug.num_pops; ++d) {
    seen.clear();
    const PopulationData& pop = data.population(d);
    for (int i = 0; i < pop.n(); ++i, ++o) {
      for (int j = 0; j < dx; ++j) rowbytes[static_cast<std::size_t>(j)] = aug.x(o, j);
      rowbytes[static_cast<std::size_t>(dx)] = aug.w(o);
      rowbytes[static_cast<std::size_t>(dx) + 1] = aug.y(o);
      const std::uint64_t h = hash_doubles(rowbytes.data(), rowbytes.size());
      const int occ = seen[h]++;
      Rng rng(mix_seed(mix_seed(seed, h), static_cast<std::uint64_t>(occ)));
      for (int l = 0; l < L; ++l) {
        for (int k = 0; k < d_z; ++k) aug.eps(o * L + l, k) = rng.normal();
      }
    }
  }
  return aug;
}

// ---------------------------------------------------------------------------

struct ConfounderProblem::Impl {
  Eigen::MatrixXd U;          // N x (dx+1) q-kernel inputs
  Eigen::MatrixXd D2q, D2qa;  // fixed squared distances on the q side
  Eigen::MatrixXd xaug;       // M x dx
  Eigen::VectorXd waug;       // M
  Eigen::VectorXd yaug;       // M, likelihood scale
  Eigen::VectorXd w_obs;      // N
  std::vector<std::pair<int, int>> obs_spans, row_spans, za_spans, qa_spans;
  std::vector<int> za_obs;  // observation of each z anchor row
  int dx = 0, dz = 0, N = 0, M = 0, L = 1, Ma = 0, Nq = 0, P = 1;

  struct Offsets {
    int y0, y1, w, x, q0, q1, ls, sq, th, total;
  };
  Offsets offsets(bool learn_ls, bool learn_sq, int n_theta, int dx_, int dz_, int Ma_,
                  int Nq_) const {
    Offsets o{};
    o.y0 = 0;
    o.y1 = o.y0 + Ma_;
    o.w = o.y1 + Ma_;
    o.x = o.w + Ma_;
    o.q0 = o.x + Ma_ * dx_;
    o.q1 = o.q0 + Nq_ * dz_;
    o.ls = o.q1 + Nq_ * dz_;
    o.sq = o.ls + (learn_ls ? 6 : 0);
    o.th = o.sq + (learn_sq ? 1 : 0);
    o.total = o.th + n_theta;
    return o;
  }
};

ConfounderProblem::ConfounderProblem(AugmentedDataset aug, std::vector<ProxyType> proxy_types,
                                     StructuralConfig config, Regularizers gammas,
                                     Standardizer y_std, std::vector<int> z_anchor_rows,
                                     std::vector<int> q_anchor_obs, bool learn_lengthscales,
                                     bool learn_sigma_q)
    : impl_(std::make_shared<Impl>()),
      aug_(std::move(aug)),
      proxy_types_(std::move(proxy_types)),
      config_(config),
      gammas_(gammas),
      y_std_(y_std),
      z_anchor_rows_(std::move(z_anchor_rows)),
      q_anchor_obs_(std::move(q_anchor_obs)),
      learn_lengthscales_(learn_lengthscales),
      learn_sigma_q_(learn_sigma_q) {
  Impl& im = *impl_;
  im.dx = static_cast<int>(proxy_types_.size());
  im.dz = config_.d_z;
  im.N = aug_.n_obs();
  im.L = aug_.L;
  im.M = aug_.n_rows();
  im.Ma = static_cast<int>(z_anchor_rows_.size());
  im.Nq = static_cast<int>(q_anchor_obs_.size());
  im.P = aug_.num_pops;
  if (aug_.x.cols() != im.dx) throw ShapeMismatch("proxy type list disagrees with data");

  im.w_obs = aug_.w;
  im.U.resize(im.N, im.dx + 1);
  im.U.leftCols(im.dx) = aug_.x;
  for (int o = 0; o < im.N; ++o) im.U(o, im.dx) = y_std_.apply(aug_.y(o));

  Eigen::MatrixXd Uq(im.Nq, im.dx + 1);
  std::vector<int> qa_pop(static_cast<std::size_t>(im.Nq));
  for (int j = 0; j < im.Nq; ++j) {
    const int o = q_anchor_obs_[static_cast<std::size_t>(j)];
    Uq.row(j) = im.U.row(o);
    qa_pop[static_cast<std::size_t>(j)] = aug_.pop_of_obs[static_cast<std::size_t>(o)];
  }
  im.D2q = pairwise_sqdist(im.U, Uq);
  im.D2qa = pairwise_sqdist(Uq, Uq);

  im.xaug.resize(im.M, im.dx);
  im.waug.resize(im.M);
  im.yaug.resize(im.M);
  const bool cont = config_.outcome_kind == OutcomeKind::Continuous;
  for (int o = 0; o < im.N; ++o) {
    const double ylik = cont ? y_std_.apply(aug_.y(o)) : aug_.y(o);
    for (int l = 0; l < im.L; ++l) {
      const int r = o * im.L + l;
      im.xaug.row(r) = aug_.x.row(o);
      im.waug(r) = aug_.w(o);
      im.yaug(r) = ylik;
    }
  }

  im.obs_spans = aug_.pop_spans;
  im.row_spans.clear();
  for (auto [b, e] : im.obs_spans) im.row_spans.emplace_back(b * im.L, e * im.L);
  std::vector<int> za_pop(static_cast<std::size_t>(im.Ma));
  im.za_obs.resize(static_cast<std::size_t>(im.Ma));
  for (int j = 0; j < im.Ma; ++j) {
    const int r = z_anchor_rows_[static_cast<std::size_t>(j)];
    const int o = r / im.L;
    im.za_obs[static_cast<std::size_t>(j)] = o;
    za_pop[static_cast<std::size_t>(j)] = aug_.pop_of_obs[static_cast<std::size_t>(o)];
  }
  im.za_spans = spans_from_pops(za_pop, im.P);
  im.qa_spans = spans_from_pops(qa_pop, im.P);
}

int ConfounderProblem::dim(const Level1Params& shape) const {
  const Impl& im = *impl_;
  return im
      .offsets(learn_lengthscales_, learn_sigma_q_, shape.lambda.free_count(), im.dx, im.dz,
               im.Ma, im.Nq)
      .total;
}

Eigen::VectorXd ConfounderProblem::pack(const Level1Params& p) const {
  const Impl& im = *impl_;
  const auto off = im.offsets(learn_lengthscales_, learn_sigma_q_, p.lambda.free_count(), im.dx,
                              im.dz, im.Ma, im.Nq);
  Eigen::VectorXd x(off.total);
  x.segment(off.y0, im.Ma) = p.lik.alpha_y0;
  x.segment(off.y1, im.Ma) = p.lik.alpha_y1;
  x.segment(off.w, im.Ma) = p.lik.alpha_w;
  x.segment(off.x, im.Ma * im.dx) = Eigen::Map<const Eigen::VectorXd>(p.lik.alpha_x.data(), im.Ma * im.dx);
  x.segment(off.q0, im.Nq * im.dz) = Eigen::Map<const Eigen::VectorXd>(p.var.alpha_q0.data(), im.Nq * im.dz);
  x.segment(off.q1, im.Nq * im.dz) = Eigen::Map<const Eigen::VectorXd>(p.var.alpha_q1.data(), im.Nq * im.dz);
  if (learn_lengthscales_) {
    x(off.ls + 0) = std::log(p.lik.k_y0.lengthscale);
    x(off.ls + 1) = std::log(p.lik.k_y1.lengthscale);
    x(off.ls + 2) = std::log(p.lik.k_w.lengthscale);
    x(off.ls + 3) = std::log(p.lik.k_x.lengthscale);
    x(off.ls + 4) = std::log(p.var.k_q0.lengthscale);
    x(off.ls + 5) = std::log(p.var.k_q1.lengthscale);
  }
  if (learn_sigma_q_) x(off.sq) = std::log(p.var.sigma_q);
  if (p.lambda.free_count() > 0) x.segment(off.th, p.lambda.free_count()) = p.lambda.thetas();
  return x;
}

Level1Params ConfounderProblem::unpack(const Eigen::VectorXd& x, const Level1Params& shape) const {
  const Impl& im = *impl_;
  const auto off = im.offsets(learn_lengthscales_, learn_sigma_q_, shape.lambda.free_count(),
                              im.dx, im.dz, im.Ma, im.Nq);
  Level1Params p = shape;
  p.lik.alpha_y0 = x.segment(off.y0, im.Ma);
  p.lik.alpha_y1 = x.segment(off.y1, im.Ma);
  p.lik.alpha_w = x.segment(off.w, im.Ma);
  p.lik.alpha_x = Eigen::Map<const Eigen::MatrixXd>(x.data() + off.x, im.Ma, im.dx);
  p.var.alpha_q0 = Eigen::Map<const Eigen::MatrixXd>(x.data() + off.q0, im.Nq, im.dz);
  p.var.alpha_q1 = Eigen::Map<const Eigen::MatrixXd>(x.data() + off.q1, im.Nq, im.dz);
  if (learn_lengthscales_) {
    p.lik.k_y0.lengthscale = std::exp(x(off.ls + 0));
    p.lik.k_y1.lengthscale = std::exp(x(off.ls + 1));
    p.lik.k_w.lengthscale = std::exp(x(off.ls + 2));
    p.lik.k_x.lengthscale = std::exp(x(off.ls + 3));
    p.var.k_q0.lengthscale = std::exp(x(off.ls + 4));
    p.var.k_q1.lengthscale = std::exp(x(off.ls + 5));
  }
  if (learn_sigma_q_) p.var.sigma_q = std::exp(x(off.sq));
  if (shape.lambda.free_count() > 0) {
    p.lambda.set_thetas(x.segment(off.th, shape.lambda.free_count()));
  }
  return p;
}

namespace {

// Gradient pieces of one representer block whose inputs are the latent draws.
// K is Lambda-scaled; D2/D2a are raw squared distances. Accumulates the
// eval-point, anchor-point and regularizer contributions into Zgrad (rows of
// the full augmented set) and returns dJ/dA, dJ/dlog(ell) and, when asked,
// the per-population-pair dJ/dLambda sums.
struct ZBlockGrad {
  Eigen::MatrixXd dA;
  double dlog_ell = 0.0;
};

ZBlockGrad z_block_grad(const Eigen::MatrixXd& K, const Eigen::MatrixXd& Ka,
                        const Eigen::MatrixXd& D2, const Eigen::MatrixXd& D2a,
                        const Eigen::MatrixXd& A, const Eigen::MatrixXd& G,
                        const Eigen::MatrixXd& F, double gamma, double ell,
                        const Eigen::MatrixXd& Z, const Eigen::MatrixXd& Za,
                        const std::vector<int>& za_rows, Eigen::MatrixXd& Zgrad,
                        const std::vector<std::pair<int, int>>& row_spans,
                        const std::vector<std::pair<int, int>>& za_spans,
                        const Eigen::MatrixXd& lambda, double amplitude,
                        Eigen::MatrixXd* dLam) {
  const auto M = K.rows();
  const auto Ma = K.cols();
  const auto dout = A.cols();
  const auto dz = Z.cols();
  const double inv_l2 = 1.0 / (ell * ell);

  ZBlockGrad out;
  Eigen::MatrixXd KtG = K.transpose() * G;  // Ma x dout
  out.dA = KtG + 2.0 * gamma * (Ka * A);

  // eval-side: dJ/dz_r -= (1/l^2) [ t_r z_r - sum_j T_rj zeta_j ]
  Eigen::VectorXd t = F.cwiseProduct(G).rowwise().sum();
  Eigen::MatrixXd W(Ma, dout * dz);
  for (Eigen::Index k = 0; k < dout; ++k)
    for (Eigen::Index d = 0; d < dz; ++d)
      W.col(k * dz + d) = A.col(k).cwiseProduct(Za.col(d));
  Eigen::MatrixXd P = K * W;  // M x dout*dz
  Eigen::MatrixXd TZa = Eigen::MatrixXd::Zero(M, dz);
  for (Eigen::Index k = 0; k < dout; ++k)
    for (Eigen::Index d = 0; d < dz; ++d)
      TZa.col(d) += G.col(k).cwiseProduct(P.col(k * dz + d));
  Zgrad.noalias() += -inv_l2 * ((Z.array().colwise() * t.array()).matrix() - TZa);

  // anchor-side: dJ/dzeta_j += (1/l^2) [ (T^T Z)_j - u_j zeta_j ]
  Eigen::VectorXd u = KtG.cwiseProduct(A).rowwise().sum();
  Eigen::MatrixXd V(M, dout * dz);
  for (Eigen::Index k = 0; k < dout; ++k)
    for (Eigen::Index d = 0; d < dz; ++d)
      V.col(k * dz + d) = G.col(k).cwiseProduct(Z.col(d));
  Eigen::MatrixXd Pa = K.transpose() * V;  // Ma x dout*dz
  Eigen::MatrixXd TtZ = Eigen::MatrixXd::Zero(Ma, dz);
  for (Eigen::Index k = 0; k < dout; ++k)
    for (Eigen::Index d = 0; d < dz; ++d)
      TtZ.col(d) += A.col(k).cwiseProduct(Pa.col(k * dz + d));

  // regularizer: dR/dzeta_j = -(2 gamma/l^2) [ qrow_j zeta_j - (Q Za)_j ]
  Eigen::MatrixXd Q = (A * A.transpose()).cwiseProduct(Ka);
  Eigen::VectorXd qrow = Q.rowwise().sum();
  Eigen::MatrixXd QZ = Q * Za;
  for (Eigen::Index j = 0; j < Ma; ++j) {
    const int r = za_rows[static_cast<std::size_t>(j)];
    Zgrad.row(r) += inv_l2 * (TtZ.row(j) - u(j) * Za.row(j));
    Zgrad.row(r) += (-2.0 * gamma * inv_l2) * (qrow(j) * Za.row(j) - QZ.row(j));
  }

  // lengthscale: dK/dlog l = K D2 / l^2 entrywise
  Eigen::MatrixXd KD2 = K.cwiseProduct(D2);
  double s1 = G.cwiseProduct(KD2 * A).sum();
  double s2 = A.cwiseProduct((Ka.cwiseProduct(D2a)) * A).sum();
  out.dlog_ell = (s1 + gamma * s2) * inv_l2;

  if (dLam != nullptr) {
    const int Pn = static_cast<int>(lambda.rows());
    for (int a = 0; a < Pn; ++a) {
      const auto [r0, r1] = row_spans[static_cast<std::size_t>(a)];
      const auto [ar0, ar1] = za_spans[static_cast<std::size_t>(a)];
      for (int b = 0; b < Pn; ++b) {
        if (a == b) continue;
        const auto [c0, c1] = za_spans[static_cast<std::size_t>(b)];
        double contrib = 0.0;
        if (r1 > r0 && c1 > c0) {
          contrib += G.middleRows(r0, r1 - r0)
                         .cwiseProduct(K.block(r0, c0, r1 - r0, c1 - c0) *
                                       A.middleRows(c0, c1 - c0))
                         .sum();
        }
        if (ar1 > ar0 && c1 > c0) {
          contrib += gamma * A.middleRows(ar0, ar1 - ar0)
                                 .cwiseProduct(Ka.block(ar0, c0, ar1 - ar0, c1 - c0) *
                                               A.middleRows(c0, c1 - c0))
                                 .sum();
        }
        if (contrib != 0.0) {
          const double f = lambda(a, b);
          if (f > 1e-12) {
            (*dLam)(a, b) += contrib / f;
          } else {
            // factor underflowed: recompute from raw distances
            double raw = 0.0;
            if (r1 > r0 && c1 > c0) {
              const Eigen::MatrixXd base =
                  rbf_from_sqdist(D2.block(r0, c0, r1 - r0, c1 - c0), ell, amplitude);
              raw += G.middleRows(r0, r1 - r0)
                         .cwiseProduct(base * A.middleRows(c0, c1 - c0))
                         .sum();
            }
            if (ar1 > ar0 && c1 > c0) {
              const Eigen::MatrixXd base =
                  rbf_from_sqdist(D2a.block(ar0, c0, ar1 - ar0, c1 - c0), ell, amplitude);
              raw += gamma * A.middleRows(ar0, ar1 - ar0)
                                 .cwiseProduct(base * A.middleRows(c0, c1 - c0))
                                 .sum();
            }
            (*dLam)(a, b) += raw;
          }
        }
      }
    }
  }
  return out;
}

// Same for blocks with fixed kernel inputs (the q functions).
struct FixedBlockGrad {
  Eigen::MatrixXd dA;
  double dlog_ell = 0.0;
};

FixedBlockGrad fixed_block_grad(const Eigen::MatrixXd& K, const Eigen::MatrixXd& Ka,
                                const Eigen::MatrixXd& D2, const Eigen::MatrixXd& D2a,
                                const Eigen::MatrixXd& A, const Eigen::MatrixXd& G,
                                double gamma, double ell,
                                const std::vector<std::pair<int, int>>& row_spans,
                                const std::vector<std::pair<int, int>>& col_spans,
                                const Eigen::MatrixXd& lambda, double amplitude,
                                Eigen::MatrixXd* dLam) {
  FixedBlockGrad out;
  out.dA = K.transpose() * G + 2.0 * gamma * (Ka * A);
  const double inv_l2 = 1.0 / (ell * ell);
  double s1 = G.cwiseProduct((K.cwiseProduct(D2)) * A).sum();
  double s2 = A.cwiseProduct((Ka.cwiseProduct(D2a)) * A).sum();
  out.dlog_ell = (s1 + gamma * s2) * inv_l2;

  if (dLam != nullptr) {
    const int Pn = static_cast<int>(lambda.rows());
    for (int a = 0; a < Pn; ++a) {
      const auto [r0, r1] = row_spans[static_cast<std::size_t>(a)];
      const auto [ar0, ar1] = col_spans[static_cast<std::size_t>(a)];
      for (int b = 0; b < Pn; ++b) {
        if (a == b) continue;
        const auto [c0, c1] = col_spans[static_cast<std::size_t>(b)];
        double contrib = 0.0;
        if (r1 > r0 && c1 > c0) {
          contrib += G.middleRows(r0, r1 - r0)
                         .cwiseProduct(K.block(r0, c0, r1 - r0, c1 - c0) *
                                       A.middleRows(c0, c1 - c0))
                         .sum();
        }
        if (ar1 > ar0 && c1 > c0) {
          contrib += gamma * A.middleRows(ar0, ar1 - ar0)
                                 .cwiseProduct(Ka.block(ar0, c0, ar1 - ar0, c1 - c0) *
                                               A.middleRows(c0, c1 - c0))
                                 .sum();
        }
        if (contrib != 0.0) {
          const double f = lambda(a, b);
          if (f > 1e-12) {
            (*dLam)(a, b) += contrib / f;
          } else {
            double raw = 0.0;
            if (r1 > r0 && c1 > c0) {
              const Eigen::MatrixXd base =
                  rbf_from_sqdist(D2.block(r0, c0, r1 - r0, c1 - c0), ell, amplitude);
              raw += G.middleRows(r0, r1 - r0)
                         .cwiseProduct(base * A.middleRows(c0, c1 - c0))
                         .sum();
            }
            if (ar1 > ar0 && c1 > c0) {
              const Eigen::MatrixXd base =
                  rbf_from_sqdist(D2a.block(ar0, c0, ar1 - ar0, c1 - c0), ell, amplitude);
              raw += gamma * A.middleRows(ar0, ar1 - ar0)
                                 .cwiseProduct(base * A.middleRows(c0, c1 - c0))
                                 .sum();
            }
            (*dLam)(a, b) += raw;
          }
        }
      }
    }
  }
  return out;
}

}  // namespace

double ConfounderProblem::objective(const Eigen::VectorXd& xparams, const Level1Params& shape,
                                    Eigen::VectorXd* grad) const {
  const Impl& im = *impl_;
  const auto off = im.offsets(learn_lengthscales_, learn_sigma_q_, shape.lambda.free_count(),
                              im.dx, im.dz, im.Ma, im.Nq);
  if (xparams.size() != off.total) throw ShapeMismatch("flat parameter size mismatch");
  const Level1Params p = unpack(xparams, shape);
  const bool want_grad = grad != nullptr;
  const bool want_lam = want_grad && p.lambda.learnable();

  const double sq = p.var.sigma_q;
  const double sz = config_.sigma_z;
  const double sy = config_.sigma_y;
  const bool cont_y = config_.outcome_kind == OutcomeKind::Continuous;
  const double invL = 1.0 / static_cast<double>(im.L);
  const Eigen::MatrixXd lambda = p.lambda.matrix();

  // --- q grams and posterior means
  Eigen::MatrixXd Kq0 = rbf_from_sqdist(im.D2q, p.var.k_q0.lengthscale, p.var.k_q0.amplitude);
  apply_factor_blocks(Kq0, im.obs_spans, im.qa_spans, lambda);
  Eigen::MatrixXd Kq1 = rbf_from_sqdist(im.D2q, p.var.k_q1.lengthscale, p.var.k_q1.amplitude);
  apply_factor_blocks(Kq1, im.obs_spans, im.qa_spans, lambda);
  Eigen::MatrixXd Kq0a = rbf_from_sqdist(im.D2qa, p.var.k_q0.lengthscale, p.var.k_q0.amplitude);
  apply_factor_blocks(Kq0a, im.qa_spans, im.qa_spans, lambda);
  Kq0a.diagonal().array() += kernel_jitter(p.var.k_q0);
  Eigen::MatrixXd Kq1a = rbf_from_sqdist(im.D2qa, p.var.k_q1.lengthscale, p.var.k_q1.amplitude);
  apply_factor_blocks(Kq1a, im.qa_spans, im.qa_spans, lambda);
  Kq1a.diagonal().array() += kernel_jitter(p.var.k_q1);

  Eigen::MatrixXd m0 = Kq0 * p.var.alpha_q0;  // N x dz
  Eigen::MatrixXd m1 = Kq1 * p.var.alpha_q1;
  Eigen::MatrixXd mq(im.N, im.dz);
  for (int d = 0; d < im.dz; ++d) {
    mq.col(d) = im.w_obs.cwiseProduct(m1.col(d)) +
                (Eigen::VectorXd::Ones(im.N) - im.w_obs).cwiseProduct(m0.col(d));
  }

  // --- latent draws
  Eigen::MatrixXd Z(im.M, im.dz);
  for (int o = 0; o < im.N; ++o) {
    for (int l = 0; l < im.L; ++l) {
      Z.row(o * im.L + l) = mq.row(o) + sq * aug_.eps.row(o * im.L + l);
    }
  }
  Eigen::MatrixXd Za(im.Ma, im.dz);
  for (int j = 0; j < im.Ma; ++j) Za.row(j) = Z.row(z_anchor_rows_[static_cast<std::size_t>(j)]);

  Eigen::MatrixXd D2z = pairwise_sqdist(Z, Za);
  Eigen::MatrixXd D2za = pairwise_sqdist(Za, Za);

  double J = 0.0;

  // --- KL
  J += static_cast<double>(im.N) * im.dz *
           (std::log(sz / sq) + sq * sq / (2.0 * sz * sz) - 0.5) +
       mq.squaredNorm() / (2.0 * sz * sz);

  auto make_gram = [&](double ell, double amp) {
    Eigen::MatrixXd K = rbf_from_sqdist(D2z, ell, amp);
    apply_factor_blocks(K, im.row_spans, im.za_spans, lambda);
    return K;
  };
  auto make_gram_a = [&](double ell, double amp) {
    Eigen::MatrixXd Ka = rbf_from_sqdist(D2za, ell, amp);
    apply_factor_blocks(Ka, im.za_spans, im.za_spans, lambda);
    Ka.diagonal().array() += 1e-6 * amp;
    return Ka;
  };

  Eigen::MatrixXd Zgrad;
  Eigen::MatrixXd dLam;
  if (want_grad) Zgrad = Eigen::MatrixXd::Zero(im.M, im.dz);
  if (want_lam) dLam = Eigen::MatrixXd::Zero(im.P, im.P);

  Eigen::VectorXd dA_y0, dA_y1, dA_w;
  Eigen::MatrixXd dA_x;
  double dl_y0 = 0, dl_y1 = 0, dl_w = 0, dl_x = 0;

  {
    // --- outcome block (both arms share the likelihood through the gate)
    Eigen::MatrixXd Ky0 = make_gram(p.lik.k_y0.lengthscale, p.lik.k_y0.amplitude);
    Eigen::MatrixXd Ky0a = make_gram_a(p.lik.k_y0.lengthscale, p.lik.k_y0.amplitude);
    Eigen::MatrixXd Ky1 = make_gram(p.lik.k_y1.lengthscale, p.lik.k_y1.amplitude);
    Eigen::MatrixXd Ky1a = make_gram_a(p.lik.k_y1.lengthscale, p.lik.k_y1.amplitude);
    Eigen::VectorXd f0 = Ky0 * p.lik.alpha_y0;
    Eigen::VectorXd f1 = Ky1 * p.lik.alpha_y1;
    Eigen::VectorXd tgate =
        im.waug.cwiseProduct(f1) + (Eigen::VectorXd::Ones(im.M) - im.waug).cwiseProduct(f0);

    Eigen::VectorXd dt(im.M);
    if (cont_y) {
      const Eigen::ArrayXd resid = tgate.array() - im.yaug.array();
      J += invL * (0.5 * resid.square().sum() / (sy * sy) +
                   0.5 * im.M * (kLog2Pi + 2.0 * std::log(sy)));
      dt = (invL / (sy * sy)) * resid.matrix();
    } else {
      const Eigen::ArrayXd tarr = tgate.array();
      J += invL * (softplus_arr(tarr) - im.yaug.array() * tarr).sum();
      dt = invL * (logistic_arr(tarr) - im.yaug.array()).matrix();
    }
    J += gammas_.y0 * p.lik.alpha_y0.dot(Ky0a * p.lik.alpha_y0);
    J += gammas_.y1 * p.lik.alpha_y1.dot(Ky1a * p.lik.alpha_y1);

    if (want_grad) {
      const Eigen::MatrixXd G0 =
          ((Eigen::VectorXd::Ones(im.M) - im.waug).cwiseProduct(dt)).eval();
      const Eigen::MatrixXd G1 = (im.waug.cwiseProduct(dt)).eval();
      auto r0 = z_block_grad(Ky0, Ky0a, D2z, D2za, p.lik.alpha_y0, G0, f0, gammas_.y0,
                             p.lik.k_y0.lengthscale, Z, Za, z_anchor_rows_, Zgrad, im.row_spans,
                             im.za_spans, lambda, p.lik.k_y0.amplitude,
                             want_lam ? &dLam : nullptr);
      dA_y0 = r0.dA;
      dl_y0 = r0.dlog_ell;
      auto r1 = z_block_grad(Ky1, Ky1a, D2z, D2za, p.lik.alpha_y1, G1, f1, gammas_.y1,
                             p.lik.k_y1.lengthscale, Z, Za, z_anchor_rows_, Zgrad, im.row_spans,
                             im.za_spans, lambda, p.lik.k_y1.amplitude,
                             want_lam ? &dLam : nullptr);
      dA_y1 = r1.dA;
      dl_y1 = r1.dlog_ell;
    }
  }

  {
    // --- treatment block
    Eigen::MatrixXd Kw = make_gram(p.lik.k_w.lengthscale, p.lik.k_w.amplitude);
    Eigen::MatrixXd Kwa = make_gram_a(p.lik.k_w.lengthscale, p.lik.k_w.amplitude);
    Eigen::VectorXd fw = Kw * p.lik.alpha_w;
    const Eigen::ArrayXd fwa = fw.array();
    J += invL * (softplus_arr(fwa) - im.waug.array() * fwa).sum();
    J += gammas_.w * p.lik.alpha_w.dot(Kwa * p.lik.alpha_w);
    if (want_grad) {
      const Eigen::MatrixXd Gw = (invL * (logistic_arr(fwa) - im.waug.array())).matrix();
      auto r = z_block_grad(Kw, Kwa, D2z, D2za, p.lik.alpha_w, Gw, fw, gammas_.w,
                            p.lik.k_w.lengthscale, Z, Za, z_anchor_rows_, Zgrad, im.row_spans,
                            im.za_spans, lambda, p.lik.k_w.amplitude,
                            want_lam ? &dLam : nullptr);
      dA_w = r.dA;
      dl_w = r.dlog_ell;
    }
  }

  {
    // --- proxy block
    Eigen::MatrixXd Kx = make_gram(p.lik.k_x.lengthscale, p.lik.k_x.amplitude);
    Eigen::MatrixXd Kxa = make_gram_a(p.lik.k_x.lengthscale, p.lik.k_x.amplitude);
    Eigen::MatrixXd Fx = Kx * p.lik.alpha_x;  // M x dx
    Eigen::MatrixXd Gx(im.M, im.dx);
    for (int k = 0; k < im.dx; ++k) {
      if (proxy_types_[static_cast<std::size_t>(k)] == ProxyType::Binary) {
        const Eigen::ArrayXd f = Fx.col(k).array();
        J += invL * (softplus_arr(f) - im.xaug.col(k).array() * f).sum();
        Gx.col(k) = invL * (logistic_arr(f) - im.xaug.col(k).array()).matrix();
      } else {
        const Eigen::ArrayXd resid = Fx.col(k).array() - im.xaug.col(k).array();
        J += invL * (0.5 * resid.square().sum() + 0.5 * im.M * kLog2Pi);
        Gx.col(k) = invL * resid.matrix();
      }
    }
    J += gammas_.x * (p.lik.alpha_x.cwiseProduct(Kxa * p.lik.alpha_x)).sum();
    if (want_grad) {
      auto r = z_block_grad(Kx, Kxa, D2z, D2za, p.lik.alpha_x, Gx, Fx, gammas_.x,
                            p.lik.k_x.lengthscale, Z, Za, z_anchor_rows_, Zgrad, im.row_spans,
                            im.za_spans, lambda, p.lik.k_x.amplitude,
                            want_lam ? &dLam : nullptr);
      dA_x = r.dA;
      dl_x = r.dlog_ell;
    }
  }

  // --- q regularizers
  J += gammas_.q0 * (p.var.alpha_q0.cwiseProduct(Kq0a * p.var.alpha_q0)).sum();
  J += gammas_.q1 * (p.var.alpha_q1.cwiseProduct(Kq1a * p.var.alpha_q1)).sum();

  if (!std::isfinite(J)) return std::numeric_limits<double>::infinity();
  if (!want_grad) return J;

  // --- chain through the posterior means
  Eigen::MatrixXd Mgrad = mq / (sz * sz);  // KL part
  for (int o = 0; o < im.N; ++o) {
    for (int l = 0; l < im.L; ++l) Mgrad.row(o) += Zgrad.row(o * im.L + l);
  }
  Eigen::MatrixXd G1m(im.N, im.dz), G0m(im.N, im.dz);
  for (int d = 0; d < im.dz; ++d) {
    G1m.col(d) = im.w_obs.cwiseProduct(Mgrad.col(d));
    G0m.col(d) = (Eigen::VectorXd::Ones(im.N) - im.w_obs).cwiseProduct(Mgrad.col(d));
  }
  auto rq0 = fixed_block_grad(Kq0, Kq0a, im.D2q, im.D2qa, p.var.alpha_q0, G0m, gammas_.q0,
                              p.var.k_q0.lengthscale, im.obs_spans, im.qa_spans, lambda,
                              p.var.k_q0.amplitude, want_lam ? &dLam : nullptr);
  auto rq1 = fixed_block_grad(Kq1, Kq1a, im.D2q, im.D2qa, p.var.alpha_q1, G1m, gammas_.q1,
                              p.var.k_q1.lengthscale, im.obs_spans, im.qa_spans, lambda,
                              p.var.k_q1.amplitude, want_lam ? &dLam : nullptr);

  grad->resize(off.total);
  grad->segment(off.y0, im.Ma) = dA_y0;
  grad->segment(off.y1, im.Ma) = dA_y1;
  grad->segment(off.w, im.Ma) = dA_w;
  grad->segment(off.x, im.Ma * im.dx) =
      Eigen::Map<const Eigen::VectorXd>(dA_x.data(), im.Ma * im.dx);
  grad->segment(off.q0, im.Nq * im.dz) =
      Eigen::Map<const Eigen::VectorXd>(rq0.dA.data(), im.Nq * im.dz);
  grad->segment(off.q1, im.Nq * im.dz) =
      Eigen::Map<const Eigen::VectorXd>(rq1.dA.data(), im.Nq * im.dz);
  if (learn_lengthscales_) {
    (*grad)(off.ls + 0) = dl_y0;
    (*grad)(off.ls + 1) = dl_y1;
    (*grad)(off.ls + 2) = dl_w;
    (*grad)(off.ls + 3) = dl_x;
    (*grad)(off.ls + 4) = rq0.dlog_ell;
    (*grad)(off.ls + 5) = rq1.dlog_ell;
  }
  if (learn_sigma_q_) {
    double drho = static_cast<double>(im.N) * im.dz * (sq * sq / (sz * sz) - 1.0);
    drho += sq * Zgrad.cwiseProduct(aug_.eps).sum();
    (*grad)(off.sq) = drho;
  }
  if (shape.lambda.free_count() > 0) {
    if (want_lam) {
      grad->segment(off.th, shape.lambda.free_count()) = p.lambda.chain_theta_grad(dLam);
    } else {
      grad->segment(off.th, shape.lambda.free_count()).setZero();
    }
  }
  return J;
}

double ConfounderProblem::objective(const Level1Params& p) const {
  return objective(pack(p), p, nullptr);
}

double ConfounderProblem::neg_elbo(const Level1Params& p) const {
  // objective minus the RKHS penalties
  Level1Params q = p;
  const double J = objective(pack(q), q, nullptr);
  const Impl& im = *impl_;
  const Eigen::MatrixXd lambda = p.lambda.matrix();
  double reg = 0.0;
  auto quad = [&](const Eigen::MatrixXd& A, double ell, double amp, double gamma,
                  const Eigen::MatrixXd& D2a, const std::vector<std::pair<int, int>>& spans) {
    Eigen::MatrixXd Ka = rbf_from_sqdist(D2a, ell, amp);
    apply_factor_blocks(Ka, spans, spans, lambda);
    Ka.diagonal().array() += 1e-6 * amp;
    return gamma * A.cwiseProduct(Ka * A).sum();
  };
  const Eigen::MatrixXd Z = materialize_z(p);
  Eigen::MatrixXd Za(im.Ma, im.dz);
  for (int j = 0; j < im.Ma; ++j) Za.row(j) = Z.row(z_anchor_rows_[static_cast<std::size_t>(j)]);
  const Eigen::MatrixXd D2za = pairwise_sqdist(Za, Za);
  reg += quad(p.lik.alpha_y0, p.lik.k_y0.lengthscale, p.lik.k_y0.amplitude, gammas_.y0, D2za,
              im.za_spans);
  reg += quad(p.lik.alpha_y1, p.lik.k_y1.lengthscale, p.lik.k_y1.amplitude, gammas_.y1, D2za,
              im.za_spans);
  reg += quad(p.lik.alpha_w, p.lik.k_w.lengthscale, p.lik.k_w.amplitude, gammas_.w, D2za,
              im.za_spans);
  reg += quad(p.lik.alpha_x, p.lik.k_x.lengthscale, p.lik.k_x.amplitude, gammas_.x, D2za,
              im.za_spans);
  reg += quad(p.var.alpha_q0, p.var.k_q0.lengthscale, p.var.k_q0.amplitude, gammas_.q0, im.D2qa,
              im.qa_spans);
  reg += quad(p.var.alpha_q1, p.var.k_q1.lengthscale, p.var.k_q1.amplitude, gammas_.q1, im.D2qa,
              im.qa_spans);
  return J - reg;
}

Eigen::MatrixXd ConfounderProblem::posterior_means(const Level1Params& p) const {
  const Impl& im = *impl_;
  const Eigen::MatrixXd lambda = p.lambda.matrix();
  Eigen::MatrixXd Kq0 = rbf_from_sqdist(im.D2q, p.var.k_q0.lengthscale, p.var.k_q0.amplitude);
  apply_factor_blocks(Kq0, im.obs_spans, im.qa_spans, lambda);
  Eigen::MatrixXd Kq1 = rbf_from_sqdist(im.D2q, p.var.k_q1.lengthscale, p.var.k_q1.amplitude);
  apply_factor_blocks(Kq1, im.obs_spans, im.qa_spans, lambda);
  Eigen::MatrixXd m0 = Kq0 * p.var.alpha_q0;
  Eigen::MatrixXd m1 = Kq1 * p.var.alpha_q1;
  Eigen::MatrixXd mq(im.N, im.dz);
  for (int d = 0; d < im.dz; ++d) {
    mq.col(d) = im.w_obs.cwiseProduct(m1.col(d)) +
                (Eigen::VectorXd::Ones(im.N) - im.w_obs).cwiseProduct(m0.col(d));
  }
  return mq;
}

Eigen::MatrixXd ConfounderProblem::materialize_z(const Level1Params& p) const {
  const Impl& im = *impl_;
  const Eigen::MatrixXd mq = posterior_means(p);
  Eigen::MatrixXd Z(im.M, im.dz);
  for (int o = 0; o < im.N; ++o) {
    for (int l = 0; l < im.L; ++l) {
      Z.row(o * im.L + l) = mq.row(o) + p.var.sigma_q * aug_.eps.row(o * im.L + l);
    }
  }
  return Z;
}

double ConfounderProblem::hessian_block_min_eig(const Level1Params& p, LikBlock block) const {
  const Impl& im = *impl_;
  const double invL = 1.0 / static_cast<double>(im.L);
  const double sy = config_.sigma_y;
  const bool cont_y = config_.outcome_kind == OutcomeKind::Continuous;
  const Eigen::MatrixXd lambda = p.lambda.matrix();

  const Eigen::MatrixXd Z = materialize_z(p);
  Eigen::MatrixXd Za(im.Ma, im.dz);
  for (int j = 0; j < im.Ma; ++j) Za.row(j) = Z.row(z_anchor_rows_[static_cast<std::size_t>(j)]);
  const Eigen::MatrixXd D2z = pairwise_sqdist(Z, Za);
  const Eigen::MatrixXd D2za = pairwise_sqdist(Za, Za);

  auto build = [&](const BaseKernelSpec& k) {
    Eigen::MatrixXd K = rbf_from_sqdist(D2z, k.lengthscale, k.amplitude);
    apply_factor_blocks(K, im.row_spans, im.za_spans, lambda);
    Eigen::MatrixXd Ka = rbf_from_sqdist(D2za, k.lengthscale, k.amplitude);
    apply_factor_blocks(Ka, im.za_spans, im.za_spans, lambda);
    Ka.diagonal().array() += kernel_jitter(k);
    return std::make_pair(std::move(K), std::move(Ka));
  };
  auto min_eig = [&](const Eigen::MatrixXd& K, const Eigen::MatrixXd& Ka,
                     const Eigen::VectorXd& weights, double gamma) {
    Eigen::MatrixXd H = K.transpose() * weights.asDiagonal() * K + 2.0 * gamma * Ka;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H, Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
  };

  switch (block) {
    case LikBlock::Y0:
    case LikBlock::Y1: {
      const bool arm1 = block == LikBlock::Y1;
      auto [K, Ka] = build(arm1 ? p.lik.k_y1 : p.lik.k_y0);
      const Eigen::VectorXd gate =
          arm1 ? im.waug : (Eigen::VectorXd::Ones(im.M) - im.waug).eval();
      Eigen::VectorXd v(im.M);
      if (cont_y) {
        v = gate * (invL / (sy * sy));
      } else {
        const Eigen::VectorXd f0 = (arm1 ? K * p.lik.alpha_y1 : K * p.lik.alpha_y0);
        // gated likelihood: rows of the other arm carry zero weight, so the
        // gate times the local curvature is exact
        Eigen::MatrixXd Kother;
        {
          auto other = build(arm1 ? p.lik.k_y0 : p.lik.k_y1);
          Kother = std::move(other.first);
        }
        const Eigen::VectorXd fother =
            arm1 ? Kother * p.lik.alpha_y0 : Kother * p.lik.alpha_y1;
        const Eigen::VectorXd t =
            arm1 ? (im.waug.cwiseProduct(f0) +
                    (Eigen::VectorXd::Ones(im.M) - im.waug).cwiseProduct(fother))
                 : (im.waug.cwiseProduct(fother) +
                    (Eigen::VectorXd::Ones(im.M) - im.waug).cwiseProduct(f0));
        const Eigen::ArrayXd ph = logistic_arr(t.array());
        v = gate.array() * ph * (1.0 - ph) * invL;
      }
      return min_eig(K, Ka, v, arm1 ? gammas_.y1 : gammas_.y0);
    }
    case LikBlock::W: {
      auto [K, Ka] = build(p.lik.k_w);
      const Eigen::ArrayXd ph = logistic_arr((K * p.lik.alpha_w).array());
      const Eigen::VectorXd v = (ph * (1.0 - ph) * invL).matrix();
      return min_eig(K, Ka, v, gammas_.w);
    }
    case LikBlock::X: {
      auto [K, Ka] = build(p.lik.k_x);
      double best = std::numeric_limits<double>::infinity();
      const Eigen::MatrixXd Fx = K * p.lik.alpha_x;
      for (int k = 0; k < im.dx; ++k) {
        Eigen::VectorXd v(im.M);
        if (proxy_types_[static_cast<std::size_t>(k)] == ProxyType::Binary) {
          const Eigen::ArrayXd ph = logistic_arr(Fx.col(k).array());
          v = (ph * (1.0 - ph) * invL).matrix();
        } else {
          v.setConstant(invL);
        }
        best = std::min(best, min_eig(K, Ka, v, gammas_.x));
      }
      return best;
    }
  }
  return 0.0;
}

Objective ConfounderProblem::as_objective(const Level1Params& shape) const {
  return [this, shape](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
    return this->objective(x, shape, g);
  };
}

// ---------------------------------------------------------------------------
// Fitted-model evaluation

namespace {

// Columns scaled by the factor between the target population and each
// anchor's population; new points are always target points.
Eigen::MatrixXd target_gram(const Eigen::MatrixXd& pts, const TaggedPoints& anchors,
                            const BaseKernelSpec& k, const TransferFactors& factors) {
  Eigen::MatrixXd K = rbf_from_sqdist(pairwise_sqdist(pts, anchors.points), k.lengthscale,
                                      k.amplitude);
  const Eigen::MatrixXd lambda = factors.matrix();
  for (int j = 0; j < anchors.n(); ++j) {
    const int pb = anchors.pop_index[static_cast<std::size_t>(j)];
    if (pb != 0) K.col(j) *= lambda(0, pb);
  }
  return K;
}

}  // namespace

Eigen::MatrixXd ConfounderModel::f_q_batch(const Eigen::MatrixXd& x, const Eigen::VectorXd& w,
                                           const Eigen::VectorXd& y_raw) const {
  if (x.cols() != static_cast<Eigen::Index>(proxy_types.size())) {
    throw DimMismatch("proxy dimension disagrees with the model");
  }
  const auto n = x.rows();
  Eigen::MatrixXd U(n, x.cols() + 1);
  U.leftCols(x.cols()) = x;
  for (Eigen::Index i = 0; i < n; ++i) U(i, x.cols()) = y_std.apply(y_raw(i));
  Eigen::MatrixXd out(n, config.d_z);
  const Eigen::MatrixXd K0 = target_gram(U, q_anchors, k_q0, lambda);
  const Eigen::MatrixXd K1 = target_gram(U, q_anchors, k_q1, lambda);
  const Eigen::MatrixXd m0 = K0 * alpha_q0;
  const Eigen::MatrixXd m1 = K1 * alpha_q1;
  for (Eigen::Index i = 0; i < n; ++i) {
    out.row(i) = w(i) * m1.row(i) + (1.0 - w(i)) * m0.row(i);
  }
  return out;
}

Eigen::VectorXd ConfounderModel::f_q(const Eigen::VectorXd& x, double w, double y_raw) const {
  Eigen::MatrixXd xm = x.transpose();
  Eigen::VectorXd wv(1), yv(1);
  wv << w;
  yv << y_raw;
  return f_q_batch(xm, wv, yv).row(0);
}

Eigen::VectorXd ConfounderModel::f_y_batch(int w, const Eigen::MatrixXd& z) const {
  const BaseKernelSpec& k = w == 1 ? k_y1 : k_y0;
  const Eigen::VectorXd& a = w == 1 ? alpha_y1 : alpha_y0;
  return target_gram(z, z_anchors, k, lambda) * a;
}

double ConfounderModel::f_y(int w, const Eigen::VectorXd& z) const {
  return f_y_batch(w, z.transpose())(0);
}

Eigen::VectorXd ConfounderModel::expected_outcome_batch(int w, const Eigen::MatrixXd& z) const {
  Eigen::VectorXd f = f_y_batch(w, z);
  if (config.outcome_kind == OutcomeKind::Binary) {
    return logistic_arr(f.array()).matrix();
  }
  for (Eigen::Index i = 0; i < f.size(); ++i) f(i) = y_std.invert(f(i));
  return f;
}

double ConfounderModel::expected_outcome(int w, const Eigen::VectorXd& z) const {
  return expected_outcome_batch(w, z.transpose())(0);
}

// ---------------------------------------------------------------------------
// Fitting

namespace {

double median_pairwise_distance(const Eigen::MatrixXd& pts, Rng rng) {
  const int n = static_cast<int>(pts.rows());
  const int cap = std::min(n, 256);
  std::vector<int> rows = sample_without_replacement(n, cap, rng);
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(cap) * (cap - 1) / 2);
  for (int i = 0; i < cap; ++i) {
    for (int j = i + 1; j < cap; ++j) {
      d.push_back((pts.row(rows[static_cast<std::size_t>(i)]) -
                   pts.row(rows[static_cast<std::size_t>(j)]))
                      .norm());
    }
  }
  if (d.empty()) return 1.0;
  std::nth_element(d.begin(), d.begin() + static_cast<long>(d.size()) / 2, d.end());
  double med = d[d.size() / 2];
  if (!(med > 1e-8)) {
    double mean = 0.0;
    for (double v : d) mean += v;
    med = mean / static_cast<double>(d.size());
  }
  return med > 1e-8 ? med : 1.0;
}

std::vector<int> anchor_pool(int begin, int end, int budget, Rng rng) {
  const int n = end - begin;
  std::vector<int> rows;
  if (n <= budget) {
    rows.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) rows[static_cast<std::size_t>(i)] = begin + i;
    return rows;
  }
  rows = sample_without_replacement(n, budget, rng);
  for (int& r : rows) r += begin;
  return rows;
}

}  // namespace

ConfounderModel fit_confounder(const MultiSourceDataset& data, const ConfounderFitConfig& cfg,
                               const PopulationData* val_target, ConfounderFitReport* report) {
  const int m = data.m();
  Rng master(cfg.seed);

  Standardizer y_std = Standardizer::fit(data.target.y);
  AugmentedDataset aug =
      resample_augmented(data, cfg.L, cfg.structural.d_z, master.stream("eps").next_u64());

  const bool target_only = cfg.anchors_target_only || cfg.policy == TransferPolicy::None;
  const auto [t_begin, t_end] = aug.pop_spans.front();
  std::vector<int> qa, za;
  {
    Rng rq = master.stream("anchors-q");
    Rng rz = master.stream("anchors-z");
    if (target_only) {
      qa = anchor_pool(t_begin, t_end, cfg.anchor_budget, rq);
      za = anchor_pool(t_begin * cfg.L, t_end * cfg.L, cfg.anchor_budget, rz);
    } else {
      qa = anchor_pool(0, aug.n_obs(), cfg.anchor_budget, rq);
      za = anchor_pool(0, aug.n_rows(), cfg.anchor_budget, rz);
    }
  }

  // kernel initialization: median heuristic on the fixed q inputs and on the
  // state-free latent draws sigma_q_init * eps
  Eigen::MatrixXd U(aug.n_obs(), data.d_x() + 1);
  U.leftCols(data.d_x()) = aug.x;
  for (int o = 0; o < aug.n_obs(); ++o) U(o, data.d_x()) = y_std.apply(aug.y(o));
  const double ell_q = median_pairwise_distance(U, master.stream("ls-q"));
  const double ell_z =
      median_pairwise_distance(cfg.sigma_q_init * aug.eps, master.stream("ls-z"));

  const int Nq = static_cast<int>(qa.size());
  const int Ma = static_cast<int>(za.size());
  Level1Params shape;
  shape.var.alpha_q0 = Eigen::MatrixXd::Zero(Nq, cfg.structural.d_z);
  shape.var.alpha_q1 = shape.var.alpha_q0;
  shape.var.sigma_q = cfg.sigma_q_init;
  shape.var.k_q0.lengthscale = ell_q;
  shape.var.k_q1.lengthscale = ell_q;
  shape.lik.alpha_y0 = Eigen::VectorXd::Zero(Ma);
  shape.lik.alpha_y1 = shape.lik.alpha_y0;
  shape.lik.alpha_w = shape.lik.alpha_y0;
  shape.lik.alpha_x = Eigen::MatrixXd::Zero(Ma, data.d_x());
  shape.lik.k_y0.lengthscale = ell_z;
  shape.lik.k_y1.lengthscale = ell_z;
  shape.lik.k_w.lengthscale = ell_z;
  shape.lik.k_x.lengthscale = ell_z;
  switch (cfg.policy) {
    case TransferPolicy::Adaptive:
      shape.lambda = TransferFactors::adaptive(FactorLevel::L1Lambda, m);
      break;
    case TransferPolicy::Full:
      shape.lambda = TransferFactors::pinned(FactorLevel::L1Lambda, m, 1.0);
      break;
    case TransferPolicy::None:
      shape.lambda = TransferFactors::pinned(FactorLevel::L1Lambda, m, 0.0);
      break;
  }

  // restart initialization streams are keyed by anchor content so matched
  // anchor sets get matched draws across different population layouts
  std::vector<std::uint64_t> qa_hash(qa.size());
  {
    std::vector<double> row(static_cast<std::size_t>(U.cols()));
    for (std::size_t j = 0; j < qa.size(); ++j) {
      const int o = qa[j];
      for (Eigen::Index c = 0; c < U.cols(); ++c) row[static_cast<std::size_t>(c)] = U(o, c);
      qa_hash[j] = hash_doubles(row.data(), row.size());
    }
  }

  auto package = [&](const Level1Params& fitted, const ConfounderProblem& gp) {
    ConfounderModel mdl;
    mdl.config = cfg.structural;
    mdl.proxy_types = data.schema.proxy_types;
    mdl.alpha_y0 = fitted.lik.alpha_y0;
    mdl.alpha_y1 = fitted.lik.alpha_y1;
    mdl.alpha_w = fitted.lik.alpha_w;
    mdl.alpha_x = fitted.lik.alpha_x;
    mdl.alpha_q0 = fitted.var.alpha_q0;
    mdl.alpha_q1 = fitted.var.alpha_q1;
    mdl.k_y0 = fitted.lik.k_y0;
    mdl.k_y1 = fitted.lik.k_y1;
    mdl.k_w = fitted.lik.k_w;
    mdl.k_x = fitted.lik.k_x;
    mdl.k_q0 = fitted.var.k_q0;
    mdl.k_q1 = fitted.var.k_q1;
    mdl.sigma_q = fitted.var.sigma_q;
    mdl.lambda = fitted.lambda;
    mdl.y_std = y_std;
    const Eigen::MatrixXd Z = gp.materialize_z(fitted);
    mdl.z_anchors.points.resize(static_cast<Eigen::Index>(za.size()), cfg.structural.d_z);
    mdl.z_anchors.pop_index.resize(za.size());
    for (std::size_t j = 0; j < za.size(); ++j) {
      mdl.z_anchors.points.row(static_cast<Eigen::Index>(j)) = Z.row(za[j]);
      mdl.z_anchors.pop_index[j] = aug.pop_of_obs[static_cast<std::size_t>(za[j] / aug.L)];
    }
    mdl.q_anchors.points.resize(static_cast<Eigen::Index>(qa.size()), data.d_x() + 1);
    mdl.q_anchors.pop_index.resize(qa.size());
    for (std::size_t j = 0; j < qa.size(); ++j) {
      mdl.q_anchors.points.row(static_cast<Eigen::Index>(j)) = U.row(qa[j]);
      mdl.q_anchors.pop_index[j] = aug.pop_of_obs[static_cast<std::size_t>(qa[j])];
    }
    return mdl;
  };

  ConfounderModel best_model;
  double best_score = std::numeric_limits<double>::infinity();
  bool have_best = false;
  ConfounderFitReport local_report;

  const double init_scale = cfg.alpha_q_init_scale / std::sqrt(static_cast<double>(Nq));
  const std::uint64_t val_seed = master.stream("val-eps").next_u64();

  for (std::size_t gi = 0; gi < cfg.gamma_grid.size(); ++gi) {
    ConfounderProblem gp(aug, data.schema.proxy_types, cfg.structural,
                         Regularizers::uniform(cfg.gamma_grid[gi]), y_std, za, qa,
                         cfg.learn_lengthscales, cfg.learn_sigma_q);
    for (int r = 0; r < cfg.restarts; ++r) {
      Level1Params init = shape;
      // only the variational coefficients differ across restarts
      for (int j = 0; j < Nq; ++j) {
        Rng rng0(mix_seed(mix_seed(cfg.seed, hash_str("init-q0")),
                          mix_seed(static_cast<std::uint64_t>(r),
                                   qa_hash[static_cast<std::size_t>(j)])));
        Rng rng1(mix_seed(mix_seed(cfg.seed, hash_str("init-q1")),
                          mix_seed(static_cast<std::uint64_t>(r),
                                   qa_hash[static_cast<std::size_t>(j)])));
        for (int d = 0; d < cfg.structural.d_z; ++d) {
          init.var.alpha_q0(j, d) = init_scale * rng0.normal();
          init.var.alpha_q1(j, d) = init_scale * rng1.normal();
        }
      }

      RestartRecord rec;
      rec.gamma_index = static_cast<int>(gi);
      rec.restart = r;
      Level1Params fitted = init;
      try {
        OptimResult res = minimize_adam(gp.as_objective(init), gp.pack(init), cfg.opt);
        fitted = gp.unpack(res.x, init);
        rec.final_j = res.value;
        rec.trace = res.trace;
        rec.finite = std::isfinite(res.value);
      } catch (const NonFiniteLoss&) {
        rec.finite = false;
      } catch (const NonFiniteGradient&) {
        rec.finite = false;
      }

      double score = rec.final_j;
      ConfounderModel candidate;
      if (rec.finite) {
        candidate = package(fitted, gp);
        if (val_target != nullptr) {
          score = validation_neg_elbo(candidate, *val_target, cfg.L, val_seed);
        }
      }
      rec.val_score = score;
      local_report.restarts.push_back(rec);

      // strict < keeps the lowest restart index on ties
      if (rec.finite && std::isfinite(score) && score < best_score) {
        best_score = score;
        best_model = std::move(candidate);
        have_best = true;
        local_report.chosen = static_cast<int>(local_report.restarts.size()) - 1;
      }
    }
  }

  if (!have_best) throw NoConvergence("no finite restart in the confounder fit");
  if (report != nullptr) *report = std::move(local_report);
  return best_model;
}

double validation_neg_elbo(const ConfounderModel& model, const PopulationData& val_target,
                           int L, std::uint64_t seed) {
  const int n = val_target.n();
  if (n == 0) return std::numeric_limits<double>::infinity();
  const int dz = model.config.d_z;
  const bool cont = model.config.outcome_kind == OutcomeKind::Continuous;
  const double sy = model.config.sigma_y;
  const double invL = 1.0 / static_cast<double>(L);

  const Eigen::MatrixXd mq = model.f_q_batch(val_target.x, val_target.w, val_target.y);

  Rng rng = Rng(seed).stream("val");
  Eigen::MatrixXd Z(n * L, dz);
  Eigen::VectorXd wrep(n * L), yrep(n * L);
  Eigen::MatrixXd xrep(n * L, val_target.x.cols());
  for (int i = 0; i < n; ++i) {
    for (int l = 0; l < L; ++l) {
      const int r = i * L + l;
      for (int d = 0; d < dz; ++d) Z(r, d) = mq(i, d) + model.sigma_q * rng.normal();
      wrep(r) = val_target.w(i);
      yrep(r) = cont ? model.y_std.apply(val_target.y(i)) : val_target.y(i);
      xrep.row(r) = val_target.x.row(i);
    }
  }

  const Eigen::VectorXd f0 = model.f_y_batch(0, Z);
  const Eigen::VectorXd f1 = model.f_y_batch(1, Z);
  const Eigen::VectorXd fw = target_gram(Z, model.z_anchors, model.k_w, model.lambda) * model.alpha_w;
  const Eigen::MatrixXd fx = target_gram(Z, model.z_anchors, model.k_x, model.lambda) * model.alpha_x;

  double J = 0.0;
  const Eigen::VectorXd t = wrep.cwiseProduct(f1) +
                            (Eigen::VectorXd::Ones(n * L) - wrep).cwiseProduct(f0);
  if (cont) {
    J += invL * (0.5 * (t - yrep).squaredNorm() / (sy * sy) +
                 0.5 * n * L * (kLog2Pi + 2.0 * std::log(sy)));
  } else {
    J += invL * (softplus_arr(t.array()) - yrep.array() * t.array()).sum();
  }
  J += invL * (softplus_arr(fw.array()) - wrep.array() * fw.array()).sum();
  for (Eigen::Index k = 0; k < fx.cols(); ++k) {
    if (model.proxy_types[static_cast<std::size_t>(k)] == ProxyType::Binary) {
      J += invL * (softplus_arr(fx.col(k).array()) - xrep.col(k).array() * fx.col(k).array()).sum();
    } else {
      J += invL * (0.5 * (fx.col(k) - xrep.col(k)).squaredNorm() + 0.5 * n * L * kLog2Pi);
    }
  }
  for (int i = 0; i < n; ++i) {
    J += gaussian_kl(mq.row(i).transpose(), model.sigma_q, model.config.sigma_z);
  }
  return J;
}

}  // namespace adatrans
