#include "adatrans/kernel.hpp"

#include <cmath>

namespace adatrans {

namespace {

double sigmoid(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

int tri_index(int row, int col) {
  // packed storage for rows 1..m, row i holding i entries
  return row * (row - 1) / 2 + col;
}

}  // namespace

TransferFactors TransferFactors::adaptive(FactorLevel level, int m, double init_logit) {
  TransferFactors f;
  f.level_ = level;
  f.mode_ = Mode::Adaptive;
  f.num_pops_ = m + 1;
  f.thetas_ = Eigen::VectorXd::Constant(m * (m + 1) / 2, init_logit);
  return f;
}

TransferFactors TransferFactors::pinned(FactorLevel level, int m, double value) {
  if (value < 0.0 || value > 1.0) throw ValueError("transfer factor outside [0,1]");
  TransferFactors f;
  f.level_ = level;
  f.mode_ = Mode::Pinned;
  f.num_pops_ = m + 1;
  f.pinned_value_ = value;
  return f;
}

TransferFactors TransferFactors::fixed_matrix(FactorLevel level, const Eigen::MatrixXd& values) {
  if (values.rows() != values.cols()) throw ShapeMismatch("factor matrix must be square");
  TransferFactors f;
  f.level_ = level;
  f.mode_ = Mode::Fixed;
  f.num_pops_ = static_cast<int>(values.rows());
  f.fixed_ = values;
  return f;
}

int TransferFactors::free_count() const {
  if (mode_ != Mode::Adaptive) return 0;
  const int m = num_pops_ - 1;
  return m * (m + 1) / 2;
}

void TransferFactors::set_thetas(const Eigen::VectorXd& t) {
  if (t.size() != thetas_.size()) throw ShapeMismatch("theta size mismatch");
  thetas_ = t;
}

Eigen::MatrixXd TransferFactors::rows_matrix() const {
  const int p = num_pops_;
  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(p, p);
  G(0, 0) = 1.0;
  for (int i = 1; i < p; ++i) {
    double rem = 1.0;  // product of (1 - s^2) over earlier columns
    for (int j = 0; j < i; ++j) {
      const double s = sigmoid(thetas_(tri_index(i, j)));
      G(i, j) = s * std::sqrt(rem);
      rem *= (1.0 - s * s);
    }
    G(i, i) = std::sqrt(rem);
  }
  return G;
}

Eigen::MatrixXd TransferFactors::matrix() const {
  const int p = num_pops_;
  switch (mode_) {
    case Mode::Fixed:
      return fixed_;
    case Mode::Pinned: {
      Eigen::MatrixXd L = Eigen::MatrixXd::Constant(p, p, pinned_value_);
      L.diagonal().setOnes();
      return L;
    }
    case Mode::Adaptive: {
      const Eigen::MatrixXd G = rows_matrix();
      Eigen::MatrixXd L = G * G.transpose();
      L.diagonal().setOnes();
      return L;
    }
  }
  return Eigen::MatrixXd::Identity(p, p);
}

Eigen::VectorXd TransferFactors::chain_theta_grad(const Eigen::MatrixXd& dJ_dLambda) const {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(free_count());
  if (!learnable()) return out;
  const int p = num_pops_;
  const Eigen::MatrixXd G = rows_matrix();

  // Symmetrize the accumulator once: Lambda_{ab} and Lambda_{ba} are the same
  // scalar, so dJ/dLambda as a function of the free entries sums both slots.
  Eigen::MatrixXd H = dJ_dLambda + dJ_dLambda.transpose();
  H.diagonal().setZero();  // diagonal is constant 1

  for (int i = 1; i < p; ++i) {
    // per-row sigmoids and prefix products
    Eigen::VectorXd s(i);
    for (int j = 0; j < i; ++j) s(j) = sigmoid(thetas_(tri_index(i, j)));
    for (int q = 0; q < i; ++q) {
      // dG(i,k)/dtheta_{iq} for k in [q, i]
      Eigen::VectorXd dG = Eigen::VectorXd::Zero(p);
      const double sq = s(q);
      const double dsq = sq * (1.0 - sq);
      {
        double pref = 1.0;
        for (int k2 = 0; k2 < q; ++k2) pref *= std::sqrt(1.0 - s(k2) * s(k2));
        dG(q) = dsq * pref;
      }
      // later columns scale by -s_q*dsq/(1-s_q^2) = -s_q^2/(1+s_q), which
      // stays finite as s_q -> 1
      const double factor = -sq * sq / (1.0 + sq);
      for (int k = q + 1; k <= i; ++k) dG(k) = G(i, k) * factor;

      // dLambda_{ib}/dtheta_{iq} = sum_k dG(k) G(b,k); only row i of G moves
      double acc = 0.0;
      for (int b = 0; b < p; ++b) {
        if (b == i) continue;  // diagonal constant
        double d = 0.0;
        for (int k = 0; k <= i; ++k) d += dG(k) * G(b, k);
        acc += H(i, b) * d;
      }
      out(tri_index(i, q)) = acc;
    }
  }
  return out;
}

double base_eval(const BaseKernelSpec& spec, const Eigen::VectorXd& u, const Eigen::VectorXd& v) {
  if (u.size() != v.size()) throw DimMismatch("kernel inputs differ in dimension");
  switch (spec.family) {
    case KernelFamily::RBF: {
      const double d2 = (u - v).squaredNorm();
      return spec.amplitude * std::exp(-d2 / (2.0 * spec.lengthscale * spec.lengthscale));
    }
    case KernelFamily::Linear:
      return spec.amplitude * (u.dot(v) + 1.0);
  }
  return 0.0;
}

double transfer_eval(const BaseKernelSpec& spec, const TransferFactors& factors,
                     const Eigen::VectorXd& u, int d1, const Eigen::VectorXd& v, int d2) {
  const double k = base_eval(spec, u, v);
  if (d1 == d2) return k;
  return factors.matrix()(d1, d2) * k;
}

Eigen::MatrixXd pairwise_sqdist(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
  if (A.cols() != B.cols()) throw DimMismatch("point sets differ in dimension");
  const Eigen::VectorXd a2 = A.rowwise().squaredNorm();
  const Eigen::VectorXd b2 = B.rowwise().squaredNorm();
  Eigen::MatrixXd D = -2.0 * (A * B.transpose());
  D.colwise() += a2;
  D.rowwise() += b2.transpose();
  return D.cwiseMax(0.0);
}

Eigen::MatrixXd gram(const BaseKernelSpec& spec, const TransferFactors& factors,
                     const TaggedPoints& A, const TaggedPoints& B) {
  if (A.dim() != B.dim()) throw DimMismatch("tagged point sets differ in dimension");
  Eigen::MatrixXd K;
  if (spec.family == KernelFamily::RBF) {
    const double inv = 1.0 / (2.0 * spec.lengthscale * spec.lengthscale);
    K = (-pairwise_sqdist(A.points, B.points) * inv).array().exp() * spec.amplitude;
  } else {
    K = spec.amplitude * ((A.points * B.points.transpose()).array() + 1.0);
  }
  const Eigen::MatrixXd L = factors.matrix();
  for (int i = 0; i < A.n(); ++i) {
    const int pa = A.pop_index[static_cast<std::size_t>(i)];
    for (int j = 0; j < B.n(); ++j) {
      const int pb = B.pop_index[static_cast<std::size_t>(j)];
      if (pa != pb) K(i, j) *= L(pa, pb);
    }
  }
  return K;
}

Eigen::MatrixXd gram_sym(const BaseKernelSpec& spec, const TransferFactors& factors,
                         const TaggedPoints& A) {
  Eigen::MatrixXd K = gram(spec, factors, A, A);
  K.diagonal().array() += kernel_jitter(spec);
  return K;
}

}  // namespace adatrans
