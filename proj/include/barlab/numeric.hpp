#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "barlab/errors.hpp"

namespace barlab {

// --- compensated summation -------------------------------------------------
//
// Every statistic in the project is accumulated in a fixed order (increasing
// cell label, increasing replicate index) with Kahan compensation, so results
// are reproducible to the bit and stay accurate over 2^n-term sums.

class KahanSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x))
      comp_ += (sum_ - t) + x;
    else
      comp_ += (x - t) + sum_;
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

// Elementwise compensated accumulation of same-shaped Eigen matrices/vectors.
template <class Mat>
class KahanAccum {
 public:
  KahanAccum(Eigen::Index rows, Eigen::Index cols)
      : sum_(Mat::Zero(rows, cols)), comp_(Mat::Zero(rows, cols)) {}

  template <class Expr>
  void add(const Expr& x) {
    const Mat xm = x;
    for (Eigen::Index j = 0; j < sum_.cols(); ++j)
      for (Eigen::Index i = 0; i < sum_.rows(); ++i) {
        const double s = sum_(i, j);
        const double v = xm(i, j);
        const double t = s + v;
        comp_(i, j) += (std::abs(s) >= std::abs(v)) ? (s - t) + v : (v - t) + s;
        sum_(i, j) = t;
      }
  }
  Mat value() const { return sum_ + comp_; }

 private:
  Mat sum_, comp_;
};

// --- small linear-algebra helpers -------------------------------------------

inline Eigen::MatrixXd kron(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

inline double spectral_norm(const Eigen::MatrixXd& m) {
  if (m.size() == 0) return 0.0;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  return svd.singularValues()(0);
}

inline double rel_frobenius_error(const Eigen::MatrixXd& got, const Eigen::MatrixXd& want) {
  const double denom = want.norm();
  if (denom == 0.0) return got.norm() == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return (got - want).norm() / denom;
}

// Spectral condition number of a symmetric positive semi-definite matrix;
// +inf when the smallest eigenvalue is not strictly positive.
inline double spd_condition(const Eigen::MatrixXd& s) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s, Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues()(0);
  const double hi = es.eigenvalues()(es.eigenvalues().size() - 1);
  if (!(lo > 0.0)) return std::numeric_limits<double>::infinity();
  return hi / lo;
}

// --- scalar probability helpers ---------------------------------------------

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x * std::numbers::sqrt2 / 2.0); }

// two-sided 95% t quantiles by residual degrees of freedom (normal tail past 30)
inline double t_quantile_975(int df) {
  static constexpr double table[] = {
      12.7062047364, 4.3026527297, 3.1824463053, 2.7764451052, 2.5705818356,
      2.4469118511,  2.3646242516, 2.3060041352, 2.2621571628, 2.2281388520,
      2.2009851601,  2.1788128297, 2.1603686565, 2.1447866879, 2.1314495456,
      2.1199052992,  2.1098155778, 2.1009220402, 2.0930240544, 2.0859634473,
      2.0796138447,  2.0738730679, 2.0686576104, 2.0638985616, 2.0595385528,
      2.0555294386,  2.0518305165, 2.0484071418, 2.0452296421, 2.0422724563};
  if (df < 1) throw ConfigError("t_quantile_975: need df >= 1");
  if (df <= 30) return table[df - 1];
  return 1.9599639845;
}

// --- Gauss quadrature (Golub-Welsch on the Jacobi matrix) --------------------

struct QuadratureRule {
  std::vector<double> nodes, weights;
};

// Gauss-Legendre on [-1, 1].
inline QuadratureRule gauss_legendre(int m) {
  if (m < 1) throw ConfigError("gauss_legendre: need m >= 1");
  Eigen::MatrixXd j = Eigen::MatrixXd::Zero(m, m);
  for (int k = 1; k < m; ++k) {
    const double bk = k / std::sqrt(4.0 * k * k - 1.0);
    j(k, k - 1) = bk;
    j(k - 1, k) = bk;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(j);
  QuadratureRule r;
  r.nodes.resize(m);
  r.weights.resize(m);
  for (int i = 0; i < m; ++i) {
    r.nodes[i] = es.eigenvalues()(i);
    const double v0 = es.eigenvectors()(0, i);
    r.weights[i] = 2.0 * v0 * v0;  // mu0 = 2
  }
  return r;
}

// Gauss-Hermite for weight exp(-x^2) on the real line (physicists' form).
// For N(0,1) expectations: E[g(Z)] = pi^{-1/2} sum_i w_i g(sqrt(2) x_i).
inline QuadratureRule gauss_hermite(int m) {
  if (m < 1) throw ConfigError("gauss_hermite: need m >= 1");
  Eigen::MatrixXd j = Eigen::MatrixXd::Zero(m, m);
  for (int k = 1; k < m; ++k) {
    const double bk = std::sqrt(k / 2.0);
    j(k, k - 1) = bk;
    j(k - 1, k) = bk;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(j);
  QuadratureRule r;
  r.nodes.resize(m);
  r.weights.resize(m);
  const double mu0 = std::sqrt(std::numbers::pi);
  for (int i = 0; i < m; ++i) {
    r.nodes[i] = es.eigenvalues()(i);
    const double v0 = es.eigenvectors()(0, i);
    r.weights[i] = mu0 * v0 * v0;
  }
  return r;
}

}  // namespace barlab
