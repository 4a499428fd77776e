#pragma once

#include <cmath>
#include <optional>
#include <string>

#include <Eigen/Dense>

#include "barlab/errors.hpp"
#include "barlab/model.hpp"
#include "barlab/numeric.hpp"

namespace barlab {

// Limit objects of the empirical design: Xi (mean regression vector), the
// stationary second-moment matrix Lambda, their assembly L, the asymptotic
// covariance Gamma kron L^{-1}, and the moderate-deviation rate coefficients.

// Xi = abar (I - Abar)^{-1} e_1 with abar = (a_0+b_0)/2, Abar = (A+B)/2.
inline Eigen::VectorXd xi_vector(const BarModel& model) {
  const int p = model.p;
  const double abar = 0.5 * (model.a(0) + model.b(0));
  const Eigen::MatrixXd abar_mat = 0.5 * (model.A + model.B);
  Eigen::FullPivLU<Eigen::MatrixXd> lu(Eigen::MatrixXd::Identity(p, p) - abar_mat);
  if (!lu.isInvertible())
    throw ModelError("xi_vector: I - Abar is singular; mean recursion has no fixed point");
  Eigen::VectorXd e1 = Eigen::VectorXd::Zero(p);
  e1(0) = 1.0;
  return abar * lu.solve(e1);
}

// T = (sigma2 + a2bar) e1 e1^t + (a_0 (A Xi e1^t + e1 Xi^t A^t)
//                               + b_0 (B Xi e1^t + e1 Xi^t B^t)) / 2
inline Eigen::MatrixXd t_matrix(const BarModel& model, double sigma2,
                                const Eigen::VectorXd& xi) {
  const int p = model.p;
  if (xi.size() != p) throw ModelError("t_matrix: xi has wrong dimension");
  const double a2bar = 0.5 * (model.a(0) * model.a(0) + model.b(0) * model.b(0));
  Eigen::VectorXd e1 = Eigen::VectorXd::Zero(p);
  e1(0) = 1.0;
  const Eigen::VectorXd axi = model.A * xi;
  const Eigen::VectorXd bxi = model.B * xi;
  Eigen::MatrixXd t = (sigma2 + a2bar) * e1 * e1.transpose();
  t += 0.5 * (model.a(0) * (axi * e1.transpose() + e1 * axi.transpose()) +
              model.b(0) * (bxi * e1.transpose() + e1 * bxi.transpose()));
  return t;
}

struct FixedPointReport {
  int iterations = 0;
  double residual = 0.0;
  bool converged = false;
};

// Unique solution of Lambda = T + (A Lambda A^t + B Lambda B^t)/2 by plain
// iteration from T.  The map contracts at rate beta^2 when beta < 1, and in
// practice whenever the mean dynamics are stable; non-convergence within the
// cap is reported as a model error (it signals beta at or beyond 1).
inline std::pair<Eigen::MatrixXd, FixedPointReport> lambda_fixed_point(
    const BarModel& model, const Eigen::MatrixXd& t, double tol = 1e-14,
    int max_iter = 10000) {
  Eigen::MatrixXd lam = t;
  FixedPointReport rep;
  for (int it = 1; it <= max_iter; ++it) {
    const Eigen::MatrixXd next =
        t + 0.5 * (model.A * lam * model.A.transpose() + model.B * lam * model.B.transpose());
    const double step = (next - lam).norm();
    lam = next;
    rep.iterations = it;
    if (step <= tol * (1.0 + lam.norm())) {
      rep.converged = true;
      break;
    }
  }
  if (!rep.converged)
    throw ModelError("lambda_fixed_point: no convergence within " + std::to_string(max_iter) +
                     " iterations; the second-moment map does not contract");
  const Eigen::MatrixXd res =
      lam - t - 0.5 * (model.A * lam * model.A.transpose() + model.B * lam * model.B.transpose());
  rep.residual = res.norm();
  return {lam, rep};
}

// L = [[1, Xi^t], [Xi, Lambda]]
inline Eigen::MatrixXd l_matrix(const Eigen::VectorXd& xi, const Eigen::MatrixXd& lambda) {
  const Eigen::Index p = xi.size();
  Eigen::MatrixXd l(p + 1, p + 1);
  l(0, 0) = 1.0;
  l.block(0, 1, 1, p) = xi.transpose();
  l.block(1, 0, p, 1) = xi;
  l.block(1, 1, p, p) = lambda;
  return l;
}

struct RateCoeffs {
  Eigen::MatrixXd theta_quadratic;  // Gamma^{-1} kron L
  Eigen::MatrixXd m_quadratic;      // (Gamma kron L)^{-1}
  double sigma2_denom = 0.0;        // tau4 - 2 sigma4 + nu2
  double rho_denom = 0.0;           // 2 (nu2 - rho^2)
};

inline RateCoeffs rate_coeffs(const Eigen::MatrixXd& l, const NoiseMoments& mom) {
  RateCoeffs rc;
  rc.sigma2_denom = mom.tau4 - 2.0 * mom.sigma2 * mom.sigma2 + mom.nu2;
  rc.rho_denom = 2.0 * (mom.nu2 - mom.rho * mom.rho);
  if (!(rc.sigma2_denom > 0.0) || !(rc.rho_denom > 0.0))
    throw ModelError("rate_coeffs: nonpositive rate denominator");
  if (!(mom.sigma2 > 0.0) || !(std::abs(mom.rho) < mom.sigma2))
    throw ModelError("rate_coeffs: noise covariance is not positive definite");
  Eigen::LLT<Eigen::MatrixXd> llt(l);
  if (llt.info() != Eigen::Success)
    throw ModelError("rate_coeffs: L is not positive definite");
  const Eigen::MatrixXd linv = llt.solve(Eigen::MatrixXd::Identity(l.rows(), l.cols()));
  const Eigen::Matrix2d gamma = mom.gamma();
  const Eigen::Matrix2d gamma_inv = gamma.inverse();
  rc.theta_quadratic = kron(gamma_inv, l);
  rc.m_quadratic = kron(gamma_inv, linv);  // (Gamma kron L)^{-1}
  return rc;
}

inline double rate_theta(const RateCoeffs& rc, const Eigen::VectorXd& x) {
  return 0.5 * x.dot(rc.theta_quadratic * x);
}
inline double rate_martingale(const RateCoeffs& rc, const Eigen::VectorXd& x) {
  return 0.5 * x.dot(rc.m_quadratic * x);
}
inline double rate_sigma2(const RateCoeffs& rc, double x) {
  return x * x / rc.sigma2_denom;
}
inline double rate_rho(const RateCoeffs& rc, double x) {
  return x * x / rc.rho_denom;
}

struct LimitSet {
  Eigen::VectorXd xi;
  Eigen::MatrixXd T, lambda, L;
  FixedPointReport fp;
  bool l_positive_definite = false;
  double sigma_norm = 0.0;  // spectral norm of I_2 kron L, i.e. of L
  std::optional<Eigen::MatrixXd> asymp_cov;  // Gamma kron L^{-1}
  std::optional<RateCoeffs> rates;
};

inline LimitSet compute_limits(const BarModel& model, const NoiseMoments& mom) {
  LimitSet ls;
  ls.xi = xi_vector(model);
  ls.T = t_matrix(model, mom.sigma2, ls.xi);
  auto [lam, rep] = lambda_fixed_point(model, ls.T);
  ls.lambda = std::move(lam);
  ls.fp = rep;
  ls.L = l_matrix(ls.xi, ls.lambda);
  ls.sigma_norm = spectral_norm(ls.L);
  Eigen::LLT<Eigen::MatrixXd> llt(ls.L);
  ls.l_positive_definite =
      llt.info() == Eigen::Success && spd_condition(ls.L) < std::numeric_limits<double>::infinity();
  if (ls.l_positive_definite && mom.sigma2 > 0.0 && std::abs(mom.rho) < mom.sigma2) {
    const Eigen::MatrixXd linv = llt.solve(Eigen::MatrixXd::Identity(ls.L.rows(), ls.L.cols()));
    ls.asymp_cov = kron(mom.gamma(), linv);
    const double s2d = mom.tau4 - 2.0 * mom.sigma2 * mom.sigma2 + mom.nu2;
    const double rd = 2.0 * (mom.nu2 - mom.rho * mom.rho);
    if (s2d > 0.0 && rd > 0.0) ls.rates = rate_coeffs(ls.L, mom);
  }
  return ls;
}

}  // namespace barlab
