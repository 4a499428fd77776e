#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "barlab/errors.hpp"
#include "barlab/model.hpp"
#include "barlab/numeric.hpp"
#include "barlab/tree.hpp"

namespace barlab {

// Least squares on the realised tree.  All sums run over mothers in
// T_{n-1,p-1} (label interval [2^{p-1}, 2^n - 1]) in increasing label order
// with compensated accumulation.

inline constexpr double kSingularConditionCap = 1e12;  // rcond 1e-12

// Y_k = (1, X_k, X_{[k/2]}, ..., X_{[k/2^{p-1}]})
inline Eigen::VectorXd design_vector(const SimulatedTree& tree, NodeIndex k) {
  Eigen::VectorXd y(tree.p() + 1);
  y(0) = 1.0;
  y.tail(tree.p()) = tree.regression_vector(k);
  return y;
}

// Gram matrix S_m over T_{m,p-1}.
inline Eigen::MatrixXd s_matrix(const SimulatedTree& tree, int m) {
  const int p = tree.p();
  if (m > tree.n())
    throw ConfigError("s_matrix: generation " + std::to_string(m) + " beyond the tree");
  KahanAccum<Eigen::MatrixXd> acc(p + 1, p + 1);
  for (NodeIndex k : shifted_subtree(m, p - 1)) {
    const Eigen::VectorXd y = design_vector(tree, k);
    acc.add(y * y.transpose());
  }
  return acc.value();
}

struct ThetaFit {
  Eigen::VectorXd theta;  // (a_0..a_p, b_0..b_p)
  Eigen::MatrixXd S;      // S_{n-1}
  double cond = 0.0;      // spectral condition of S_{n-1}
};

// Solves the two normal-equation systems S_{n-1} a = sum Y_k X_{2k} and
// S_{n-1} b = sum Y_k X_{2k+1}; the block-diagonal 2(p+1) system is never
// materialised.  One step of iterative refinement is applied to each solve.
inline ThetaFit theta_hat(const SimulatedTree& tree, int n) {
  const int p = tree.p();
  if (n < p) throw ConfigError("theta_hat: need n >= p");
  if (n > tree.n()) throw ConfigError("theta_hat: generation beyond the tree");

  ThetaFit fit;
  fit.S = s_matrix(tree, n - 1);
  fit.cond = spd_condition(fit.S);
  if (!(fit.cond < kSingularConditionCap))
    throw SingularDesign("theta_hat: design Gram matrix is numerically singular "
                         "(condition estimate " + std::to_string(fit.cond) + ")");

  KahanAccum<Eigen::VectorXd> qa(p + 1, 1), qb(p + 1, 1);
  for (NodeIndex k : mother_range(n, p)) {
    const Eigen::VectorXd y = design_vector(tree, k);
    qa.add(y * tree.x[2 * k]);
    qb.add(y * tree.x[2 * k + 1]);
  }

  Eigen::LDLT<Eigen::MatrixXd> ldlt(fit.S);
  auto solve = [&](const Eigen::VectorXd& q) {
    Eigen::VectorXd x = ldlt.solve(q);
    x += ldlt.solve(q - fit.S * x);  // one refinement step
    return x;
  };
  fit.theta.resize(2 * (p + 1));
  fit.theta.head(p + 1) = solve(qa.value());
  fit.theta.tail(p + 1) = solve(qb.value());
  return fit;
}

struct ResidualPair {
  NodeIndex k;  // mother label
  double even, odd;
};

// Offspring-pair residuals under a fitted (or candidate) coefficient vector.
inline std::vector<ResidualPair> residuals(const SimulatedTree& tree, int n,
                                           const Eigen::VectorXd& theta) {
  const int p = tree.p();
  if (theta.size() != 2 * (p + 1))
    throw ConfigError("residuals: theta must have length 2(p+1)");
  if (n < p || n > tree.n()) throw ConfigError("residuals: generation out of range");
  std::vector<ResidualPair> out;
  out.reserve(static_cast<std::size_t>(mother_range(n, p).size()));
  for (NodeIndex k : mother_range(n, p)) {
    const Eigen::VectorXd y = design_vector(tree, k);
    const double fit_e = theta.head(p + 1).dot(y);
    const double fit_o = theta.tail(p + 1).dot(y);
    out.push_back({k, tree.x[2 * k] - fit_e, tree.x[2 * k + 1] - fit_o});
  }
  return out;
}

// The estimators divide by |T_{n-1}| (and 2|T_{n-1}|) as written, not by the
// number of summed pairs; count_normalizer switches to the latter for
// sensitivity runs.
struct EstimationOptions {
  bool count_normalizer = false;
};

inline double sigma2_hat(const std::vector<ResidualPair>& res, int n,
                         const EstimationOptions& opts = {}) {
  if (res.empty()) throw ConfigError("sigma2_hat: empty residual set");
  KahanSum s;
  for (const auto& r : res) s.add(r.even * r.even + r.odd * r.odd);
  const double denom =
      opts.count_normalizer ? 2.0 * static_cast<double>(res.size())
                            : 2.0 * static_cast<double>(subtree_size(n - 1));
  return s.value() / denom;
}

inline double rho_hat(const std::vector<ResidualPair>& res, int n,
                      const EstimationOptions& opts = {}) {
  if (res.empty()) throw ConfigError("rho_hat: empty residual set");
  KahanSum s;
  for (const auto& r : res) s.add(r.even * r.odd);
  const double denom = opts.count_normalizer ? static_cast<double>(res.size())
                                             : static_cast<double>(subtree_size(n - 1));
  return s.value() / denom;
}

// Counterparts built from the recorded noise itself; the sum runs over the
// shifted set T_{n-1,p} (one generation less of mothers than the residual
// versions use).
inline double sigma2_bar(const SimulatedTree& tree, int n,
                         const EstimationOptions& opts = {}) {
  if (!tree.noise_recorded) throw ConfigError("sigma2_bar: noise was not recorded");
  if (n < tree.p() || n > tree.n()) throw ConfigError("sigma2_bar: generation out of range");
  const LabelRange range = shifted_subtree(n - 1, tree.p());
  KahanSum s;
  for (NodeIndex k : range)
    s.add(tree.eps[2 * k] * tree.eps[2 * k] + tree.eps[2 * k + 1] * tree.eps[2 * k + 1]);
  const double denom = opts.count_normalizer
                           ? 2.0 * static_cast<double>(range.size())
                           : 2.0 * static_cast<double>(subtree_size(n - 1));
  return range.empty() ? 0.0 : s.value() / denom;
}

inline double rho_bar(const SimulatedTree& tree, int n,
                      const EstimationOptions& opts = {}) {
  if (!tree.noise_recorded) throw ConfigError("rho_bar: noise was not recorded");
  if (n < tree.p() || n > tree.n()) throw ConfigError("rho_bar: generation out of range");
  const LabelRange range = shifted_subtree(n - 1, tree.p());
  KahanSum s;
  for (NodeIndex k : range) s.add(tree.eps[2 * k] * tree.eps[2 * k + 1]);
  const double denom = opts.count_normalizer ? static_cast<double>(range.size())
                                             : static_cast<double>(subtree_size(n - 1));
  return range.empty() ? 0.0 : s.value() / denom;
}

struct Martingale {
  Eigen::VectorXd M;        // sum over mothers of (eps_{2k} Y_k ; eps_{2k+1} Y_k)
  Eigen::MatrixXd bracket;  // Gamma kron S_{n-1}
};

inline Eigen::VectorXd martingale_vector(const SimulatedTree& tree, int n) {
  if (!tree.noise_recorded) throw ConfigError("martingale: noise was not recorded");
  const int p = tree.p();
  if (n < p || n > tree.n()) throw ConfigError("martingale: generation out of range");
  KahanAccum<Eigen::VectorXd> acc(2 * (p + 1), 1);
  Eigen::VectorXd term(2 * (p + 1));
  for (NodeIndex k : mother_range(n, p)) {
    const Eigen::VectorXd y = design_vector(tree, k);
    term.head(p + 1) = tree.eps[2 * k] * y;
    term.tail(p + 1) = tree.eps[2 * k + 1] * y;
    acc.add(term);
  }
  return acc.value();
}

inline Martingale martingale(const SimulatedTree& tree, int n) {
  Martingale m;
  m.M = martingale_vector(tree, n);
  m.bracket = kron(tree.moments.gamma(), s_matrix(tree, n - 1));
  return m;
}

struct EstimationResult {
  int n = 0, p = 0;
  std::uint64_t seed = 0;
  Eigen::MatrixXd S;       // S_{n-1}
  double cond = 0.0;
  Eigen::VectorXd theta;   // (a_0..a_p, b_0..b_p)
  double sigma2_hat = 0.0, rho_hat = 0.0;
  std::optional<double> sigma2_hat_count, rho_hat_count;  // count-normalised variants
  std::optional<double> sigma2_bar, rho_bar;
  std::optional<Eigen::VectorXd> M;
  std::optional<Eigen::MatrixXd> bracket;
};

inline EstimationResult estimate_tree(const SimulatedTree& tree, int n,
                                      const EstimationOptions& opts = {}) {
  EstimationResult r;
  r.n = n;
  r.p = tree.p();
  r.seed = tree.seed;
  ThetaFit fit = theta_hat(tree, n);
  r.S = std::move(fit.S);
  r.cond = fit.cond;
  r.theta = std::move(fit.theta);
  const auto res = residuals(tree, n, r.theta);
  r.sigma2_hat = sigma2_hat(res, n, opts);
  r.rho_hat = rho_hat(res, n, opts);
  EstimationOptions counted;
  counted.count_normalizer = true;
  r.sigma2_hat_count = sigma2_hat(res, n, counted);
  r.rho_hat_count = rho_hat(res, n, counted);
  if (tree.noise_recorded) {
    r.sigma2_bar = sigma2_bar(tree, n, opts);
    r.rho_bar = rho_bar(tree, n, opts);
    auto m = martingale(tree, n);
    r.M = std::move(m.M);
    r.bracket = std::move(m.bracket);
  }
  return r;
}

}  // namespace barlab
