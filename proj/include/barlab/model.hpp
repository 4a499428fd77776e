#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "barlab/errors.hpp"
#include "barlab/numeric.hpp"
#include "barlab/rng.hpp"
#include "barlab/tree.hpp"

namespace barlab {

// ---------------------------------------------------------------------------
// autoregression
// ---------------------------------------------------------------------------

enum class MatrixNorm { spectral, frobenius };

inline double matrix_norm(const Eigen::MatrixXd& m, MatrixNorm mode) {
  return mode == MatrixNorm::spectral ? spectral_norm(m) : m.norm();
}

// Companion matrix of lag coefficients (c_1 .. c_p): first row the
// coefficients, ones on the subdiagonal.
inline Eigen::MatrixXd companion(const Eigen::VectorXd& coeffs) {
  const Eigen::Index p = coeffs.size() - 1;
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(p, p);
  c.row(0) = coeffs.tail(p).transpose();
  for (Eigen::Index i = 1; i < p; ++i) c(i, i - 1) = 1.0;
  return c;
}

struct BarModel {
  int p = 1;
  Eigen::VectorXd a, b;  // offset + lag coefficients, length p+1 each
  Eigen::MatrixXd A, B;  // p x p companion matrices
  double beta = 0.0;     // max of the two companion norms
  MatrixNorm norm_mode = MatrixNorm::spectral;
  bool stable = false;   // beta < 1

  // coefficient matrix with the even column first; vec stacking is
  // (a_0..a_p, b_0..b_p)
  Eigen::MatrixXd theta() const {
    Eigen::MatrixXd t(p + 1, 2);
    t.col(0) = a;
    t.col(1) = b;
    return t;
  }
  Eigen::VectorXd vec_theta() const {
    Eigen::VectorXd v(2 * (p + 1));
    v.head(p + 1) = a;
    v.tail(p + 1) = b;
    return v;
  }
};

// Note: for p >= 2 the unit subdiagonal forces both companion norms to 1 or
// above for every coefficient choice, so such models can only be built with
// allow_nonstable set; downstream fixed-point machinery still converges
// whenever the offspring mean map itself is contracting.
inline BarModel build_model(int p, const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                            bool allow_nonstable = false,
                            MatrixNorm norm = MatrixNorm::spectral) {
  if (p < 1) throw ModelError("build_model: order p must be >= 1");
  if (a.size() != p + 1 || b.size() != p + 1)
    throw ModelError("build_model: coefficient vectors must have length p+1 = " +
                     std::to_string(p + 1));
  if (!a.allFinite() || !b.allFinite())
    throw ModelError("build_model: coefficients must be finite");
  BarModel m;
  m.p = p;
  m.a = a;
  m.b = b;
  m.A = companion(a);
  m.B = companion(b);
  m.norm_mode = norm;
  m.beta = std::max(matrix_norm(m.A, norm), matrix_norm(m.B, norm));
  m.stable = m.beta < 1.0;
  if (!m.stable && !allow_nonstable)
    throw ModelError("build_model: beta = " + std::to_string(m.beta) +
                     " >= 1; pass allow_nonstable to build anyway");
  return m;
}

// ---------------------------------------------------------------------------
// noise families
// ---------------------------------------------------------------------------

enum class NoiseFamily { none, gaussian_pair, bounded_pair, skew_switching_pair };

inline const char* family_name(NoiseFamily f) {
  switch (f) {
    case NoiseFamily::none: return "none";
    case NoiseFamily::gaussian_pair: return "gaussian_pair";
    case NoiseFamily::bounded_pair: return "bounded_pair";
    case NoiseFamily::skew_switching_pair: return "skew_switching_pair";
  }
  return "?";
}

struct NoiseMoments {
  double sigma2 = 0.0;  // E[eps^2]
  double rho = 0.0;     // E[eps_even eps_odd]
  double tau4 = 0.0;    // E[eps^4]
  double nu2 = 0.0;     // E[eps_even^2 eps_odd^2]

  Eigen::Matrix2d gamma() const {
    Eigen::Matrix2d g;
    g << sigma2, rho, rho, sigma2;
    return g;
  }
};

// Two-component normal mixture with common variance v, means m1/m2, weight w
// on the first component; mean zero by construction.
struct SkewMixture {
  double w = 1.0, m1 = 0.0, m2 = 0.0, v = 1.0;

  double cdf(double x) const {
    const double s = std::sqrt(v);
    return w * normal_cdf((x - m1) / s) + (1.0 - w) * normal_cdf((x - m2) / s);
  }
  double upper_tail(double x) const {
    const double s = std::sqrt(v);
    return w * normal_cdf(-(x - m1) / s) + (1.0 - w) * normal_cdf(-(x - m2) / s);
  }
  double pdf(double x) const {
    const double s = std::sqrt(v);
    const double z1 = (x - m1) / s, z2 = (x - m2) / s;
    const double c = 1.0 / (s * std::sqrt(2.0 * std::numbers::pi));
    return c * (w * std::exp(-0.5 * z1 * z1) + (1.0 - w) * std::exp(-0.5 * z2 * z2));
  }

  // Increasing transport map F^{-1}(Phi(z)), solved in whichever tail keeps
  // full relative accuracy; z may be far out (quadrature nodes reach |z|~16).
  double transport_from_normal(double z) const {
    const double s = std::sqrt(v);
    double lo = std::min(m1, m2) - s * (std::abs(z) + 6.0);
    double hi = std::max(m1, m2) + s * (std::abs(z) + 6.0);
    const bool upper = z > 0.0;
    const double target = upper ? normal_cdf(-z) : normal_cdf(z);
    auto miss = [&](double x) {
      // increasing in x in both branches
      return upper ? target - upper_tail(x) : cdf(x) - target;
    };
    double x = 0.5 * (lo + hi);
    for (int it = 0; it < 200; ++it) {
      const double f = miss(x);
      if (f > 0.0) hi = x; else lo = x;
      const double d = pdf(x);
      double step = d > 0.0 ? -f / d : 0.0;
      double next = x + step;
      if (!(next > lo) || !(next < hi)) next = 0.5 * (lo + hi);
      if (std::abs(next - x) <= 4.0 * std::numeric_limits<double>::epsilon() *
                                    (1.0 + std::abs(next))) {
        return next;
      }
      x = next;
    }
    return x;
  }
};

namespace detail {

// Calibrate (w, m1, m2, v) so the mixture has mean 0, variance sigma2, third
// moment skew*sigma2^{3/2} and fourth moment tau4.  For fixed w the first
// three constraints pin (m1, m2, v) in closed form; the fourth-moment miss is
// then a scalar function of w, scanned for a sign change and bisected.
inline SkewMixture calibrate_mixture(double sigma2, double tau4, double skew) {
  const double gam3 = skew * std::pow(sigma2, 1.5);
  auto solve_at = [&](double w) -> std::optional<SkewMixture> {
    const double m1cubed = gam3 * (1.0 - w) * (1.0 - w) / (w * (1.0 - 2.0 * w));
    const double m1 = std::cbrt(m1cubed);
    const double m2 = -w * m1 / (1.0 - w);
    const double v = sigma2 - w * m1 * m1 / (1.0 - w);
    if (!(v > 1e-12 * sigma2)) return std::nullopt;
    SkewMixture m{w, m1, m2, v};
    return m;
  };
  auto fourth = [&](const SkewMixture& m) {
    auto comp = [&](double mu) { return mu * mu * mu * mu + 6.0 * mu * mu * m.v + 3.0 * m.v * m.v; };
    return m.w * comp(m.m1) + (1.0 - m.w) * comp(m.m2);
  };

  const int grid = 4000;
  double prev_w = 0.0, prev_f = 0.0;
  bool have_prev = false;
  for (int i = 1; i < grid; ++i) {
    const double w = 0.5 * i / grid;
    auto m = solve_at(w);
    if (!m) { have_prev = false; continue; }
    const double f = fourth(*m) - tau4;
    if (have_prev && ((prev_f < 0.0) != (f < 0.0))) {
      double lo = prev_w, hi = w, flo = prev_f;
      for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        auto mm = solve_at(mid);
        if (!mm) break;
        const double fm = fourth(*mm) - tau4;
        if ((fm < 0.0) == (flo < 0.0)) { lo = mid; flo = fm; } else { hi = mid; }
      }
      return *solve_at(0.5 * (lo + hi));
    }
    prev_w = w;
    prev_f = f;
    have_prev = true;
  }
  throw ModelError("skew_switching_pair: calibration failure, no mixture with sigma2=" +
                   std::to_string(sigma2) + " tau4=" + std::to_string(tau4) +
                   " skew=" + std::to_string(skew));
}

}  // namespace detail

class NoiseModel {
 public:
  NoiseFamily family = NoiseFamily::none;
  NoiseMoments moments;
  int dependence_case = 1;  // 1: pairs i.i.d.; 2: conditionally independent given the past

  static NoiseModel none() {
    NoiseModel n;
    n.family = NoiseFamily::none;
    return n;
  }

  static NoiseModel gaussian(double sigma2, double rho) {
    check_gamma(sigma2, rho);
    NoiseModel n;
    n.family = NoiseFamily::gaussian_pair;
    n.dependence_case = 1;
    n.moments = {sigma2, rho, 3.0 * sigma2 * sigma2, sigma2 * sigma2 + 2.0 * rho * rho};
    n.set_chol(sigma2, rho);
    n.check_moments();
    return n;
  }

  // Correlated normal pair truncated to the square [-Mc*sd, Mc*sd]^2 and then
  // rescaled so the realised variance is exactly the requested sigma2; all
  // four moments of the truncated law are recomputed by tensor quadrature.
  static NoiseModel bounded(double sigma2, double rho, double truncation = 6.0) {
    check_gamma(sigma2, rho);
    if (!(truncation >= 1.0))
      throw ModelError("bounded_pair: truncation bound must be >= 1");
    NoiseModel n;
    n.family = NoiseFamily::bounded_pair;
    n.dependence_case = 1;
    n.set_chol(sigma2, rho);
    n.truncation_ = truncation;
    n.bound_ = truncation * std::sqrt(sigma2);

    const auto rule = gauss_legendre(96);
    const double half = n.bound_;
    const double r = rho / sigma2;
    const double q = 1.0 / (2.0 * sigma2 * (1.0 - r * r));
    KahanSum z, sxx, sxy, sx4, sxxyy;
    for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
      const double x = half * rule.nodes[i];
      const double wx = half * rule.weights[i];
      for (std::size_t j = 0; j < rule.nodes.size(); ++j) {
        const double y = half * rule.nodes[j];
        const double wxy = wx * half * rule.weights[j];
        const double dens = std::exp(-q * (x * x - 2.0 * r * x * y + y * y));
        const double f = wxy * dens;
        z.add(f);
        sxx.add(f * x * x);
        sxy.add(f * x * y);
        sx4.add(f * x * x * x * x);
        sxxyy.add(f * x * x * y * y);
      }
    }
    const double var_tr = sxx.value() / z.value();
    const double scale2 = sigma2 / var_tr;
    n.rescale_ = std::sqrt(scale2);
    n.moments.sigma2 = sigma2;
    n.moments.rho = scale2 * sxy.value() / z.value();
    n.moments.tau4 = scale2 * scale2 * sx4.value() / z.value();
    n.moments.nu2 = scale2 * scale2 * sxxyy.value() / z.value();
    n.check_moments();
    return n;
  }

  // Marginals are skew mixtures calibrated to (sigma2, tau4, +/-skew); the
  // pair is coupled through a normal copula whose latent correlation is
  // solved so the product moment hits rho.  The skew sign follows the sign of
  // the mother's state, which makes the pair law measurable with respect to
  // the past while keeping all four conditional moments constant.
  static NoiseModel skew_switching(double sigma2, double rho, double tau4, double skew = 0.8) {
    check_gamma(sigma2, rho);
    if (skew == 0.0) throw ModelError("skew_switching_pair: skew target must be nonzero");
    if (!(tau4 > sigma2 * sigma2))
      throw ModelError("skew_switching_pair: tau4 must exceed sigma2^2");
    NoiseModel n;
    n.family = NoiseFamily::skew_switching_pair;
    n.dependence_case = 2;
    n.mix_ = detail::calibrate_mixture(sigma2, tau4, std::abs(skew));
    n.skew_sign_ = skew > 0.0 ? 1.0 : -1.0;

    const auto rule = gauss_hermite(80);
    const int m = static_cast<int>(rule.nodes.size());
    std::vector<double> gz(m);
    for (int i = 0; i < m; ++i)
      gz[i] = n.mix_.transport_from_normal(std::numbers::sqrt2 * rule.nodes[i]);

    auto pair_moment = [&](double r, bool squared) {
      const double c = std::sqrt(1.0 - r * r);
      KahanSum acc;
      for (int i = 0; i < m; ++i) {
        const double zi = std::numbers::sqrt2 * rule.nodes[i];
        for (int j = 0; j < m; ++j) {
          const double zj = r * zi + c * std::numbers::sqrt2 * rule.nodes[j];
          const double g2 = n.mix_.transport_from_normal(zj);
          const double term = squared ? gz[i] * gz[i] * g2 * g2 : gz[i] * g2;
          acc.add(rule.weights[i] * rule.weights[j] * term);
        }
      }
      return acc.value() / std::numbers::pi;
    };

    double lo = -0.999999, hi = 0.999999;
    const double plo = pair_moment(lo, false), phi = pair_moment(hi, false);
    if (!(rho > plo && rho < phi))
      throw ModelError("skew_switching_pair: requested rho outside the range reachable "
                       "by the normal copula for this marginal");
    double r = 0.0;
    for (int it = 0; it < 100; ++it) {
      r = 0.5 * (lo + hi);
      const double f = pair_moment(r, false) - rho;
      if (std::abs(f) < 1e-14 * sigma2) break;
      if (f < 0.0) lo = r; else hi = r;
    }
    n.copula_r_ = r;
    n.moments.sigma2 = sigma2;
    n.moments.tau4 = tau4;
    n.moments.rho = pair_moment(r, false);
    n.moments.nu2 = pair_moment(r, true);
    n.check_moments();
    return n;
  }

  // One offspring pair.  Each mother owns a private stream, so draw order
  // across mothers cannot matter.
  std::pair<double, double> sample_pair(double parent_state, CounterRng& rng) const {
    switch (family) {
      case NoiseFamily::none:
        return {0.0, 0.0};
      case NoiseFamily::gaussian_pair: {
        const auto [g1, g2] = rng.next_normal_pair();
        return {l11_ * g1, l21_ * g1 + l22_ * g2};
      }
      case NoiseFamily::bounded_pair: {
        for (long attempt = 0; attempt < 1000000; ++attempt) {
          const auto [g1, g2] = rng.next_normal_pair();
          const double e = l11_ * g1;
          const double o = l21_ * g1 + l22_ * g2;
          if (std::abs(e) <= bound_ && std::abs(o) <= bound_)
            return {rescale_ * e, rescale_ * o};
        }
        throw ModelError("bounded_pair: rejection sampler failed to accept");
      }
      case NoiseFamily::skew_switching_pair: {
        const auto [g1, g2] = rng.next_normal_pair();
        const double z2 = copula_r_ * g1 + std::sqrt(1.0 - copula_r_ * copula_r_) * g2;
        // sign(0) counts as positive
        const double flip = (parent_state >= 0.0 ? 1.0 : -1.0) * skew_sign_;
        if (flip > 0.0)
          return {mix_.transport_from_normal(g1), mix_.transport_from_normal(z2)};
        return {-mix_.transport_from_normal(-g1), -mix_.transport_from_normal(-z2)};
      }
    }
    throw ModelError("sample_pair: unknown family");
  }

  double truncation() const { return truncation_; }
  double copula_r() const { return copula_r_; }
  const SkewMixture& mixture() const { return mix_; }

 private:
  static void check_gamma(double sigma2, double rho) {
    if (!(sigma2 > 0.0)) throw ModelError("noise: sigma2 must be positive");
    if (!(std::abs(rho) < sigma2)) throw ModelError("noise: need |rho| < sigma2");
  }
  void set_chol(double sigma2, double rho) {
    l11_ = std::sqrt(sigma2);
    l21_ = rho / l11_;
    l22_ = std::sqrt(sigma2 - rho * rho / sigma2);
  }
  void check_moments() const {
    if (!(moments.nu2 < moments.tau4))
      throw ModelError("noise: requires nu2 < tau4, got nu2=" + std::to_string(moments.nu2) +
                       " tau4=" + std::to_string(moments.tau4));
    if (!(moments.nu2 > moments.rho * moments.rho))
      throw ModelError("noise: requires nu2 > rho^2");
  }

  double l11_ = 0.0, l21_ = 0.0, l22_ = 0.0;  // Cholesky of the nominal pair covariance
  double rescale_ = 1.0;                      // bounded: post-truncation standardisation
  double truncation_ = 0.0;
  double bound_ = 0.0;                        // bounded: |eps| cap before rescaling
  SkewMixture mix_;                           // skew: the positively skewed marginal
  double skew_sign_ = 1.0;
  double copula_r_ = 0.0;
};

// ---------------------------------------------------------------------------
// simulation
// ---------------------------------------------------------------------------

struct InitSpec {
  enum class Kind { zero, constant, vector, gaussian };
  Kind kind = Kind::zero;
  double value = 0.0;           // constant level, or variance for gaussian
  Eigen::VectorXd values;       // explicit X_1 .. X_{2^p - 1} in label order

  static InitSpec zero() { return {}; }
  static InitSpec constant(double c) { return {Kind::constant, c, {}}; }
  static InitSpec explicit_vector(Eigen::VectorXd v) {
    return {Kind::vector, 0.0, std::move(v)};
  }
  static InitSpec gaussian(double variance) {
    if (!(variance >= 0.0)) throw ConfigError("init: gaussian variance must be >= 0");
    return {Kind::gaussian, variance, {}};
  }
};

// Memory cap for realised trees (two doubles per cell past this is >1 GiB).
inline constexpr int kMaxSimulatedGeneration = 25;

struct SimulatedTree {
  TreeShape shape;
  std::vector<double> x;    // level order, slot 0 unused, labels 1 .. 2^{n+1}-1
  std::vector<double> eps;  // same layout; meaningful for labels >= 2^p; empty if not recorded
  bool noise_recorded = false;
  NoiseMoments moments;     // of the generating family (zeros for family none)
  int dependence_case = 1;
  std::uint64_t seed = 0;

  int n() const { return shape.n; }
  int p() const { return shape.p; }

  double value(NodeIndex k) const {
    if (k == 0 || k >= x.size())
      throw ConfigError("SimulatedTree: label " + std::to_string(k) + " out of range");
    return x[k];
  }

  // (X_k, X_{[k/2]}, ..., X_{[k/2^{p-1}]})
  Eigen::VectorXd regression_vector(NodeIndex k) const {
    if (generation_of(k) < shape.p - 1)
      throw ConfigError("regression_vector: cell " + std::to_string(k) +
                        " is shallower than order " + std::to_string(shape.p));
    Eigen::VectorXd v(shape.p);
    for (int i = 0; i < shape.p; ++i) v(i) = value(k >> i);
    return v;
  }
};

inline SimulatedTree simulate(const BarModel& model, const NoiseModel& noise,
                              const InitSpec& init, int n, std::uint64_t seed,
                              bool record_noise = true) {
  const int p = model.p;
  if (n < p) throw ModelError("simulate: need n >= p");
  if (n > kMaxSimulatedGeneration)
    throw ModelError("simulate: generation " + std::to_string(n) + " exceeds the cap of " +
                     std::to_string(kMaxSimulatedGeneration));

  SimulatedTree tree;
  tree.shape = TreeShape(n, p);
  tree.seed = seed;
  tree.moments = noise.moments;
  tree.dependence_case = noise.dependence_case;
  tree.noise_recorded = record_noise && noise.family != NoiseFamily::none;
  const std::size_t slots = static_cast<std::size_t>(subtree_size(n)) + 1;
  tree.x.assign(slots, 0.0);
  if (tree.noise_recorded) tree.eps.assign(slots, 0.0);

  // initial cells 1 .. 2^p - 1
  const NodeIndex init_last = (NodeIndex{1} << p) - 1;
  switch (init.kind) {
    case InitSpec::Kind::zero:
      break;
    case InitSpec::Kind::constant:
      for (NodeIndex k = 1; k <= init_last; ++k) tree.x[k] = init.value;
      break;
    case InitSpec::Kind::vector:
      if (static_cast<NodeIndex>(init.values.size()) != init_last)
        throw ConfigError("simulate: init vector must list X_1..X_" +
                          std::to_string(init_last));
      for (NodeIndex k = 1; k <= init_last; ++k)
        tree.x[k] = init.values(static_cast<Eigen::Index>(k - 1));
      break;
    case InitSpec::Kind::gaussian: {
      const double sd = std::sqrt(init.value);
      for (NodeIndex k = 1; k <= init_last; ++k) {
        CounterRng r(mix64(seed ^ kStreamInit, k));
        tree.x[k] = sd * r.next_normal();
      }
      break;
    }
  }

  // offspring of every mother from generation p-1 through n-1
  const NodeIndex first_mother = NodeIndex{1} << (p - 1);
  const NodeIndex last_mother = (NodeIndex{1} << n) - 1;
  for (NodeIndex k = first_mother; k <= last_mother; ++k) {
    CounterRng rng(mix64(seed ^ kStreamNoise, k));
    const auto [ee, eo] = noise.sample_pair(tree.x[k], rng);
    double mean_e = model.a(0);
    double mean_o = model.b(0);
    for (int i = 1; i <= p; ++i) {
      const double xv = tree.x[k >> (i - 1)];
      mean_e += model.a(i) * xv;
      mean_o += model.b(i) * xv;
    }
    tree.x[2 * k] = mean_e + ee;
    tree.x[2 * k + 1] = mean_o + eo;
    if (tree.noise_recorded) {
      tree.eps[2 * k] = ee;
      tree.eps[2 * k + 1] = eo;
    }
  }
  return tree;
}

}  // namespace barlab
