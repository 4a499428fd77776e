#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "barlab/errors.hpp"
#include "barlab/estimate.hpp"
#include "barlab/model.hpp"
#include "barlab/numeric.hpp"

using namespace barlab;
using Catch::Matchers::WithinAbs;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

// tiny first-order tree with values 1..7 and hand-set noise
SimulatedTree ladder_tree() {
  SimulatedTree t;
  t.shape = TreeShape(2, 1);
  t.x = {0, 1, 2, 3, 4, 5, 6, 7};  // slot 0 unused
  t.eps = {0, 0, 0.1, -0.2, 0.3, 0.4, -0.5, 0.6};
  t.noise_recorded = true;
  t.moments = {1.0, 0.25, 3.0, 1.125};
  t.dependence_case = 1;
  return t;
}

// brute-force fit: stack one row per offspring and QR-solve each half
Eigen::VectorXd stacked_ls(const SimulatedTree& tree, int n) {
  const int p = tree.p();
  const LabelRange mothers = mother_range(n, p);
  Eigen::MatrixXd design(mothers.size(), p + 1);
  Eigen::VectorXd ye(mothers.size()), yo(mothers.size());
  Eigen::Index row = 0;
  for (NodeIndex k : mothers) {
    design.row(row) = design_vector(tree, k).transpose();
    ye(row) = tree.x[2 * k];
    yo(row) = tree.x[2 * k + 1];
    ++row;
  }
  Eigen::VectorXd theta(2 * (p + 1));
  theta.head(p + 1) = design.colPivHouseholderQr().solve(ye);
  theta.tail(p + 1) = design.colPivHouseholderQr().solve(yo);
  return theta;
}

}  // namespace

TEST_CASE("gram matrix of the ladder tree") {
  const SimulatedTree t = ladder_tree();
  const Eigen::MatrixXd s = s_matrix(t, 1);  // labels 1..3, values 1,2,3
  REQUIRE(s.rows() == 2);
  CHECK(s(0, 0) == 3.0);
  CHECK(s(0, 1) == 6.0);
  CHECK(s(1, 0) == 6.0);
  CHECK(s(1, 1) == 14.0);
}

TEST_CASE("exact linear children are recovered without residual") {
  // x_{2k} = 2 x_k and x_{2k+1} = 1 + 2 x_k hold exactly on the ladder
  const SimulatedTree t = ladder_tree();
  const ThetaFit fit = theta_hat(t, 2);
  CHECK_THAT(fit.theta(0), WithinAbs(0.0, 1e-12));
  CHECK_THAT(fit.theta(1), WithinAbs(2.0, 1e-12));
  CHECK_THAT(fit.theta(2), WithinAbs(1.0, 1e-12));
  CHECK_THAT(fit.theta(3), WithinAbs(2.0, 1e-12));

  const auto res = residuals(t, 2, fit.theta);
  REQUIRE(res.size() == 3);
  for (const auto& r : res) {
    CHECK_THAT(r.even, WithinAbs(0.0, 1e-12));
    CHECK_THAT(r.odd, WithinAbs(0.0, 1e-12));
  }
  CHECK_THAT(sigma2_hat(res, 2), WithinAbs(0.0, 1e-24));
  CHECK_THAT(rho_hat(res, 2), WithinAbs(0.0, 1e-24));
}

TEST_CASE("noise estimators divide by the subtree size as written") {
  const SimulatedTree t = ladder_tree();
  // residuals under theta = 0 are the child values themselves
  const auto res = residuals(t, 2, Eigen::VectorXd::Zero(4));
  // (4+9+16+25+36+49) / (2*3) and (2*3 + 4*5 + 6*7) / 3
  CHECK_THAT(sigma2_hat(res, 2), WithinAbs(139.0 / 6.0, 1e-13));
  CHECK_THAT(rho_hat(res, 2), WithinAbs(68.0 / 3.0, 1e-13));
  // count normalizer coincides here because every pair below depth 2 is summed
  EstimationOptions opts;
  opts.count_normalizer = true;
  CHECK_THAT(sigma2_hat(res, 2, opts), WithinAbs(139.0 / 6.0, 1e-13));
}

TEST_CASE("noise averages run over the deeper shifted set") {
  const SimulatedTree t = ladder_tree();
  // mothers {2,3}: children 4..7 carry eps (0.3, 0.4, -0.5, 0.6)
  CHECK_THAT(sigma2_bar(t, 2), WithinAbs(0.86 / 6.0, 1e-15));
  CHECK_THAT(rho_bar(t, 2), WithinAbs(-0.06, 1e-15));
  EstimationOptions opts;
  opts.count_normalizer = true;
  // two pairs summed instead of |T_1| = 3
  CHECK_THAT(sigma2_bar(t, 2, opts), WithinAbs(0.86 / 4.0, 1e-15));
  CHECK_THAT(rho_bar(t, 2, opts), WithinAbs(-0.09, 1e-15));
}

TEST_CASE("martingale vector and bracket on the ladder") {
  const SimulatedTree t = ladder_tree();
  const Martingale m = martingale(t, 2);
  REQUIRE(m.M.size() == 4);
  CHECK_THAT(m.M(0), WithinAbs(-0.1, 1e-15));
  CHECK_THAT(m.M(1), WithinAbs(-0.8, 1e-15));
  CHECK_THAT(m.M(2), WithinAbs(0.8, 1e-15));
  CHECK_THAT(m.M(3), WithinAbs(2.4, 1e-15));

  const Eigen::MatrixXd s = s_matrix(t, 1);
  REQUIRE(m.bracket.rows() == 4);
  CHECK((m.bracket.block(0, 0, 2, 2) - s).norm() == 0.0);
  CHECK((m.bracket.block(0, 2, 2, 2) - 0.25 * s).norm() == 0.0);
  CHECK((m.bracket.block(2, 2, 2, 2) - s).norm() == 0.0);
}

TEST_CASE("zero-noise simulation recovers coefficients to working precision") {
  const BarModel m1 = build_model(1, vec({1.0, 0.5}), vec({0.5, -0.3}));
  const SimulatedTree t1 =
      simulate(m1, NoiseModel::none(), InitSpec::constant(3.0), 8, 0);
  const ThetaFit f1 = theta_hat(t1, 8);
  CHECK((f1.theta - m1.vec_theta()).norm() < 1e-8);

  const BarModel m2 =
      build_model(2, vec({0.5, 0.3, 0.2}), vec({-0.5, 0.2, 0.1}), true);
  const SimulatedTree t2 = simulate(m2, NoiseModel::none(),
                                    InitSpec::explicit_vector(vec({1.0, 2.0, 3.0})), 8, 0);
  const ThetaFit f2 = theta_hat(t2, 8);
  CHECK((f2.theta - m2.vec_theta()).norm() < 1e-8);
}

TEST_CASE("constant regressors are rejected as singular") {
  // starting at the fixed point of both maps keeps X identically 2
  const BarModel m = build_model(1, vec({1.0, 0.5}), vec({1.0, 0.5}));
  const SimulatedTree t =
      simulate(m, NoiseModel::none(), InitSpec::constant(2.0), 6, 0);
  CHECK_THROWS_AS(theta_hat(t, 6), SingularDesign);
}

TEST_CASE("least squares matches a stacked QR oracle under noise") {
  struct Case {
    int p;
    Eigen::VectorXd a, b;
  };
  const std::vector<Case> cases = {
      {1, vec({1.0, 0.5}), vec({0.8, -0.4})},
      {2, vec({0.4, 0.25, 0.1}), vec({0.2, -0.3, 0.15})},
      {3, vec({0.3, 0.2, 0.1, 0.05}), vec({-0.2, 0.15, -0.1, 0.05})},
  };
  for (const auto& c : cases) {
    const BarModel m = build_model(c.p, c.a, c.b, true);
    const NoiseModel noise = NoiseModel::gaussian(1.0, 0.3);
    const SimulatedTree t = simulate(m, noise, InitSpec::gaussian(1.0), c.p + 4, 99 + c.p);
    const ThetaFit fit = theta_hat(t, c.p + 4);
    const Eigen::VectorXd oracle = stacked_ls(t, c.p + 4);
    CHECK((fit.theta - oracle).norm() / oracle.norm() < 1e-9);
  }
}

TEST_CASE("fitted residuals are orthogonal to the design") {
  const BarModel m = build_model(1, vec({1.0, 0.5}), vec({0.8, -0.4}));
  const NoiseModel noise = NoiseModel::gaussian(1.0, 0.3);
  const SimulatedTree t = simulate(m, noise, InitSpec::zero(), 7, 5);
  const ThetaFit fit = theta_hat(t, 7);
  const auto res = residuals(t, 7, fit.theta);
  Eigen::VectorXd even_proj = Eigen::VectorXd::Zero(2), odd_proj = Eigen::VectorXd::Zero(2);
  for (const auto& r : res) {
    const Eigen::VectorXd y = design_vector(t, r.k);
    even_proj += r.even * y;
    odd_proj += r.odd * y;
  }
  CHECK(even_proj.norm() < 1e-8);
  CHECK(odd_proj.norm() < 1e-8);
}

TEST_CASE("estimation error equals the normal-equation solve of the martingale") {
  const BarModel m = build_model(1, vec({1.0, 0.5}), vec({0.8, -0.4}));
  const NoiseModel noise = NoiseModel::gaussian(1.0, 0.3);
  const SimulatedTree t = simulate(m, noise, InitSpec::zero(), 8, 17);
  const int n = 8;
  const ThetaFit fit = theta_hat(t, n);
  const Eigen::VectorXd mvec = martingale_vector(t, n);
  const Eigen::MatrixXd s = s_matrix(t, n - 1);
  Eigen::VectorXd predicted(4);
  predicted.head(2) = s.ldlt().solve(mvec.head(2));
  predicted.tail(2) = s.ldlt().solve(mvec.tail(2));
  const Eigen::VectorXd actual = fit.theta - m.vec_theta();
  CHECK((actual - predicted).norm() < 1e-9);
}

TEST_CASE("daughter swap leaves the pooled noise estimators invariant") {
  const BarModel m = build_model(1, vec({1.0, 0.5}), vec({0.8, -0.4}));
  const NoiseModel noise = NoiseModel::gaussian(1.0, 0.0);
  SimulatedTree t = simulate(m, noise, InitSpec::zero(), 7, 3);

  SimulatedTree swapped = t;
  // under theta = 0 the residuals are the child values themselves, so the
  // swap exchanges even/odd within every pair and the pooled sums survive
  for (NodeIndex k : mother_range(7, 1)) {
    std::swap(swapped.x[2 * k], swapped.x[2 * k + 1]);
    std::swap(swapped.eps[2 * k], swapped.eps[2 * k + 1]);
  }
  const auto res_orig = residuals(t, 7, Eigen::VectorXd::Zero(4));
  const auto res_swap = residuals(swapped, 7, Eigen::VectorXd::Zero(4));
  REQUIRE(res_orig.size() == res_swap.size());
  // rho is symmetric under the swap; sigma2 keeps the pooled sum
  CHECK_THAT(rho_hat(res_swap, 7), WithinAbs(rho_hat(res_orig, 7), 1e-12));
  CHECK_THAT(sigma2_hat(res_swap, 7), WithinAbs(sigma2_hat(res_orig, 7), 1e-12));
}

TEST_CASE("estimate_tree bundles the pieces consistently") {
  const BarModel m = build_model(1, vec({1.0, 0.5}), vec({1.0, 0.5}));
  const NoiseModel noise = NoiseModel::gaussian(1.0, 0.3);
  const SimulatedTree t = simulate(m, noise, InitSpec::zero(), 8, 11);
  const EstimationResult r = estimate_tree(t, 8);
  CHECK(r.n == 8);
  CHECK(r.p == 1);
  CHECK(r.seed == 11);
  REQUIRE(r.sigma2_bar.has_value());
  REQUIRE(r.rho_bar.has_value());
  REQUIRE(r.M.has_value());
  REQUIRE(r.bracket.has_value());
  const ThetaFit direct = theta_hat(t, 8);
  CHECK((r.theta - direct.theta).norm() == 0.0);
  const auto res = residuals(t, 8, direct.theta);
  CHECK(r.sigma2_hat == sigma2_hat(res, 8));
  CHECK(r.rho_hat == rho_hat(res, 8));
  CHECK(*r.sigma2_bar == sigma2_bar(t, 8));
  CHECK(*r.rho_bar == rho_bar(t, 8));
  // estimates at interior generations use the same tree prefix
  const EstimationResult r6 = estimate_tree(t, 6);
  const ThetaFit direct6 = theta_hat(t, 6);
  CHECK((r6.theta - direct6.theta).norm() == 0.0);

  // without recorded noise the noise-average facts are absent
  const SimulatedTree bare = simulate(m, noise, InitSpec::zero(), 6, 11, false);
  const EstimationResult rb = estimate_tree(bare, 6);
  CHECK_FALSE(rb.sigma2_bar.has_value());
  CHECK_FALSE(rb.M.has_value());
}

TEST_CASE("estimators validate their inputs") {
  const SimulatedTree t = ladder_tree();
  CHECK_THROWS_AS(residuals(t, 2, Eigen::VectorXd::Zero(3)), ConfigError);
  CHECK_THROWS_AS(residuals(t, 5, Eigen::VectorXd::Zero(4)), ConfigError);
  CHECK_THROWS_AS(theta_hat(t, 0), ConfigError);
  CHECK_THROWS_AS(s_matrix(t, 9), ConfigError);
  const std::vector<ResidualPair> empty;
  CHECK_THROWS_AS(sigma2_hat(empty, 2), ConfigError);
  CHECK_THROWS_AS(rho_hat(empty, 2), ConfigError);
}
