#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "barlab/numeric.hpp"

using namespace barlab;

TEST_CASE("kahan summation rescues cancelled terms") {
  KahanSum s;
  s.add(1e16);
  s.add(1.0);
  s.add(-1e16);
  CHECK(s.value() == 1.0);  // naive summation would return 0

  // matrix flavour behaves elementwise
  KahanAccum<Eigen::MatrixXd> m(2, 2);
  Eigen::MatrixXd big = Eigen::MatrixXd::Constant(2, 2, 1e16);
  Eigen::MatrixXd one = Eigen::MatrixXd::Constant(2, 2, 1.0);
  m.add(big);
  m.add(one);
  m.add(-big);
  CHECK(m.value() == one);
}

TEST_CASE("kronecker product lays out blocks row-major in the first factor") {
  Eigen::MatrixXd a(2, 2), b(2, 2);
  a << 1, 2, 3, 4;
  b << 0, 5, 6, 7;
  const Eigen::MatrixXd k = kron(a, b);
  REQUIRE(k.rows() == 4);
  REQUIRE(k.cols() == 4);
  Eigen::MatrixXd expect(4, 4);
  expect << 0, 5, 0, 10,
            6, 7, 12, 14,
            0, 15, 0, 20,
            18, 21, 24, 28;
  CHECK((k - expect).norm() == 0.0);

  // identity factor: block-diagonal stacking
  const Eigen::MatrixXd i2 = Eigen::MatrixXd::Identity(2, 2);
  const Eigen::MatrixXd kb = kron(i2, b);
  CHECK(kb.block(0, 0, 2, 2) == b);
  CHECK(kb.block(2, 2, 2, 2) == b);
  CHECK(kb.block(0, 2, 2, 2).norm() == 0.0);
}

TEST_CASE("spectral norm equals the largest singular value") {
  Eigen::MatrixXd d(2, 2);
  d << 3, 0, 0, -4;
  CHECK_THAT(spectral_norm(d), Catch::Matchers::WithinAbs(4.0, 1e-12));

  const double c = std::cos(0.7), s = std::sin(0.7);
  Eigen::MatrixXd rot(2, 2);
  rot << c, -s, s, c;
  CHECK_THAT(spectral_norm(rot), Catch::Matchers::WithinAbs(1.0, 1e-12));

  Eigen::MatrixXd outer = Eigen::Vector2d(1, 2) * Eigen::RowVector2d(2, 1);
  // rank one: norm is the product of the factor lengths
  CHECK_THAT(spectral_norm(outer), Catch::Matchers::WithinRel(std::sqrt(5.0) * std::sqrt(5.0), 1e-12));
}

TEST_CASE("relative frobenius error") {
  Eigen::MatrixXd a(2, 2), b(2, 2);
  a << 1, 0, 0, 1;
  b << 1.1, 0, 0, 1.1;
  CHECK_THAT(rel_frobenius_error(b, a), Catch::Matchers::WithinRel(0.1, 1e-12));
}

TEST_CASE("spd condition number") {
  Eigen::MatrixXd d(2, 2);
  d << 10, 0, 0, 1;
  CHECK_THAT(spd_condition(d), Catch::Matchers::WithinRel(10.0, 1e-12));
  Eigen::MatrixXd sing(2, 2);
  sing << 1, 1, 1, 1;
  CHECK(std::isinf(spd_condition(sing)));
}

TEST_CASE("normal cdf reference points") {
  CHECK_THAT(normal_cdf(0.0), Catch::Matchers::WithinAbs(0.5, 1e-15));
  CHECK_THAT(normal_cdf(1.959963984540054), Catch::Matchers::WithinAbs(0.975, 1e-12));
  CHECK_THAT(normal_cdf(-1.959963984540054), Catch::Matchers::WithinAbs(0.025, 1e-12));
  CHECK(normal_cdf(8.0) > 1.0 - 1e-14);
}

TEST_CASE("t quantiles: table head and normal tail") {
  CHECK_THAT(t_quantile_975(1), Catch::Matchers::WithinAbs(12.706, 5e-3));
  CHECK_THAT(t_quantile_975(10), Catch::Matchers::WithinAbs(2.228, 5e-3));
  CHECK_THAT(t_quantile_975(1000), Catch::Matchers::WithinAbs(1.96, 5e-3));
  CHECK(t_quantile_975(5) > t_quantile_975(6));  // monotone in df
}

TEST_CASE("gauss-legendre integrates low-degree polynomials exactly") {
  const QuadratureRule q = gauss_legendre(5);
  REQUIRE(q.nodes.size() == 5);
  auto integrate = [&](auto f) {
    double s = 0;
    for (std::size_t i = 0; i < q.nodes.size(); ++i) s += q.weights[i] * f(q.nodes[i]);
    return s;
  };
  CHECK_THAT(integrate([](double) { return 1.0; }), Catch::Matchers::WithinAbs(2.0, 1e-13));
  CHECK_THAT(integrate([](double x) { return x; }), Catch::Matchers::WithinAbs(0.0, 1e-13));
  CHECK_THAT(integrate([](double x) { return x * x; }),
             Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-13));
  CHECK_THAT(integrate([](double x) { return x * x * x * x; }),
             Catch::Matchers::WithinAbs(2.0 / 5.0, 1e-13));
  // degree 9 is the exactness boundary for 5 nodes
  CHECK_THAT(integrate([](double x) { return std::pow(x, 8); }),
             Catch::Matchers::WithinAbs(2.0 / 9.0, 1e-12));
}

TEST_CASE("gauss-hermite computes standard normal moments") {
  const QuadratureRule q = gauss_hermite(10);
  auto expect = [&](auto f) {
    // E[f(Z)] for Z standard normal: pi^{-1/2} sum w_i f(sqrt(2) x_i)
    double s = 0;
    for (std::size_t i = 0; i < q.nodes.size(); ++i)
      s += q.weights[i] * f(std::sqrt(2.0) * q.nodes[i]);
    return s / std::sqrt(std::acos(-1.0));
  };
  CHECK_THAT(expect([](double) { return 1.0; }), Catch::Matchers::WithinAbs(1.0, 1e-13));
  CHECK_THAT(expect([](double z) { return z * z; }), Catch::Matchers::WithinAbs(1.0, 1e-13));
  CHECK_THAT(expect([](double z) { return z * z * z * z; }),
             Catch::Matchers::WithinAbs(3.0, 1e-12));
  CHECK_THAT(expect([](double z) { return std::pow(z, 6); }),
             Catch::Matchers::WithinAbs(15.0, 1e-11));
}
