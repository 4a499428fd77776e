#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>
#include <string>

#include "barlab/config.hpp"
#include "barlab/errors.hpp"
#include "barlab/estimate.hpp"
#include "barlab/io.hpp"
#include "barlab/limits.hpp"
#include "barlab/model.hpp"

using namespace barlab;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

const char* kReferenceText = R"(# reference campaign
[model]
p = 1
a = [1.0, 0.5]
b = [1.0, 0.5]
norm = "spectral"

[noise]
family = "gaussian_pair"
sigma2 = 1.0
rho = 0.3

[init]
kind = "zero"

[experiment]
n_grid = [6, 7, 8]
replicates = 32
seed = 20240801
alpha = 0.25
delta_grid = [0.25, 0.35]
x_grid = [0.2, 0.4]
tail_stat = "theta"
mdp_stat = "sigma2_bar"

[scales]
alphas = [0.1, 0.25, 0.4]
case = 1

[output]
write_replicates = true
)";

}  // namespace

TEST_CASE("config parser handles every value kind") {
  const auto t = parse_config_string(
      "[model] # section\n"
      "flag = true\n"
      "off = false\n"
      "count = 12\n"
      "level = -3.5e-2  # inline comment\n"
      "name = \"with # inside\"\n"
      "grid = [1, -2.5, 3e2,]  # trailing comma is fine\n"
      "empty_ok = [ ]\n");
  CHECK(t.at("model", "flag").bool_v);
  CHECK_FALSE(t.at("model", "off").bool_v);
  CHECK(t.at("model", "count").num_v == 12.0);
  CHECK_THAT(t.at("model", "level").num_v, WithinAbs(-0.035, 1e-18));
  CHECK(t.at("model", "name").str_v == "with # inside");
  const auto& grid = t.at("model", "grid").arr_v;
  REQUIRE(grid.size() == 3);
  CHECK(grid[1] == -2.5);
  CHECK(grid[2] == 300.0);
  CHECK(t.at("model", "empty_ok").arr_v.empty());
  CHECK(t.has("model", "flag"));
  CHECK_FALSE(t.has("model", "missing"));
  CHECK_FALSE(t.has("other", "flag"));
}

TEST_CASE("config parser reports the offending line") {
  auto expect_throw = [](const std::string& text, const std::string& needle) {
    try {
      parse_config_string(text);
      FAIL("expected a parse failure for: " << text);
    } catch (const ConfigError& e) {
      CHECK_THAT(e.what(), ContainsSubstring(needle));
    }
  };
  expect_throw("[model\np = 1\n", "line 1");
  expect_throw("p = 1\n", "before any [section]");
  expect_throw("[model]\np = 1\np = 2\n", "duplicate key 'p'");
  expect_throw("[model]\nname = \"oops\n", "unterminated string");
  expect_throw("[model]\ngrid = [1, 2\n", "close on the same line");
  expect_throw("[model]\njust a line\n", "expected key = value");
  expect_throw("[model]\np =\n", "missing value");
  expect_throw("[model]\np = 12abc\n", "cannot parse number");
  expect_throw("[model]\n = 3\n", "empty key");
}

TEST_CASE("required-kind accessors refuse mismatched values") {
  const auto t = parse_config_string("[s]\nx = 1.5\nb = true\na = [1]\nw = \"hi\"\n");
  CHECK_THROWS_AS(detail::require_integer(t.at("s", "x"), "x"), ConfigError);
  CHECK_THROWS_AS(detail::require_number(t.at("s", "b"), "b"), ConfigError);
  CHECK_THROWS_AS(detail::require_bool(t.at("s", "x"), "x"), ConfigError);
  CHECK_THROWS_AS(detail::require_string(t.at("s", "x"), "x"), ConfigError);
  CHECK_THROWS_AS(detail::require_array(t.at("s", "w"), "w"), ConfigError);
  CHECK_THROWS_AS(detail::require_integer(t.at("s", "a"), "a"), ConfigError);
}

TEST_CASE("run config assembles the reference campaign") {
  const RunConfig rc = build_run_config(parse_config_string(kReferenceText));
  CHECK(rc.p == 1);
  CHECK(rc.model.beta == 0.5);
  CHECK(rc.noise.family == NoiseFamily::gaussian_pair);
  CHECK(rc.noise.moments.rho == 0.3);
  CHECK(rc.mc.n_grid == std::vector<int>{6, 7, 8});
  CHECK(rc.mc.replicates == 32);
  CHECK(rc.mc.master_seed == 20240801u);
  CHECK(rc.mc.alpha == 0.25);
  CHECK(rc.mc.delta_grid == std::vector<double>{0.25, 0.35});
  CHECK(rc.mc.tail_stat == Stat::theta_err);
  CHECK(rc.mc.mdp_stat == Stat::sigma2_bar_err);
  CHECK(rc.scale_alphas.size() == 3);
  CHECK(rc.scale_case == 1);
  CHECK(rc.write_replicates);
}

TEST_CASE("run config fills sensible defaults") {
  const RunConfig rc =
      build_run_config(parse_config_string("[model]\np = 2\na = [0, 0.3, 0.2]\nb = [0, 0.2, 0.1]\n"
                                           "allow_nonstable = true\n"));
  CHECK(rc.mc.n_grid == std::vector<int>{5});  // p + 3
  CHECK(rc.mc.replicates == 100);
  CHECK(rc.mc.alpha == 0.25);
  CHECK(rc.noise_family == "gaussian_pair");
  CHECK(rc.noise.moments.sigma2 == 1.0);
  CHECK(rc.init_kind == "zero");
  CHECK(rc.mc.record_noise);
  CHECK(rc.mc.case_override == 0);
  CHECK(rc.scale_alphas.empty());
}

TEST_CASE("run config rejects inconsistent sections") {
  auto build = [](const std::string& text) { return build_run_config(parse_config_string(text)); };
  const std::string base = "[model]\np = 1\na = [1, 0.5]\nb = [1, 0.5]\n";
  CHECK_THROWS_AS(build("[model]\np = 1\na = [1]\nb = [1, 0.5]\n"), ConfigError);
  CHECK_THROWS_AS(build(base + "norm = \"manhattan\"\n"), ConfigError);
  CHECK_THROWS_AS(build(base + "[noise]\nfamily = \"cauchy\"\n"), ConfigError);
  CHECK_THROWS_AS(build(base + "[init]\nkind = \"warm\"\n"), ConfigError);
  CHECK_THROWS_AS(build(base + "[experiment]\ncase = 3\n"), ConfigError);
  CHECK_THROWS_AS(build(base + "[experiment]\nseed = -4\n"), ConfigError);
  CHECK_THROWS_AS(build(base + "[experiment]\nn_grid = [6.5]\n"), ConfigError);
  CHECK_THROWS_AS(build(base + "[experiment]\ntail_stat = \"bogus\"\n"), ConfigError);
  CHECK_THROWS_AS(build(base + "[experiment]\nunknown = 1\n"), ConfigError);
  CHECK_THROWS_AS(build(base + "[mystery]\nx = 1\n"), ConfigError);
  // the unstable reference of order one requires the explicit override
  CHECK_THROWS_AS(build("[model]\np = 1\na = [1, 1.2]\nb = [1, 0.5]\n"), ModelError);
}

TEST_CASE("init kinds map onto the simulator's specifications") {
  auto build = [](const std::string& text) { return build_run_config(parse_config_string(text)); };
  const std::string base = "[model]\np = 1\na = [1, 0.5]\nb = [1, 0.5]\n[init]\n";
  CHECK(build(base + "kind = \"constant\"\nvalue = 2.5\n").init.value == 2.5);
  const RunConfig vec_rc = build(base + "kind = \"vector\"\nvalues = [4.0]\n");
  REQUIRE(vec_rc.init.values.size() == 1);
  CHECK(vec_rc.init.values(0) == 4.0);
  CHECK(build(base + "kind = \"gaussian\"\n").init.value == 1.0);
  CHECK(build(base + "kind = \"gaussian\"\nvalue = 2.25\n").init.value == 2.25);
}

TEST_CASE("skewed family defaults its fourth moment from sigma2") {
  const RunConfig rc = build_run_config(
      parse_config_string("[model]\np = 1\na = [0.8, 0.6]\nb = [0.7, 0.5]\n"
                          "[noise]\nfamily = \"skew_switching_pair\"\nsigma2 = 1.0\nrho = 0.2\n"));
  CHECK(rc.tau4 == 3.6);
  CHECK(rc.noise.dependence_case == 2);
  CHECK_THAT(rc.noise.moments.tau4, WithinAbs(3.6, 1e-6));
}

TEST_CASE("config echo is deterministic and never names the worker count") {
  const RunConfig rc = build_run_config(parse_config_string(kReferenceText));
  const nlohmann::json echo = config_echo(rc);
  const std::string dump = echo.dump();
  CHECK(dump.find("workers") == std::string::npos);
  CHECK(dump.find("out") == std::string::npos);
  CHECK(echo["experiment"]["seed"] == 20240801u);
  CHECK_THAT(echo["noise"]["moments"]["nu2"].get<double>(), WithinAbs(1.18, 1e-15));
  CHECK(echo["model"]["beta"].get<double>() == 0.5);
  // a reparse of the same text echoes identical bytes
  const RunConfig again = build_run_config(parse_config_string(kReferenceText));
  CHECK(config_echo(again).dump() == dump);
}

TEST_CASE("seventeen-digit formatting round trips doubles") {
  for (double v : {1.0 / 3.0, 0.1, 1e-300, -2.5e17, 6.115301002159021, 0.0}) {
    CHECK(std::stod(fmt17(v)) == v);
  }
}

TEST_CASE("tree files round trip bitwise") {
  const BarModel m = build_model(2, [] {
        Eigen::VectorXd a(3);
        a << 0.4, 0.2, 0.1;
        return a;
      }(), [] {
        Eigen::VectorXd b(3);
        b << 0.3, -0.2, 0.15;
        return b;
      }(), true);
  const SimulatedTree tree = simulate(m, NoiseModel::gaussian(1.0, 0.3), InitSpec::zero(), 5, 77);

  std::ostringstream out;
  write_tree_csv(out, tree);
  std::istringstream in(out.str());
  const SimulatedTree back = read_tree_csv(in);

  CHECK(back.p() == 2);
  CHECK(back.n() == 5);
  CHECK(back.seed == 77u);
  CHECK(back.noise_recorded);
  CHECK(back.dependence_case == tree.dependence_case);
  CHECK(back.moments.sigma2 == tree.moments.sigma2);
  CHECK(back.moments.nu2 == tree.moments.nu2);
  REQUIRE(back.x.size() == tree.x.size());
  for (NodeIndex k = 1; k <= subtree_size(5); ++k) {
    CHECK(back.x[k] == tree.x[k]);
    if (k >= 4) CHECK(back.eps[k] == tree.eps[k]);
  }

  // the reloaded tree estimates exactly like the original
  const EstimationResult a = estimate_tree(tree, 5);
  const EstimationResult b = estimate_tree(back, 5);
  CHECK(a.theta == b.theta);
  CHECK(a.sigma2_hat == b.sigma2_hat);
  CHECK(a.rho_hat == b.rho_hat);
  REQUIRE(a.sigma2_bar.has_value());
  REQUIRE(b.sigma2_bar.has_value());
  CHECK(*a.sigma2_bar == *b.sigma2_bar);
}

TEST_CASE("value-only tree files drop the noise column") {
  const BarModel m = build_model(1, [] {
        Eigen::VectorXd a(2);
        a << 1.0, 0.5;
        return a;
      }(), [] {
        Eigen::VectorXd b(2);
        b << 1.0, 0.5;
        return b;
      }());
  const SimulatedTree tree =
      simulate(m, NoiseModel::gaussian(1.0, 0.0), InitSpec::zero(), 4, 5, false);
  std::ostringstream out;
  write_tree_csv(out, tree);
  CHECK(out.str().find("values_only") != std::string::npos);
  std::istringstream in(out.str());
  const SimulatedTree back = read_tree_csv(in);
  CHECK_FALSE(back.noise_recorded);
  const EstimationResult est = estimate_tree(back, 4);
  CHECK_FALSE(est.sigma2_bar.has_value());
  CHECK_FALSE(est.M.has_value());
}

TEST_CASE("tree file validation") {
  auto read = [](const std::string& text) {
    std::istringstream in(text);
    return read_tree_csv(in);
  };
  CHECK_THROWS_AS(read(""), ConfigError);
  CHECK_THROWS_AS(read("label,generation,X,eps\n"), ConfigError);
  const std::string header =
      "# barlab-tree p=1 n=1 seed=0 noise=recorded case=1 sigma2=1 rho=0 tau4=3 nu2=1\n";
  CHECK_THROWS_AS(read(header), ConfigError);                       // no column header
  CHECK_THROWS_AS(read(header + "label,generation,X,eps\n"), ConfigError);  // no rows
  const std::string cols = "label,generation,X,eps\n";
  CHECK_THROWS_AS(read(header + cols + "9,3,1.0,\n"), ConfigError);  // label out of range
  CHECK_THROWS_AS(read(header + cols + "1,0\n"), ConfigError);       // short row
  CHECK_NOTHROW(read(header + cols + "1,0,0.5,\n2,1,1.0,0.1\n3,1,2.0,0.2\n"));
  // a missing header field is named in the failure
  try {
    read("# barlab-tree p=1 n=1 seed=0 noise=recorded case=1 sigma2=1 rho=0 tau4=3\n" + cols);
    FAIL("expected a header failure");
  } catch (const ConfigError& e) {
    CHECK_THAT(e.what(), ContainsSubstring("nu2"));
  }
}

TEST_CASE("json serializers expose the headline quantities") {
  const BarModel m = build_model(1, [] {
        Eigen::VectorXd a(2);
        a << 1.0, 0.5;
        return a;
      }(), [] {
        Eigen::VectorXd b(2);
        b << 1.0, 0.5;
        return b;
      }());
  const NoiseModel noise = NoiseModel::gaussian(1.0, 0.3);
  const SimulatedTree tree = simulate(m, noise, InitSpec::zero(), 5, 11);
  const nlohmann::json est = estimation_to_json(estimate_tree(tree, 5));
  for (const char* key : {"n", "p", "seed", "theta", "S", "cond", "sigma2_hat", "rho_hat",
                          "sigma2_bar", "rho_bar", "M", "bracket"}) {
    INFO(key);
    CHECK(est.contains(key));
  }
  CHECK(est["theta"].size() == 4);

  const LimitSet ls = compute_limits(m, noise.moments);
  const nlohmann::json lim = limits_to_json(m, noise.moments, ls);
  CHECK_THAT(lim["sigma_norm"].get<double>(),
             WithinAbs((19.0 + std::sqrt(313.0)) / 6.0, 1e-12));
  CHECK(lim["fixed_point"]["converged"].get<bool>());
  CHECK_THAT(lim["rates"]["sigma2_denom"].get<double>(), WithinAbs(2.18, 1e-12));

  const nlohmann::json sc = scales_to_json(1, 0.8, {0.1, 0.25, 0.4});
  CHECK(sc["regime"] == "beta>1/2");
  REQUIRE(sc["alphas"].size() == 3);
  CHECK(sc["alphas"][0]["admissible"].get<bool>());
  CHECK_FALSE(sc["alphas"][1]["admissible"].get<bool>());
  CHECK_FALSE(sc["alphas"][2]["admissible"].get<bool>());
}
