// barlab: simulate bifurcating autoregressions, estimate them, and check the
// estimators' deviation behaviour against their theoretical limits.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "barlab/config.hpp"
#include "barlab/errors.hpp"
#include "barlab/estimate.hpp"
#include "barlab/io.hpp"
#include "barlab/limits.hpp"
#include "barlab/model.hpp"
#include "barlab/verify.hpp"

namespace {

struct Options {
  std::string config_path;
  std::string out_dir = "out";
  std::string tree_path;
  long long seed = -1;  // -1: keep the seed from the config file
  int workers = 1;
  bool assert_checks = false;
};

barlab::RunConfig load_config(const Options& opt) {
  std::ifstream in(opt.config_path);
  if (!in) throw barlab::ConfigError("cannot open config '" + opt.config_path + "'");
  barlab::RunConfig rc = barlab::build_run_config(barlab::parse_config(in));
  if (opt.seed >= 0) rc.mc.master_seed = static_cast<std::uint64_t>(opt.seed);
  rc.mc.workers = opt.workers;
  return rc;
}

int cmd_simulate(const Options& opt) {
  const barlab::RunConfig rc = load_config(opt);
  const int n = rc.mc.n_grid.back();
  const barlab::SimulatedTree tree =
      barlab::simulate(rc.model, rc.noise, rc.init, n, rc.mc.master_seed, rc.mc.record_noise);
  std::filesystem::create_directories(opt.out_dir);
  const std::string path = (std::filesystem::path(opt.out_dir) / "tree.csv").string();
  barlab::write_tree_csv(path, tree);
  std::cout << "wrote " << path << " (p=" << tree.p() << " n=" << tree.n()
            << " seed=" << tree.seed << ")\n";
  return 0;
}

int cmd_estimate(const Options& opt) {
  const barlab::RunConfig rc = load_config(opt);
  const int n = rc.mc.n_grid.back();
  barlab::EstimationResult est;
  if (!opt.tree_path.empty()) {
    const barlab::SimulatedTree tree = barlab::read_tree_csv(opt.tree_path);
    est = barlab::estimate_tree(tree, tree.n());
  } else {
    const barlab::SimulatedTree tree =
        barlab::simulate(rc.model, rc.noise, rc.init, n, rc.mc.master_seed, rc.mc.record_noise);
    est = barlab::estimate_tree(tree, n);
  }
  const std::string text = barlab::estimation_to_json(est).dump(2) + "\n";
  std::filesystem::create_directories(opt.out_dir);
  barlab::write_text_file(std::filesystem::path(opt.out_dir) / "estimate.json", text);
  std::cout << text;
  return 0;
}

int cmd_limits(const Options& opt) {
  const barlab::RunConfig rc = load_config(opt);
  const barlab::LimitSet ls = barlab::compute_limits(rc.model, rc.noise.moments);
  const std::string text =
      barlab::limits_to_json(rc.model, rc.noise.moments, ls).dump(2) + "\n";
  std::filesystem::create_directories(opt.out_dir);
  barlab::write_text_file(std::filesystem::path(opt.out_dir) / "limits.json", text);
  std::cout << text;
  return 0;
}

int cmd_montecarlo(const Options& opt) {
  const barlab::RunConfig rc = load_config(opt);
  const barlab::McReport rep = barlab::run_replicates(rc.mc);
  barlab::write_montecarlo_outputs(opt.out_dir, rep, barlab::config_echo(rc), rc.model.p,
                                   rc.write_replicates);
  bool all_pass = true;
  for (const auto& c : rep.checks) {
    std::cout << (c.pass ? "pass " : "FAIL ") << c.name
              << (c.detail.empty() ? "" : "  " + c.detail) << "\n";
    all_pass = all_pass && c.pass;
  }
  std::cout << "report: " << (std::filesystem::path(opt.out_dir) / "report.json").string()
            << "\n";
  if (opt.assert_checks && !all_pass) return 3;
  return 0;
}

int cmd_check_scales(const Options& opt) {
  const barlab::RunConfig rc = load_config(opt);
  if (rc.scale_alphas.empty())
    throw barlab::ConfigError("check-scales: config lacks [scales] alphas");
  const int dependence_case =
      rc.scale_case != 0
          ? rc.scale_case
          : (rc.mc.case_override != 0 ? rc.mc.case_override : rc.noise.dependence_case);
  const std::string text =
      barlab::scales_to_json(dependence_case, rc.model.beta, rc.scale_alphas).dump(2) + "\n";
  std::cout << text;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bifurcating autoregression laboratory"};
  app.require_subcommand(1);

  Options opt;
  auto add_common = [&](CLI::App* sub, bool needs_config = true) {
    auto* c = sub->add_option("--config", opt.config_path, "run configuration file");
    if (needs_config) c->required();
    sub->add_option("--seed", opt.seed, "override the seed from the config file");
    sub->add_option("--out", opt.out_dir, "output directory (default: out)");
  };

  auto* sim = app.add_subcommand("simulate", "grow one tree and write it as CSV");
  add_common(sim);
  auto* est = app.add_subcommand("estimate", "least-squares fit of one tree");
  add_common(est);
  est->add_option("--tree", opt.tree_path, "estimate a previously written tree.csv");
  auto* lim = app.add_subcommand("limits", "limit matrices and rate coefficients");
  add_common(lim);
  auto* mc = app.add_subcommand("montecarlo", "replicated estimation campaign");
  add_common(mc);
  mc->add_option("--workers", opt.workers, "simulation threads (results are identical)");
  mc->add_flag("--assert", opt.assert_checks, "exit 3 if any report check fails");
  auto* scales = app.add_subcommand("check-scales", "admissibility of power-law scales");
  add_common(scales);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (sim->parsed()) return cmd_simulate(opt);
    if (est->parsed()) return cmd_estimate(opt);
    if (lim->parsed()) return cmd_limits(opt);
    if (mc->parsed()) return cmd_montecarlo(opt);
    if (scales->parsed()) return cmd_check_scales(opt);
  } catch (const barlab::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const barlab::SingularDesign& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const barlab::ModelError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
