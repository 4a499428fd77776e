#pragma once

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "barlab/errors.hpp"
#include "barlab/estimate.hpp"
#include "barlab/limits.hpp"
#include "barlab/model.hpp"
#include "barlab/verify.hpp"

namespace barlab {

// %.17g round-trips every double; CSV consumers get exact values
inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline nlohmann::json to_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline nlohmann::json to_json(const Eigen::VectorXd& v) {
  nlohmann::json arr = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

// ---------------------------------------------------------------------------
// tree round trip
// ---------------------------------------------------------------------------

// First line carries the shape and the generating moments, so a reloaded
// tree estimates identically to the in-memory one:
//   # barlab-tree p=1 n=8 seed=42 noise=gaussian_pair case=1 sigma2=.. rho=.. tau4=.. nu2=..
inline void write_tree_csv(std::ostream& out, const SimulatedTree& tree) {
  out << "# barlab-tree p=" << tree.p() << " n=" << tree.n() << " seed=" << tree.seed
      << " noise=" << (tree.noise_recorded ? "recorded" : "values_only")
      << " case=" << tree.dependence_case << " sigma2=" << fmt17(tree.moments.sigma2)
      << " rho=" << fmt17(tree.moments.rho) << " tau4=" << fmt17(tree.moments.tau4)
      << " nu2=" << fmt17(tree.moments.nu2) << "\n";
  out << "label,generation,X,eps\n";
  const NodeIndex last = subtree_size(tree.n());
  const NodeIndex first_noise = NodeIndex{1} << tree.p();
  for (NodeIndex k = 1; k <= last; ++k) {
    out << k << ',' << generation_of(k) << ',' << fmt17(tree.x[k]) << ',';
    if (tree.noise_recorded && k >= first_noise) out << fmt17(tree.eps[k]);
    out << '\n';
  }
}

inline void write_tree_csv(const std::string& path, const SimulatedTree& tree) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open '" + path + "' for writing");
  write_tree_csv(out, tree);
}

namespace detail {

inline std::map<std::string, std::string> parse_header_fields(const std::string& line) {
  std::map<std::string, std::string> fields;
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) {
    const auto eq = tok.find('=');
    if (eq != std::string::npos) fields[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return fields;
}

inline bool strip_comment_is_blank(const std::string& line) {
  for (char c : line) {
    if (c == '#') return true;
    if (!std::isspace(static_cast<unsigned char>(c))) return false;
  }
  return true;
}

}  // namespace detail

inline SimulatedTree read_tree_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("# barlab-tree", 0) != 0)
    throw ConfigError("tree file: missing '# barlab-tree' header");
  const auto fields = detail::parse_header_fields(line);
  auto field = [&](const char* key) -> const std::string& {
    auto it = fields.find(key);
    if (it == fields.end())
      throw ConfigError(std::string("tree file: header lacks '") + key + "'");
    return it->second;
  };
  SimulatedTree tree;
  tree.shape = TreeShape{std::stoi(field("n")), std::stoi(field("p"))};
  tree.seed = std::stoull(field("seed"));
  tree.noise_recorded = field("noise") == "recorded";
  tree.dependence_case = std::stoi(field("case"));
  tree.moments.sigma2 = std::stod(field("sigma2"));
  tree.moments.rho = std::stod(field("rho"));
  tree.moments.tau4 = std::stod(field("tau4"));
  tree.moments.nu2 = std::stod(field("nu2"));

  if (!std::getline(in, line) || line.rfind("label,", 0) != 0)
    throw ConfigError("tree file: missing column header");
  const NodeIndex last = subtree_size(tree.n());
  tree.x.assign(last + 1, 0.0);
  if (tree.noise_recorded) tree.eps.assign(last + 1, 0.0);
  NodeIndex seen = 0;
  int lineno = 2;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::strip_comment_is_blank(line)) continue;
    std::istringstream row(line);
    std::string cell;
    auto next_cell = [&]() {
      if (!std::getline(row, cell, ','))
        throw ConfigError("tree file line " + std::to_string(lineno) + ": short row");
      return cell;
    };
    const NodeIndex k = std::stoull(next_cell());
    if (k == 0 || k > last)
      throw ConfigError("tree file line " + std::to_string(lineno) + ": label out of range");
    next_cell();  // generation column is redundant
    tree.x[k] = std::stod(next_cell());
    std::string eps_cell;
    std::getline(row, eps_cell, ',');
    if (tree.noise_recorded && !eps_cell.empty()) tree.eps[k] = std::stod(eps_cell);
    ++seen;
  }
  if (seen != last)
    throw ConfigError("tree file: expected " + std::to_string(last) + " rows, found " +
                      std::to_string(seen));
  return tree;
}

inline SimulatedTree read_tree_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  return read_tree_csv(in);
}

// ---------------------------------------------------------------------------
// JSON views of results
// ---------------------------------------------------------------------------

inline nlohmann::json estimation_to_json(const EstimationResult& r) {
  nlohmann::json j;
  j["n"] = r.n;
  j["p"] = r.p;
  j["seed"] = r.seed;
  j["theta"] = to_json(r.theta);
  j["S"] = to_json(r.S);
  j["cond"] = r.cond;
  j["sigma2_hat"] = r.sigma2_hat;
  j["rho_hat"] = r.rho_hat;
  if (r.sigma2_hat_count) j["sigma2_hat_count"] = *r.sigma2_hat_count;
  if (r.rho_hat_count) j["rho_hat_count"] = *r.rho_hat_count;
  if (r.sigma2_bar) j["sigma2_bar"] = *r.sigma2_bar;
  if (r.rho_bar) j["rho_bar"] = *r.rho_bar;
  if (r.M) j["M"] = to_json(*r.M);
  if (r.bracket) j["bracket"] = to_json(*r.bracket);
  return j;
}

inline nlohmann::json limits_to_json(const BarModel& model, const NoiseMoments& mom,
                                     const LimitSet& ls) {
  nlohmann::json j;
  j["p"] = model.p;
  j["beta"] = model.beta;
  j["xi"] = to_json(ls.xi);
  j["T"] = to_json(ls.T);
  j["lambda"] = to_json(ls.lambda);
  j["L"] = to_json(ls.L);
  j["sigma_norm"] = ls.sigma_norm;
  j["l_positive_definite"] = ls.l_positive_definite;
  j["fixed_point"]["iterations"] = ls.fp.iterations;
  j["fixed_point"]["residual"] = ls.fp.residual;
  j["fixed_point"]["converged"] = ls.fp.converged;
  if (ls.asymp_cov) j["asymptotic_covariance"] = to_json(*ls.asymp_cov);
  if (ls.rates) {
    j["rates"]["theta_quadratic"] = to_json(ls.rates->theta_quadratic);
    j["rates"]["m_quadratic"] = to_json(ls.rates->m_quadratic);
    j["rates"]["sigma2_denom"] = ls.rates->sigma2_denom;
    j["rates"]["rho_denom"] = ls.rates->rho_denom;
    j["rates"]["gamma"] = to_json(Eigen::MatrixXd(mom.gamma()));
  }
  return j;
}

inline nlohmann::json scales_to_json(int dependence_case, double beta,
                                     const std::vector<double>& alphas) {
  nlohmann::json j;
  j["case"] = dependence_case;
  j["beta"] = beta;
  j["regime"] = regime_label(dependence_case, classify_regime(dependence_case, beta));
  nlohmann::json rows = nlohmann::json::array();
  for (double a : alphas) {
    const ScaleDecision d = scale_admissible(dependence_case, beta, a);
    nlohmann::json row;
    row["alpha"] = a;
    row["admissible"] = d.admissible;
    row["threshold"] = d.threshold;
    rows.push_back(std::move(row));
  }
  j["alphas"] = std::move(rows);
  return j;
}

inline nlohmann::json report_to_json(const McReport& rep, const nlohmann::json& echo) {
  nlohmann::json j;
  j["config"] = echo;
  j["dependence_case"] = rep.dependence_case;
  j["beta"] = rep.beta;
  j["regime"] = regime_label(rep.dependence_case, rep.regime);
  j["n_grid"] = rep.n_grid;
  j["replicates"] = rep.replicates;
  j["singular_excluded"] = rep.singular_excluded;
  j["limits"]["xi"] = to_json(rep.limits.xi);
  j["limits"]["L"] = to_json(rep.limits.L);
  j["limits"]["sigma_norm"] = rep.limits.sigma_norm;
  j["limits"]["l_positive_definite"] = rep.limits.l_positive_definite;

  nlohmann::json slopes = nlohmann::json::array();
  for (const auto& [delta, fit] : rep.slopes) {
    nlohmann::json s;
    s["delta"] = delta;
    s["vacuous"] = fit.vacuous;
    s["points"] = fit.points;
    if (!fit.vacuous) {
      s["slope"] = fit.slope;
      s["se"] = fit.se;
      s["ci_lo"] = fit.ci_lo;
      s["ci_hi"] = fit.ci_hi;
      s["intercept"] = fit.intercept;
    }
    slopes.push_back(std::move(s));
  }
  j["decay_slopes"] = std::move(slopes);

  nlohmann::json envs = nlohmann::json::array();
  for (const auto& [delta, env] : rep.envelopes) {
    nlohmann::json e;
    e["delta"] = delta;
    e["c1"] = env.c1;
    e["c2"] = env.c2;
    e["c3"] = env.c3;
    e["c4"] = env.c4;
    e["b"] = env.b;
    envs.push_back(std::move(e));
  }
  j["envelopes"] = std::move(envs);

  if (rep.cov) {
    j["covariance"]["rel_fro_error"] = rep.cov->rel_fro_error;
    j["covariance"]["low_power"] = rep.cov->low_power;
    j["covariance"]["empirical"] = to_json(rep.cov->empirical);
  }

  nlohmann::json brackets = nlohmann::json::array();
  for (const auto& b : rep.brackets) {
    nlohmann::json row;
    row["n"] = b.n;
    row["q25"] = b.q25;
    row["median"] = b.median;
    row["q75"] = b.q75;
    brackets.push_back(std::move(row));
  }
  j["bracket_deviation"] = std::move(brackets);

  if (rep.isometry_mm.size() > 0) {
    j["isometry"]["max_rel"] = rep.isometry_max_rel;
    j["isometry"]["mean_MM"] = to_json(rep.isometry_mm);
    j["isometry"]["mean_bracket"] = to_json(rep.isometry_bracket);
  }

  nlohmann::json checks = nlohmann::json::array();
  for (const auto& c : rep.checks) {
    nlohmann::json row;
    row["name"] = c.name;
    row["pass"] = c.pass;
    if (!c.detail.empty()) row["detail"] = c.detail;
    checks.push_back(std::move(row));
  }
  j["checks"] = std::move(checks);
  return j;
}

// ---------------------------------------------------------------------------
// montecarlo output bundle
// ---------------------------------------------------------------------------

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);  // binary: no newline translation anywhere
  if (!out) throw ConfigError("cannot open '" + path.string() + "' for writing");
  out << content;
  if (!out) throw ConfigError("short write to '" + path.string() + "'");
}

inline std::string tails_csv(const McReport& rep) {
  std::string s = "n,delta,count,total,p_hat,ci_lo,ci_hi\n";
  for (const auto& r : rep.tails) {
    s += std::to_string(r.n) + ',' + fmt17(r.delta) + ',' + std::to_string(r.count) + ',' +
         std::to_string(r.total) + ',' + fmt17(r.p_hat) + ',' + fmt17(r.ci_lo) + ',' +
         fmt17(r.ci_hi) + '\n';
  }
  return s;
}

inline std::string rates_csv(const McReport& rep) {
  std::string s = "x,b_N,p_hat,R_hat,censored,I_theory\n";
  for (const auto& r : rep.rates) {
    s += fmt17(r.x) + ',' + fmt17(r.b_N) + ',' + fmt17(r.p_hat) + ',' + fmt17(r.R_hat) + ',' +
         (r.censored ? "1" : "0") + ',' + fmt17(r.I_theory) + '\n';
  }
  return s;
}

inline std::string cov_csv(const McReport& rep) {
  std::string s = "i,j,empirical,limit\n";
  if (!rep.cov || !rep.limits.asymp_cov) return s;
  const Eigen::MatrixXd& e = rep.cov->empirical;
  const Eigen::MatrixXd& l = *rep.limits.asymp_cov;
  for (Eigen::Index i = 0; i < e.rows(); ++i)
    for (Eigen::Index jj = 0; jj < e.cols(); ++jj)
      s += std::to_string(i) + ',' + std::to_string(jj) + ',' + fmt17(e(i, jj)) + ',' +
           fmt17(l(i, jj)) + '\n';
  return s;
}

inline std::string replicates_csv(const McReport& rep, int p) {
  std::string s = "n,replicate,seed,valid";
  for (int i = 0; i < 2 * (p + 1); ++i) s += ",theta_" + std::to_string(i);
  s += ",sigma2_hat,rho_hat,sigma2_bar,rho_bar,bracket_dev,cond\n";
  for (const auto& [n, rows] : rep.records) {
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const ReplicateRow& row = rows[r];
      s += std::to_string(n) + ',' + std::to_string(r) + ',' + std::to_string(row.seed) + ',' +
           (row.valid ? "1" : "0");
      for (int i = 0; i < 2 * (p + 1); ++i)
        s += ',' + (row.valid ? fmt17(row.theta(i)) : std::string());
      if (row.valid) {
        s += ',' + fmt17(row.sigma2_hat) + ',' + fmt17(row.rho_hat) + ',' +
             fmt17(row.sigma2_bar) + ',' + fmt17(row.rho_bar) + ',' + fmt17(row.bracket_dev) +
             ',' + fmt17(row.cond);
      } else {
        s += ",,,,,,";
      }
      s += '\n';
    }
  }
  return s;
}

inline void write_montecarlo_outputs(const std::string& dir, const McReport& rep,
                                     const nlohmann::json& echo, int p, bool write_replicates) {
  const std::filesystem::path base(dir);
  std::filesystem::create_directories(base);
  write_text_file(base / "report.json", report_to_json(rep, echo).dump(2) + "\n");
  write_text_file(base / "tails.csv", tails_csv(rep));
  write_text_file(base / "rates.csv", rates_csv(rep));
  write_text_file(base / "cov.csv", cov_csv(rep));
  if (write_replicates) write_text_file(base / "replicates.csv", replicates_csv(rep, p));
}

}  // namespace barlab
