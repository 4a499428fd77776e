#pragma once

#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <istream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "barlab/errors.hpp"
#include "barlab/model.hpp"
#include "barlab/verify.hpp"

namespace barlab {

// ---------------------------------------------------------------------------
// a small TOML-style reader: [section] headers, key = value lines, # comments.
// Values are booleans, numbers, double-quoted strings, or one-line numeric
// arrays.  That subset covers every run configuration this tool accepts;
// anything else is rejected with a line number.
// ---------------------------------------------------------------------------

struct ConfigValue {
  enum class Kind { boolean, number, string, array };
  Kind kind = Kind::number;
  bool bool_v = false;
  double num_v = 0.0;
  std::string str_v;
  std::vector<double> arr_v;
  int line = 0;
};

class ConfigTable {
 public:
  using Section = std::map<std::string, ConfigValue>;

  void insert(const std::string& section, const std::string& key, ConfigValue v) {
    auto& sec = sections_[section];
    if (sec.count(key))
      throw ConfigError("config line " + std::to_string(v.line) + ": duplicate key '" + key +
                        "' in [" + section + "]");
    sec.emplace(key, std::move(v));
  }

  bool has(const std::string& section, const std::string& key) const {
    auto it = sections_.find(section);
    return it != sections_.end() && it->second.count(key) > 0;
  }

  const ConfigValue& at(const std::string& section, const std::string& key) const {
    auto it = sections_.find(section);
    if (it == sections_.end() || !it->second.count(key))
      throw ConfigError("config: missing required key '" + key + "' in [" + section + "]");
    return it->second.at(key);
  }

  const std::map<std::string, Section>& sections() const { return sections_; }

 private:
  std::map<std::string, Section> sections_;
};

namespace detail {

inline std::string strip(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

// removes a trailing comment, respecting double quotes
inline std::string strip_comment(const std::string& s) {
  bool in_str = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"') in_str = !in_str;
    if (s[i] == '#' && !in_str) return s.substr(0, i);
  }
  return s;
}

inline double parse_number(const std::string& tok, int line) {
  const std::string t = strip(tok);
  if (t.empty()) throw ConfigError("config line " + std::to_string(line) + ": empty number");
  char* end = nullptr;
  const double v = std::strtod(t.c_str(), &end);
  if (end != t.c_str() + t.size())
    throw ConfigError("config line " + std::to_string(line) + ": cannot parse number '" + t + "'");
  return v;
}

inline ConfigValue parse_value(const std::string& raw, int line) {
  ConfigValue v;
  v.line = line;
  const std::string t = strip(raw);
  if (t.empty())
    throw ConfigError("config line " + std::to_string(line) + ": missing value");
  if (t == "true" || t == "false") {
    v.kind = ConfigValue::Kind::boolean;
    v.bool_v = t == "true";
    return v;
  }
  if (t.front() == '"') {
    if (t.size() < 2 || t.back() != '"')
      throw ConfigError("config line " + std::to_string(line) + ": unterminated string");
    v.kind = ConfigValue::Kind::string;
    v.str_v = t.substr(1, t.size() - 2);
    return v;
  }
  if (t.front() == '[') {
    if (t.back() != ']')
      throw ConfigError("config line " + std::to_string(line) +
                        ": arrays must close on the same line");
    v.kind = ConfigValue::Kind::array;
    std::string body = t.substr(1, t.size() - 2);
    std::stringstream ss(body);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (strip(item).empty() && ss.eof()) break;  // trailing comma
      v.arr_v.push_back(parse_number(item, line));
    }
    return v;
  }
  v.kind = ConfigValue::Kind::number;
  v.num_v = parse_number(t, line);
  return v;
}

inline long require_integer(const ConfigValue& v, const std::string& what) {
  if (v.kind != ConfigValue::Kind::number)
    throw ConfigError("config line " + std::to_string(v.line) + ": " + what +
                      " must be an integer");
  const double d = v.num_v;
  const long l = static_cast<long>(d);
  if (static_cast<double>(l) != d)
    throw ConfigError("config line " + std::to_string(v.line) + ": " + what +
                      " must be an integer");
  return l;
}

inline double require_number(const ConfigValue& v, const std::string& what) {
  if (v.kind != ConfigValue::Kind::number)
    throw ConfigError("config line " + std::to_string(v.line) + ": " + what + " must be a number");
  return v.num_v;
}

inline bool require_bool(const ConfigValue& v, const std::string& what) {
  if (v.kind != ConfigValue::Kind::boolean)
    throw ConfigError("config line " + std::to_string(v.line) + ": " + what +
                      " must be true or false");
  return v.bool_v;
}

inline const std::string& require_string(const ConfigValue& v, const std::string& what) {
  if (v.kind != ConfigValue::Kind::string)
    throw ConfigError("config line " + std::to_string(v.line) + ": " + what +
                      " must be a quoted string");
  return v.str_v;
}

inline const std::vector<double>& require_array(const ConfigValue& v, const std::string& what) {
  if (v.kind != ConfigValue::Kind::array)
    throw ConfigError("config line " + std::to_string(v.line) + ": " + what +
                      " must be an array");
  return v.arr_v;
}

}  // namespace detail

inline ConfigTable parse_config(std::istream& in) {
  ConfigTable table;
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::strip(detail::strip_comment(line));
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']' || t.size() < 3)
        throw ConfigError("config line " + std::to_string(lineno) + ": malformed section header");
      section = detail::strip(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::strip(t.substr(0, eq));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (section.empty())
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": key appears before any [section]");
    table.insert(section, key, detail::parse_value(t.substr(eq + 1), lineno));
  }
  return table;
}

inline ConfigTable parse_config_string(const std::string& text) {
  std::istringstream ss(text);
  return parse_config(ss);
}

// ---------------------------------------------------------------------------
// assembled run configuration
// ---------------------------------------------------------------------------

struct RunConfig {
  BarModel model;
  NoiseModel noise;
  InitSpec init;
  McConfig mc;                   // model/noise/init duplicated for convenience
  std::vector<double> scale_alphas;
  int scale_case = 0;            // 0: inferred from the noise family
  bool write_replicates = true;

  // raw fields kept for the echo
  int p = 1;
  std::vector<double> a, b;
  std::string norm = "spectral";
  bool allow_nonstable = false;
  std::string noise_family = "gaussian_pair";
  double sigma2 = 1.0, rho = 0.0, truncation = 6.0, tau4 = 0.0, skew = 0.8;
  std::string init_kind = "zero";
  double init_value = 0.0;
  std::vector<double> init_values;
  std::string tail_stat = "theta", mdp_stat = "sigma2_bar";
};

namespace detail {

inline void check_known_keys(const ConfigTable& t,
                             const std::map<std::string, std::set<std::string>>& allowed) {
  for (const auto& [section, keys] : t.sections()) {
    auto it = allowed.find(section);
    if (it == allowed.end()) throw ConfigError("config: unknown section [" + section + "]");
    for (const auto& [key, value] : keys)
      if (!it->second.count(key))
        throw ConfigError("config line " + std::to_string(value.line) + ": unknown key '" + key +
                          "' in [" + section + "]");
  }
}

inline Stat parse_stat(const std::string& s, int line) {
  if (s == "theta") return Stat::theta_err;
  if (s == "sigma2_hat") return Stat::sigma2_hat_err;
  if (s == "rho_hat") return Stat::rho_hat_err;
  if (s == "sigma2_bar") return Stat::sigma2_bar_err;
  if (s == "rho_bar") return Stat::rho_bar_err;
  throw ConfigError("config line " + std::to_string(line) + ": unknown statistic '" + s + "'");
}

}  // namespace detail

inline RunConfig build_run_config(const ConfigTable& t) {
  static const std::map<std::string, std::set<std::string>> allowed = {
      {"model", {"p", "a", "b", "norm", "allow_nonstable"}},
      {"noise", {"family", "sigma2", "rho", "truncation", "tau4", "skew"}},
      {"init", {"kind", "value", "values"}},
      {"experiment",
       {"n_grid", "replicates", "seed", "alpha", "delta_grid", "x_grid", "tail_stat", "mdp_stat",
        "case", "record_noise", "fit_envelopes"}},
      {"scales", {"alphas", "case"}},
      {"output", {"write_replicates"}},
  };
  detail::check_known_keys(t, allowed);

  RunConfig rc;
  rc.p = static_cast<int>(detail::require_integer(t.at("model", "p"), "p"));
  rc.a = detail::require_array(t.at("model", "a"), "a");
  rc.b = detail::require_array(t.at("model", "b"), "b");
  if (t.has("model", "norm")) rc.norm = detail::require_string(t.at("model", "norm"), "norm");
  if (t.has("model", "allow_nonstable"))
    rc.allow_nonstable = detail::require_bool(t.at("model", "allow_nonstable"), "allow_nonstable");
  MatrixNorm norm_mode;
  if (rc.norm == "spectral")
    norm_mode = MatrixNorm::spectral;
  else if (rc.norm == "frobenius")
    norm_mode = MatrixNorm::frobenius;
  else
    throw ConfigError("config: norm must be \"spectral\" or \"frobenius\"");
  if (static_cast<int>(rc.a.size()) != rc.p + 1 || static_cast<int>(rc.b.size()) != rc.p + 1)
    throw ConfigError("config: a and b must each list p+1 coefficients");
  const Eigen::VectorXd av = Eigen::Map<const Eigen::VectorXd>(
      rc.a.data(), static_cast<Eigen::Index>(rc.a.size()));
  const Eigen::VectorXd bv = Eigen::Map<const Eigen::VectorXd>(
      rc.b.data(), static_cast<Eigen::Index>(rc.b.size()));
  rc.model = build_model(rc.p, av, bv, rc.allow_nonstable, norm_mode);

  if (t.has("noise", "family"))
    rc.noise_family = detail::require_string(t.at("noise", "family"), "family");
  if (t.has("noise", "sigma2")) rc.sigma2 = detail::require_number(t.at("noise", "sigma2"), "sigma2");
  if (t.has("noise", "rho")) rc.rho = detail::require_number(t.at("noise", "rho"), "rho");
  if (t.has("noise", "truncation"))
    rc.truncation = detail::require_number(t.at("noise", "truncation"), "truncation");
  if (t.has("noise", "tau4")) rc.tau4 = detail::require_number(t.at("noise", "tau4"), "tau4");
  if (t.has("noise", "skew")) rc.skew = detail::require_number(t.at("noise", "skew"), "skew");
  if (rc.noise_family == "none") {
    rc.noise = NoiseModel::none();
  } else if (rc.noise_family == "gaussian_pair") {
    rc.noise = NoiseModel::gaussian(rc.sigma2, rc.rho);
  } else if (rc.noise_family == "bounded_pair") {
    rc.noise = NoiseModel::bounded(rc.sigma2, rc.rho, rc.truncation);
  } else if (rc.noise_family == "skew_switching_pair") {
    const double tau4 = rc.tau4 > 0.0 ? rc.tau4 : 3.6 * rc.sigma2 * rc.sigma2;
    rc.tau4 = tau4;
    rc.noise = NoiseModel::skew_switching(rc.sigma2, rc.rho, tau4, rc.skew);
  } else {
    throw ConfigError("config: unknown noise family '" + rc.noise_family + "'");
  }

  if (t.has("init", "kind")) rc.init_kind = detail::require_string(t.at("init", "kind"), "kind");
  if (t.has("init", "value"))
    rc.init_value = detail::require_number(t.at("init", "value"), "value");
  if (t.has("init", "values"))
    rc.init_values = detail::require_array(t.at("init", "values"), "values");
  if (rc.init_kind == "zero") {
    rc.init = InitSpec::zero();
  } else if (rc.init_kind == "constant") {
    rc.init = InitSpec::constant(rc.init_value);
  } else if (rc.init_kind == "vector") {
    rc.init = InitSpec::explicit_vector(Eigen::Map<const Eigen::VectorXd>(
        rc.init_values.data(), static_cast<Eigen::Index>(rc.init_values.size())));
  } else if (rc.init_kind == "gaussian") {
    rc.init = InitSpec::gaussian(t.has("init", "value") ? rc.init_value : 1.0);
  } else {
    throw ConfigError("config: unknown init kind '" + rc.init_kind + "'");
  }

  rc.mc.model = rc.model;
  rc.mc.noise = rc.noise;
  rc.mc.init = rc.init;
  if (t.has("experiment", "n_grid")) {
    rc.mc.n_grid.clear();
    for (double v : detail::require_array(t.at("experiment", "n_grid"), "n_grid")) {
      const long n = static_cast<long>(v);
      if (static_cast<double>(n) != v)
        throw ConfigError("config: n_grid entries must be integers");
      rc.mc.n_grid.push_back(static_cast<int>(n));
    }
  } else {
    rc.mc.n_grid = {rc.p + 3};
  }
  if (t.has("experiment", "replicates"))
    rc.mc.replicates =
        static_cast<int>(detail::require_integer(t.at("experiment", "replicates"), "replicates"));
  if (t.has("experiment", "seed")) {
    const long s = detail::require_integer(t.at("experiment", "seed"), "seed");
    if (s < 0) throw ConfigError("config: seed must be nonnegative");
    rc.mc.master_seed = static_cast<std::uint64_t>(s);
  }
  if (t.has("experiment", "alpha"))
    rc.mc.alpha = detail::require_number(t.at("experiment", "alpha"), "alpha");
  if (t.has("experiment", "delta_grid"))
    rc.mc.delta_grid = detail::require_array(t.at("experiment", "delta_grid"), "delta_grid");
  if (t.has("experiment", "x_grid"))
    rc.mc.x_grid = detail::require_array(t.at("experiment", "x_grid"), "x_grid");
  if (t.has("experiment", "tail_stat"))
    rc.tail_stat = detail::require_string(t.at("experiment", "tail_stat"), "tail_stat");
  if (t.has("experiment", "mdp_stat"))
    rc.mdp_stat = detail::require_string(t.at("experiment", "mdp_stat"), "mdp_stat");
  rc.mc.tail_stat = detail::parse_stat(rc.tail_stat, 0);
  rc.mc.mdp_stat = detail::parse_stat(rc.mdp_stat, 0);
  if (t.has("experiment", "case")) {
    const long c = detail::require_integer(t.at("experiment", "case"), "case");
    if (c != 0 && c != 1 && c != 2) throw ConfigError("config: case must be 0, 1, or 2");
    rc.mc.case_override = static_cast<int>(c);
  }
  if (t.has("experiment", "record_noise"))
    rc.mc.record_noise = detail::require_bool(t.at("experiment", "record_noise"), "record_noise");
  if (t.has("experiment", "fit_envelopes"))
    rc.mc.fit_envelope_constants =
        detail::require_bool(t.at("experiment", "fit_envelopes"), "fit_envelopes");

  if (t.has("scales", "alphas"))
    rc.scale_alphas = detail::require_array(t.at("scales", "alphas"), "alphas");
  if (t.has("scales", "case")) {
    const long c = detail::require_integer(t.at("scales", "case"), "case");
    if (c != 0 && c != 1 && c != 2)
      throw ConfigError("config: scales case must be 0, 1, or 2");
    rc.scale_case = static_cast<int>(c);
  }
  if (t.has("output", "write_replicates"))
    rc.write_replicates = detail::require_bool(t.at("output", "write_replicates"), "write_replicates");
  return rc;
}

// The run description embedded in every report.  Deliberately excludes
// worker counts and output locations: two runs that differ only in those
// must produce identical bytes.
inline nlohmann::json config_echo(const RunConfig& rc) {
  nlohmann::json j;
  j["model"]["p"] = rc.p;
  j["model"]["a"] = rc.a;
  j["model"]["b"] = rc.b;
  j["model"]["norm"] = rc.norm;
  j["model"]["allow_nonstable"] = rc.allow_nonstable;
  j["model"]["beta"] = rc.model.beta;
  j["noise"]["family"] = rc.noise_family;
  if (rc.noise_family != "none") {
    j["noise"]["sigma2"] = rc.sigma2;
    j["noise"]["rho"] = rc.rho;
    if (rc.noise_family == "bounded_pair") j["noise"]["truncation"] = rc.truncation;
    if (rc.noise_family == "skew_switching_pair") {
      j["noise"]["tau4"] = rc.tau4;
      j["noise"]["skew"] = rc.skew;
    }
    j["noise"]["moments"]["sigma2"] = rc.noise.moments.sigma2;
    j["noise"]["moments"]["rho"] = rc.noise.moments.rho;
    j["noise"]["moments"]["tau4"] = rc.noise.moments.tau4;
    j["noise"]["moments"]["nu2"] = rc.noise.moments.nu2;
    j["noise"]["dependence_case"] = rc.noise.dependence_case;
  }
  j["init"]["kind"] = rc.init_kind;
  if (rc.init_kind == "constant" || rc.init_kind == "gaussian")
    j["init"]["value"] = rc.init.value;
  if (rc.init_kind == "vector") j["init"]["values"] = rc.init_values;
  j["experiment"]["n_grid"] = rc.mc.n_grid;
  j["experiment"]["replicates"] = rc.mc.replicates;
  j["experiment"]["seed"] = rc.mc.master_seed;
  j["experiment"]["alpha"] = rc.mc.alpha;
  j["experiment"]["delta_grid"] = rc.mc.delta_grid;
  j["experiment"]["x_grid"] = rc.mc.x_grid;
  j["experiment"]["tail_stat"] = rc.tail_stat;
  j["experiment"]["mdp_stat"] = rc.mdp_stat;
  j["experiment"]["case"] = rc.mc.case_override;
  j["experiment"]["record_noise"] = rc.mc.record_noise;
  if (!rc.scale_alphas.empty()) {
    j["scales"]["alphas"] = rc.scale_alphas;
    j["scales"]["case"] = rc.scale_case;
  }
  return j;
}

}  // namespace barlab
