#pragma once

#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mcdisp/error.hpp"
#include "mcdisp/mobility.hpp"
#include "mcdisp/physics.hpp"

namespace mcdisp {

enum class Experiment { Default, Gain, Roc, Mobility, Sampling, Isi };

inline std::string_view experiment_name(Experiment e) {
  switch (e) {
    case Experiment::Default: return "default";
    case Experiment::Gain: return "gain";
    case Experiment::Roc: return "roc";
    case Experiment::Mobility: return "mobility";
    case Experiment::Sampling: return "sampling";
    case Experiment::Isi: return "isi";
  }
  return "default";
}

inline Experiment parse_experiment(std::string_view s) {
  for (auto e : {Experiment::Default, Experiment::Gain, Experiment::Roc, Experiment::Mobility, Experiment::Sampling,
                 Experiment::Isi})
    if (experiment_name(e) == s) return e;
  throw ConfigError("unknown experiment '" + std::string(s) + "'");
}

struct RunSection {
  std::uint64_t master_seed = 1;
  int n_packets = 500;            // evaluation packets per sweep point
  int K = 64;                     // symbols per packet
  int calibration_packets = 40;   // pilot packets, excluded from metrics
  std::string psi_distribution = "fixed";  // fixed | loguniform
  double psi = 1.0;
  double psi_min = 0.5;
  double psi_max = 2.0;
  bool random_warmup = false;
  int threads = 1;

  bool operator==(const RunSection&) const = default;
};

struct DetectorSection {
  double alpha = 0.05;
  double beta = 0.05;
  double pfa_target = 0.05;
  double alpha_gate = 0.05;  // 0 disables the gate
  double min_tail_count = 10.0;
  int L_max = 10;

  bool operator==(const DetectorSection&) const = default;
};

struct BaselineSection {
  int n_paths = 512;
  std::uint64_t common_seed = 0x5EED;
  int glrt_restarts = 3;
  int glrt_max_evals = 200;
  int likelihood_symbols = 200;  // per sweep point, for GLRT and oracle
  double r_ref = 10e-6;
  bool genie_isi = false;

  bool operator==(const BaselineSection&) const = default;
};

struct SweepSection {
  std::vector<double> gain_grid{0.5, 0.75, 1.0, 1.5, 2.0};
  int gain_h0_symbols = 20000;
  std::vector<double> v1_grid{0.0, 1e-6, 3e-6, 10e-6, 30e-6};  // m/s
  double neutral_tolerance = 0.01;
  int neutral_max_iter = 20;
  std::vector<double> M_grid{10, 20, 40, 80};
  std::vector<double> L_grid{1, 2, 3, 4, 5};
  std::vector<std::string> detectors{"tdelta", "mean", "glrt", "oracle"};

  bool operator==(const SweepSection&) const = default;
};

struct ExperimentConfig {
  Experiment experiment = Experiment::Default;
  ChannelParams channel;
  MobilityParams mobility;
  RunSection run;
  DetectorSection detector;
  BaselineSection baseline;
  SweepSection sweep;

  bool operator==(const ExperimentConfig&) const = default;

  void validate() const {
    try {
      channel.validate();
      mobility.validate(channel);
    } catch (const ContractError& e) {
      throw ConfigError(e.what());
    }
    if (run.n_packets < 1 || run.K < 1 || run.calibration_packets < 1)
      throw ConfigError("run: n_packets, K and calibration_packets must be >= 1");
    if (run.psi_distribution != "fixed" && run.psi_distribution != "loguniform")
      throw ConfigError("run: psi_distribution must be fixed or loguniform");
    if (!(run.psi > 0.0) || !(run.psi_min > 0.0) || !(run.psi_max >= run.psi_min))
      throw ConfigError("run: gains must be positive with psi_min <= psi_max");
    if (!(detector.alpha > 0 && detector.alpha < 1) || !(detector.beta > 0 && detector.beta < 1))
      throw ConfigError("detector: alpha and beta must lie in (0, 1)");
    if (!(detector.pfa_target > 0 && detector.pfa_target < 1)) throw ConfigError("detector: pfa_target in (0, 1)");
    if (!(detector.alpha_gate >= 0 && detector.alpha_gate < 1)) throw ConfigError("detector: alpha_gate in [0, 1)");
    if (baseline.n_paths < 100) throw ConfigError("baseline: n_paths must be >= 100");
    for (const auto& d : sweep.detectors)
      if (d != "tdelta" && d != "mean" && d != "glrt" && d != "oracle")
        throw ConfigError("sweep: unknown detector '" + d + "'");
  }

  bool wants(std::string_view detector_name) const {
    for (const auto& d : sweep.detectors)
      if (d == detector_name) return true;
    return false;
  }
};

/// Experiment presets. Every value not listed here is the global default.
inline ExperimentConfig preset(Experiment e) {
  ExperimentConfig c;
  c.experiment = e;
  c.mobility.anchoring = Anchoring::PerSymbol;
  switch (e) {
    case Experiment::Default:
      break;
    case Experiment::Gain:
      // On-off keying with one ISI tap: H0 symbols are background or a
      // gain-scaled ISI tail.
      c.channel.A0 = 0.0;
      c.channel.L = 2;
      c.run.calibration_packets = 100;
      c.sweep.detectors = {"tdelta", "mean", "glrt"};
      break;
    case Experiment::Roc:
      c.run.psi_distribution = "loguniform";
      c.run.n_packets = 160;
      c.baseline.n_paths = 128;
      c.baseline.likelihood_symbols = 400;
      break;
    case Experiment::Mobility:
      c.channel.A1 = c.channel.A0;
      c.detector.alpha_gate = 0.0;
      c.run.calibration_packets = 20;
      c.sweep.detectors = {"tdelta", "mean"};
      break;
    case Experiment::Sampling:
      c.sweep.detectors = {"tdelta", "mean"};
      c.run.n_packets = 200;
      break;
    case Experiment::Isi:
      c.channel.A0 = 0.0;
      c.detector.alpha_gate = 0.0;
      c.sweep.detectors = {"tdelta", "mean"};
      break;
  }
  return c;
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double unit_scale(const std::string& unit) {
  static const std::map<std::string, double> table{
      {"", 1.0},        {"m", 1.0},        {"mm", 1e-3},     {"um", 1e-6},      {"nm", 1e-9},
      {"s", 1.0},       {"ms", 1e-3},      {"us", 1e-6},     {"1/s", 1.0},      {"m/s", 1.0},
      {"um/s", 1e-6},   {"m^2/s", 1.0},    {"um^2/s", 1e-12}, {"m^3", 1.0},      {"um^3", 1e-18},
      {"molecules", 1.0}, {"counts", 1.0}};
  auto it = table.find(unit);
  if (it == table.end()) throw ConfigError("unknown unit '" + unit + "'");
  return it->second;
}

/// Split "1, 2, 3 um/s" into numbers and a trailing unit.
inline std::vector<double> parse_numbers(const std::string& raw, const std::string& key) {
  std::string body = trim(raw);
  std::string unit;
  const auto sp = body.find_last_of(" \t");
  if (sp != std::string::npos) {
    const std::string tail = body.substr(sp + 1);
    if (!tail.empty() && (std::isalpha(static_cast<unsigned char>(tail[0])) || tail.rfind("1/", 0) == 0)) {
      unit = tail;
      body = trim(body.substr(0, sp));
    }
  }
  const double scale = unit_scale(unit);
  std::vector<double> out;
  std::stringstream ss(body);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const std::string t = trim(item);
    if (t.empty()) continue;
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(t.c_str(), &end);
    if (end == t.c_str() || *end != '\0' || errno == ERANGE)
      throw ConfigError("key '" + key + "': cannot parse number '" + t + "'");
    out.push_back(v * scale);
  }
  return out;
}

inline double parse_double(const std::string& raw, const std::string& key) {
  const auto v = parse_numbers(raw, key);
  if (v.size() != 1) throw ConfigError("key '" + key + "': expected one number");
  return v[0];
}

inline long long parse_int(const std::string& raw, const std::string& key) {
  const double v = parse_double(raw, key);
  if (v != std::floor(v)) throw ConfigError("key '" + key + "': expected an integer");
  return static_cast<long long>(v);
}

inline std::uint64_t parse_u64(const std::string& raw, const std::string& key) {
  const std::string t = trim(raw);
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(t.c_str(), &end, 0);
  if (t.empty() || *end != '\0' || errno == ERANGE || t[0] == '-')
    throw ConfigError("key '" + key + "': expected an unsigned integer");
  return v;
}

inline bool parse_bool(const std::string& raw, const std::string& key) {
  const std::string t = trim(raw);
  if (t == "true" || t == "1" || t == "yes") return true;
  if (t == "false" || t == "0" || t == "no") return false;
  throw ConfigError("key '" + key + "': expected true or false");
}

inline std::vector<std::string> parse_list(const std::string& raw) {
  std::vector<std::string> out;
  std::stringstream ss(raw);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const std::string t = trim(item);
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ", ";
    if constexpr (std::is_same_v<T, std::string>) s += v[i];
    else s += fmt17(v[i]);
  }
  return s;
}

inline Vec3 parse_vec3(const std::string& raw, const std::string& key) {
  const auto v = parse_numbers(raw, key);
  if (v.size() != 3) throw ConfigError("key '" + key + "': expected three components");
  return {v[0], v[1], v[2]};
}

}  // namespace detail

/// Apply one `section.key = value` assignment.
inline void set_config_value(ExperimentConfig& c, const std::string& section, const std::string& key,
                             const std::string& value) {
  using namespace detail;
  const std::string k = section + "." + key;
  auto D = [&] { return parse_double(value, k); };
  auto I = [&] { return static_cast<int>(parse_int(value, k)); };
  if (k == "run.experiment") c.experiment = parse_experiment(trim(value));
  else if (k == "channel.g0") c.channel.g0 = D();
  else if (k == "channel.Dm") c.channel.Dm = D();
  else if (k == "channel.L") c.channel.L = I();
  else if (k == "channel.Tsym") c.channel.Tsym = D();
  else if (k == "channel.M") c.channel.M = I();
  else if (k == "channel.A0") c.channel.A0 = D();
  else if (k == "channel.A1") c.channel.A1 = D();
  else if (k == "channel.lambda_bg") c.channel.lambda_bg = D();
  else if (k == "channel.r_min") c.channel.r_min = D();
  else if (k == "mobility.v0") c.mobility.v0 = D();
  else if (k == "mobility.v1") c.mobility.v1 = D();
  else if (k == "mobility.Dr0") c.mobility.Dr0 = D();
  else if (k == "mobility.Dr1") c.mobility.Dr1 = D();
  else if (k == "mobility.Dt") c.mobility.Dt = D();
  else if (k == "mobility.dt_traj") c.mobility.dt_traj = D();
  else if (k == "mobility.x0") c.mobility.x0 = parse_vec3(value, k);
  else if (k == "mobility.xR") c.mobility.xR = parse_vec3(value, k);
  else if (k == "mobility.anchoring") {
    const auto t = trim(value);
    if (t == "continuous") c.mobility.anchoring = Anchoring::Continuous;
    else if (t == "per_symbol") c.mobility.anchoring = Anchoring::PerSymbol;
    else throw ConfigError("mobility.anchoring must be continuous or per_symbol");
  }
  else if (k == "run.master_seed") c.run.master_seed = parse_u64(value, k);
  else if (k == "run.n_packets") c.run.n_packets = I();
  else if (k == "run.K") c.run.K = I();
  else if (k == "run.calibration_packets") c.run.calibration_packets = I();
  else if (k == "run.psi_distribution") c.run.psi_distribution = trim(value);
  else if (k == "run.psi") c.run.psi = D();
  else if (k == "run.psi_min") c.run.psi_min = D();
  else if (k == "run.psi_max") c.run.psi_max = D();
  else if (k == "run.random_warmup") c.run.random_warmup = parse_bool(value, k);
  else if (k == "run.threads") c.run.threads = I();
  else if (k == "detector.alpha") c.detector.alpha = D();
  else if (k == "detector.beta") c.detector.beta = D();
  else if (k == "detector.pfa_target") c.detector.pfa_target = D();
  else if (k == "detector.alpha_gate") c.detector.alpha_gate = D();
  else if (k == "detector.min_tail_count") c.detector.min_tail_count = D();
  else if (k == "detector.L_max") c.detector.L_max = I();
  else if (k == "baseline.n_paths") c.baseline.n_paths = I();
  else if (k == "baseline.common_seed") c.baseline.common_seed = parse_u64(value, k);
  else if (k == "baseline.glrt_restarts") c.baseline.glrt_restarts = I();
  else if (k == "baseline.glrt_max_evals") c.baseline.glrt_max_evals = I();
  else if (k == "baseline.likelihood_symbols") c.baseline.likelihood_symbols = I();
  else if (k == "baseline.r_ref") c.baseline.r_ref = D();
  else if (k == "baseline.genie_isi") c.baseline.genie_isi = parse_bool(value, k);
  else if (k == "sweep.gain_grid") c.sweep.gain_grid = parse_numbers(value, k);
  else if (k == "sweep.gain_h0_symbols") c.sweep.gain_h0_symbols = I();
  else if (k == "sweep.v1_grid") c.sweep.v1_grid = parse_numbers(value, k);
  else if (k == "sweep.neutral_tolerance") c.sweep.neutral_tolerance = D();
  else if (k == "sweep.neutral_max_iter") c.sweep.neutral_max_iter = I();
  else if (k == "sweep.M_grid") c.sweep.M_grid = parse_numbers(value, k);
  else if (k == "sweep.L_grid") c.sweep.L_grid = parse_numbers(value, k);
  else if (k == "sweep.detectors") c.sweep.detectors = parse_list(value);
  else throw ConfigError("unknown key '" + k + "'");
}

/// Parse `[section]` headers and `key = value` lines onto `base`. `#` starts
/// a comment. A `run.experiment` key, if present, must come first and
/// resets the base to that experiment's preset.
inline ExperimentConfig parse_config(std::istream& in, ExperimentConfig base = {}) {
  std::string line, section;
  int lineno = 0;
  bool any_key = false;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
      section = detail::trim(std::string_view(t).substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty()) throw ConfigError("line " + std::to_string(lineno) + ": key outside a section");
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    const std::string value = detail::trim(std::string_view(t).substr(eq + 1));
    if (section == "run" && key == "experiment") {
      if (any_key) throw ConfigError("line " + std::to_string(lineno) + ": run.experiment must be the first key");
      base = preset(parse_experiment(value));
      continue;
    }
    any_key = true;
    try {
      set_config_value(base, section, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  base.validate();
  return base;
}

inline ExperimentConfig parse_config_string(const std::string& text, ExperimentConfig base = {}) {
  std::istringstream in(text);
  return parse_config(in, std::move(base));
}

inline ExperimentConfig load_config(const std::string& path, ExperimentConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(in, std::move(base));
}

/// Full config in SI units at 17 significant digits, parseable by
/// parse_config. `prefix` is prepended to every line (e.g. "# ").
inline std::string serialize_config(const ExperimentConfig& c, std::string_view prefix = "") {
  using detail::fmt17;
  using detail::join;
  std::ostringstream o;
  const std::string p(prefix);
  auto kv = [&](const char* k, const std::string& v) { o << p << k << " = " << v << '\n'; };
  auto vec3 = [](const Vec3& v) { return fmt17(v[0]) + ", " + fmt17(v[1]) + ", " + fmt17(v[2]); };
  o << p << "[run]\n";
  kv("experiment", std::string(experiment_name(c.experiment)));
  kv("master_seed", std::to_string(c.run.master_seed));
  kv("n_packets", std::to_string(c.run.n_packets));
  kv("K", std::to_string(c.run.K));
  kv("calibration_packets", std::to_string(c.run.calibration_packets));
  kv("psi_distribution", c.run.psi_distribution);
  kv("psi", fmt17(c.run.psi));
  kv("psi_min", fmt17(c.run.psi_min));
  kv("psi_max", fmt17(c.run.psi_max));
  kv("random_warmup", c.run.random_warmup ? "true" : "false");
  kv("threads", std::to_string(c.run.threads));
  o << p << "[channel]\n";
  kv("g0", fmt17(c.channel.g0));
  kv("Dm", fmt17(c.channel.Dm));
  kv("L", std::to_string(c.channel.L));
  kv("Tsym", fmt17(c.channel.Tsym));
  kv("M", std::to_string(c.channel.M));
  kv("A0", fmt17(c.channel.A0));
  kv("A1", fmt17(c.channel.A1));
  kv("lambda_bg", fmt17(c.channel.lambda_bg));
  kv("r_min", fmt17(c.channel.r_min));
  o << p << "[mobility]\n";
  kv("v0", fmt17(c.mobility.v0));
  kv("v1", fmt17(c.mobility.v1));
  kv("Dr0", fmt17(c.mobility.Dr0));
  kv("Dr1", fmt17(c.mobility.Dr1));
  kv("Dt", fmt17(c.mobility.Dt));
  kv("dt_traj", fmt17(c.mobility.dt_traj));
  kv("x0", vec3(c.mobility.x0));
  kv("xR", vec3(c.mobility.xR));
  kv("anchoring", c.mobility.anchoring == Anchoring::Continuous ? "continuous" : "per_symbol");
  o << p << "[detector]\n";
  kv("alpha", fmt17(c.detector.alpha));
  kv("beta", fmt17(c.detector.beta));
  kv("pfa_target", fmt17(c.detector.pfa_target));
  kv("alpha_gate", fmt17(c.detector.alpha_gate));
  kv("min_tail_count", fmt17(c.detector.min_tail_count));
  kv("L_max", std::to_string(c.detector.L_max));
  o << p << "[baseline]\n";
  kv("n_paths", std::to_string(c.baseline.n_paths));
  kv("common_seed", std::to_string(c.baseline.common_seed));
  kv("glrt_restarts", std::to_string(c.baseline.glrt_restarts));
  kv("glrt_max_evals", std::to_string(c.baseline.glrt_max_evals));
  kv("likelihood_symbols", std::to_string(c.baseline.likelihood_symbols));
  kv("r_ref", fmt17(c.baseline.r_ref));
  kv("genie_isi", c.baseline.genie_isi ? "true" : "false");
  o << p << "[sweep]\n";
  kv("gain_grid", join(c.sweep.gain_grid));
  kv("gain_h0_symbols", std::to_string(c.sweep.gain_h0_symbols));
  kv("v1_grid", join(c.sweep.v1_grid));
  kv("neutral_tolerance", fmt17(c.sweep.neutral_tolerance));
  kv("neutral_max_iter", std::to_string(c.sweep.neutral_max_iter));
  kv("M_grid", join(c.sweep.M_grid));
  kv("L_grid", join(c.sweep.L_grid));
  kv("detectors", join(c.sweep.detectors));
  return o.str();
}

}  // namespace mcdisp
