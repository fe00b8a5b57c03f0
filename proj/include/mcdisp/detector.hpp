#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "mcdisp/error.hpp"
#include "mcdisp/profiling.hpp"

namespace mcdisp {

/// Normalized excess-dispersion contribution ((y - mu)^2 - y) / mu^2.
inline double psi_contribution(double y, double mu) {
  if (!(mu > 0.0)) throw DomainError("psi_contribution: fitted mean must be positive");
  const double d = y - mu;
  return (d * d - y) / (mu * mu);
}

/// psi-hat over the retained window, in window order.
template <typename T>
std::vector<double> psi_sequence(std::span<const T> counts, const ProfileFit& fit, const Template& tmpl) {
  if (!fit.converged) throw ContractError("psi_sequence: fit did not converge");
  const auto yw = tmpl.window(counts);
  if (fit.mu_hat.size() != yw.size()) throw ContractError("psi_sequence: fit/window mismatch");
  std::vector<double> out(yw.size());
  for (std::size_t i = 0; i < yw.size(); ++i)
    out[i] = psi_contribution(static_cast<double>(yw[i]), fit.mu_hat[i]);
  return out;
}

/// Sum of psi contributions divided by (M_eff - p).
inline double t_delta_from_psi(std::span<const double> psi, int p) {
  const int M_eff = static_cast<int>(psi.size());
  if (M_eff <= p) throw ContractError("t_delta: M_eff must exceed p");
  double s = 0.0;
  for (double v : psi) s += v;
  return s / static_cast<double>(M_eff - p);
}

template <typename T>
double t_delta(std::span<const T> counts, const ProfileFit& fit, const Template& tmpl) {
  const auto psi = psi_sequence(counts, fit, tmpl);
  return t_delta_from_psi(psi, fit.p);
}

/// Windowed count mean, optionally after removing a known additive mean term.
template <typename T>
double windowed_mean(std::span<const T> counts, const Template& tmpl, std::span<const double> offset = {}) {
  const auto yw = tmpl.window(counts);
  std::span<const double> ow;
  if (!offset.empty()) ow = tmpl.window(offset);
  double s = 0.0;
  for (std::size_t i = 0; i < yw.size(); ++i) s += static_cast<double>(yw[i]) - (ow.empty() ? 0.0 : ow[i]);
  return s / static_cast<double>(yw.size());
}

/// Sorted-sample order statistic at one-based index ceil(q n), clamped to [1, n].
inline double order_statistic(std::vector<double> values, double q) {
  if (values.empty()) throw CalibrationError("order_statistic: no samples");
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  auto idx = static_cast<long>(std::ceil(q * n - 1e-9));
  idx = std::clamp<long>(idx, 1, static_cast<long>(values.size()));
  return values[static_cast<std::size_t>(idx - 1)];
}

struct GateConfig {
  double tau_Y = 0.0;
  double alpha_gate = 0.05;
  /// Open gate: every symbol passes (alpha_gate = 0, or gating disabled).
  bool open = false;

  bool passes(double ybar) const { return open || ybar > tau_Y; }

  bool operator==(const GateConfig&) const = default;
};

inline GateConfig open_gate() { return {0.0, 0.0, true}; }

/// tau_Y = alpha_gate-quantile of the H0 windowed means.
inline GateConfig calibrate_gate_from_means(std::span<const double> ybar_h0, double alpha_gate) {
  if (!(alpha_gate >= 0.0 && alpha_gate < 1.0)) throw ContractError("calibrate_gate: alpha_gate must lie in [0, 1)");
  if (ybar_h0.size() < 100) throw CalibrationError("calibrate_gate: need at least 100 H0 calibration symbols");
  std::vector<double> v(ybar_h0.begin(), ybar_h0.end());
  GateConfig g;
  g.alpha_gate = alpha_gate;
  if (alpha_gate == 0.0) {
    const double lo = *std::min_element(v.begin(), v.end());
    g.tau_Y = std::max(0.0, std::nextafter(lo, -HUGE_VAL));
    g.open = true;
    return g;
  }
  g.tau_Y = std::max(0.0, order_statistic(std::move(v), alpha_gate));
  return g;
}

template <typename Range>
GateConfig calibrate_gate(const Range& h0_counts, double alpha_gate, const Template& tmpl) {
  std::vector<double> ybar;
  for (const auto& y : h0_counts) ybar.push_back(windowed_mean(std::span<const Count>(y), tmpl));
  return calibrate_gate_from_means(ybar, alpha_gate);
}

struct DispersionThreshold {
  double tau_T = 0.0;
  double pfa_target = 0.05;
  int kappa = +1;

  /// Strict: ties decide 0.
  bool alarm(double statistic) const { return kappa * statistic > kappa * tau_T; }

  bool operator==(const DispersionThreshold&) const = default;
};

struct ThresholdOptions {
  /// Required expected number of calibration exceedances, n * pfa.
  double min_tail_count = 10.0;
};

/// Sign of (mean under H1 - mean under H0); +1 on ties or missing H1 data.
inline int orientation(std::span<const double> h0, std::span<const double> h1) {
  if (h0.empty() || h1.empty()) return +1;
  double m0 = 0.0, m1 = 0.0;
  for (double v : h0) m0 += v;
  for (double v : h1) m1 += v;
  m0 /= static_cast<double>(h0.size());
  m1 /= static_cast<double>(h1.size());
  return m1 < m0 ? -1 : +1;
}

/// Quantile threshold on gated H0 statistics. With kappa = +1 the threshold is
/// the order statistic at ceil((1 - pfa) n); with kappa = -1 the mirrored
/// order statistic floor(pfa n) + 1, so exactly floor(pfa n) calibration
/// values alarm in either orientation (absent ties).
inline DispersionThreshold calibrate_threshold(std::span<const double> h0_statistics, double pfa_target,
                                               std::span<const double> h1_statistics = {},
                                               ThresholdOptions opt = {}) {
  if (!(pfa_target > 0.0 && pfa_target < 1.0)) throw ContractError("calibrate_threshold: pfa_target must lie in (0, 1)");
  const double n = static_cast<double>(h0_statistics.size());
  if (h0_statistics.empty() || n * pfa_target < opt.min_tail_count - 1e-9)
    throw CalibrationError("calibrate_threshold: too few gated H0 samples to resolve the tail");
  DispersionThreshold thr;
  thr.pfa_target = pfa_target;
  thr.kappa = orientation(h0_statistics, h1_statistics);
  std::vector<double> v(h0_statistics.begin(), h0_statistics.end());
  if (thr.kappa > 0) {
    thr.tau_T = order_statistic(std::move(v), 1.0 - pfa_target);
  } else {
    std::sort(v.begin(), v.end());
    auto idx = static_cast<long>(std::floor(pfa_target * n + 1e-9)) + 1;
    idx = std::clamp<long>(idx, 1, static_cast<long>(v.size()));
    thr.tau_T = v[static_cast<std::size_t>(idx - 1)];
  }
  return thr;
}

/// Threshold and orientation minimizing the equal-prior error
/// (P_FA + P_M) / 2 on labeled statistics. `n0_total`/`n1_total` count
/// symbols that never reach the threshold (gate or fit failure, decided 0);
/// they default to the sample sizes.
inline DispersionThreshold min_error_threshold(std::span<const double> h0, std::span<const double> h1,
                                               std::size_t n0_total = 0, std::size_t n1_total = 0) {
  if (h0.empty() || h1.empty()) throw CalibrationError("min_error_threshold: need labeled samples of both hypotheses");
  const double n0 = static_cast<double>(std::max(n0_total, h0.size()));
  const double n1 = static_cast<double>(std::max(n1_total, h1.size()));
  const double forced_miss = n1 - static_cast<double>(h1.size());
  std::vector<std::pair<double, int>> v;
  v.reserve(h0.size() + h1.size());
  for (double x : h0) v.emplace_back(x, 0);
  for (double x : h1) v.emplace_back(x, 1);
  std::sort(v.begin(), v.end());

  // Sweep tau upward; below_s counts hypothesis-s samples <= tau.
  double below0 = 0.0, below1 = 0.0;
  double best = HUGE_VAL;
  DispersionThreshold thr;
  thr.pfa_target = std::numeric_limits<double>::quiet_NaN();
  // Alarms are strict: kappa=+1 alarms above tau, kappa=-1 alarms below, so
  // the downward rule sits one ulp above the swept value.
  auto consider = [&](double tau) {
    const double up = 0.5 * ((static_cast<double>(h0.size()) - below0) / n0 + (below1 + forced_miss) / n1);
    const double down = 0.5 * (below0 / n0 + (static_cast<double>(h1.size()) - below1 + forced_miss) / n1);
    if (up < best) best = up, thr.tau_T = tau, thr.kappa = +1;
    if (down < best) best = down, thr.tau_T = std::nextafter(tau, HUGE_VAL), thr.kappa = -1;
  };
  consider(std::nextafter(v.front().first, -HUGE_VAL));
  for (std::size_t i = 0; i < v.size(); ++i) {
    (v[i].second ? below1 : below0) += 1.0;
    if (i + 1 < v.size() && v[i + 1].first == v[i].first) continue;
    consider(v[i].first);
  }
  return thr;
}

enum class Rule { GateClosed, FitFailed, Alarm, NoAlarm };

inline std::string_view rule_name(Rule r) {
  switch (r) {
    case Rule::GateClosed: return "gate_closed";
    case Rule::FitFailed: return "fit_failed";
    case Rule::Alarm: return "alarm";
    case Rule::NoAlarm: return "no_alarm";
  }
  return "unknown";
}

struct DetectorVerdict {
  int decision = 0;
  bool gated = false;  // gate passed
  std::optional<double> statistic;
  Rule rule = Rule::GateClosed;
};

/// Everything the dispersion receiver computes for one symbol before the
/// final threshold comparison.
struct SymbolEvaluation {
  double ybar = 0.0;
  bool gate_pass = false;
  bool converged = false;
  double statistic = std::numeric_limits<double>::quiet_NaN();
  ProfileFit fit;
};

template <typename T>
SymbolEvaluation evaluate_symbol(std::span<const T> counts, const Template& tmpl, const GateConfig& gate,
                                 const FitOptions& fit_opt = {}, std::span<const double> offset = {}) {
  SymbolEvaluation ev;
  ev.ybar = windowed_mean(counts, tmpl, offset);
  ev.gate_pass = gate.passes(ev.ybar);
  if (!ev.gate_pass) return ev;
  ev.fit = fit_profile(counts, tmpl, fit_opt, offset);
  ev.converged = ev.fit.converged && ev.fit.p < tmpl.M_eff();
  if (ev.converged) ev.statistic = t_delta(counts, ev.fit, tmpl);
  return ev;
}

inline DetectorVerdict decide(const SymbolEvaluation& ev, const DispersionThreshold& thr) {
  DetectorVerdict v;
  v.gated = ev.gate_pass;
  if (!ev.gate_pass) return v;
  if (!ev.converged) {
    v.rule = Rule::FitFailed;
    return v;
  }
  v.statistic = ev.statistic;
  const bool alarm = thr.alarm(ev.statistic);
  v.decision = alarm ? 1 : 0;
  v.rule = alarm ? Rule::Alarm : Rule::NoAlarm;
  return v;
}

/// Per-symbol dispersion receiver: gate on the windowed mean, profile fit,
/// T statistic, oriented threshold. Gate failure and fit failure give 0.
template <typename T>
DetectorVerdict detect(std::span<const T> counts, const Template& tmpl, const GateConfig& gate,
                       const DispersionThreshold& thr, const FitOptions& fit_opt = {},
                       std::span<const double> offset = {}) {
  return decide(evaluate_symbol(counts, tmpl, gate, fit_opt, offset), thr);
}

inline double gate_integrated_pfa(double gate_pass_rate_h0, double pfa_conditional) {
  if (!(gate_pass_rate_h0 >= 0.0 && gate_pass_rate_h0 <= 1.0) ||
      !(pfa_conditional >= 0.0 && pfa_conditional <= 1.0))
    throw ContractError("gate_integrated_pfa: probabilities must lie in [0, 1]");
  return gate_pass_rate_h0 * pfa_conditional;
}

}  // namespace mcdisp
