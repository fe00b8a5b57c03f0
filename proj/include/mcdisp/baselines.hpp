#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "mcdisp/counting.hpp"
#include "mcdisp/detector.hpp"
#include "mcdisp/error.hpp"
#include "mcdisp/mobility.hpp"
#include "mcdisp/physics.hpp"
#include "mcdisp/profiling.hpp"
#include "mcdisp/rng.hpp"

namespace mcdisp {

// ---------------------------------------------------------------------------
// Windowed-mean receiver

struct MeanThreshold {
  double tau = 0.0;
  double pfa_target = 0.05;
  int kappa = +1;

  bool alarm(double ybar) const { return kappa * ybar > kappa * tau; }

  bool operator==(const MeanThreshold&) const = default;
};

/// Same quantile protocol as the dispersion threshold, applied to windowed means.
inline MeanThreshold calibrate_mean_threshold(std::span<const double> h0_means, double pfa_target,
                                              ThresholdOptions opt = {}) {
  const auto t = calibrate_threshold(h0_means, pfa_target, {}, opt);
  return {t.tau_T, t.pfa_target, t.kappa};
}

template <typename T>
DetectorVerdict mean_detector(std::span<const T> counts, const Template& tmpl, const GateConfig& gate,
                              const MeanThreshold& thr, std::span<const double> offset = {}) {
  DetectorVerdict v;
  const double ybar = windowed_mean(counts, tmpl, offset);
  v.gated = gate.passes(ybar);
  if (!v.gated) return v;
  v.statistic = ybar;
  const bool alarm = thr.alarm(ybar);
  v.decision = alarm ? 1 : 0;
  v.rule = alarm ? Rule::Alarm : Rule::NoAlarm;
  return v;
}

// ---------------------------------------------------------------------------
// Monte-Carlo marginal likelihood

struct NuisanceVector {
  double psi = 1.0;
  double lambda_bg = 0.0;
  std::vector<int> past_bits;  // (s_{k-1}, ..., s_{k-L+1})
};

struct MarginalLikelihoodConfig {
  int n_paths = 512;
  std::uint64_t common_seed = 0x5EEDULL;

  void validate() const {
    if (n_paths < 100) throw ContractError("MarginalLikelihoodConfig: n_paths must be >= 100");
  }
};

/// Library of simulated within-symbol separation paths per hypothesis. Path i
/// uses the same random stream under both hypotheses (common random numbers),
/// and each path starts from x0 with a uniformly drawn orientation.
class PathLibrary {
 public:
  PathLibrary(const ChannelParams& channel, const MobilityParams& mobility, const Template& tmpl,
              MarginalLikelihoodConfig cfg = {})
      : channel_(channel), mobility_(mobility), tmpl_(tmpl), cfg_(cfg) {
    cfg_.validate();
    channel_.validate();
    mobility_.validate(channel_);
    if (tmpl_.M() != channel_.M) throw ContractError("PathLibrary: template length differs from M");
    for (int s = 0; s < 2; ++s) {
      auto& paths = separations_[s];
      paths.reserve(cfg_.n_paths);
      const int bit[1] = {s};
      for (int i = 0; i < cfg_.n_paths; ++i) {
        const auto series = simulate_packet_separations(bit, mobility_, channel_,
                                                        derive_seed(cfg_.common_seed, "path", i));
        paths.push_back(series.r);
      }
    }
  }

  int n_paths() const { return cfg_.n_paths; }
  int M_eff() const { return tmpl_.M_eff(); }
  const Template& window() const { return tmpl_; }
  const ChannelParams& channel() const { return channel_; }

  /// Gain-normalized windowed intensities for every path, flattened
  /// n_paths x M_eff, for hypothesis s with the given past bits.
  const std::vector<double>& tilde(int s, std::span<const int> past) const {
    std::vector<int> ctx(channel_.L, 0);
    ctx[0] = s;
    for (int l = 1; l < channel_.L; ++l) ctx[l] = l - 1 < static_cast<int>(past.size()) ? past[l - 1] : kSilent;
    auto it = cache_.find(ctx);
    if (it != cache_.end()) return it->second;
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(cfg_.n_paths) * tmpl_.M_eff());
    for (const auto& r : separations_[s]) {
      const auto full = tap_superposition(ctx, r, channel_);
      flat.insert(flat.end(), full.begin() + tmpl_.begin, full.begin() + tmpl_.end);
    }
    return cache_.emplace(ctx, std::move(flat)).first->second;
  }

 private:
  ChannelParams channel_;
  MobilityParams mobility_;
  Template tmpl_;
  MarginalLikelihoodConfig cfg_;
  std::array<std::vector<std::vector<double>>, 2> separations_;
  mutable std::map<std::vector<int>, std::vector<double>> cache_;
};

struct LikelihoodValue {
  double value = 0.0;
  bool underflow = false;
};

/// Product-Poisson log-likelihood of the windowed counts, including the
/// log y! terms.
template <typename T>
double poisson_log_likelihood(std::span<const T> y, std::span<const double> mu) {
  double s = 0.0;
  for (std::size_t m = 0; m < y.size(); ++m) {
    const double yi = static_cast<double>(y[m]);
    if (mu[m] <= 0.0) {
      if (yi > 0.0) return -HUGE_VAL;
      continue;
    }
    s += (yi > 0.0 ? yi * std::log(mu[m]) : 0.0) - mu[m] - std::lgamma(yi + 1.0);
  }
  return s;
}

namespace detail {

template <typename T>
LikelihoodValue mixture_log_likelihood(std::span<const T> yw, const std::vector<double>& flat, int M_eff,
                                       double psi, double lambda_bg) {
  const std::size_t P = flat.size() / M_eff;
  double log_fact = 0.0;
  for (const auto& y : yw) log_fact += std::lgamma(static_cast<double>(y) + 1.0);
  std::vector<double> ll(P);
  double best = -HUGE_VAL;
  for (std::size_t i = 0; i < P; ++i) {
    const double* row = flat.data() + i * M_eff;
    double s = 0.0;
    for (int m = 0; m < M_eff; ++m) {
      const double mu = lambda_bg + psi * row[m];
      const double y = static_cast<double>(yw[m]);
      if (mu <= 0.0) {
        if (y > 0.0) {
          s = -HUGE_VAL;
          break;
        }
        continue;
      }
      s += (y > 0.0 ? y * std::log(mu) : 0.0) - mu;
    }
    ll[i] = s;
    best = std::max(best, s);
  }
  if (best == -HUGE_VAL) return {-HUGE_VAL, true};
  double acc = 0.0;
  for (double v : ll) acc += std::exp(v - best);
  return {best + std::log(acc / static_cast<double>(P)) - log_fact, false};
}

}  // namespace detail

/// log p(Y_J | H_s, nuisance) averaged over the library's paths.
template <typename T>
LikelihoodValue marginal_log_likelihood(std::span<const T> counts, int s, const NuisanceVector& nu,
                                        const PathLibrary& lib) {
  if (!(nu.psi > 0.0) || !(nu.lambda_bg >= 0.0)) throw ContractError("marginal_log_likelihood: invalid nuisance");
  const auto yw = lib.window().window(counts);
  return detail::mixture_log_likelihood(yw, lib.tilde(s, nu.past_bits), lib.M_eff(), nu.psi, nu.lambda_bg);
}

/// Genie-aided likelihood-ratio test with eta = 1; ties decide 0.
template <typename T>
DetectorVerdict oracle_lrt(std::span<const T> counts, const NuisanceVector& truth, const PathLibrary& lib,
                           const GateConfig& gate) {
  DetectorVerdict v;
  v.gated = gate.passes(windowed_mean(counts, lib.window()));
  if (!v.gated) return v;
  const auto l1 = marginal_log_likelihood(counts, 1, truth, lib);
  const auto l0 = marginal_log_likelihood(counts, 0, truth, lib);
  if (l1.underflow && l0.underflow) {
    v.rule = Rule::FitFailed;
    return v;
  }
  const double llr = l1.value - l0.value;
  v.statistic = llr;
  v.decision = llr > 0.0 ? 1 : 0;
  v.rule = v.decision ? Rule::Alarm : Rule::NoAlarm;
  return v;
}

// ---------------------------------------------------------------------------
// GLRT

struct NelderMeadResult {
  std::array<double, 2> x{};
  double f = HUGE_VAL;
  int evaluations = 0;
  bool converged = false;
};

/// Minimal 2-D Nelder-Mead with the standard coefficients.
inline NelderMeadResult nelder_mead_2d(const std::function<double(double, double)>& f, std::array<double, 2> start,
                                       double step, int max_evals, double ftol = 1e-10) {
  std::array<std::array<double, 2>, 3> p{start, {start[0] + step, start[1]}, {start[0], start[1] + step}};
  std::array<double, 3> fv{};
  int evals = 0;
  auto eval = [&](const std::array<double, 2>& x) {
    ++evals;
    const double v = f(x[0], x[1]);
    return std::isnan(v) ? HUGE_VAL : v;
  };
  for (int i = 0; i < 3; ++i) fv[i] = eval(p[i]);
  bool converged = false;
  while (evals < max_evals) {
    std::array<int, 3> idx{0, 1, 2};
    std::sort(idx.begin(), idx.end(), [&](int a, int b) { return fv[a] < fv[b]; });
    const auto best = p[idx[0]], mid = p[idx[1]], worst = p[idx[2]];
    const double fb = fv[idx[0]], fm = fv[idx[1]], fw = fv[idx[2]];
    const double size = std::max(std::hypot(mid[0] - best[0], mid[1] - best[1]),
                                 std::hypot(worst[0] - best[0], worst[1] - best[1]));
    if ((std::isfinite(fw) && std::fabs(fw - fb) <= ftol * (1.0 + std::fabs(fb))) || size < 1e-9) {
      converged = true;
      break;
    }
    const std::array<double, 2> c{(best[0] + mid[0]) / 2.0, (best[1] + mid[1]) / 2.0};
    auto along = [&](double t) { return std::array<double, 2>{c[0] + t * (worst[0] - c[0]), c[1] + t * (worst[1] - c[1])}; };
    const auto xr = along(-1.0);
    const double fr = eval(xr);
    if (fr < fb) {
      const auto xe = along(-2.0);
      const double fe = eval(xe);
      if (fe < fr) {
        p[idx[2]] = xe;
        fv[idx[2]] = fe;
      } else {
        p[idx[2]] = xr;
        fv[idx[2]] = fr;
      }
    } else if (fr < fm) {
      p[idx[2]] = xr;
      fv[idx[2]] = fr;
    } else {
      const bool outside = fr < fw;
      const auto xc = along(outside ? -0.5 : 0.5);
      const double fc = eval(xc);
      if (fc < (outside ? fr : fw)) {
        p[idx[2]] = xc;
        fv[idx[2]] = fc;
      } else {
        for (int j : {idx[1], idx[2]}) {
          p[j] = {best[0] + 0.5 * (p[j][0] - best[0]), best[1] + 0.5 * (p[j][1] - best[1])};
          fv[j] = eval(p[j]);
        }
      }
    }
  }
  const int b = static_cast<int>(std::min_element(fv.begin(), fv.end()) - fv.begin());
  return {p[b], fv[b], evals, converged};
}

struct GlrtConfig {
  int restarts = 3;
  int max_evaluations = 200;  // per restart
  double epsilon = 1e-3;      // background parameterized as log(lambda + epsilon)
  double nominal_background = 2.0;
  int seed_candidates = 32;  // path-scale quantiles scanned for each restart's start
};

struct ProfiledLikelihood {
  double value = -HUGE_VAL;
  double psi = 0.0;
  double lambda_bg = 0.0;
  bool ok = false;
};

/// Maximize the marginal likelihood over (psi > 0, lambda_bg >= 0) under
/// hypothesis s.
template <typename T>
ProfiledLikelihood profile_likelihood(std::span<const T> counts, int s, std::span<const int> past,
                                      const PathLibrary& lib, const GlrtConfig& cfg = {}) {
  const auto yw = lib.window().window(counts);
  const auto& flat = lib.tilde(s, past);
  const int M_eff = lib.M_eff();
  double ybar = 0.0;
  for (const auto& y : yw) ybar += static_cast<double>(y);
  ybar /= M_eff;
  double tbar = 0.0;
  for (double v : flat) tbar += v;
  tbar /= static_cast<double>(flat.size());

  auto decode = [&](double a, double b) {
    return std::pair<double, double>{std::exp(a), std::max(0.0, std::exp(b) - cfg.epsilon)};
  };
  auto objective = [&](double a, double b) {
    const auto [psi, lam] = decode(a, b);
    const auto v = detail::mixture_log_likelihood(yw, flat, M_eff, psi, lam);
    return v.underflow ? HUGE_VAL : -v.value;
  };

  // The mixture has roughly one mode per path scale. Seed each restart at the
  // best per-path moment match over quantiles of the path means.
  std::vector<double> path_mean;
  for (std::size_t i = 0; i + M_eff <= flat.size(); i += M_eff)
    path_mean.push_back(std::accumulate(flat.begin() + i, flat.begin() + i + M_eff, 0.0) / M_eff);
  std::sort(path_mean.begin(), path_mean.end());
  const std::size_t n_scan = std::min<std::size_t>(cfg.seed_candidates, path_mean.size());
  std::vector<double> scales{tbar};
  for (std::size_t i = 0; i < n_scan; ++i) scales.push_back(path_mean[(2 * i + 1) * path_mean.size() / (2 * n_scan)]);

  const std::array<double, 3> bg_start{cfg.nominal_background, 0.5 * ybar, 0.05 * ybar};
  ProfiledLikelihood best;
  for (int r = 0; r < cfg.restarts; ++r) {
    const double lam0 = std::max(0.0, bg_start[r % 3]);
    const double lb0 = std::log(lam0 + cfg.epsilon);
    auto start_for = [&](double sc) { return std::log(std::max(ybar - lam0, 1e-3 * (1.0 + ybar)) / std::max(sc, 1e-300)); };
    double la0 = start_for(scales.front()), f0 = objective(la0, lb0);
    for (std::size_t i = 1; i < scales.size(); ++i) {
      const double la = start_for(scales[i]), f = objective(la, lb0);
      if (f < f0) {
        la0 = la;
        f0 = f;
      }
    }
    const auto res = nelder_mead_2d(objective, {la0, lb0}, 0.5, cfg.max_evaluations);
    if (std::isfinite(res.f) && -res.f > best.value) {
      const auto [psi, lam] = decode(res.x[0], res.x[1]);
      best = {-res.f, psi, lam, true};
    }
  }
  return best;
}

/// GLRT: profiled likelihoods under both hypotheses, ratio against eta = 1.
template <typename T>
DetectorVerdict glrt(std::span<const T> counts, std::span<const int> past, const PathLibrary& lib,
                     const GateConfig& gate, const GlrtConfig& cfg = {}) {
  DetectorVerdict v;
  v.gated = gate.passes(windowed_mean(counts, lib.window()));
  if (!v.gated) return v;
  const auto yw = lib.window().window(counts);
  if (std::all_of(yw.begin(), yw.end(), [](const auto& y) { return y == 0; })) {
    // Both profiled likelihoods approach 1 as psi, lambda -> 0.
    v.statistic = 0.0;
    v.rule = Rule::NoAlarm;
    return v;
  }
  const auto l1 = profile_likelihood(counts, 1, past, lib, cfg);
  const auto l0 = profile_likelihood(counts, 0, past, lib, cfg);
  if (!l1.ok && !l0.ok) {
    v.rule = Rule::FitFailed;
    return v;
  }
  const double llr = l1.value - l0.value;
  v.statistic = llr;
  v.decision = llr > 0.0 ? 1 : 0;
  v.rule = v.decision ? Rule::Alarm : Rule::NoAlarm;
  return v;
}

// ---------------------------------------------------------------------------
// Decision feedback

/// Predicted ISI mean over all M offsets from estimated past bits:
/// gain * sum_{l >= 1} A(s_{k-l}) h(r_ref, l Tsym + t_m).
inline std::vector<double> isi_prediction(std::span<const int> past, const ChannelParams& ch, double r_ref,
                                          double gain) {
  std::vector<double> out(ch.M, 0.0);
  for (int l = 1; l < ch.L; ++l) {
    const int s = l - 1 < static_cast<int>(past.size()) ? past[l - 1] : kSilent;
    const double A = ch.amplitude(s);
    if (A == 0.0) continue;
    for (int m = 0; m < ch.M; ++m) out[m] += gain * A * kernel(r_ref, l * ch.Tsym + ch.offset(m), ch);
  }
  return out;
}

/// Past-bit vector (s_{k-1}, ..., s_{k-L+1}) taken from a decision or bit
/// stream; slots before the packet are silent.
inline std::vector<int> past_from(std::span<const int> stream, int k, int L) {
  std::vector<int> past(std::max(0, L - 1), kSilent);
  for (int l = 1; l < L; ++l)
    if (k - l >= 0) past[l - 1] = stream[k - l];
  return past;
}

/// A pilot symbol with known transmitted bits, used for DFE calibration.
struct PilotSymbol {
  std::span<const Count> counts;
  int bit = 0;
  std::vector<int> past;  // (s_{k-1}, ..., s_{k-L+1})
};

/// Scale of the ISI prediction, fitted by least squares on H0 pilot windows:
/// y_m ~ b + c * A0 h(r_ref, t_m) + gain * isi_prediction(past, gain = 1)_m.
/// The current-symbol column is dropped when A0 = 0. Returns 1 when L = 1.
inline double estimate_isi_gain(std::span<const PilotSymbol> pilots, const Template& tmpl, const ChannelParams& ch,
                                double r_ref) {
  if (ch.L <= 1) return 1.0;
  const bool with_current = ch.A0 > 0.0;
  const int P = with_current ? 3 : 2;
  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(P, P);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(P);
  Eigen::VectorXd x(P);
  double isi_energy = 0.0;
  for (const auto& s : pilots) {
    if (s.bit != 0) continue;
    const auto isi = isi_prediction(s.past, ch, r_ref, 1.0);
    for (int m = tmpl.begin; m < tmpl.end; ++m) {
      x[0] = 1.0;
      if (with_current) x[1] = ch.A0 * kernel(r_ref, ch.offset(m), ch);
      x[P - 1] = isi[m];
      isi_energy += isi[m] * isi[m];
      G += x * x.transpose();
      rhs += x * static_cast<double>(s.counts[m]);
    }
  }
  if (!(isi_energy > 0.0)) throw CalibrationError("estimate_isi_gain: no H0 pilot symbol carries ISI");
  const Eigen::VectorXd beta = G.ldlt().solve(rhs);
  if (!std::isfinite(beta[P - 1])) throw CalibrationError("estimate_isi_gain: singular regression");
  return beta[P - 1];
}

struct DfeResult {
  std::vector<DetectorVerdict> pass1;
  std::vector<DetectorVerdict> pass2;
};

/// Two-pass decision feedback. Pass 1 runs `tentative(k)` symbol by symbol;
/// pass 2 runs `cancel(k, past)` with the past bits taken from the pass-1
/// decisions, or from `genie` when supplied. With L = 1 there is nothing to
/// cancel and pass 2 is pass 1.
inline DfeResult dfe_wrap(int K, int L, const std::function<DetectorVerdict(int)>& tentative,
                          const std::function<DetectorVerdict(int, std::span<const int>)>& cancel,
                          std::span<const int> genie = {}) {
  DfeResult r;
  r.pass1.reserve(K);
  for (int k = 0; k < K; ++k) r.pass1.push_back(tentative(k));
  if (L <= 1) {
    r.pass2 = r.pass1;
    return r;
  }
  std::vector<int> decided(K);
  for (int k = 0; k < K; ++k) decided[k] = r.pass1[k].decision;
  const std::span<const int> feed = genie.empty() ? std::span<const int>(decided) : genie;
  r.pass2.reserve(K);
  for (int k = 0; k < K; ++k) r.pass2.push_back(cancel(k, past_from(feed, k, L)));
  return r;
}

}  // namespace mcdisp
