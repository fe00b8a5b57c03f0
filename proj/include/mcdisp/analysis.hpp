#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "mcdisp/error.hpp"
#include "mcdisp/physics.hpp"
#include "mcdisp/profiling.hpp"
#include "mcdisp/rng.hpp"

namespace mcdisp {

// ---------------------------------------------------------------------------
// Gaussian tail

/// Standard normal upper tail.
inline double Q(double x) { return 0.5 * std::erfc(x / std::numbers::sqrt2); }

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

namespace detail {

// Acklam's rational approximation to the normal quantile, relative error
// about 1.15e-9 before refinement.
inline double acklam_quantile(double p) {
  static constexpr std::array<double, 6> a{-3.969683028665376e+01, 2.209460984245205e+02,
                                           -2.759285104469687e+02, 1.383577518672690e+02,
                                           -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr std::array<double, 5> b{-5.447609879822406e+01, 1.615858368580409e+02,
                                           -1.556989798598866e+02, 6.680131188771972e+01,
                                           -1.328068155288572e+01};
  static constexpr std::array<double, 6> c{-7.784894002430293e-03, -3.223964580411365e-01,
                                           -2.400758277161838e+00, -2.549732539343734e+00,
                                           4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr std::array<double, 4> d{7.784695709041462e-03, 3.224671290700398e-01,
                                           2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double p_low = 0.02425;
  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  if (p > 1.0 - p_low) {
    const double q = std::sqrt(-2.0 * std::log1p(-p));
    return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double q = p - 0.5;
  const double r = q * q;
  return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
         (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

}  // namespace detail

/// Normal quantile: Acklam's approximation plus one Halley step on erfc.
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    if (p == 0.0) return -HUGE_VAL;
    if (p == 1.0) return HUGE_VAL;
    throw DomainError("normal_quantile: probability outside [0, 1]");
  }
  double z = detail::acklam_quantile(p);
  const double e = normal_cdf(z) - p;
  const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * z * z);
  z -= u / (1.0 + 0.5 * z * u);
  return z;
}

/// Inverse of Q: Q(Qinv(p)) = p.
inline double Qinv(double p) { return -normal_quantile(p); }

// ---------------------------------------------------------------------------
// Long-run variance

struct LRVEstimate {
  std::vector<double> gamma;  // gamma(0..L_s)
  int L_s = 0;
  double omega2 = 0.0;
  double Omega = 1.0;  // omega2 / gamma(0), unclipped
  std::size_t n_symbols = 0;
  int M_eff = 0;
};

struct LRVOptions {
  int L_max = 10;
  int run_length = 3;       // consecutive small lags that end the search
  double threshold_scale = 2.0;  // |rho| < scale / sqrt(N)
};

/// Pooled, per-symbol-centered lag autocovariances up to max_lag.
inline std::vector<double> pooled_autocovariance(std::span<const std::vector<double>> sequences, int max_lag) {
  if (sequences.empty()) throw ContractError("pooled_autocovariance: no sequences");
  const int M = static_cast<int>(sequences.front().size());
  if (max_lag >= M) throw ContractError("pooled_autocovariance: lag must be below the window length");
  std::vector<double> acc(max_lag + 1, 0.0);
  std::vector<double> c(M);
  for (const auto& s : sequences) {
    if (static_cast<int>(s.size()) != M) throw ContractError("pooled_autocovariance: ragged sequences");
    double mean = 0.0;
    for (double v : s) mean += v;
    mean /= M;
    for (int i = 0; i < M; ++i) c[i] = s[i] - mean;
    for (int l = 0; l <= max_lag; ++l) {
      double sum = 0.0;
      for (int i = 0; i + l < M; ++i) sum += c[i] * c[i + l];
      acc[l] += sum;
    }
  }
  const double K = static_cast<double>(sequences.size());
  for (int l = 0; l <= max_lag; ++l) acc[l] /= K * static_cast<double>(M - l);
  return acc;
}

inline double bartlett_lrv(std::span<const double> gamma, int L) {
  double w = gamma[0];
  for (int l = 1; l <= L; ++l) w += 2.0 * (1.0 - static_cast<double>(l) / (L + 1)) * gamma[l];
  return w;
}

/// Bartlett long-run variance with the data-driven truncation lag: the
/// smallest lag after which |rho(l)| stays below 2/sqrt(N) for three
/// consecutive lags, capped at L_max.
inline LRVEstimate estimate_lrv(std::span<const std::vector<double>> sequences, LRVOptions opt = {}) {
  if (sequences.empty()) throw ContractError("estimate_lrv: no sequences");
  const int M = static_cast<int>(sequences.front().size());
  if (opt.L_max < 0 || opt.L_max >= M) throw ContractError("estimate_lrv: need 0 <= L_max < M_eff");
  const int probe = std::min(M - 1, opt.L_max + opt.run_length);
  const auto g = pooled_autocovariance(sequences, probe);
  const double N = static_cast<double>(sequences.size()) * M;
  const double thr = opt.threshold_scale / std::sqrt(N);

  int L_s = opt.L_max;
  if (g[0] > 0.0) {
    for (int l = 0; l <= opt.L_max; ++l) {
      bool quiet = true;
      for (int j = 1; j <= opt.run_length && l + j <= probe; ++j)
        if (std::fabs(g[l + j] / g[0]) >= thr) {
          quiet = false;
          break;
        }
      if (quiet) {
        L_s = l;
        break;
      }
    }
  } else {
    L_s = 0;
  }

  LRVEstimate est;
  est.gamma.assign(g.begin(), g.begin() + L_s + 1);
  est.L_s = L_s;
  est.omega2 = bartlett_lrv(est.gamma, L_s);
  est.Omega = g[0] > 0.0 ? est.omega2 / g[0] : 1.0;
  est.n_symbols = sequences.size();
  est.M_eff = M;
  return est;
}

// ---------------------------------------------------------------------------
// Gaussian working model

struct GaussianWorkingModel {
  double delta0 = 0.0, delta1 = 0.0;
  double omega2_0 = 0.0, omega2_1 = 0.0;
  int M_eff = 0;
  int p = 2;
  double mT0 = 0.0, mT1 = 0.0, vT0 = 0.0, vT1 = 0.0;
  LRVEstimate lrv0, lrv1;

  int kappa() const { return mT1 < mT0 ? -1 : +1; }
  double dm() const { return mT1 - mT0; }
};

inline double variance_factor(int M_eff, int p) {
  if (M_eff <= p) throw ContractError("variance_factor: M_eff must exceed p");
  const double d = static_cast<double>(M_eff - p);
  return static_cast<double>(M_eff) / (d * d);
}

/// Build the model from per-hypothesis means and long-run variances.
inline GaussianWorkingModel make_gaussian_model(double delta0, double omega2_0, double delta1, double omega2_1,
                                                int M_eff, int p) {
  GaussianWorkingModel g;
  g.delta0 = delta0;
  g.delta1 = delta1;
  g.omega2_0 = omega2_0;
  g.omega2_1 = omega2_1;
  g.M_eff = M_eff;
  g.p = p;
  g.mT0 = delta0;
  g.mT1 = delta1;
  const double f = variance_factor(M_eff, p);
  g.vT0 = f * omega2_0;
  g.vT1 = f * omega2_1;
  return g;
}

inline double sample_mean(std::span<const double> v) {
  if (v.empty()) throw ContractError("sample_mean: empty");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double sample_variance(std::span<const double> v) {
  if (v.size() < 2) throw ContractError("sample_variance: need >= 2 samples");
  const double m = sample_mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return ss / static_cast<double>(v.size() - 1);
}

/// delta_s from labeled statistics, omega^2 from the psi-hat sequences.
inline GaussianWorkingModel fit_gaussian_model(std::span<const double> stats0, std::span<const double> stats1,
                                               std::span<const std::vector<double>> psi0,
                                               std::span<const std::vector<double>> psi1, int p,
                                               LRVOptions opt = {}) {
  if (stats0.size() < 200 || stats1.size() < 200 || psi0.size() < 200 || psi1.size() < 200)
    throw CalibrationError("fit_gaussian_model: need at least 200 labeled symbols per hypothesis");
  const auto l0 = estimate_lrv(psi0, opt);
  const auto l1 = estimate_lrv(psi1, opt);
  if (l0.M_eff != l1.M_eff) throw ContractError("fit_gaussian_model: window length differs between hypotheses");
  auto g = make_gaussian_model(sample_mean(stats0), l0.omega2, sample_mean(stats1), l1.omega2, l0.M_eff, p);
  g.lrv0 = l0;
  g.lrv1 = l1;
  return g;
}

struct RocPoint {
  double pfa = 0.0;
  double pd = 0.0;
  double tau = 0.0;
  double pb = 0.0;
};

/// Gaussian-approximate operating point at threshold tau. Gate-pass rates
/// scale both the false-alarm and detection sides (gate failure decides 0).
inline RocPoint roc_at_threshold(const GaussianWorkingModel& g, double tau, double gate_pass_h0 = 1.0,
                                 double gate_pass_h1 = 1.0) {
  if (!(g.vT0 > 0.0 && g.vT1 > 0.0)) throw ContractError("roc_at_threshold: model variances must be positive");
  const int k = g.kappa();
  RocPoint r;
  r.tau = tau;
  r.pfa = gate_pass_h0 * Q(k * (tau - g.mT0) / std::sqrt(g.vT0));
  r.pd = gate_pass_h1 * Q(k * (tau - g.mT1) / std::sqrt(g.vT1));
  r.pb = 0.5 * (r.pfa + 1.0 - r.pd);
  return r;
}

/// Threshold for a conditional false-alarm target, then the operating point.
inline RocPoint roc_at_pfa(const GaussianWorkingModel& g, double pfa_target, double gate_pass_h0 = 1.0,
                           double gate_pass_h1 = 1.0) {
  if (!(pfa_target > 0.0 && pfa_target < 1.0)) throw ContractError("roc_at_pfa: target must lie in (0, 1)");
  const double tau = g.mT0 + g.kappa() * std::sqrt(g.vT0) * Qinv(pfa_target);
  return roc_at_threshold(g, tau, gate_pass_h0, gate_pass_h1);
}

// ---------------------------------------------------------------------------
// Separability metrics

struct SeparabilityReport {
  double D_C = 0.0;
  double a_star = 0.5;
  double D_B = 0.0;
  double D_KL = 0.0;
  double rho_ISI = 0.0;
};

/// Chernoff exponent D(a) between N(m0, v0) and N(m1, v1).
inline double chernoff_exponent(double a, double m0, double v0, double m1, double v1) {
  const double va = a * v0 + (1.0 - a) * v1;
  const double dm = m1 - m0;
  return 0.5 * std::log(va / (std::pow(v0, a) * std::pow(v1, 1.0 - a))) + 0.5 * a * (1.0 - a) * dm * dm / va;
}

inline double bhattacharyya(double m0, double v0, double m1, double v1) {
  const double dm = m1 - m0;
  return 0.5 * std::log((v0 + v1) / (2.0 * std::sqrt(v0 * v1))) + dm * dm / (4.0 * (v0 + v1));
}

inline double symmetric_kl(double m0, double v0, double m1, double v1) {
  const double dm = m1 - m0;
  return 0.25 * (v0 / v1 + v1 / v0 - 2.0) + 0.25 * dm * dm * (1.0 / v0 + 1.0 / v1);
}

/// Golden-section maximization of D(a) over [0, 1].
inline std::pair<double, double> chernoff_information(double m0, double v0, double m1, double v1,
                                                      double tol = 1e-8) {
  const double invphi = (std::sqrt(5.0) - 1.0) / 2.0;
  double lo = 0.0, hi = 1.0;
  double x1 = hi - invphi * (hi - lo), x2 = lo + invphi * (hi - lo);
  double f1 = chernoff_exponent(x1, m0, v0, m1, v1), f2 = chernoff_exponent(x2, m0, v0, m1, v1);
  while (hi - lo > tol) {
    if (f1 < f2) {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + invphi * (hi - lo);
      f2 = chernoff_exponent(x2, m0, v0, m1, v1);
    } else {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - invphi * (hi - lo);
      f1 = chernoff_exponent(x1, m0, v0, m1, v1);
    }
  }
  const double a = 0.5 * (lo + hi);
  return {a, chernoff_exponent(a, m0, v0, m1, v1)};
}

inline double isi_severity(std::span<const double> hbar) {
  if (hbar.empty() || !(hbar[0] > 0.0)) throw ContractError("isi_severity: need hbar_0 > 0");
  double s = 0.0;
  for (std::size_t l = 1; l < hbar.size(); ++l) s += hbar[l];
  return s / hbar[0];
}

/// Window-averaged kernel taps hbar_l = mean_{m in J} h(r_ref, l Tsym + t_m).
inline std::vector<double> isi_profile(const ChannelParams& ch, const Template& tmpl, double r_ref) {
  std::vector<double> hbar(ch.L, 0.0);
  for (int l = 0; l < ch.L; ++l) {
    for (int m = tmpl.begin; m < tmpl.end; ++m) hbar[l] += kernel(r_ref, l * ch.Tsym + ch.offset(m), ch);
    hbar[l] /= tmpl.M_eff();
  }
  return hbar;
}

inline SeparabilityReport separability(double m0, double v0, double m1, double v1, std::span<const double> hbar = {}) {
  if (!(v0 > 0.0 && v1 > 0.0)) throw ContractError("separability: variances must be positive");
  SeparabilityReport r;
  const auto [a, dc] = chernoff_information(m0, v0, m1, v1);
  r.a_star = a;
  r.D_B = bhattacharyya(m0, v0, m1, v1);
  r.D_C = std::max(dc, r.D_B);
  r.D_KL = symmetric_kl(m0, v0, m1, v1);
  if (!hbar.empty()) r.rho_ISI = isi_severity(hbar);
  return r;
}

inline SeparabilityReport separability(const GaussianWorkingModel& g, std::span<const double> hbar = {}) {
  return separability(g.mT0, g.vT0, g.mT1, g.vT1, hbar);
}

struct ScalingProbe {
  std::vector<int> M_eff;
  std::vector<double> D_B;
  double slope = 0.0;  // least-squares slope of D_B against M_eff
};

/// D_B as the window length varies with the long-run variances held fixed.
inline ScalingProbe meff_scaling_probe(const GaussianWorkingModel& base, std::span<const int> grid) {
  ScalingProbe out;
  for (int M : grid) {
    const auto g = make_gaussian_model(base.delta0, base.omega2_0, base.delta1, base.omega2_1, M, base.p);
    out.M_eff.push_back(M);
    out.D_B.push_back(bhattacharyya(g.mT0, g.vT0, g.mT1, g.vT1));
  }
  if (grid.size() >= 2) {
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      mx += out.M_eff[i];
      my += out.D_B[i];
    }
    mx /= grid.size();
    my /= grid.size();
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      sxy += (out.M_eff[i] - mx) * (out.D_B[i] - my);
      sxx += (out.M_eff[i] - mx) * (out.M_eff[i] - mx);
    }
    out.slope = sxx > 0.0 ? sxy / sxx : 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Correlation diagnostics

struct CorrelationDiagnostics {
  double tau_psi = 0.0;  // seconds
  double M_corr = 0.0;
  double ratio = 1.0;  // M_corr / M_eff
  LRVEstimate lrv;
};

/// tau_psi is where the pooled autocorrelation first falls below 1/e
/// (linear interpolation between lags, times dt); M_corr = M_eff / max(1, Omega).
inline CorrelationDiagnostics correlation_diagnostics(std::span<const std::vector<double>> sequences, double dt,
                                                      LRVOptions opt = {}) {
  if (sequences.empty()) throw ContractError("correlation_diagnostics: no sequences");
  const int M = static_cast<int>(sequences.front().size());
  if (static_cast<double>(sequences.size()) * M < 1e3)
    throw CalibrationError("correlation_diagnostics: need at least 1e3 pooled samples");
  CorrelationDiagnostics out;
  out.lrv = estimate_lrv(sequences, opt);
  const auto g = pooled_autocovariance(sequences, M - 1);
  const double target = std::exp(-1.0);
  double lag = static_cast<double>(M - 1);
  if (g[0] > 0.0) {
    for (int l = 1; l < M; ++l) {
      const double r0 = g[l - 1] / g[0], r1 = g[l] / g[0];
      if (r1 < target) {
        lag = (l - 1) + (r0 - target) / (r0 - r1);
        break;
      }
    }
  }
  out.tau_psi = lag * dt;
  out.M_corr = M / std::max(1.0, out.lrv.Omega);
  out.ratio = out.M_corr / M;
  return out;
}

// ---------------------------------------------------------------------------
// Oracle identities and profiling sensitivity

/// Exact oracle mean of psi-circ: kappa2 / mu^2 (latent normalized scale).
inline double oracle_psi_mean(double mu_tilde, double kappa2) { return kappa2 / (mu_tilde * mu_tilde); }

/// Exact lag-zero oracle variance of psi-circ at count scale c = c_n * Psi.
inline double oracle_psi_variance(double mu_tilde, double k2, double k3, double k4, double c) {
  const double m4 = std::pow(mu_tilde, 4);
  return (2.0 * k2 * k2 + k4 + 4.0 * (mu_tilde * k2 + k3) / c + 2.0 * (mu_tilde * mu_tilde + k2) / (c * c)) / m4;
}

/// Cumulants kappa_1..kappa_4 of Gamma(shape, rate).
inline std::array<double, 4> gamma_cumulants(double shape, double rate) {
  return {shape / rate, shape / (rate * rate), 2.0 * shape / std::pow(rate, 3), 6.0 * shape / std::pow(rate, 4)};
}

struct MomentEstimate {
  double mean = 0.0;
  double variance = 0.0;
  double se = 0.0;  // standard error of the mean
  std::size_t n = 0;
};

/// Monte-Carlo psi-circ: Y ~ Poisson(c_n Psi Lambda~), centered and scaled by
/// the oracle mean c_n Psi mu~.
inline MomentEstimate oracle_psi_moments(std::span<const double> latent_tilde, double psi, double c_n,
                                         double mu_tilde, Rng& rng) {
  if (latent_tilde.size() < 2) throw ContractError("oracle_psi_moments: need >= 2 latent draws");
  const double c = c_n * psi;
  const double mu = c * mu_tilde;
  if (!(mu > 0.0)) throw DomainError("oracle_psi_moments: oracle mean must be positive");
  double s = 0.0, ss = 0.0;
  for (double lt : latent_tilde) {
    const double y = static_cast<double>(rng.poisson(c * lt));
    const double v = ((y - mu) * (y - mu) - y) / (mu * mu);
    s += v;
    ss += v * v;
  }
  MomentEstimate e;
  e.n = latent_tilde.size();
  const double n = static_cast<double>(e.n);
  e.mean = s / n;
  e.variance = (ss - n * e.mean * e.mean) / (n - 1.0);
  e.se = std::sqrt(e.variance / n);
  return e;
}

struct OracleDiagnostics {
  std::vector<double> g_n;
  std::vector<double> A_n;  // row-major p x p
  int p = 2;
  double sensitivity = 0.0;  // || g_n^T A_n^{-1} ||_2
  bool singular = false;
};

/// Profiling sensitivity with design x = [u, 1] (p = 2) or x = [u] (p = 1),
/// mean profile mu and latent variance v over the window.
inline OracleDiagnostics profiling_sensitivity(std::span<const double> u, std::span<const double> mu,
                                               std::span<const double> v, int p = 2) {
  if (u.size() != mu.size() || u.size() != v.size() || u.empty())
    throw ContractError("profiling_sensitivity: length mismatch");
  if (p != 1 && p != 2) throw ContractError("profiling_sensitivity: p must be 1 or 2");
  const double n = static_cast<double>(u.size());
  OracleDiagnostics d;
  d.p = p;
  d.g_n.assign(p, 0.0);
  d.A_n.assign(p * p, 0.0);
  for (std::size_t m = 0; m < u.size(); ++m) {
    if (!(mu[m] > 0.0)) throw DomainError("profiling_sensitivity: means must be positive");
    const double x[2] = {u[m], 1.0};
    const double w = (mu[m] + 2.0 * v[m]) / (mu[m] * mu[m] * mu[m]);
    for (int i = 0; i < p; ++i) {
      d.g_n[i] -= w * x[i] / n;
      for (int j = 0; j < p; ++j) d.A_n[i * p + j] += x[i] * x[j] / mu[m] / n;
    }
  }
  if (p == 1) {
    if (!(d.A_n[0] > 0.0)) {
      d.singular = true;
      return d;
    }
    d.sensitivity = std::fabs(d.g_n[0] / d.A_n[0]);
    return d;
  }
  const double a = d.A_n[0], b = d.A_n[1], c = d.A_n[3];
  const double det = a * c - b * b;
  if (!(det > 1e-12 * (a * c))) {
    d.singular = true;
    return d;
  }
  // A is symmetric, so g^T A^{-1} = (A^{-1} g)^T.
  const double r0 = (c * d.g_n[0] - b * d.g_n[1]) / det;
  const double r1 = (-b * d.g_n[0] + a * d.g_n[1]) / det;
  d.sensitivity = std::hypot(r0, r1);
  return d;
}

/// Closed one-parameter scale case: g A^{-1} with mu = c u, v = c^2 v~.
inline double scale_sensitivity_closed_form(std::span<const double> u, std::span<const double> v_tilde, double c) {
  if (u.size() != v_tilde.size() || u.empty()) throw ContractError("scale_sensitivity_closed_form: length mismatch");
  double mu_ = 0.0, minv = 0.0, mv = 0.0;
  for (std::size_t m = 0; m < u.size(); ++m) {
    mu_ += u[m];
    minv += 1.0 / u[m];
    mv += v_tilde[m] / (u[m] * u[m]);
  }
  const double n = static_cast<double>(u.size());
  mu_ /= n;
  minv /= n;
  mv /= n;
  return -(minv / c) / mu_ - 2.0 * mv / mu_;
}

}  // namespace mcdisp
