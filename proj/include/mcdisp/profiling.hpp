#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "mcdisp/error.hpp"
#include "mcdisp/rng.hpp"

namespace mcdisp {

/// Learned within-symbol mean shape and the retained window [begin, end)
/// (zero-based, half-open). In one-based terms m1 = begin + 1, m2 = end.
struct Template {
  std::vector<double> u;
  int begin = 0;
  int end = 0;
  double alpha = 0.05;
  double beta = 0.05;

  int M() const { return static_cast<int>(u.size()); }
  int M_eff() const { return end - begin; }
  int m1() const { return begin + 1; }
  int m2() const { return end; }

  std::span<const double> window_u() const {
    return {u.data() + begin, static_cast<std::size_t>(M_eff())};
  }

  template <typename T>
  std::span<const T> window(std::span<const T> full) const {
    if (full.size() != u.size()) throw ContractError("Template::window: length must equal M");
    return full.subspan(begin, M_eff());
  }

  bool operator==(const Template&) const = default;
};

struct WindowBounds {
  int begin = 0;
  int end = 0;
};

/// Normalized cumulative energy rule: m1 = min{m : C(m) >= alpha},
/// m2 = max{m : C(m) <= 1 - beta}.
inline WindowBounds select_window(std::span<const double> u, double alpha, double beta, int p = 2) {
  if (!(alpha > 0.0 && alpha < 1.0) || !(beta > 0.0 && beta < 1.0))
    throw ContractError("select_window: alpha and beta must lie in (0, 1)");
  const double total = std::accumulate(u.begin(), u.end(), 0.0);
  if (!(total > 0.0)) throw CalibrationError("select_window: template has no energy");
  constexpr double eps = 1e-12;
  int m1 = -1;
  int m2 = -1;
  double cum = 0.0;
  for (int m = 0; m < static_cast<int>(u.size()); ++m) {
    cum += u[m];
    const double c = cum / total;
    if (m1 < 0 && c >= alpha - eps) m1 = m;
    if (c <= 1.0 - beta + eps) m2 = m;
  }
  if (m1 < 0 || m2 < m1 + p)
    throw WindowError("select_window: retained window shorter than p + 1 samples");
  return {m1, m2 + 1};
}

/// Build a template from an arbitrary nonnegative shape: rescale to unit mean
/// and apply the window rule.
inline Template make_template(std::span<const double> shape, double alpha, double beta, int p = 2) {
  if (shape.empty()) throw ContractError("make_template: empty shape");
  const double mean = std::accumulate(shape.begin(), shape.end(), 0.0) / static_cast<double>(shape.size());
  if (!(mean > 0.0)) throw CalibrationError("make_template: calibration mean is zero everywhere");
  Template t;
  t.u.resize(shape.size());
  for (std::size_t m = 0; m < shape.size(); ++m) {
    if (shape[m] < 0.0) throw ContractError("make_template: shape must be nonnegative");
    t.u[m] = shape[m] / mean;
  }
  const auto w = select_window(t.u, alpha, beta, p);
  t.begin = w.begin;
  t.end = w.end;
  t.alpha = alpha;
  t.beta = beta;
  return t;
}

/// Average the calibration count vectors per offset and normalize to unit
/// mean over all M offsets.
template <typename Range>
Template learn_template(const Range& calibration_counts, double alpha, double beta, int p = 2) {
  std::size_t n = 0;
  std::vector<double> acc;
  for (const auto& y : calibration_counts) {
    if (acc.empty()) acc.assign(y.size(), 0.0);
    if (y.size() != acc.size()) throw ContractError("learn_template: ragged calibration frames");
    for (std::size_t m = 0; m < y.size(); ++m) acc[m] += static_cast<double>(y[m]);
    ++n;
  }
  if (n < 10) throw CalibrationError("learn_template: need at least 10 calibration symbols");
  for (auto& v : acc) v /= static_cast<double>(n);
  return make_template(acc, alpha, beta, p);
}

struct ProfileFit {
  double a_hat = 0.0;
  double b_hat = 0.0;
  int p = 2;
  bool converged = false;
  int iterations = 0;
  std::vector<double> mu_hat;  // fitted mean over the window
};

struct FitOptions {
  double b_floor = 1e-8;
  int max_iterations = 100;
  double grad_tol = 1e-10;
  /// Design Gram matrix condition number above which (a, b) is treated as
  /// unidentifiable and the offset is dropped.
  double max_condition = 1e12;
  /// Fit a * u only (p = 1).
  bool pin_offset = false;
};

namespace detail {

/// Poisson negative log-likelihood (up to constants) of mu = a u + b + o.
template <typename T>
double profile_objective(std::span<const T> y, std::span<const double> u,
                         std::span<const double> offset, double a, double b) {
  double f = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double mu = a * u[i] + b + (offset.empty() ? 0.0 : offset[i]);
    const double yi = static_cast<double>(y[i]);
    if (mu <= 0.0) {
      if (yi > 0.0) return HUGE_VAL;
      continue;
    }
    f += mu - (yi > 0.0 ? yi * std::log(mu) : 0.0);
  }
  return f;
}

inline double gram_condition(std::span<const double> u) {
  double suu = 0.0, su = 0.0;
  for (double v : u) {
    suu += v * v;
    su += v;
  }
  const double n = static_cast<double>(u.size());
  const double tr = suu + n;
  const double det = suu * n - su * su;
  if (det <= tr * tr * 1e-300) return HUGE_VAL;
  const double disc = std::sqrt(std::max(0.0, tr * tr / 4.0 - det));
  const double lmax = tr / 2.0 + disc;
  const double lmin = det / lmax;
  return lmin > 0.0 ? lmax / lmin : HUGE_VAL;
}

}  // namespace detail

/// Minimize sum_J [mu - y log mu] with mu = a u + b (+ known offset) over
/// a >= 0, b >= b_floor. Newton on (log a, log b) with Armijo backtracking;
/// coordinate steps when the Hessian is not positive definite.
template <typename T>
ProfileFit fit_profile_window(std::span<const T> y, std::span<const double> u,
                              const FitOptions& opt = {}, std::span<const double> offset = {}) {
  if (y.size() != u.size()) throw ContractError("fit_profile: counts and template differ in length");
  if (!offset.empty() && offset.size() != y.size())
    throw ContractError("fit_profile: offset length mismatch");
  const std::size_t n = y.size();
  double S = 0.0, su = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (static_cast<double>(y[i]) < 0.0) throw ContractError("fit_profile: negative count");
    S += static_cast<double>(y[i]);
    su += u[i];
  }
  auto finish = [&](ProfileFit fit) {
    fit.mu_hat.resize(n);
    for (std::size_t i = 0; i < n; ++i)
      fit.mu_hat[i] = fit.a_hat * u[i] + fit.b_hat + (offset.empty() ? 0.0 : offset[i]);
    return fit;
  };

  const bool one_param = opt.pin_offset || detail::gram_condition(u) > opt.max_condition;
  if (S == 0.0) return finish({0.0, opt.b_floor, one_param ? 1 : 2, true, 0, {}});

  if (one_param) {
    ProfileFit fit{0.0, opt.pin_offset ? 0.0 : 0.0, 1, false, 0, {}};
    if (offset.empty()) {
      fit.a_hat = su > 0.0 ? S / su : 0.0;
      fit.converged = su > 0.0;
      return finish(fit);
    }
    // 1-D Newton on a with a known offset.
    double a = std::max(S / std::max(su, 1e-300), 1e-12);
    for (int it = 0; it < opt.max_iterations; ++it) {
      double g = 0.0, h = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double mu = a * u[i] + offset[i];
        const double yi = static_cast<double>(y[i]);
        g += u[i] * (1.0 - yi / mu);
        h += u[i] * u[i] * yi / (mu * mu);
      }
      fit.iterations = it + 1;
      if (std::fabs(g) * std::max(a, 1.0) <= opt.grad_tol * (1.0 + S)) {
        fit.converged = true;
        break;
      }
      double next = h > 0.0 ? a - g / h : a * 0.5;
      if (next <= 0.0) next = a * 0.5;
      a = next;
    }
    fit.a_hat = a;
    return finish(fit);
  }

  // Starting point: least squares on [u, 1], pulled into the interior.
  const double ybar = S / static_cast<double>(n);
  const double ubar = su / static_cast<double>(n);
  double suu = 0.0, suy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    suu += (u[i] - ubar) * (u[i] - ubar);
    suy += (u[i] - ubar) * (static_cast<double>(y[i]) - ybar);
  }
  double a0 = suu > 0.0 ? suy / suu : ybar / std::max(ubar, 1e-300);
  double b0 = ybar - a0 * ubar;
  a0 = std::max(a0, 0.05 * ybar / std::max(ubar, 1e-300));
  b0 = std::max(b0, std::max(0.05 * ybar, 10.0 * opt.b_floor));

  const double lb_floor = std::log(opt.b_floor);
  double la = std::log(a0);
  double lb = std::log(b0);
  auto objective = [&](double xa, double xb) {
    return detail::profile_objective<T>(y, u, offset, std::exp(xa), std::exp(xb));
  };

  ProfileFit fit;
  fit.p = 2;
  double f = objective(la, lb);
  for (int it = 0; it < opt.max_iterations; ++it) {
    const double a = std::exp(la), b = std::exp(lb);
    double ga = 0.0, gb = 0.0, haa = 0.0, hab = 0.0, hbb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double mu = a * u[i] + b + (offset.empty() ? 0.0 : offset[i]);
      const double yi = static_cast<double>(y[i]);
      const double r = 1.0 - yi / mu;
      const double w = yi / (mu * mu);
      ga += u[i] * r;
      gb += r;
      haa += u[i] * u[i] * w;
      hab += u[i] * w;
      hbb += w;
    }
    // Chain rule into log coordinates.
    const double Ga = a * ga, Gb = b * gb;
    const double Haa = a * ga + a * a * haa;
    const double Hab = a * b * hab;
    const double Hbb = b * gb + b * b * hbb;
    const bool at_floor = lb <= lb_floor + 1e-12 && Gb > 0.0;
    const double pGb = at_floor ? 0.0 : Gb;
    fit.iterations = it + 1;
    if (std::max(std::fabs(Ga), std::fabs(pGb)) <= opt.grad_tol * (1.0 + S)) {
      fit.converged = true;
      break;
    }

    double da = 0.0, db = 0.0;
    const double det = Haa * Hbb - Hab * Hab;
    if (!at_floor && Haa > 0.0 && det > 0.0) {
      da = -(Hbb * Ga - Hab * Gb) / det;
      db = -(Haa * Gb - Hab * Ga) / det;
    } else {
      // Coordinate descent: Newton per coordinate when curvature is positive.
      da = Haa > 0.0 ? -Ga / Haa : -Ga;
      db = at_floor ? 0.0 : (Hbb > 0.0 ? -Gb / Hbb : -Gb);
    }
    const double cap = 5.0;
    const double scale = std::max({std::fabs(da), std::fabs(db), cap}) / cap;
    da /= scale;
    db /= scale;

    double step = 1.0;
    bool moved = false;
    for (int ls = 0; ls < 60; ++ls) {
      const double na = la + step * da;
      const double nb = std::max(lb + step * db, lb_floor);
      const double nf = objective(na, nb);
      if (nf <= f + 1e-4 * step * (Ga * da + pGb * db) || nf < f) {
        // A step below one ulp of the parameters is a fixed point, not progress.
        moved = nf < f && (na != la || nb != lb);
        la = na;
        lb = nb;
        f = nf;
        break;
      }
      step *= 0.5;
    }
    if (!moved) {
      // No descent possible in floating point: accept if gradient is small
      // relative to the objective scale.
      fit.converged = std::max(std::fabs(Ga), std::fabs(pGb)) <= 1e-6 * (1.0 + S);
      break;
    }
  }
  fit.a_hat = std::exp(la);
  fit.b_hat = std::exp(lb);
  return finish(fit);
}

template <typename T>
ProfileFit fit_profile(std::span<const T> counts, const Template& tmpl, const FitOptions& opt = {},
                       std::span<const double> offset = {}) {
  const auto yw = tmpl.window(counts);
  std::span<const double> ow;
  if (!offset.empty()) ow = tmpl.window(offset);
  return fit_profile_window<T>(yw, tmpl.window_u(), opt, ow);
}

/// Y - mu_hat over the retained window.
template <typename T>
std::vector<double> residuals(std::span<const T> counts, const ProfileFit& fit, const Template& tmpl) {
  if (!fit.converged) throw ContractError("residuals: fit did not converge");
  const auto yw = tmpl.window(counts);
  std::vector<double> out(yw.size());
  for (std::size_t i = 0; i < yw.size(); ++i) out[i] = static_cast<double>(yw[i]) - fit.mu_hat[i];
  return out;
}

}  // namespace mcdisp
