#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mcdisp/analysis.hpp"
#include "mcdisp/config.hpp"
#include "mcdisp/counting.hpp"
#include "mcdisp/detector.hpp"
#include "mcdisp/mobility.hpp"
#include "mcdisp/physics.hpp"
#include "mcdisp/profiling.hpp"
#include "mcdisp/rng.hpp"

namespace mcdisp {

struct SelftestResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

namespace detail {

inline std::string num(double v) { return fmt17(v); }

}  // namespace detail

/// Fast property oracles over every module (seconds, single-threaded).
inline std::vector<SelftestResult> run_selftest() {
  using detail::num;
  std::vector<SelftestResult> out;
  auto check = [&](std::string name, const std::function<SelftestResult()>& body) {
    SelftestResult r;
    try {
      r = body();
    } catch (const std::exception& e) {
      r.pass = false;
      r.detail = std::string("exception: ") + e.what();
    }
    r.name = std::move(name);
    out.push_back(std::move(r));
  };

  check("kernel_mass", [] {
    // Kernel integrates to g0 over space at fixed t: compare a radial quadrature.
    ChannelParams ch;
    const double t = 0.5;
    double s = 0.0;
    const double dr = 1e-7;
    for (double r = 0.5 * dr; r < 2e-4; r += dr) s += 4.0 * M_PI * r * r * kernel(r, t, ch) * dr;
    return SelftestResult{{}, std::abs(s / ch.g0 - 1.0) < 1e-6, "mass/g0 = " + num(s / ch.g0)};
  });

  check("poisson_moments", [] {
    Rng rng(derive_seed(7, "selftest/poisson"));
    std::vector<Count> y(200000);
    for (auto& v : y) v = rng.poisson(25.0);
    const auto d = overdispersion_decomposition(std::span<const Count>(y));
    return SelftestResult{{}, std::abs(d.mean_term / 25.0 - 1.0) < 0.01 && std::abs(d.variance / 25.0 - 1.0) < 0.02,
                          "mean " + num(d.mean_term) + " var " + num(d.variance)};
  });

  check("mixed_poisson_variance", [] {
    Rng rng(derive_seed(7, "selftest/mixed"));
    std::vector<Count> y(200000);
    for (auto& v : y) v = rng.poisson(rng.gamma(4.0, 2.0));
    const auto d = overdispersion_decomposition(std::span<const Count>(y));
    return SelftestResult{{}, std::abs(d.variance - 3.0) < 0.05 && std::abs(d.excess_term - 1.0) < 0.05,
                          "var " + num(d.variance) + " excess " + num(d.excess_term)};
  });

  check("effective_diffusivity", [] {
    MobilityParams m;
    const double d = effective_diffusivity(1, m);
    return SelftestResult{{}, std::abs(d - 1.877e-10) / 1.877e-10 < 1e-3, "D_eff(1) = " + num(d)};
  });

  check("packet_determinism", [] {
    ChannelParams ch;
    MobilityParams mob;
    const std::vector<int> bits{1, 0, 1, 1, 0};
    const auto a = generate_packet(bits, 1.0, ch, mob, 99);
    const auto b = generate_packet(bits, 1.0, ch, mob, 99);
    return SelftestResult{{}, a == b, a == b ? "identical" : "differs"};
  });

  check("profile_fit_noiseless", [] {
    std::vector<double> u(40), y(40);
    for (int m = 0; m < 40; ++m) u[m] = 0.5 + std::exp(-0.5 * (m - 15) * (m - 15) / 30.0);
    const auto t = make_template(u, 0.05, 0.05);
    for (int m = 0; m < 40; ++m) y[m] = 30.0 * t.u[m] + 2.0;
    const auto f = fit_profile(std::span<const double>(y), t);
    return SelftestResult{{}, f.converged && std::abs(f.a_hat - 30.0) < 1e-6 && std::abs(f.b_hat - 2.0) < 1e-6,
                          "a " + num(f.a_hat) + " b " + num(f.b_hat)};
  });

  check("quantile_threshold", [] {
    std::vector<double> v;
    for (int i = 1; i <= 1000; ++i) v.push_back(i);
    const auto t = calibrate_threshold(v, 0.05);
    int alarms = 0;
    for (double x : v) alarms += t.alarm(x);
    return SelftestResult{{}, alarms == 50, "alarms " + std::to_string(alarms)};
  });

  check("normal_quantile", [] {
    const double q = Qinv(0.05);
    return SelftestResult{{}, std::abs(q - 1.6448536269514722) < 1e-10 && std::abs(Q(q) - 0.05) < 1e-14,
                          "Qinv(0.05) = " + num(q)};
  });

  check("separability_equal_variance", [] {
    const auto s = separability(0.0, 0.5, 1.0, 0.5);
    return SelftestResult{{},
                          std::abs(s.D_B - 0.25) < 1e-9 && std::abs(s.D_C - 0.25) < 1e-9 && std::abs(s.D_KL - 1.0) < 1e-9,
                          "D_B " + num(s.D_B) + " D_C " + num(s.D_C) + " D_KL " + num(s.D_KL)};
  });

  check("lrv_ar1", [] {
    Rng rng(derive_seed(7, "selftest/ar1"));
    std::vector<std::vector<double>> seqs(200, std::vector<double>(500));
    for (auto& s : seqs) {
      double x = rng.normal() / std::sqrt(0.75);
      for (auto& v : s) {
        v = x;
        x = 0.5 * x + rng.normal();
      }
    }
    const auto e = estimate_lrv(seqs);
    // Bartlett expectation at the selected lag: 1 + 2 sum (1 - l/(L+1)) 0.5^l.
    double expect = 1.0;
    for (int l = 1; l <= e.L_s; ++l) expect += 2.0 * (1.0 - l / (e.L_s + 1.0)) * std::pow(0.5, l);
    return SelftestResult{{}, std::abs(e.Omega / expect - 1.0) < 0.05,
                          "Omega " + num(e.Omega) + " Bartlett expectation " + num(expect) + " at L_s " +
                              std::to_string(e.L_s)};
  });

  check("config_round_trip", [] {
    auto c = preset(Experiment::Isi);
    c.channel.Dm = 1.0 / 3.0e10;
    c.sweep.v1_grid = {0.1 / 3.0, 1e-7};
    const auto back = parse_config_string(serialize_config(c));
    return SelftestResult{{}, back == c, back == c ? "lossless" : "mismatch"};
  });

  return out;
}

}  // namespace mcdisp
