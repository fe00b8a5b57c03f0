#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "mcdisp/analysis.hpp"
#include "mcdisp/counting.hpp"
#include "mcdisp/detector.hpp"

using namespace mcdisp;

namespace {

struct Stream {
  std::vector<std::vector<Count>> frames;
};

// H0 symbols from the default channel with the transmitter held still, so
// the intensity is deterministic.
Stream still_h0(int n_symbols, std::uint64_t seed) {
  ChannelParams ch;
  MobilityParams mob;
  mob.v0 = mob.v1 = 0.0;
  mob.Dt = 0.0;
  Stream s;
  const std::vector<int> bits(64, 0);
  for (int p = 0; static_cast<int>(s.frames.size()) < n_symbols; ++p) {
    const auto rec = generate_packet(bits, 1.0, ch, mob, derive_seed(seed, "still", p));
    for (const auto& f : rec.frames)
      if (static_cast<int>(s.frames.size()) < n_symbols) s.frames.push_back(f.counts);
  }
  return s;
}

}  // namespace

TEST(PsiContribution, Examples) {
  EXPECT_DOUBLE_EQ(psi_contribution(5, 5), -0.2);
  EXPECT_DOUBLE_EQ(psi_contribution(0, 2), 1.0);
  EXPECT_THROW(psi_contribution(1, 0.0), DomainError);
  EXPECT_THROW(psi_contribution(1, -1.0), DomainError);
}

TEST(PsiContribution, CenteredUnderPoisson) {
  Rng rng(1);
  const double mu = 4.0;
  const int n = 1000000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = psi_contribution(static_cast<double>(rng.poisson(mu)), mu);
    s += v;
    s2 += v * v;
  }
  const double m = s / n;
  EXPECT_LT(std::abs(m), 3.0 * std::sqrt((s2 / n - m * m) / n));
}

TEST(TDelta, DirectEvaluation) {
  const std::vector<double> psi{0.1, -0.2, 0.4};
  EXPECT_NEAR(t_delta_from_psi(psi, 2), 0.3, 1e-15);
  EXPECT_THROW(t_delta_from_psi(psi, 3), ContractError);
}

TEST(TDelta, NullLevelIsSmall) {
  const auto s = still_h0(4000, 2);
  const auto tmpl = learn_template(s.frames, 0.05, 0.05);
  double sum = 0.0;
  int n = 0;
  for (const auto& y : s.frames) {
    const auto f = fit_profile(std::span<const Count>(y), tmpl);
    if (!f.converged) continue;
    sum += t_delta(std::span<const Count>(y), f, tmpl);
    ++n;
  }
  EXPECT_GT(n, 3900);
  EXPECT_LT(std::abs(sum / n), 0.05);
}

TEST(TDelta, OracleMeanRecoversNormalizedExcess) {
  // Gamma(k, k) multiplicative jitter per sample: phi0 = 1/k.
  const double k = 8.0, phi0 = 1.0 / k;
  std::vector<double> mu(30);
  for (int m = 0; m < 30; ++m) mu[m] = 5.0 + 20.0 * std::exp(-0.05 * (m - 8) * (m - 8));
  Rng rng(3);
  double s = 0.0, s2 = 0.0;
  const int n = 40000;
  for (int i = 0; i < n; ++i) {
    std::vector<double> psi(30);
    for (int m = 0; m < 30; ++m)
      psi[m] = psi_contribution(static_cast<double>(rng.poisson(mu[m] * rng.gamma(k, k))), mu[m]);
    const double t = t_delta_from_psi(psi, 0);
    s += t;
    s2 += t * t;
  }
  const double m = s / n;
  EXPECT_LT(std::abs(m - phi0), 3.0 * std::sqrt((s2 / n - m * m) / n));
}

TEST(TDelta, GainInvariantAtOracleLevel) {
  const double k = 4.0;
  std::vector<double> means, ses;
  for (double psi_gain : {0.5, 1.0, 2.0}) {
    Rng rng(derive_seed(4, "phi", static_cast<std::uint64_t>(psi_gain * 4)));
    double s = 0.0, s2 = 0.0;
    const int n = 400000;
    const double mu = psi_gain * 12.0;
    for (int i = 0; i < n; ++i) {
      const double v = psi_contribution(static_cast<double>(rng.poisson(mu * rng.gamma(k, k))), mu);
      s += v;
      s2 += v * v;
    }
    means.push_back(s / n);
    ses.push_back(std::sqrt((s2 / n - (s / n) * (s / n)) / n));
  }
  for (std::size_t i = 0; i < means.size(); ++i) {
    EXPECT_LT(std::abs(means[i] - 1.0 / k), 3.0 * ses[i]);
    for (std::size_t j = i + 1; j < means.size(); ++j)
      EXPECT_LT(std::abs(means[i] - means[j]), 3.0 * std::hypot(ses[i], ses[j]));
  }
}

TEST(Gate, ZeroLevelPassesAllCalibration) {
  std::vector<double> ybar(200);
  for (int i = 0; i < 200; ++i) ybar[i] = 1.0 + 0.01 * i;
  const auto g = calibrate_gate_from_means(ybar, 0.0);
  for (double y : ybar) EXPECT_TRUE(g.passes(y));
  EXPECT_LE(g.tau_Y, 1.0);
}

TEST(Gate, OrderStatisticConvention) {
  std::vector<double> ybar(100);
  std::iota(ybar.begin(), ybar.end(), 1.0);
  const auto g = calibrate_gate_from_means(ybar, 0.1);
  EXPECT_EQ(g.tau_Y, 10.0);
  EXPECT_FALSE(g.passes(10.0));
  EXPECT_TRUE(g.passes(10.5));
}

TEST(Gate, Errors) {
  std::vector<double> few(99, 1.0);
  EXPECT_THROW(calibrate_gate_from_means(few, 0.05), CalibrationError);
  std::vector<double> ok(100, 1.0);
  EXPECT_THROW(calibrate_gate_from_means(ok, 1.0), ContractError);
}

TEST(Gate, BackgroundPassRate) {
  // Long flat window keeps the discreteness of the windowed mean small.
  Template t;
  t.u.assign(400, 1.0);
  t.begin = 0;
  t.end = 400;
  Rng rng(5);
  auto draw = [&](int n) {
    std::vector<std::vector<Count>> out(n, std::vector<Count>(400));
    for (auto& f : out)
      for (auto& y : f) y = rng.poisson(2.0);
    return out;
  };
  const auto g = calibrate_gate(draw(20000), 0.05, t);
  int pass = 0;
  const auto fresh = draw(20000);
  for (const auto& f : fresh) pass += g.passes(windowed_mean(std::span<const Count>(f), t));
  EXPECT_NEAR(pass / 20000.0, 0.95, 0.01);
}

TEST(Threshold, OrderStatisticExample) {
  std::vector<double> v;
  for (int i = 1; i <= 10; ++i) v.push_back(0.1 * i);
  const auto t = calibrate_threshold(v, 0.2, {}, ThresholdOptions{0.0});
  EXPECT_DOUBLE_EQ(t.tau_T, 0.8);
  int above = 0;
  for (double x : v) above += t.alarm(x);
  EXPECT_EQ(above, 2);
  EXPECT_EQ(t.kappa, 1);
  EXPECT_DOUBLE_EQ(calibrate_threshold(v, 0.999, {}, ThresholdOptions{0.0}).tau_T, 0.1);
}

TEST(Threshold, NormalQuantile) {
  Rng rng(6);
  std::vector<double> v(100000);
  for (auto& x : v) x = rng.normal();
  EXPECT_NEAR(calibrate_threshold(v, 0.05).tau_T, 1.645, 0.02);
}

TEST(Threshold, TailResolutionRequired) {
  std::vector<double> v(199, 0.0);
  EXPECT_THROW(calibrate_threshold(v, 0.05), CalibrationError);
  v.push_back(1.0);
  EXPECT_NO_THROW(calibrate_threshold(v, 0.05));
  EXPECT_THROW(calibrate_threshold(v, 0.0), ContractError);
}

TEST(Threshold, CalibrationExceedanceCount) {
  Rng rng(7);
  for (int trial = 0; trial < 40; ++trial) {
    const int n = 300 + static_cast<int>(rng.uniform() * 3000);
    const double pfa = 0.02 + 0.2 * rng.uniform();
    std::vector<double> h0(n), h1(50);
    for (auto& x : h0) x = rng.normal();
    const bool flip = trial % 2;
    for (auto& x : h1) x = (flip ? -3.0 : 3.0) + rng.normal();
    const auto t = calibrate_threshold(h0, pfa, h1, ThresholdOptions{0.0});
    EXPECT_EQ(t.kappa, flip ? -1 : 1);
    int alarms = 0;
    for (double x : h0) alarms += t.alarm(x);
    EXPECT_LE(std::abs(alarms - static_cast<int>(std::floor(pfa * n))), 1) << n << " " << pfa;
  }
}

TEST(MinErrorThreshold, SeparatesCleanly) {
  const std::vector<double> h0{1, 2, 3, 4}, h1{6, 7, 8};
  auto t = min_error_threshold(h0, h1);
  EXPECT_EQ(t.kappa, 1);
  for (double x : h0) EXPECT_FALSE(t.alarm(x));
  for (double x : h1) EXPECT_TRUE(t.alarm(x));
  EXPECT_TRUE(std::isnan(t.pfa_target));

  t = min_error_threshold(h1, h0);
  EXPECT_EQ(t.kappa, -1);
  for (double x : h0) EXPECT_TRUE(t.alarm(x));
  for (double x : h1) EXPECT_FALSE(t.alarm(x));
}

TEST(MinErrorThreshold, ForcedMissesCount) {
  // Two H1 symbols never reach the statistic; the best rule still alarms on
  // every reaching H1 value.
  const std::vector<double> h0{0, 0, 0, 5}, h1{5, 5};
  const auto t = min_error_threshold(h0, h1, 4, 4);
  EXPECT_EQ(t.kappa, 1);
  EXPECT_TRUE(t.alarm(5.0));
  EXPECT_FALSE(t.alarm(0.0));
}

TEST(Detect, GateClosedDecidesZero) {
  Template t;
  t.u.assign(10, 1.0);
  t.begin = 0;
  t.end = 10;
  const std::vector<Count> y{1, 2, 1, 2, 1, 2, 1, 2, 1, 2};
  const auto v = detect(std::span<const Count>(y), t, GateConfig{2.0, 0.05, false}, DispersionThreshold{});
  EXPECT_EQ(v.decision, 0);
  EXPECT_FALSE(v.gated);
  EXPECT_FALSE(v.statistic.has_value());
  EXPECT_EQ(v.rule, Rule::GateClosed);
}

TEST(Detect, ThresholdBranches) {
  SymbolEvaluation ev;
  ev.gate_pass = true;
  ev.converged = true;
  ev.statistic = 0.5;
  const auto v = decide(ev, DispersionThreshold{0.3, 0.05, +1});
  EXPECT_EQ(v.decision, 1);
  EXPECT_EQ(v.rule, Rule::Alarm);
  EXPECT_EQ(decide(ev, DispersionThreshold{0.5, 0.05, +1}).decision, 0);
  EXPECT_EQ(decide(ev, DispersionThreshold{0.6, 0.05, -1}).decision, 1);
  ev.converged = false;
  const auto f = decide(ev, DispersionThreshold{0.3, 0.05, +1});
  EXPECT_EQ(f.decision, 0);
  EXPECT_EQ(f.rule, Rule::FitFailed);
}

TEST(Detect, GateIntegratedFalseAlarm) {
  const auto cal = still_h0(20000, 8);
  const auto tmpl = learn_template(cal.frames, 0.05, 0.05);
  const auto gate = calibrate_gate(cal.frames, 0.05, tmpl);
  std::vector<double> stats;
  for (const auto& y : cal.frames) {
    const auto ev = evaluate_symbol(std::span<const Count>(y), tmpl, gate);
    if (ev.gate_pass && ev.converged) stats.push_back(ev.statistic);
  }
  const auto thr = calibrate_threshold(stats, 0.05);
  const auto eval = still_h0(20000, 9);
  int alarms = 0, gated = 0;
  for (const auto& y : eval.frames) {
    const auto v = detect(std::span<const Count>(y), tmpl, gate, thr);
    alarms += v.decision;
    gated += v.gated;
    if (!v.gated) {
      EXPECT_EQ(v.decision, 0);
    }
  }
  const double n = 20000.0;
  const double expect = gate_integrated_pfa(0.95, 0.05);
  const double se = std::sqrt(expect * (1 - expect) / n) * std::sqrt(2.0);
  EXPECT_LT(std::abs(alarms / n - expect), 3.0 * se);
  EXPECT_NEAR(gated / n, 0.95, 0.01);
}

TEST(GateIntegratedPfa, Product) {
  EXPECT_DOUBLE_EQ(gate_integrated_pfa(1.0, 0.05), 0.05);
  EXPECT_DOUBLE_EQ(gate_integrated_pfa(0.95, 0.05), 0.0475);
  EXPECT_EQ(gate_integrated_pfa(0.0, 0.3), 0.0);
  EXPECT_THROW(gate_integrated_pfa(1.1, 0.05), ContractError);
}
