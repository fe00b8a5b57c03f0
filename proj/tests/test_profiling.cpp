#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mcdisp/profiling.hpp"

using namespace mcdisp;

namespace {

std::vector<double> bump(int M, double center, double width, double floor) {
  std::vector<double> u(M);
  for (int m = 0; m < M; ++m) u[m] = floor + std::exp(-0.5 * (m - center) * (m - center) / (width * width));
  return u;
}

double objective(std::span<const Count> yw, std::span<const double> uw, double a, double b) {
  return detail::profile_objective<Count>(yw, uw, {}, a, b);
}

}  // namespace

TEST(Window, EnergyRuleExample) {
  const std::vector<double> u{0.1, 0.3, 0.3, 0.2, 0.1};
  const auto w = select_window(u, 0.2, 0.1);
  EXPECT_EQ(w.begin + 1, 2);
  EXPECT_EQ(w.end, 4);
  const auto t = make_template(u, 0.2, 0.1);
  EXPECT_EQ(t.m1(), 2);
  EXPECT_EQ(t.m2(), 4);
  EXPECT_EQ(t.M_eff(), 3);
}

TEST(Window, FlatTemplateTrimsByFractionsOnly) {
  std::vector<std::vector<Count>> frames(12, std::vector<Count>(40, 5));
  const auto t = learn_template(frames, 0.05, 0.05);
  for (double v : t.u) EXPECT_DOUBLE_EQ(v, 1.0);
  EXPECT_EQ(t.m1(), 2);
  EXPECT_EQ(t.m2(), 38);
  EXPECT_EQ(t.M_eff(), 37);
}

TEST(Window, TooShortThrows) {
  const std::vector<double> u{0.0, 0.0, 1.0, 0.0, 0.0};
  EXPECT_THROW(select_window(u, 0.05, 0.05), WindowError);
  EXPECT_THROW(select_window(u, 0.0, 0.05), ContractError);
}

TEST(Window, MonotoneInTrimFractions) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> u(30);
    for (auto& v : u) v = 0.05 + rng.uniform();
    int prev = 1 << 30;
    for (double a : {0.01, 0.05, 0.1, 0.2, 0.3}) {
      const auto w = select_window(u, a, 0.05, 0);
      EXPECT_LE(w.end - w.begin, prev);
      prev = w.end - w.begin;
    }
    prev = 1 << 30;
    for (double b : {0.01, 0.05, 0.1, 0.2, 0.3}) {
      const auto w = select_window(u, 0.05, b, 0);
      EXPECT_LE(w.end - w.begin, prev);
      prev = w.end - w.begin;
    }
  }
}

TEST(Template, LearnedShapeByHand) {
  const std::vector<Count> means{2, 6, 4, 4, 2, 2};
  std::vector<std::vector<Count>> frames(10, means);
  const auto t = learn_template(frames, 0.05, 0.05, 1);
  const double overall = 20.0 / 6.0;
  for (int m = 0; m < 6; ++m) EXPECT_NEAR(t.u[m], means[m] / overall, 1e-14);
}

TEST(Template, NormalizedToUnitMean) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<Count>> frames(15, std::vector<Count>(40));
    for (auto& f : frames)
      for (int m = 0; m < 40; ++m) f[m] = rng.poisson(2.0 + 30.0 * std::exp(-0.02 * (m - 10) * (m - 10)));
    const auto t = learn_template(frames, 0.05, 0.05);
    EXPECT_NEAR(std::accumulate(t.u.begin(), t.u.end(), 0.0) / 40.0, 1.0, 1e-10);
    EXPECT_GE(t.M_eff(), 3);
  }
}

TEST(Template, CalibrationErrors) {
  std::vector<std::vector<Count>> zeros(10, std::vector<Count>(8, 0));
  EXPECT_THROW(learn_template(zeros, 0.05, 0.05), CalibrationError);
  std::vector<std::vector<Count>> few(9, std::vector<Count>(8, 3));
  EXPECT_THROW(learn_template(few, 0.05, 0.05), CalibrationError);
}

TEST(ProfileFit, PinnedOffsetClosedForm) {
  std::vector<double> u(20, 1.0);
  const auto t = make_template(u, 0.05, 0.05);
  std::vector<Count> y(20);
  for (int m = 0; m < 20; ++m) y[m] = m % 7;
  FitOptions opt;
  opt.pin_offset = true;
  const auto f = fit_profile(std::span<const Count>(y), t, opt);
  double S = 0.0;
  for (int m = t.begin; m < t.end; ++m) S += y[m];
  EXPECT_TRUE(f.converged);
  EXPECT_EQ(f.p, 1);
  EXPECT_NEAR(f.a_hat, S / t.M_eff(), 1e-12);
  EXPECT_EQ(f.b_hat, 0.0);
}

TEST(ProfileFit, NoiselessRecovery) {
  const auto t = make_template(bump(40, 14, 5, 0.3), 0.05, 0.05);
  for (auto [a0, b0] : {std::pair{3.0, 1.0}, std::pair{30.0, 2.0}, std::pair{0.7, 12.0}}) {
    std::vector<double> y(40);
    for (int m = 0; m < 40; ++m) y[m] = a0 * t.u[m] + b0;
    const auto f = fit_profile(std::span<const double>(y), t);
    ASSERT_TRUE(f.converged);
    EXPECT_NEAR(f.a_hat, a0, 1e-6);
    EXPECT_NEAR(f.b_hat, b0, 1e-6);
  }
}

TEST(ProfileFit, ConsistentOnLongWindow) {
  const int M = 4000;
  auto shape = bump(M, 1500, 600, 0.2);
  const auto t = make_template(shape, 0.05, 0.05);
  Rng rng(8);
  std::vector<Count> y(M);
  for (int m = 0; m < M; ++m) y[m] = rng.poisson(3.0 * t.u[m] + 1.0);
  const auto f = fit_profile(std::span<const Count>(y), t);
  ASSERT_TRUE(f.converged);
  // Fisher information of (a, b) at the truth.
  double iaa = 0.0, iab = 0.0, ibb = 0.0;
  for (double u : t.window_u()) {
    const double mu = 3.0 * u + 1.0;
    iaa += u * u / mu;
    iab += u / mu;
    ibb += 1.0 / mu;
  }
  const double det = iaa * ibb - iab * iab;
  EXPECT_LT(std::abs(f.a_hat - 3.0), 3.0 * std::sqrt(ibb / det));
  EXPECT_LT(std::abs(f.b_hat - 1.0), 3.0 * std::sqrt(iaa / det));
}

TEST(ProfileFit, BeatsGridOracle) {
  const auto t = make_template(bump(40, 12, 6, 0.4), 0.05, 0.05);
  Rng rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Count> y(40);
    for (int m = 0; m < 40; ++m) y[m] = rng.poisson(8.0 * t.u[m] + 2.0);
    const auto f = fit_profile(std::span<const Count>(y), t);
    ASSERT_TRUE(f.converged);
    const auto yw = t.window(std::span<const Count>(y));
    const double best = objective(yw, t.window_u(), f.a_hat, f.b_hat);
    const double amax = 2.0 * f.a_hat + 1.0, bmax = 2.0 * f.b_hat + 1.0;
    double grid = HUGE_VAL;
    for (int i = 0; i < 100; ++i)
      for (int j = 0; j < 100; ++j)
        grid = std::min(grid, objective(yw, t.window_u(), amax * i / 99.0, bmax * j / 99.0));
    EXPECT_LE(best, grid + 1e-8);
  }
}

TEST(ProfileFit, ScaleEquivariance) {
  const auto t = make_template(bump(40, 15, 5, 0.3), 0.05, 0.05);
  const double a0 = 10.0, b0 = 2.0;
  for (double c : {0.5, 2.0}) {
    Rng rng(derive_seed(10, "scale", static_cast<std::uint64_t>(4 * c)));
    double sa = 0.0, sb = 0.0, sa2 = 0.0, sb2 = 0.0;
    const int n = 4000;
    for (int k = 0; k < n; ++k) {
      std::vector<Count> y(40);
      for (int m = 0; m < 40; ++m) y[m] = rng.poisson(c * (a0 * t.u[m] + b0));
      const auto f = fit_profile(std::span<const Count>(y), t);
      sa += f.a_hat;
      sb += f.b_hat;
      sa2 += f.a_hat * f.a_hat;
      sb2 += f.b_hat * f.b_hat;
    }
    const double ma = sa / n, mb = sb / n;
    const double sea = std::sqrt((sa2 / n - ma * ma) / n), seb = std::sqrt((sb2 / n - mb * mb) / n);
    // The nonnegativity floor biases b upward slightly at low counts.
    EXPECT_LT(std::abs(ma - c * a0), 4.0 * sea + 0.02 * c * a0) << c;
    EXPECT_LT(std::abs(mb - c * b0), 4.0 * seb + 0.05 * c * b0) << c;
  }
}

TEST(ProfileFit, AllZeroWindow) {
  const auto t = make_template(bump(40, 15, 5, 0.3), 0.05, 0.05);
  const std::vector<Count> y(40, 0);
  const auto f = fit_profile(std::span<const Count>(y), t);
  EXPECT_EQ(f.a_hat, 0.0);
  EXPECT_EQ(f.b_hat, FitOptions{}.b_floor);
}

TEST(ProfileFit, FittedMeanPositive) {
  const auto t = make_template(bump(40, 15, 5, 0.3), 0.05, 0.05);
  Rng rng(12);
  for (int k = 0; k < 200; ++k) {
    std::vector<Count> y(40);
    for (int m = 0; m < 40; ++m) y[m] = rng.poisson(0.3 * t.u[m] + 0.2);
    const auto f = fit_profile(std::span<const Count>(y), t);
    if (!f.converged) continue;
    for (double mu : f.mu_hat) EXPECT_GT(mu, 0.0);
  }
}

TEST(Residuals, Examples) {
  const auto t = make_template(bump(40, 15, 5, 0.3), 0.05, 0.05);
  std::vector<double> y(40);
  for (int m = 0; m < 40; ++m) y[m] = 4.0 * t.u[m] + 1.5;
  const auto f = fit_profile(std::span<const double>(y), t);
  for (double r : residuals(std::span<const double>(y), f, t)) EXPECT_NEAR(r, 0.0, 1e-8);

  ProfileFit single;
  single.converged = true;
  single.mu_hat = {5.0, 5.0, 5.0};
  Template one;
  one.u = {1.0, 1.0, 1.0};
  one.begin = 0;
  one.end = 3;
  const std::vector<Count> c{7, 5, 3};
  EXPECT_EQ(residuals(std::span<const Count>(c), single, one), (std::vector<double>{2.0, 0.0, -2.0}));
  single.converged = false;
  EXPECT_THROW(residuals(std::span<const Count>(c), single, one), ContractError);
}

TEST(Residuals, SumToZeroAtInteriorFit) {
  // With an intercept, a * score_a + b * score_b = sum(y - mu), so raw
  // residuals sum to zero whenever b is off its floor.
  const auto t = make_template(bump(40, 15, 5, 0.3), 0.05, 0.05);
  Rng rng(14);
  int interior = 0;
  for (int k = 0; k < 2000; ++k) {
    std::vector<Count> y(40);
    for (int m = 0; m < 40; ++m) y[m] = rng.poisson(20.0 * t.u[m] + 2.0);
    const auto f = fit_profile(std::span<const Count>(y), t);
    ASSERT_TRUE(f.converged) << k;
    const auto r = residuals(std::span<const Count>(y), f, t);
    if (f.b_hat <= 10.0 * FitOptions{}.b_floor) continue;
    ++interior;
    double S = 0.0;
    for (auto v : t.window(std::span<const Count>(y))) S += static_cast<double>(v);
    EXPECT_NEAR(std::accumulate(r.begin(), r.end(), 0.0), 0.0, 1e-6 * (1.0 + S)) << k;
  }
  EXPECT_GT(interior, 1000);
}

TEST(Template, WindowLengthContract) {
  const auto t = make_template(bump(40, 15, 5, 0.3), 0.05, 0.05);
  const std::vector<Count> y(39, 1);
  EXPECT_THROW(t.window(std::span<const Count>(y)), ContractError);
}
