#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "mcdisp/physics.hpp"

using namespace mcdisp;

TEST(Kernel, ZeroForNonPositiveTime) {
  ChannelParams ch;
  EXPECT_EQ(kernel(10e-6, 0.0, ch), 0.0);
  EXPECT_EQ(kernel(10e-6, -1.0, ch), 0.0);
  EXPECT_GT(kernel(10e-6, 1e-3, ch), 0.0);
}

TEST(Kernel, NonFiniteInputThrows) {
  ChannelParams ch;
  EXPECT_THROW(kernel(NAN, 1.0, ch), DomainError);
  EXPECT_THROW(kernel(1e-6, INFINITY, ch), DomainError);
}

TEST(Kernel, PeakTimeMatchesClosedForm) {
  for (auto [r, D] : {std::pair{10e-6, 1e-10}, std::pair{5e-6, 3e-10}, std::pair{20e-6, 5e-11}}) {
    ChannelParams ch;
    ch.Dm = D;
    const double expected = r * r / (6.0 * D);
    double best_t = 0.0, best = -1.0;
    for (int i = 1; i <= 200000; ++i) {
      const double t = expected * 4.0 * i / 200000.0;
      const double v = kernel(r, t, ch);
      if (v > best) best = v, best_t = t;
    }
    EXPECT_NEAR(best_t / expected, 1.0, 0.01) << "r=" << r << " D=" << D;
  }
  ChannelParams ch;
  EXPECT_NEAR(10e-6 * 10e-6 / (6.0 * ch.Dm), 0.1667, 1e-4);
}

TEST(Kernel, DistanceRatio) {
  ChannelParams ch;
  const double r = 7e-6, t = 0.3;
  EXPECT_NEAR(kernel(r, t, ch) / kernel(2 * r, t, ch), std::exp(3 * r * r / (4 * ch.Dm * t)), 1e-9);
}

TEST(Kernel, PositiveOverGrid) {
  ChannelParams ch;
  for (double r : {0.0, 1e-6, 1e-5, 5e-5})
    for (double t : {1e-3, 0.1, 1.0, 10.0}) {
      // Far and early the Gaussian factor underflows double precision.
      if (r * r / (4.0 * ch.Dm * t) < 700.0) {
        EXPECT_GT(kernel(r, t, ch), 0.0) << r << " " << t;
      } else {
        EXPECT_EQ(kernel(r, t, ch), 0.0);
      }
    }
}

namespace {
std::vector<double> const_sep(const ChannelParams& ch, double r) { return std::vector<double>(ch.M, r); }
}  // namespace

TEST(TapSuperposition, NoReleaseGivesZero) {
  ChannelParams ch;
  ch.A0 = 0.0;
  const std::vector<int> ctx{0};
  for (double v : tap_superposition(ctx, const_sep(ch, 10e-6), ch)) EXPECT_EQ(v, 0.0);
}

TEST(TapSuperposition, PureIsiTap) {
  ChannelParams ch;
  ch.L = 2;
  ch.A0 = 0.0;
  const auto sep = const_sep(ch, 10e-6);
  const std::vector<int> ctx{0, 1};
  const auto out = tap_superposition(ctx, sep, ch);
  for (int m = 0; m < ch.M; ++m) EXPECT_DOUBLE_EQ(out[m], ch.A1 * kernel(10e-6, ch.Tsym + ch.offset(m), ch));
}

TEST(TapSuperposition, SumOfSingleTaps) {
  ChannelParams ch;
  ch.L = 3;
  std::vector<double> sep(ch.M);
  for (int m = 0; m < ch.M; ++m) sep[m] = 6e-6 + 0.1e-6 * m;
  const std::vector<int> ctx{1, 0, 1};
  const auto full = tap_superposition(ctx, sep, ch);
  for (int m = 0; m < ch.M; ++m) {
    double s = 0.0;
    for (int l = 0; l < 3; ++l) s += ch.amplitude(ctx[l]) * kernel(sep[m], l * ch.Tsym + ch.offset(m), ch);
    EXPECT_NEAR(full[m], s, 1e-12 * s);
  }
}

TEST(TapSuperposition, SilentSlotsContributeNothing) {
  ChannelParams ch;
  ch.L = 3;
  const auto sep = const_sep(ch, 10e-6);
  const std::vector<int> with{1, kSilent, kSilent}, alone{1};
  ChannelParams one = ch;
  one.L = 1;
  EXPECT_EQ(tap_superposition(with, sep, ch), tap_superposition(alone, sep, one));
}

TEST(TapSuperposition, LinearInAmplitude) {
  ChannelParams ch;
  ch.L = 2;
  ch.A0 = 0.0;
  const auto sep = const_sep(ch, 9e-6);
  const std::vector<int> ctx{1, 0};
  auto base = tap_superposition(ctx, sep, ch);
  ch.A1 *= 2.0;
  auto twice = tap_superposition(ctx, sep, ch);
  for (int m = 0; m < ch.M; ++m) EXPECT_DOUBLE_EQ(twice[m], 2.0 * base[m]);
}

TEST(TapSuperposition, ClampsSeparation) {
  ChannelParams ch;
  const std::vector<int> ctx{1};
  EXPECT_EQ(tap_superposition(ctx, const_sep(ch, 0.0), ch), tap_superposition(ctx, const_sep(ch, ch.r_min), ch));
}

TEST(TapSuperposition, WrongLengthsThrow) {
  ChannelParams ch;
  ch.L = 2;
  const std::vector<int> ctx{1};
  EXPECT_THROW(tap_superposition(ctx, const_sep(ch, 1e-5), ch), ContractError);
  const std::vector<int> ctx2{1, 0};
  EXPECT_THROW(tap_superposition(ctx2, std::vector<double>(3, 1e-5), ch), ContractError);
}

TEST(ComposeIntensity, BackgroundOnly) {
  ChannelParams ch;
  const std::vector<double> tilde(5, 0.0);
  for (double v : compose_intensity(tilde, GainModel(1.7), ch)) EXPECT_EQ(v, 2.0);
}

TEST(ComposeIntensity, IdentityAtUnitGainNoBackground) {
  ChannelParams ch;
  ch.lambda_bg = 0.0;
  const std::vector<double> tilde{0.5, 3.0, 11.0};
  EXPECT_EQ(compose_intensity(tilde, GainModel(1.0), ch), tilde);
}

TEST(ComposeIntensity, GainScalesSignalExactly) {
  ChannelParams ch;
  const std::vector<double> tilde{0.25, 1.5, 7.0, 0.0};
  for (double c : {0.5, 2.0, 4.0}) {
    const auto a = compose_intensity(tilde, GainModel(1.0), ch);
    const auto b = compose_intensity(tilde, GainModel(c), ch);
    for (std::size_t i = 0; i < tilde.size(); ++i) EXPECT_EQ(b[i] - ch.lambda_bg, c * (a[i] - ch.lambda_bg));
  }
}

TEST(ComposeIntensity, RejectsBadInput) {
  ChannelParams ch;
  EXPECT_THROW(GainModel(0.0), ContractError);
  EXPECT_THROW(GainModel(-1.0), ContractError);
  const std::vector<double> tilde{-1.0};
  EXPECT_THROW(compose_intensity(tilde, GainModel(1.0), ch), DomainError);
}

TEST(ChannelParams, DefaultsAndValidation) {
  ChannelParams ch;
  EXPECT_NEAR(ch.g0, 4.0 / 3.0 * M_PI * 125e-18, 1e-30);
  EXPECT_EQ(ch.lambda_bg, 2.0);
  EXPECT_EQ(ch.Dm, 1e-10);
  EXPECT_NO_THROW(ch.validate());
  ch.M = 0;
  EXPECT_THROW(ch.validate(), ContractError);
}
