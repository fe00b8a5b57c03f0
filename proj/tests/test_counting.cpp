#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "mcdisp/counting.hpp"

using namespace mcdisp;

namespace {

struct Moments {
  double mean = 0.0, var = 0.0, m4 = 0.0;
};

template <typename T>
Moments moments(const std::vector<T>& x) {
  Moments m;
  const double n = static_cast<double>(x.size());
  for (auto v : x) m.mean += static_cast<double>(v);
  m.mean /= n;
  for (auto v : x) {
    const double d = static_cast<double>(v) - m.mean;
    m.var += d * d;
    m.m4 += d * d * d * d;
  }
  m.var /= n - 1.0;
  m.m4 /= n;
  return m;
}

}  // namespace

TEST(SampleCounts, ZeroIntensityGivesZero) {
  Rng rng(1);
  const std::vector<double> lam(1000, 0.0);
  for (auto y : sample_counts(lam, rng)) EXPECT_EQ(y, 0);
}

TEST(SampleCounts, NegativeIntensityThrows) {
  Rng rng(1);
  const std::vector<double> lam{1.0, -0.5};
  EXPECT_THROW(sample_counts(lam, rng), DomainError);
}

TEST(SampleCounts, PoissonMomentsBothSamplers) {
  for (double lambda : {3.0, 25.0}) {
    Rng rng(derive_seed(1, "poisson", static_cast<std::uint64_t>(lambda)));
    const std::vector<double> lam(1000000, lambda);
    const auto m = moments(sample_counts(lam, rng));
    EXPECT_NEAR(m.mean / lambda, 1.0, 0.01) << lambda;
    EXPECT_NEAR(m.var / lambda, 1.0, 0.01) << lambda;
  }
}

TEST(SampleCounts, GammaMixtureVariance) {
  Rng rng(derive_seed(1, "gamma-mix"));
  std::vector<Count> y(1000000);
  for (auto& v : y) v = rng.poisson(rng.gamma(4.0, 2.0));
  const auto m = moments(y);
  EXPECT_NEAR(m.var / 3.0, 1.0, 0.02);
}

TEST(Decomposition, LawOfTotalVariance) {
  Rng rng(derive_seed(2, "ltv"));
  const int n = 1000000;
  std::vector<double> lam(n);
  std::vector<Count> y(n);
  for (int i = 0; i < n; ++i) {
    lam[i] = rng.gamma(2.5, 0.5);
    y[i] = rng.poisson(lam[i]);
  }
  const auto my = moments(y);
  const auto ml = moments(lam);
  const double se = std::sqrt((my.m4 - my.var * my.var) / n + (ml.m4 - ml.var * ml.var) / n + my.var / n);
  EXPECT_LT(std::abs(my.var - ml.mean - ml.var), 4.0 * se);
}

TEST(Decomposition, DeterministicIntensityHasNoExcess) {
  Rng rng(4);
  std::vector<Count> y(200000);
  for (auto& v : y) v = rng.poisson(6.0);
  const auto d = overdispersion_decomposition(std::span<const Count>(y));
  // Var of (s^2 - ybar) for Poisson is about 2 lambda^2 / n.
  const double se = std::sqrt(2.0 * 36.0 / y.size());
  EXPECT_LT(std::abs(d.excess_term), 3.0 * se);
  EXPECT_EQ(d.n, y.size());
}

TEST(Decomposition, GammaExcessIsLatentVariance) {
  Rng rng(5);
  std::vector<Count> y(1000000);
  for (auto& v : y) v = rng.poisson(rng.gamma(4.0, 2.0));
  const auto d = overdispersion_decomposition(std::span<const Count>(y));
  EXPECT_NEAR(d.excess_term, 1.0, 0.02);
  EXPECT_NEAR(d.mean_term, 2.0, 0.01);
}

TEST(Decomposition, NeedsTwoSamples) {
  const std::vector<Count> y{3};
  EXPECT_THROW(overdispersion_decomposition(std::span<const Count>(y)), ContractError);
}

TEST(GeneratePacket, BackgroundOnlyWithoutRelease) {
  ChannelParams ch;
  ch.A0 = 0.0;
  MobilityParams mob;
  const std::vector<int> bits(64, 0);
  double s = 0.0;
  long n = 0;
  for (int p = 0; p < 20; ++p) {
    const auto rec = generate_packet(bits, 1.3, ch, mob, derive_seed(9, "bg", p));
    for (const auto& f : rec.frames)
      for (std::size_t m = 0; m < f.counts.size(); ++m) {
        EXPECT_EQ(f.latent_intensity[m], 2.0);
        s += static_cast<double>(f.counts[m]);
        ++n;
      }
  }
  EXPECT_NEAR(s / n, 2.0, 3.0 * std::sqrt(2.0 / n));
}

TEST(GeneratePacket, Deterministic) {
  ChannelParams ch;
  ch.L = 2;
  MobilityParams mob;
  const std::vector<int> bits{1, 0, 0, 1, 1};
  EXPECT_EQ(generate_packet(bits, 0.8, ch, mob, 77), generate_packet(bits, 0.8, ch, mob, 77));
  EXPECT_NE(generate_packet(bits, 0.8, ch, mob, 77), generate_packet(bits, 0.8, ch, mob, 78));
}

TEST(GeneratePacket, GroundTruthIsReproducible) {
  ChannelParams ch;
  ch.L = 3;
  MobilityParams mob;
  const std::vector<int> bits{1, 0, 1, 1, 0, 0, 1};
  const auto rec = generate_packet(bits, 1.4, ch, mob, 5);
  ASSERT_EQ(rec.frames.size(), bits.size());
  for (const auto& f : rec.frames) {
    EXPECT_EQ(f.bit(), bits[f.k]);
    const auto again = compose_intensity(tap_superposition(f.context, f.separations, ch), GainModel(1.4), ch);
    EXPECT_EQ(again, f.latent_intensity);
  }
}

TEST(GeneratePacket, PrePacketSlotsAreSilent) {
  ChannelParams ch;
  ch.L = 3;
  MobilityParams mob;
  const std::vector<int> bits{0, 1, 1};
  const auto rec = generate_packet(bits, 1.0, ch, mob, 6);
  const auto& first = rec.frames.front();
  EXPECT_EQ(first.context, (std::vector<int>{0, kSilent, kSilent}));
  ChannelParams one = ch;
  one.L = 1;
  const std::vector<int> ctx{0};
  EXPECT_EQ(compose_intensity(tap_superposition(ctx, first.separations, one), GainModel(1.0), one),
            first.latent_intensity);
}

TEST(GeneratePacket, RandomWarmupFillsContext) {
  ChannelParams ch;
  ch.L = 4;
  MobilityParams mob;
  const std::vector<int> bits{1, 1};
  const auto rec = generate_packet(bits, 1.0, ch, mob, 8, PacketOptions{true});
  for (const auto& f : rec.frames)
    for (int c : f.context) EXPECT_TRUE(c == 0 || c == 1);
}

TEST(GeneratePacket, RejectsEmptyAndBadGain) {
  ChannelParams ch;
  MobilityParams mob;
  const std::vector<int> none;
  EXPECT_THROW(generate_packet(none, 1.0, ch, mob, 1), ContractError);
  const std::vector<int> bits{1};
  EXPECT_THROW(generate_packet(bits, 0.0, ch, mob, 1), ContractError);
}

TEST(IsiContext, OrderAndPadding) {
  const std::vector<int> bits{1, 0, 1, 1};
  EXPECT_EQ(isi_context(bits, 3, 3), (std::vector<int>{1, 1, 0}));
  EXPECT_EQ(isi_context(bits, 0, 2), (std::vector<int>{1, kSilent}));
  const std::vector<int> warm{1, 0};
  EXPECT_EQ(isi_context(bits, 0, 4, warm), (std::vector<int>{1, 1, 0, kSilent}));
}
