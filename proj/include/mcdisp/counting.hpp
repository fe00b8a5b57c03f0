#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "mcdisp/error.hpp"
#include "mcdisp/mobility.hpp"
#include "mcdisp/physics.hpp"
#include "mcdisp/rng.hpp"

namespace mcdisp {

/// One symbol's within-symbol counts plus the ground truth that produced them.
/// Detectors read `counts` only; the rest is for oracles and diagnostics.
struct SymbolFrame {
  int k = 0;
  std::vector<int> context;             // (s_k, s_{k-1}, ..., s_{k-L+1})
  std::vector<Count> counts;            // Y_{k,m}
  std::vector<double> latent_intensity;  // Lambda_{k,m}
  std::vector<double> separations;       // r_{k,m}

  int bit() const { return context.front(); }

  bool operator==(const SymbolFrame&) const = default;
};

struct PacketRecord {
  std::vector<SymbolFrame> frames;
  double psi = 1.0;
  std::vector<int> bits;
  std::uint64_t seed = 0;
  ChannelParams channel;
  MobilityParams mobility;

  int K() const { return static_cast<int>(bits.size()); }

  bool operator==(const PacketRecord&) const = default;
};

/// Independent Poisson draws given the intensity vector.
inline std::vector<Count> sample_counts(std::span<const double> intensity, Rng& rng) {
  std::vector<Count> out(intensity.size());
  for (std::size_t m = 0; m < intensity.size(); ++m) {
    if (!std::isfinite(intensity[m]) || intensity[m] < 0.0)
      throw DomainError("sample_counts: intensity must be finite and >= 0");
    out[m] = rng.poisson(intensity[m]);
  }
  return out;
}

struct PacketOptions {
  /// Pre-packet ISI context: silence (false) or random bits drawn from the
  /// packet seed (true).
  bool random_warmup = false;
};

/// ISI context for symbol k: (s_k, ..., s_{k-L+1}) with pre-packet symbols
/// taken from `warmup` (index 0 is the symbol just before the packet) and
/// silent beyond it.
inline std::vector<int> isi_context(std::span<const int> bits, int k, int L,
                                    std::span<const int> warmup = {}) {
  std::vector<int> ctx(L, 0);
  for (int l = 0; l < L; ++l) {
    const int j = k - l;
    if (j >= 0) {
      ctx[l] = bits[j];
    } else {
      const auto w = static_cast<std::size_t>(-j - 1);
      ctx[l] = w < warmup.size() ? warmup[w] : kSilent;
    }
  }
  return ctx;
}

/// Mobility -> tap superposition -> gain/background -> conditional Poisson.
inline PacketRecord generate_packet(std::span<const int> bits, double psi,
                                    const ChannelParams& channel, const MobilityParams& mobility,
                                    std::uint64_t seed, PacketOptions options = {}) {
  if (bits.empty()) throw ContractError("generate_packet: need at least one symbol");
  const GainModel gain(psi);
  channel.validate();
  mobility.validate(channel);

  PacketRecord rec;
  rec.psi = psi;
  rec.bits.assign(bits.begin(), bits.end());
  rec.seed = seed;
  rec.channel = channel;
  rec.mobility = mobility;

  const SeparationSeries sep =
      simulate_packet_separations(bits, mobility, channel, derive_seed(seed, "mobility"));
  Rng counts_rng(derive_seed(seed, "counts"));
  std::vector<int> warmup;
  if (options.random_warmup) {
    Rng warm(derive_seed(seed, "warmup"));
    for (int l = 1; l < channel.L; ++l) warmup.push_back(warm.bit() ? 1 : 0);
  }

  rec.frames.reserve(bits.size());
  for (int k = 0; k < static_cast<int>(bits.size()); ++k) {
    SymbolFrame f;
    f.k = k;
    f.context = isi_context(bits, k, channel.L, warmup);
    const auto row = sep.row(k);
    f.separations.assign(row.begin(), row.end());
    const auto tilde = tap_superposition(f.context, f.separations, channel);
    f.latent_intensity = compose_intensity(tilde, gain, channel);
    f.counts = sample_counts(f.latent_intensity, counts_rng);
    rec.frames.push_back(std::move(f));
  }
  return rec;
}

struct Decomposition {
  double mean_term = 0.0;    // sample mean of Y
  double excess_term = 0.0;  // sample Var(Y) - sample mean, estimates Var(Lambda)
  double variance = 0.0;     // sample Var(Y)
  std::size_t n = 0;
};

/// Split replicated counts into the Poisson mean and the excess (mixing)
/// variance.
template <typename T>
Decomposition overdispersion_decomposition(std::span<const T> samples) {
  if (samples.size() < 2) throw ContractError("overdispersion_decomposition: need >= 2 replicates");
  const double n = static_cast<double>(samples.size());
  double mean = 0.0;
  for (const auto& y : samples) mean += static_cast<double>(y);
  mean /= n;
  double ss = 0.0;
  for (const auto& y : samples) {
    const double d = static_cast<double>(y) - mean;
    ss += d * d;
  }
  const double var = ss / (n - 1.0);
  return {mean, var - mean, var, samples.size()};
}

}  // namespace mcdisp
