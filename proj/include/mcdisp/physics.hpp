#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mcdisp/error.hpp"

namespace mcdisp {

/// Context value for a symbol slot with no release (before the packet).
inline constexpr int kSilent = -1;

/// Table I receiver radius (m); g0 defaults to the sphere volume of this radius.
inline constexpr double kReceiverRadius = 5e-6;

inline constexpr double sphere_volume(double radius) {
  return 4.0 / 3.0 * std::numbers::pi * radius * radius * radius;
}

/// Channel and release parameters, all in SI units.
struct ChannelParams {
  double g0 = sphere_volume(kReceiverRadius);  // m^3
  double Dm = 1e-10;                           // m^2/s
  int L = 1;                                   // ISI memory (symbols)
  double Tsym = 2.0;                           // s
  int M = 40;                                  // samples per symbol
  double A0 = 1e4;                             // molecules released for s=0
  double A1 = 2e4;                             // molecules released for s=1
  double lambda_bg = 2.0;                      // counts/sample
  double r_min = 0.8e-6;                       // m

  /// Release amplitude; a negative symbol marks a silent (pre-packet) slot.
  double amplitude(int bit) const { return bit < 0 ? 0.0 : (bit ? A1 : A0); }

  /// Sampling offset t_m = (m - 1/2) Tsym / M for zero-based index m.
  double offset(int m) const { return (m + 0.5) * Tsym / M; }

  void validate() const {
    auto bad = [](const std::string& what) { throw ContractError("ChannelParams: " + what); };
    if (!(Dm > 0.0)) bad("Dm must be > 0");
    if (!(Tsym > 0.0)) bad("Tsym must be > 0");
    if (M < 1) bad("M must be >= 1");
    if (L < 1) bad("L must be >= 1");
    if (!(r_min > 0.0)) bad("r_min must be > 0");
    if (!(A0 >= 0.0) || !(A1 >= 0.0)) bad("amplitudes must be >= 0");
    if (!(lambda_bg >= 0.0)) bad("lambda_bg must be >= 0");
    if (!(g0 > 0.0)) bad("g0 must be > 0");
  }

  bool operator==(const ChannelParams&) const = default;
};

/// Packet-constant multiplicative geometry gain.
struct GainModel {
  double psi = 1.0;

  explicit GainModel(double value = 1.0) : psi(value) {
    if (!(psi > 0.0) || !std::isfinite(psi)) throw ContractError("GainModel: psi must be > 0");
  }
};

/// Free-space point-release diffusion response at distance r after time t,
/// scaled by the receiver volume gain. Zero for t <= 0.
inline double kernel(double r, double t, const ChannelParams& params) {
  if (!std::isfinite(r) || !std::isfinite(t))
    throw DomainError("kernel: non-finite input");
  if (t <= 0.0) return 0.0;
  const double s = 4.0 * params.Dm * t;
  return params.g0 * std::pow(std::numbers::pi * s, -1.5) * std::exp(-r * r / s);
}

/// Gain-normalized intensity for one symbol: sum over the last L releases of
/// A(s_{k-l}) h(r_{k,m}, l Tsym + t_m). `context[0]` is the current bit,
/// `context[l]` the bit l symbols earlier. Separations are floored at r_min.
inline std::vector<double> tap_superposition(std::span<const int> context,
                                             std::span<const double> separations,
                                             const ChannelParams& params) {
  if (context.size() != static_cast<std::size_t>(params.L))
    throw ContractError("tap_superposition: context length must equal L");
  if (separations.size() != static_cast<std::size_t>(params.M))
    throw ContractError("tap_superposition: separations length must equal M");
  std::vector<double> out(params.M, 0.0);
  for (int m = 0; m < params.M; ++m) {
    const double r = std::max(separations[m], params.r_min);
    double acc = 0.0;
    for (int l = 0; l < params.L; ++l) {
      const double amp = params.amplitude(context[l]);
      if (amp == 0.0) continue;
      acc += amp * kernel(r, l * params.Tsym + params.offset(m), params);
    }
    out[m] = acc;
  }
  return out;
}

/// Lambda = lambda_bg + psi * tilde. Background is not scaled.
inline std::vector<double> compose_intensity(std::span<const double> tilde, GainModel gain,
                                             const ChannelParams& params) {
  std::vector<double> out(tilde.size());
  for (std::size_t m = 0; m < tilde.size(); ++m) {
    if (!(tilde[m] >= 0.0)) throw DomainError("compose_intensity: negative signal intensity");
    out[m] = params.lambda_bg + gain.psi * tilde[m];
  }
  return out;
}

}  // namespace mcdisp
