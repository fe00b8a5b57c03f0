#pragma once

#include <cmath>
#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mcdisp/error.hpp"
#include "mcdisp/physics.hpp"
#include "mcdisp/rng.hpp"

namespace mcdisp {

/// How the transmitter state evolves across symbol boundaries.
enum class Anchoring {
  Continuous,  // position and orientation carry over; only (v, Dr) switch
  PerSymbol,   // every symbol restarts at x0 with a fresh uniform orientation
};

struct MobilityParams {
  double v0 = 0.0;      // m/s
  double v1 = 30e-6;    // m/s
  double Dr0 = 8.0;     // 1/s
  double Dr1 = 0.8;     // 1/s
  double Dt = 2e-13;    // m^2/s
  double dt_traj = 1e-3;  // s
  Vec3 x0{10e-6, 0.0, 0.0};
  Vec3 xR{0.0, 0.0, 0.0};
  Anchoring anchoring = Anchoring::Continuous;

  double speed(int bit) const { return bit ? v1 : v0; }
  double rotational(int bit) const { return bit ? Dr1 : Dr0; }

  void validate(const ChannelParams& channel) const {
    auto bad = [](const std::string& what) { throw ContractError("MobilityParams: " + what); };
    if (!(v0 >= 0.0) || !(v1 >= 0.0)) bad("speeds must be >= 0");
    if (!(Dr0 > 0.0) || !(Dr1 > 0.0)) bad("rotational diffusion must be > 0");
    if (!(Dt >= 0.0)) bad("Dt must be >= 0");
    if (!(dt_traj > 0.0)) bad("dt_traj must be > 0");
    if (dt_traj > channel.Tsym / channel.M * (1.0 + 1e-12))
      bad("dt_traj must not exceed Tsym / M");
  }

  bool operator==(const MobilityParams&) const = default;
};

struct TrajectoryState {
  Vec3 position{};
  Vec3 orientation{1.0, 0.0, 0.0};
};

inline double norm(const Vec3& v) { return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]); }

inline double distance(const Vec3& a, const Vec3& b) {
  return norm(Vec3{a[0] - b[0], a[1] - b[1], a[2] - b[2]});
}

/// One Euler-Maruyama step of length `dt` with speed v and rotational
/// diffusion Dr. The orientation receives a tangential Gaussian kick with
/// per-axis variance 2 Dr dt (projected orthogonal to n) and is renormalized.
inline void step_abp(TrajectoryState& state, double v, double Dr, double Dt, double dt, Rng& rng) {
  const double sigma_x = std::sqrt(2.0 * Dt * dt);
  const Vec3 xi = rng.normal3();
  Vec3& x = state.position;
  Vec3& n = state.orientation;
  for (int i = 0; i < 3; ++i) x[i] += v * n[i] * dt + sigma_x * xi[i];

  const double sigma_n = std::sqrt(2.0 * Dr * dt);
  Vec3 z = rng.normal3();
  const double along = z[0] * n[0] + z[1] * n[1] + z[2] * n[2];
  for (int i = 0; i < 3; ++i) n[i] += sigma_n * (z[i] - along * n[i]);
  const double len = norm(n);
  for (int i = 0; i < 3; ++i) n[i] /= len;
}

inline void step_abp(TrajectoryState& state, int symbol, const MobilityParams& params, Rng& rng) {
  step_abp(state, params.speed(symbol), params.rotational(symbol), params.Dt, params.dt_traj, rng);
}

/// Integrate for `duration` seconds: whole steps of dt_traj, then one partial
/// step for any remainder. Without self-propulsion the position is pure
/// Brownian motion, which is sampled exactly in one draw; the orientation is
/// then only integrated when `track_orientation` is set (it matters again
/// only if a later symbol propels).
inline void advance(TrajectoryState& state, int symbol, double duration,
                    const MobilityParams& params, Rng& rng, bool track_orientation = true) {
  const double v = params.speed(symbol);
  const double Dr = params.rotational(symbol);
  const double dt = params.dt_traj;
  if (v == 0.0 && !track_orientation) {
    if (duration <= 0.0) return;
    const double sigma = std::sqrt(2.0 * params.Dt * duration);
    const Vec3 xi = rng.normal3();
    for (int i = 0; i < 3; ++i) state.position[i] += sigma * xi[i];
    return;
  }
  const auto whole = static_cast<long>(std::floor(duration / dt + 1e-9));
  for (long i = 0; i < whole; ++i) step_abp(state, v, Dr, params.Dt, dt, rng);
  const double rest = duration - static_cast<double>(whole) * dt;
  if (rest > 1e-12 * dt) step_abp(state, v, Dr, params.Dt, rest, rng);
}

/// Separations r_{k,m} = |X(t_k + t_m) - xR|, K rows of M samples.
struct SeparationSeries {
  int K = 0;
  int M = 0;
  std::vector<double> r;

  std::span<const double> row(int k) const {
    return {r.data() + static_cast<std::size_t>(k) * M, static_cast<std::size_t>(M)};
  }
  double at(int k, int m) const { return r[static_cast<std::size_t>(k) * M + m]; }

  bool operator==(const SeparationSeries&) const = default;
};

/// Simulate the transmitter over a packet and record separations at the
/// within-symbol sampling offsets. Deterministic in `seed`.
inline SeparationSeries simulate_packet_separations(std::span<const int> bits,
                                                    const MobilityParams& params,
                                                    const ChannelParams& channel,
                                                    std::uint64_t seed) {
  if (bits.empty()) throw ContractError("simulate_packet_separations: need K >= 1");
  channel.validate();
  params.validate(channel);
  Rng rng(seed);
  SeparationSeries out;
  out.K = static_cast<int>(bits.size());
  out.M = channel.M;
  out.r.reserve(static_cast<std::size_t>(out.K) * out.M);

  TrajectoryState state{params.x0, rng.unit_vector()};
  for (int k = 0; k < out.K; ++k) {
    if (params.anchoring == Anchoring::PerSymbol && k > 0)
      state = TrajectoryState{params.x0, rng.unit_vector()};
    // Orientation is redrawn at the next symbol start in per-symbol mode.
    const bool track = params.anchoring == Anchoring::Continuous && k + 1 < out.K;
    double t = 0.0;
    for (int m = 0; m < channel.M; ++m) {
      const double target = channel.offset(m);
      advance(state, bits[k], target - t, params, rng, track);
      t = target;
      out.r.push_back(distance(state.position, params.xR));
    }
    if (k + 1 < out.K) advance(state, bits[k], channel.Tsym - t, params, rng, track);
  }
  return out;
}

/// Long-time effective diffusivity Dt + v^2 / (6 Dr).
inline double effective_diffusivity(int symbol, const MobilityParams& params) {
  const double Dr = params.rotational(symbol);
  if (!(Dr > 0.0)) throw DomainError("effective_diffusivity: Dr must be > 0");
  const double v = params.speed(symbol);
  return params.Dt + v * v / (6.0 * Dr);
}

/// Diagnostic dump: k, m, t_seconds, r_meters (k and m one-based).
inline void write_separations_csv(std::ostream& os, const SeparationSeries& series,
                                  const ChannelParams& channel) {
  os.precision(17);
  os << "k,m,t_seconds,r_meters\n";
  for (int k = 0; k < series.K; ++k)
    for (int m = 0; m < series.M; ++m)
      os << k + 1 << ',' << m + 1 << ',' << k * channel.Tsym + channel.offset(m) << ','
         << series.at(k, m) << '\n';
}

}  // namespace mcdisp
