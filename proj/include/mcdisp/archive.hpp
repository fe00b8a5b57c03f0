#pragma once

#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcdisp/baselines.hpp"
#include "mcdisp/config.hpp"
#include "mcdisp/counting.hpp"
#include "mcdisp/detector.hpp"
#include "mcdisp/profiling.hpp"

namespace mcdisp {

using json = nlohmann::json;

inline json to_json(const ChannelParams& c) {
  return {{"g0", c.g0}, {"Dm", c.Dm}, {"L", c.L}, {"Tsym", c.Tsym}, {"M", c.M},
          {"A0", c.A0}, {"A1", c.A1}, {"lambda_bg", c.lambda_bg}, {"r_min", c.r_min}};
}

inline json to_json(const MobilityParams& m) {
  return {{"v0", m.v0},
          {"v1", m.v1},
          {"Dr0", m.Dr0},
          {"Dr1", m.Dr1},
          {"Dt", m.Dt},
          {"dt_traj", m.dt_traj},
          {"x0", m.x0},
          {"xR", m.xR},
          {"anchoring", m.anchoring == Anchoring::Continuous ? "continuous" : "per_symbol"}};
}

inline ChannelParams channel_from_json(const json& j) {
  ChannelParams c;
  c.g0 = j.at("g0").get<double>();
  c.Dm = j.at("Dm").get<double>();
  c.L = j.at("L").get<int>();
  c.Tsym = j.at("Tsym").get<double>();
  c.M = j.at("M").get<int>();
  c.A0 = j.at("A0").get<double>();
  c.A1 = j.at("A1").get<double>();
  c.lambda_bg = j.at("lambda_bg").get<double>();
  c.r_min = j.at("r_min").get<double>();
  return c;
}

inline MobilityParams mobility_from_json(const json& j) {
  MobilityParams m;
  m.v0 = j.at("v0").get<double>();
  m.v1 = j.at("v1").get<double>();
  m.Dr0 = j.at("Dr0").get<double>();
  m.Dr1 = j.at("Dr1").get<double>();
  m.Dt = j.at("Dt").get<double>();
  m.dt_traj = j.at("dt_traj").get<double>();
  m.x0 = j.at("x0").get<Vec3>();
  m.xR = j.at("xR").get<Vec3>();
  m.anchoring = j.at("anchoring").get<std::string>() == "continuous" ? Anchoring::Continuous : Anchoring::PerSymbol;
  return m;
}

/// A packet as stored in the archive: observations and labels, no ground
/// truth intensities.
struct ArchivedPacket {
  int index = 0;
  std::uint64_t seed = 0;
  double psi = 1.0;
  std::vector<int> bits;
  std::vector<std::vector<Count>> counts;  // K rows of M
  ChannelParams channel;
  MobilityParams mobility;

  int K() const { return static_cast<int>(bits.size()); }

  bool operator==(const ArchivedPacket&) const = default;
};

inline ArchivedPacket archive_view(const PacketRecord& rec, int index) {
  ArchivedPacket a;
  a.index = index;
  a.seed = rec.seed;
  a.psi = rec.psi;
  a.bits = rec.bits;
  a.channel = rec.channel;
  a.mobility = rec.mobility;
  a.counts.reserve(rec.frames.size());
  for (const auto& f : rec.frames) a.counts.push_back(f.counts);
  return a;
}

inline json to_json(const ArchivedPacket& p) {
  return {{"packet", p.index},
          {"seed", p.seed},
          {"psi", p.psi},
          {"bits", p.bits},
          {"counts", p.counts},
          {"params", {{"channel", to_json(p.channel)}, {"mobility", to_json(p.mobility)}}}};
}

inline ArchivedPacket packet_from_json(const json& j) {
  ArchivedPacket p;
  p.index = j.at("packet").get<int>();
  p.seed = j.at("seed").get<std::uint64_t>();
  p.psi = j.at("psi").get<double>();
  p.bits = j.at("bits").get<std::vector<int>>();
  p.counts = j.at("counts").get<std::vector<std::vector<Count>>>();
  p.channel = channel_from_json(j.at("params").at("channel"));
  p.mobility = mobility_from_json(j.at("params").at("mobility"));
  if (p.counts.size() != p.bits.size()) throw ContractError("packet archive: counts rows differ from bits");
  for (const auto& row : p.counts)
    if (static_cast<int>(row.size()) != p.channel.M) throw ContractError("packet archive: row length differs from M");
  return p;
}

/// One JSON record per line.
inline void write_archive_line(std::ostream& os, const ArchivedPacket& p) { os << to_json(p).dump() << '\n'; }

inline std::vector<ArchivedPacket> read_archive(std::istream& in) {
  std::vector<ArchivedPacket> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(packet_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw ContractError("packet archive line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

/// Columns packet, k, m, Y with k and m one-based.
inline void write_counts_csv_header(std::ostream& os) { os << "packet,k,m,Y\n"; }

inline void write_counts_csv(std::ostream& os, const ArchivedPacket& p) {
  for (int k = 0; k < p.K(); ++k)
    for (std::size_t m = 0; m < p.counts[k].size(); ++m)
      os << p.index << ',' << k + 1 << ',' << m + 1 << ',' << p.counts[k][m] << '\n';
}

// ---------------------------------------------------------------------------
// Templates and calibration

/// {u, m1, m2, alpha, beta} with one-based inclusive window bounds.
inline json to_json(const Template& t) {
  return {{"u", t.u}, {"m1", t.m1()}, {"m2", t.m2()}, {"alpha", t.alpha}, {"beta", t.beta}};
}

inline Template template_from_json(const json& j) {
  Template t;
  t.u = j.at("u").get<std::vector<double>>();
  t.begin = j.at("m1").get<int>() - 1;
  t.end = j.at("m2").get<int>();
  t.alpha = j.at("alpha").get<double>();
  t.beta = j.at("beta").get<double>();
  if (t.begin < 0 || t.end > t.M() || t.end <= t.begin) throw ContractError("template JSON: window out of range");
  return t;
}

/// Everything `detect` needs besides the archive.
struct CalibrationBundle {
  Template tmpl;
  GateConfig gate;
  DispersionThreshold tdelta;
  MeanThreshold mean;
  double isi_gain = 1.0;
  double r_ref = 10e-6;
  int calibration_packets = 0;  // leading archive packets used here, skipped by detect

  bool operator==(const CalibrationBundle&) const = default;
};

inline json to_json(const CalibrationBundle& c, const ExperimentConfig& cfg) {
  return {{"template", to_json(c.tmpl)},
          {"gate", {{"tau_Y", c.gate.tau_Y}, {"alpha_gate", c.gate.alpha_gate}, {"open", c.gate.open}}},
          {"tdelta", {{"tau_T", c.tdelta.tau_T}, {"pfa_target", c.tdelta.pfa_target}, {"kappa", c.tdelta.kappa}}},
          {"mean", {{"tau", c.mean.tau}, {"pfa_target", c.mean.pfa_target}, {"kappa", c.mean.kappa}}},
          {"isi_gain", c.isi_gain},
          {"r_ref", c.r_ref},
          {"calibration_packets", c.calibration_packets},
          {"params_snapshot", serialize_config(cfg)}};
}

inline CalibrationBundle calibration_from_json(const json& j) {
  CalibrationBundle c;
  c.tmpl = template_from_json(j.at("template"));
  const auto& g = j.at("gate");
  c.gate = {g.at("tau_Y").get<double>(), g.at("alpha_gate").get<double>(), g.at("open").get<bool>()};
  const auto& t = j.at("tdelta");
  c.tdelta = {t.at("tau_T").get<double>(), t.at("pfa_target").get<double>(), t.at("kappa").get<int>()};
  const auto& m = j.at("mean");
  c.mean = {m.at("tau").get<double>(), m.at("pfa_target").get<double>(), m.at("kappa").get<int>()};
  c.isi_gain = j.at("isi_gain").get<double>();
  c.r_ref = j.at("r_ref").get<double>();
  c.calibration_packets = j.at("calibration_packets").get<int>();
  return c;
}

// ---------------------------------------------------------------------------
// Verdict stream

inline void write_verdict_header(std::ostream& os) { os << "detector,packet,k,truth_bit,decision,gated,statistic\n"; }

/// k is one-based; an empty statistic means the symbol never reached the
/// threshold (gate closed or fit failed).
inline void write_verdict(std::ostream& os, std::string_view detector, int packet, int k, int truth,
                          const DetectorVerdict& v) {
  os << detector << ',' << packet << ',' << k + 1 << ',' << truth << ',' << v.decision << ',' << (v.gated ? 1 : 0)
     << ',';
  if (v.statistic) os << detail::fmt17(*v.statistic);
  os << '\n';
}

}  // namespace mcdisp
