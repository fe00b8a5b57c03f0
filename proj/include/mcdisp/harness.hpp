#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <mutex>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "mcdisp/analysis.hpp"
#include "mcdisp/baselines.hpp"
#include "mcdisp/config.hpp"
#include "mcdisp/counting.hpp"
#include "mcdisp/detector.hpp"
#include "mcdisp/mobility.hpp"
#include "mcdisp/physics.hpp"
#include "mcdisp/profiling.hpp"
#include "mcdisp/rng.hpp"

namespace mcdisp {

/// One tidy metric row. Rates carry their binomial standard error; other
/// quantities carry se = 0 and the sample count they were computed from.
struct MetricRow {
  std::string arm;
  std::string axis;
  double axis_value = 0.0;
  std::string detector;
  std::string metric;
  double value = 0.0;
  long n = 0;
  double se = 0.0;
  std::string flag;
};

/// ROC curve point. `source` is "empirical" or "gaussian".
struct CurveRow {
  std::string detector;
  std::string source;
  double tau = 0.0;
  double pfa = 0.0;
  double pd = 0.0;
};

struct SweepResult {
  ExperimentConfig config;
  std::vector<MetricRow> rows;
  std::vector<CurveRow> curves;

  const MetricRow* find(std::string_view arm, double axis_value, std::string_view detector,
                        std::string_view metric) const {
    for (const auto& r : rows)
      if (r.arm == arm && r.axis_value == axis_value && r.detector == detector && r.metric == metric) return &r;
    return nullptr;
  }

  /// Rows of one (arm, detector, metric) in sweep order.
  std::vector<MetricRow> series(std::string_view arm, std::string_view detector, std::string_view metric) const {
    std::vector<MetricRow> out;
    for (const auto& r : rows)
      if (r.arm == arm && r.detector == detector && r.metric == metric) out.push_back(r);
    return out;
  }
};

inline double binomial_se(double p, long n) {
  return n > 0 ? std::sqrt(std::max(0.0, p * (1.0 - p)) / static_cast<double>(n)) : 0.0;
}

/// Header comment lines carry the full config; then the tidy table.
inline void write_sweep_csv(std::ostream& os, const SweepResult& r) {
  os << "# " << experiment_name(r.config.experiment) << " sweep\n" << serialize_config(r.config, "# ");
  os << "arm,axis,axis_value,detector,metric,value,n,se,flag\n";
  for (const auto& m : r.rows)
    os << m.arm << ',' << m.axis << ',' << detail::fmt17(m.axis_value) << ',' << m.detector << ',' << m.metric
       << ',' << detail::fmt17(m.value) << ',' << m.n << ',' << detail::fmt17(m.se) << ',' << m.flag << '\n';
}

inline void write_curves_csv(std::ostream& os, const SweepResult& r) {
  os << "# " << experiment_name(r.config.experiment) << " curves\n" << serialize_config(r.config, "# ");
  os << "detector,source,tau,pfa,pd\n";
  for (const auto& c : r.curves)
    os << c.detector << ',' << c.source << ',' << detail::fmt17(c.tau) << ',' << detail::fmt17(c.pfa) << ','
       << detail::fmt17(c.pd) << '\n';
}

namespace detail {

/// Run fn(i) for i in [0, n) on up to `threads` workers; results land at
/// their index so the output does not depend on scheduling.
template <typename R, typename F>
std::vector<R> parallel_map(int n, int threads, F&& fn) {
  std::vector<std::optional<R>> slots(static_cast<std::size_t>(n));
  const int workers = std::clamp(threads, 1, std::max(1, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) slots[i].emplace(fn(i));
  } else {
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (int i = next++; i < n; i = next++) {
          try {
            slots[i].emplace(fn(i));
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!error) error = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
  }
  std::vector<R> out;
  out.reserve(slots.size());
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

inline int thread_count(const ExperimentConfig& cfg) {
  if (cfg.run.threads > 0) return cfg.run.threads;
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

inline std::vector<int> packet_bits(std::uint64_t seed, int K) {
  Rng rng(derive_seed(seed, "bits"));
  std::vector<int> b(K);
  for (auto& x : b) x = rng.bit() ? 1 : 0;
  return b;
}

inline double draw_psi(const RunSection& run, std::uint64_t seed) {
  if (run.psi_distribution == "fixed") return run.psi;
  Rng rng(derive_seed(seed, "psi"));
  const double lo = std::log(run.psi_min), hi = std::log(run.psi_max);
  return std::exp(lo + (hi - lo) * rng.uniform());
}

/// A generated packet with every symbol evaluated through the open-gate
/// profile fit (gating is applied later, once the gate is calibrated).
struct EvaluatedPacket {
  PacketRecord packet;
  std::vector<SymbolEvaluation> eval;
};

/// Packets `first .. first+count-1` of the stream; packet p uses seed
/// derive_seed(stream, "packet", p). A fixed `psi` overrides the config's
/// gain distribution.
inline std::vector<PacketRecord> make_packets(const ExperimentConfig& cfg, const ChannelParams& ch,
                                              const MobilityParams& mob, std::uint64_t stream, int first, int count,
                                              std::optional<double> psi = std::nullopt) {
  return parallel_map<PacketRecord>(count, thread_count(cfg), [&](int i) {
    const std::uint64_t seed = derive_seed(stream, "packet", static_cast<std::uint64_t>(first + i));
    const auto bits = packet_bits(seed, cfg.run.K);
    const double g = psi ? *psi : draw_psi(cfg.run, seed);
    return generate_packet(bits, g, ch, mob, seed, PacketOptions{cfg.run.random_warmup});
  });
}

inline std::vector<EvaluatedPacket> evaluate_packets(const ExperimentConfig& cfg, std::vector<PacketRecord> packets,
                                                     const Template& tmpl) {
  const auto gate = open_gate();
  auto evals = parallel_map<std::vector<SymbolEvaluation>>(static_cast<int>(packets.size()), thread_count(cfg),
                                                           [&](int i) {
                                                             std::vector<SymbolEvaluation> ev;
                                                             for (const auto& f : packets[i].frames)
                                                               ev.push_back(evaluate_symbol(
                                                                   std::span<const Count>(f.counts), tmpl, gate));
                                                             return ev;
                                                           });
  std::vector<EvaluatedPacket> out(packets.size());
  for (std::size_t i = 0; i < packets.size(); ++i) out[i] = {std::move(packets[i]), std::move(evals[i])};
  return out;
}

inline Template template_from_packet(const PacketRecord& pk, const DetectorSection& d) {
  std::vector<std::vector<Count>> frames;
  for (const auto& f : pk.frames) frames.push_back(f.counts);
  return learn_template(frames, d.alpha, d.beta);
}

inline GateConfig gate_from(const std::vector<EvaluatedPacket>& cal, const DetectorSection& d) {
  if (d.alpha_gate == 0.0) return open_gate();
  std::vector<double> ybar;
  for (const auto& ep : cal)
    for (std::size_t k = 0; k < ep.eval.size(); ++k)
      if (ep.packet.bits[k] == 0) ybar.push_back(ep.eval[k].ybar);
  return calibrate_gate_from_means(ybar, d.alpha_gate);
}

/// Labeled statistics of symbols that reach each detector's threshold.
struct LabeledStats {
  std::array<std::vector<double>, 2> t;     // gated and converged T
  std::array<std::vector<double>, 2> ybar;  // gated windowed means
  std::array<std::size_t, 2> n{0, 0};       // all symbols
  std::array<std::vector<std::vector<double>>, 2> psi;
};

inline LabeledStats collect(const std::vector<EvaluatedPacket>& packets, const GateConfig& gate, const Template& tmpl,
                            bool with_psi = false) {
  LabeledStats s;
  for (const auto& ep : packets)
    for (std::size_t k = 0; k < ep.eval.size(); ++k) {
      const int b = ep.packet.bits[k];
      const auto& ev = ep.eval[k];
      ++s.n[b];
      if (!gate.passes(ev.ybar)) continue;
      s.ybar[b].push_back(ev.ybar);
      if (!ev.converged) continue;
      s.t[b].push_back(ev.statistic);
      if (with_psi)
        s.psi[b].push_back(psi_sequence(std::span<const Count>(ep.packet.frames[k].counts), ev.fit, tmpl));
    }
  return s;
}

inline MeanThreshold as_mean_threshold(const DispersionThreshold& t) { return {t.tau_T, t.pfa_target, t.kappa}; }

/// Verdict for an open-gate evaluation under a calibrated gate.
inline DetectorVerdict regate(const SymbolEvaluation& e, const GateConfig& gate, const DispersionThreshold& thr) {
  DetectorVerdict v;
  v.gated = gate.passes(e.ybar);
  if (!v.gated) return v;
  if (!e.converged) {
    v.rule = Rule::FitFailed;
    return v;
  }
  v.statistic = e.statistic;
  v.decision = thr.alarm(e.statistic) ? 1 : 0;
  v.rule = v.decision ? Rule::Alarm : Rule::NoAlarm;
  return v;
}

/// Everything a BER arm needs from its pilot packets.
struct BerCalibration {
  Template tmpl;
  GateConfig gate;
  DispersionThreshold tdelta;
  MeanThreshold mean;
};

inline BerCalibration ber_calibration(const ExperimentConfig& cfg, const ChannelParams& ch, const MobilityParams& mob,
                                      std::uint64_t stream, std::vector<EvaluatedPacket>* keep = nullptr) {
  auto pilots = make_packets(cfg, ch, mob, stream, 0, cfg.run.calibration_packets);
  BerCalibration c;
  c.tmpl = template_from_packet(pilots.front(), cfg.detector);
  auto cal = evaluate_packets(cfg, std::move(pilots), c.tmpl);
  c.gate = gate_from(cal, cfg.detector);
  const auto s = collect(cal, c.gate, c.tmpl);
  c.tdelta = min_error_threshold(s.t[0], s.t[1], s.n[0], s.n[1]);
  c.mean = as_mean_threshold(min_error_threshold(s.ybar[0], s.ybar[1], s.n[0], s.n[1]));
  if (keep) *keep = std::move(cal);
  return c;
}

struct ErrorCount {
  long errors = 0;
  long n = 0;
  void add(int decision, int truth) {
    errors += decision != truth;
    ++n;
  }
  double rate() const { return n ? static_cast<double>(errors) / static_cast<double>(n) : 0.0; }
};

inline MetricRow rate_row(std::string arm, std::string axis, double x, std::string det, std::string metric,
                          const ErrorCount& c, std::string flag = {}) {
  return {std::move(arm), std::move(axis), x, std::move(det), std::move(metric), c.rate(), c.n,
          binomial_se(c.rate(), c.n), std::move(flag)};
}

inline MetricRow value_row(std::string arm, std::string axis, double x, std::string det, std::string metric,
                           double v, long n, std::string flag = {}) {
  return {std::move(arm), std::move(axis), x, std::move(det), std::move(metric), v, n, 0.0, std::move(flag)};
}

inline GlrtConfig glrt_config(const ExperimentConfig& cfg) {
  GlrtConfig g;
  g.restarts = cfg.baseline.glrt_restarts;
  g.max_evaluations = cfg.baseline.glrt_max_evals;
  g.nominal_background = cfg.channel.lambda_bg;
  return g;
}

inline PathLibrary path_library(const ExperimentConfig& cfg, const ChannelParams& ch, const MobilityParams& mob,
                                const Template& tmpl) {
  return PathLibrary(ch, mob, tmpl, {cfg.baseline.n_paths, cfg.baseline.common_seed});
}

/// GLRT decisions for symbol k: without cancellation (past assumed silent)
/// and with past bits from pass-1 GLRT decisions or, under genie_isi, the
/// true bits.
struct GlrtPair {
  DetectorVerdict plain;
  DetectorVerdict dfe;
};

inline GlrtPair glrt_with_feedback(const PacketRecord& pk, int k, const PathLibrary& lib, const GateConfig& gate,
                                   const ExperimentConfig& cfg) {
  const int L = lib.channel().L;
  const auto gc = glrt_config(cfg);
  // Without feedback the past is taken as all-zero bits.
  const std::vector<int> nominal(std::max(0, L - 1), 0);
  auto run = [&](int j, std::span<const int> past) {
    return glrt(std::span<const Count>(pk.frames[j].counts), past, lib, gate, gc);
  };
  GlrtPair out;
  out.plain = run(k, nominal);
  if (L <= 1) {
    out.dfe = out.plain;
    return out;
  }
  std::vector<int> past(L - 1, kSilent);
  for (int l = 1; l < L; ++l) {
    if (k - l < 0) continue;
    past[l - 1] = cfg.baseline.genie_isi ? pk.bits[k - l] : run(k - l, nominal).decision;
  }
  out.dfe = run(k, past);
  return out;
}

inline DetectorVerdict oracle_for(const PacketRecord& pk, int k, const PathLibrary& lib, const GateConfig& gate) {
  NuisanceVector truth{pk.psi, pk.channel.lambda_bg, past_from(pk.bits, k, pk.channel.L)};
  return oracle_lrt(std::span<const Count>(pk.frames[k].counts), truth, lib, gate);
}

/// Symbols in packet order, at most `limit` of them, optionally restricted
/// to one hypothesis.
inline std::vector<std::pair<int, int>> first_symbols(const std::vector<EvaluatedPacket>& packets, int limit,
                                                      int only_bit = -1) {
  std::vector<std::pair<int, int>> out;
  for (int p = 0; p < static_cast<int>(packets.size()) && static_cast<int>(out.size()) < limit; ++p)
    for (int k = 0; k < packets[p].packet.K() && static_cast<int>(out.size()) < limit; ++k)
      if (only_bit < 0 || packets[p].packet.bits[k] == only_bit) out.emplace_back(p, k);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Gain stability

/// Thresholds frozen at psi = 1, then the gate-integrated H0 false-alarm
/// rate at every gain on the grid. All gain points reuse the same packet
/// seeds (common random numbers across the grid).
inline SweepResult run_gain_stability(const ExperimentConfig& cfg) {
  using namespace detail;
  cfg.validate();
  SweepResult res{cfg, {}, {}};
  const auto& ch = cfg.channel;
  const auto& mob = cfg.mobility;
  const std::uint64_t master = cfg.run.master_seed;

  auto pilots = make_packets(cfg, ch, mob, derive_seed(master, "gain/cal"), 0, cfg.run.calibration_packets, 1.0);
  const Template tmpl = template_from_packet(pilots.front(), cfg.detector);
  const auto cal = evaluate_packets(cfg, std::move(pilots), tmpl);
  const GateConfig gate = gate_from(cal, cfg.detector);
  const auto s = collect(cal, gate, tmpl);
  const ThresholdOptions topt{cfg.detector.min_tail_count};
  const auto thr_t = calibrate_threshold(s.t[0], cfg.detector.pfa_target, s.t[1], topt);
  const auto thr_y = calibrate_mean_threshold(s.ybar[0], cfg.detector.pfa_target, topt);
  res.rows.push_back(value_row("calibration", "psi", 1.0, "tdelta", "tau", thr_t.tau_T, static_cast<long>(s.t[0].size())));
  res.rows.push_back(value_row("calibration", "psi", 1.0, "mean", "tau", thr_y.tau, static_cast<long>(s.ybar[0].size())));
  res.rows.push_back(value_row("calibration", "psi", 1.0, "gate", "tau_Y", gate.tau_Y, static_cast<long>(s.n[0])));

  const int target = cfg.sweep.gain_h0_symbols;
  const int per_packet = std::max(1, cfg.run.K / 2);
  const int n_packets = (target + per_packet - 1) / per_packet + 8;
  const std::uint64_t eval_stream = derive_seed(master, "gain/eval");
  std::optional<PathLibrary> lib;
  if (cfg.wants("glrt")) lib.emplace(path_library(cfg, ch, mob, tmpl));

  for (double psi : cfg.sweep.gain_grid) {
    auto packets = evaluate_packets(cfg, make_packets(cfg, ch, mob, eval_stream, 0, n_packets, psi), tmpl);
    // Extend until the H0 budget is met.
    auto h0_total = [&] {
      long c = 0;
      for (const auto& ep : packets)
        for (int b : ep.packet.bits) c += b == 0;
      return c;
    };
    while (h0_total() < target) {
      auto more = evaluate_packets(
          cfg, make_packets(cfg, ch, mob, eval_stream, static_cast<int>(packets.size()), 8, psi), tmpl);
      for (auto& m : more) packets.push_back(std::move(m));
    }
    ErrorCount fa_t, fa_y, gate_pass, fit_fail;
    int used = 0;
    for (const auto& ep : packets)
      for (int k = 0; k < ep.packet.K() && used < target; ++k) {
        if (ep.packet.bits[k] != 0) continue;
        ++used;
        const auto& ev = ep.eval[k];
        const bool pass = gate.passes(ev.ybar);
        gate_pass.add(pass ? 1 : 0, 0);
        fit_fail.add(pass && !ev.converged ? 1 : 0, 0);
        fa_t.add(pass && ev.converged && thr_t.alarm(ev.statistic) ? 1 : 0, 0);
        fa_y.add(pass && thr_y.alarm(ev.ybar) ? 1 : 0, 0);
      }
    if (cfg.wants("tdelta")) res.rows.push_back(rate_row("h0", "psi", psi, "tdelta", "pfa", fa_t));
    if (cfg.wants("mean")) res.rows.push_back(rate_row("h0", "psi", psi, "mean", "pfa", fa_y));
    if (lib) {
      ErrorCount fa_g;
      for (auto [p, k] : first_symbols(packets, cfg.baseline.likelihood_symbols, 0))
        fa_g.add(glrt_with_feedback(packets[p].packet, k, *lib, gate, cfg).dfe.decision, 0);
      res.rows.push_back(rate_row("h0", "psi", psi, "glrt", "pfa", fa_g));
    }
    res.rows.push_back(rate_row("h0", "psi", psi, "gate", "pass_rate", gate_pass));
    res.rows.push_back(rate_row("h0", "psi", psi, "tdelta", "fit_failure_rate", fit_fail));
  }
  return res;
}

// ---------------------------------------------------------------------------
// ROC under random gain

namespace detail {

struct Scored {
  int bit = 0;
  bool reaches = false;  // passed the gate (and fit)
  double score = 0.0;    // oriented: larger means "1"
};

struct EmpiricalRoc {
  std::vector<CurveRow> points;  // full resolution
  double auc = 0.0;
  double pfa_max = 0.0, pd_max = 0.0;
  long n0 = 0, n1 = 0;
};

/// Sweep the threshold over every distinct score. The curve runs from
/// (0, 0) to the gate-limited corner; the AUC closes it with a straight
/// segment to (1, 1).
inline EmpiricalRoc empirical_roc(const std::string& name, std::vector<Scored> s, int kappa) {
  EmpiricalRoc r;
  for (const auto& x : s) (x.bit ? r.n1 : r.n0)++;
  if (r.n0 == 0 || r.n1 == 0) throw CalibrationError("empirical_roc: need both hypotheses");
  std::erase_if(s, [](const Scored& x) { return !x.reaches; });
  std::sort(s.begin(), s.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });
  double a0 = 0, a1 = 0, prev_pfa = 0, prev_pd = 0;
  r.points.push_back({name, "empirical", HUGE_VAL * kappa, 0.0, 0.0});
  for (std::size_t i = 0; i < s.size(); ++i) {
    (s[i].bit ? a1 : a0) += 1.0;
    if (i + 1 < s.size() && s[i + 1].score == s[i].score) continue;
    const double pfa = a0 / r.n0, pd = a1 / r.n1;
    r.auc += 0.5 * (pfa - prev_pfa) * (pd + prev_pd);
    prev_pfa = pfa;
    prev_pd = pd;
    r.points.push_back({name, "empirical", kappa * s[i].score, pfa, pd});
  }
  r.auc += 0.5 * (1.0 - prev_pfa) * (1.0 + prev_pd);
  r.pfa_max = prev_pfa;
  r.pd_max = prev_pd;
  return r;
}

/// P_D at a false-alarm level by linear interpolation along the curve.
inline double pd_at(const EmpiricalRoc& r, double pfa) {
  const auto& p = r.points;
  for (std::size_t i = 1; i < p.size(); ++i)
    if (p[i].pfa >= pfa) {
      const double w = p[i].pfa > p[i - 1].pfa ? (pfa - p[i - 1].pfa) / (p[i].pfa - p[i - 1].pfa) : 1.0;
      return p[i - 1].pd + w * (p[i].pd - p[i - 1].pd);
    }
  // Beyond the gate-limited corner: randomized extension to (1, 1).
  const double w = (pfa - r.pfa_max) / (1.0 - r.pfa_max);
  return r.pd_max + w * (1.0 - r.pd_max);
}

inline std::vector<CurveRow> decimate(const std::vector<CurveRow>& p, std::size_t max_points) {
  if (p.size() <= max_points) return p;
  std::vector<CurveRow> out;
  for (std::size_t i = 0; i < max_points; ++i) out.push_back(p[i * (p.size() - 1) / (max_points - 1)]);
  return out;
}

}  // namespace detail

/// Empirical ROC per detector with the gain drawn per packet, plus the
/// Gaussian working-model prediction under the same gate.
inline SweepResult run_roc(const ExperimentConfig& cfg) {
  using namespace detail;
  cfg.validate();
  SweepResult res{cfg, {}, {}};
  const auto& ch = cfg.channel;
  const auto& mob = cfg.mobility;
  const std::uint64_t master = cfg.run.master_seed;
  constexpr std::size_t kCurvePoints = 400;

  auto pilots = make_packets(cfg, ch, mob, derive_seed(master, "roc/cal"), 0, cfg.run.calibration_packets);
  const Template tmpl = template_from_packet(pilots.front(), cfg.detector);
  const auto cal = evaluate_packets(cfg, std::move(pilots), tmpl);
  const GateConfig gate = gate_from(cal, cfg.detector);
  const auto cs = collect(cal, gate, tmpl, true);
  const int kappa_t = orientation(cs.t[0], cs.t[1]);
  const int kappa_y = orientation(cs.ybar[0], cs.ybar[1]);

  const auto ev = evaluate_packets(cfg, make_packets(cfg, ch, mob, derive_seed(master, "roc/eval"), 0, cfg.run.n_packets), tmpl);

  std::vector<Scored> st, sy, su;
  for (const auto& ep : ev)
    for (int k = 0; k < ep.packet.K(); ++k) {
      const auto& e = ep.eval[k];
      const int b = ep.packet.bits[k];
      const bool pass = gate.passes(e.ybar);
      st.push_back({b, pass && e.converged, pass && e.converged ? kappa_t * e.statistic : 0.0});
      sy.push_back({b, pass, kappa_y * e.ybar});
      su.push_back({b, true, kappa_y * e.ybar});
    }

  auto emit = [&](const std::string& name, const EmpiricalRoc& r) {
    const auto pts = decimate(r.points, kCurvePoints);
    res.curves.insert(res.curves.end(), pts.begin(), pts.end());
    res.rows.push_back(value_row("roc", "none", 0.0, name, "auc", r.auc, r.n0 + r.n1));
    const double pd = pd_at(r, 0.1);
    res.rows.push_back({"roc", "none", 0.0, name, "pd_at_pfa_0.1", pd, r.n1, binomial_se(pd, r.n1), {}});
    res.rows.push_back(value_row("roc", "none", 0.0, name, "pfa_max", r.pfa_max, r.n0));
    res.rows.push_back(value_row("roc", "none", 0.0, name, "pd_max", r.pd_max, r.n1));
  };

  const auto roc_t = empirical_roc("tdelta", st, kappa_t);
  if (cfg.wants("tdelta")) emit("tdelta", roc_t);
  if (cfg.wants("mean")) {
    emit("mean", empirical_roc("mean", sy, kappa_y));
    emit("mean_ungated", empirical_roc("mean_ungated", su, kappa_y));
  }

  if (cfg.wants("glrt") || cfg.wants("oracle")) {
    const auto lib = path_library(cfg, ch, mob, tmpl);
    const auto subset = first_symbols(ev, cfg.baseline.likelihood_symbols);
    std::vector<Scored> sg, so, st_sub, su_sub;
    const std::vector<int> silent(std::max(0, ch.L - 1), 0);
    for (auto [p, k] : subset) {
      const auto& pk = ev[p].packet;
      const int b = pk.bits[k];
      const std::size_t flat = static_cast<std::size_t>(p) * cfg.run.K + k;
      st_sub.push_back(st[flat]);
      su_sub.push_back(su[flat]);
      if (cfg.wants("glrt")) {
        const auto v = glrt_with_feedback(pk, k, lib, gate, cfg).dfe;
        sg.push_back({b, v.statistic.has_value(), v.statistic.value_or(0.0)});
      }
      if (cfg.wants("oracle")) {
        const auto v = oracle_for(pk, k, lib, gate);
        so.push_back({b, v.statistic.has_value(), v.statistic.value_or(0.0)});
      }
    }
    if (cfg.wants("glrt")) emit("glrt", empirical_roc("glrt", sg, +1));
    if (cfg.wants("oracle")) emit("oracle", empirical_roc("oracle", so, +1));
    emit("tdelta_subset", empirical_roc("tdelta_subset", st_sub, kappa_t));
    emit("mean_ungated_subset", empirical_roc("mean_ungated_subset", su_sub, kappa_y));
  }

  // Gaussian prediction with the calibration gate-pass rates.
  const auto g = fit_gaussian_model(cs.t[0], cs.t[1], cs.psi[0], cs.psi[1], 2,
                                    LRVOptions{cfg.detector.L_max, 3, 2.0});
  const double g0 = static_cast<double>(cs.t[0].size()) / static_cast<double>(cs.n[0]);
  const double g1 = static_cast<double>(cs.t[1].size()) / static_cast<double>(cs.n[1]);
  for (int i = 1; i < 200; ++i) {
    const double pfa_c = i / 200.0;
    const auto pt = roc_at_pfa(g, pfa_c, g0, g1);
    res.curves.push_back({"tdelta", "gaussian", pt.tau, pt.pfa, pt.pd});
  }
  const long ncal = static_cast<long>(cs.n[0] + cs.n[1]);
  res.rows.push_back(value_row("gaussian", "none", 0.0, "tdelta", "mT0", g.mT0, ncal));
  res.rows.push_back(value_row("gaussian", "none", 0.0, "tdelta", "mT1", g.mT1, ncal));
  res.rows.push_back(value_row("gaussian", "none", 0.0, "tdelta", "vT0", g.vT0, ncal));
  res.rows.push_back(value_row("gaussian", "none", 0.0, "tdelta", "vT1", g.vT1, ncal));
  res.rows.push_back(value_row("gaussian", "none", 0.0, "tdelta", "gate_pass_h0", g0, static_cast<long>(cs.n[0])));
  res.rows.push_back(value_row("gaussian", "none", 0.0, "tdelta", "gate_pass_h1", g1, static_cast<long>(cs.n[1])));
  double pd_pred = HUGE_VAL;
  if (0.1 < g0) pd_pred = roc_at_pfa(g, 0.1 / g0, g0, g1).pd;
  res.rows.push_back(value_row("gaussian", "none", 0.0, "tdelta", "pd_at_pfa_0.1", pd_pred, ncal,
                               std::isfinite(pd_pred) ? "" : "pfa_beyond_gate"));
  const auto sep = separability(g);
  res.rows.push_back(value_row("gaussian", "none", 0.0, "tdelta", "D_B", sep.D_B, ncal));
  res.rows.push_back(value_row("gaussian", "none", 0.0, "tdelta", "D_C", sep.D_C, ncal));
  res.rows.push_back(value_row("gaussian", "none", 0.0, "tdelta", "D_KL", sep.D_KL, ncal));
  return res;
}

// ---------------------------------------------------------------------------
// Mobility contrast

struct Neutralization {
  double A1 = 0.0;
  int iterations = 0;
  bool converged = false;
  double mean_ratio = 0.0;  // windowed H1 mean / H0 mean on the pilots
};

/// Rescale A1 until the windowed H1 and H0 pilot means agree within the
/// configured tolerance. Pilot seeds are fixed across iterations.
inline Neutralization neutralize_amplitude(const ExperimentConfig& cfg, ChannelParams ch, const MobilityParams& mob,
                                           std::uint64_t stream) {
  using namespace detail;
  Neutralization out;
  for (int it = 1; it <= cfg.sweep.neutral_max_iter; ++it) {
    const auto pilots = make_packets(cfg, ch, mob, stream, 0, cfg.run.calibration_packets);
    const Template tmpl = template_from_packet(pilots.front(), cfg.detector);
    double sum[2] = {0, 0};
    long n[2] = {0, 0};
    for (const auto& pk : pilots)
      for (const auto& f : pk.frames) {
        sum[f.bit()] += windowed_mean(std::span<const Count>(f.counts), tmpl);
        ++n[f.bit()];
      }
    if (!n[0] || !n[1]) throw CalibrationError("neutralize_amplitude: pilots lack one hypothesis");
    const double m0 = sum[0] / n[0], m1 = sum[1] / n[1];
    out = {ch.A1, it, std::abs(m1 / m0 - 1.0) <= cfg.sweep.neutral_tolerance, m1 / m0};
    if (out.converged) break;
    const double bg = ch.lambda_bg;
    if (!(m1 > bg && m0 > bg)) break;
    ch.A1 *= (m0 - bg) / (m1 - bg);
  }
  return out;
}

/// Both arms over the v1 grid: fixed release (A1 as configured, A0 = A1 in
/// the preset) and mean-neutralized (A1 recalibrated per point).
inline SweepResult run_mobility_contrast(const ExperimentConfig& cfg) {
  using namespace detail;
  cfg.validate();
  SweepResult res{cfg, {}, {}};
  const std::uint64_t master = cfg.run.master_seed;

  for (std::size_t i = 0; i < cfg.sweep.v1_grid.size(); ++i) {
    MobilityParams mob = cfg.mobility;
    mob.v1 = cfg.sweep.v1_grid[i];
    const double contrast = effective_diffusivity(1, mob) / effective_diffusivity(0, mob);
    for (std::string arm : {"fixed", "neutral"}) {
      ChannelParams ch = cfg.channel;
      std::string flag;
      if (arm == "neutral") {
        const auto nz = neutralize_amplitude(cfg, ch, mob, derive_seed(master, "mobility/neutral", i));
        ch.A1 = nz.A1;
        if (!nz.converged) flag = "neutralization_not_converged";
        res.rows.push_back(value_row(arm, "contrast", contrast, "pilot", "A1", nz.A1, nz.iterations, flag));
        res.rows.push_back(value_row(arm, "contrast", contrast, "pilot", "mean_ratio", nz.mean_ratio, nz.iterations, flag));
      }
      res.rows.push_back(value_row(arm, "contrast", contrast, "run", "v1", mob.v1, 0, flag));
      const auto cal = ber_calibration(cfg, ch, mob, derive_seed(master, "mobility/cal", i));
      const auto ev =
          evaluate_packets(cfg, make_packets(cfg, ch, mob, derive_seed(master, "mobility/eval"), 0, cfg.run.n_packets),
                           cal.tmpl);
      ErrorCount et, ey;
      for (const auto& ep : ev)
        for (int k = 0; k < ep.packet.K(); ++k) {
          const int b = ep.packet.bits[k];
          et.add(regate(ep.eval[k], cal.gate, cal.tdelta).decision, b);
          ey.add(cal.gate.passes(ep.eval[k].ybar) && cal.mean.alarm(ep.eval[k].ybar) ? 1 : 0, b);
        }
      if (cfg.wants("tdelta")) res.rows.push_back(rate_row(arm, "contrast", contrast, "tdelta", "ber", et, flag));
      if (cfg.wants("mean")) res.rows.push_back(rate_row(arm, "contrast", contrast, "mean", "ber", ey, flag));
      if (cfg.wants("glrt") || cfg.wants("oracle")) {
        const auto lib = path_library(cfg, ch, mob, cal.tmpl);
        ErrorCount eg, eo;
        for (auto [p, k] : first_symbols(ev, cfg.baseline.likelihood_symbols)) {
          const auto& pk = ev[p].packet;
          if (cfg.wants("glrt")) eg.add(glrt_with_feedback(pk, k, lib, cal.gate, cfg).dfe.decision, pk.bits[k]);
          if (cfg.wants("oracle")) eo.add(oracle_for(pk, k, lib, cal.gate).decision, pk.bits[k]);
        }
        if (cfg.wants("glrt")) res.rows.push_back(rate_row(arm, "contrast", contrast, "glrt", "ber", eg, flag));
        if (cfg.wants("oracle")) res.rows.push_back(rate_row(arm, "contrast", contrast, "oracle", "ber", eo, flag));
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Sampling dependence and ISI

/// Arm (a): vary M at fixed Tsym. Gate rejections and fit failures are
/// decided by a fair coin drawn from the packet's "coin" stream.
inline SweepResult run_sampling(const ExperimentConfig& cfg) {
  using namespace detail;
  cfg.validate();
  SweepResult res{cfg, {}, {}};
  const std::uint64_t master = cfg.run.master_seed;
  for (std::size_t i = 0; i < cfg.sweep.M_grid.size(); ++i) {
    ChannelParams ch = cfg.channel;
    ch.M = static_cast<int>(cfg.sweep.M_grid[i]);
    MobilityParams mob = cfg.mobility;
    const double dt = ch.Tsym / ch.M;
    mob.dt_traj = std::min(mob.dt_traj, dt);
    const double x = ch.M;

    std::vector<EvaluatedPacket> cal_packets;
    const auto cal = ber_calibration(cfg, ch, mob, derive_seed(master, "sampling/cal", i), &cal_packets);
    const auto cs = collect(cal_packets, cal.gate, cal.tmpl, true);
    std::vector<std::vector<double>> pooled = cs.psi[0];
    pooled.insert(pooled.end(), cs.psi[1].begin(), cs.psi[1].end());
    const auto diag = correlation_diagnostics(pooled, dt, LRVOptions{cfg.detector.L_max, 3, 2.0});
    const long npool = static_cast<long>(pooled.size());
    res.rows.push_back(value_row("sampling", "M", x, "psi", "dt", dt, npool));
    res.rows.push_back(value_row("sampling", "M", x, "psi", "tau_psi", diag.tau_psi, npool));
    res.rows.push_back(value_row("sampling", "M", x, "psi", "dt_over_tau", dt / diag.tau_psi, npool));
    res.rows.push_back(value_row("sampling", "M", x, "psi", "Omega", diag.lrv.Omega, npool));
    res.rows.push_back(value_row("sampling", "M", x, "psi", "mcorr_over_m", diag.ratio, npool));
    res.rows.push_back(value_row("sampling", "M", x, "psi", "M_eff", cal.tmpl.M_eff(), npool));

    const auto ev = evaluate_packets(
        cfg, make_packets(cfg, ch, mob, derive_seed(master, "sampling/eval", i), 0, cfg.run.n_packets), cal.tmpl);
    ErrorCount et, ey, gp;
    for (const auto& ep : ev) {
      Rng coin(derive_seed(ep.packet.seed, "coin"));
      for (int k = 0; k < ep.packet.K(); ++k) {
        const auto& e = ep.eval[k];
        const int b = ep.packet.bits[k];
        const bool pass = cal.gate.passes(e.ybar);
        gp.add(pass ? 1 : 0, 0);
        const int random_bit = coin.bit() ? 1 : 0;  // drawn for every symbol
        et.add(pass && e.converged ? (cal.tdelta.alarm(e.statistic) ? 1 : 0) : random_bit, b);
        ey.add(pass ? (cal.mean.alarm(e.ybar) ? 1 : 0) : random_bit, b);
      }
    }
    if (cfg.wants("tdelta")) res.rows.push_back(rate_row("sampling", "M", x, "tdelta", "ber", et));
    if (cfg.wants("mean")) res.rows.push_back(rate_row("sampling", "M", x, "mean", "ber", ey));
    res.rows.push_back(rate_row("sampling", "M", x, "gate", "pass_rate", gp));
  }
  return res;
}

/// Arm (b): vary the ISI memory L, each detector with and without decision
/// feedback. The ISI gain is fitted on H0 pilots; pass-2 thresholds are
/// calibrated on pilots whose past bits come from pass-1 decisions (or the
/// true bits under genie_isi), matching how pass 2 is run on test data.
/// All L share the same packet seeds.
inline SweepResult run_isi(const ExperimentConfig& cfg) {
  using namespace detail;
  cfg.validate();
  SweepResult res{cfg, {}, {}};
  const std::uint64_t master = cfg.run.master_seed;
  const double r_ref = cfg.baseline.r_ref;
  for (double Lv : cfg.sweep.L_grid) {
    ChannelParams ch = cfg.channel;
    ch.L = static_cast<int>(Lv);
    const auto& mob = cfg.mobility;
    const double x = ch.L;

    std::vector<EvaluatedPacket> cal_packets;
    const auto cal = ber_calibration(cfg, ch, mob, derive_seed(master, "isi/cal"), &cal_packets);

    auto pass1_t = [&](const EvaluatedPacket& ep, int k) { return regate(ep.eval[k], cal.gate, cal.tdelta).decision; };
    auto pass1_y = [&](const EvaluatedPacket& ep, int k) {
      return cal.gate.passes(ep.eval[k].ybar) && cal.mean.alarm(ep.eval[k].ybar) ? 1 : 0;
    };

    double gain = 1.0;
    DispersionThreshold thr_td = cal.tdelta;
    MeanThreshold thr_yd = cal.mean;
    if (ch.L > 1) {
      std::vector<PilotSymbol> pilots;
      for (const auto& ep : cal_packets)
        for (int k = 0; k < ep.packet.K(); ++k)
          pilots.push_back({std::span<const Count>(ep.packet.frames[k].counts), ep.packet.bits[k],
                            past_from(ep.packet.bits, k, ch.L)});
      gain = estimate_isi_gain(pilots, cal.tmpl, ch, r_ref);

      std::array<std::vector<double>, 2> td, yd;
      std::array<std::size_t, 2> n{0, 0};
      for (const auto& ep : cal_packets) {
        const int K = ep.packet.K();
        std::vector<int> dt(K), dy(K);
        for (int k = 0; k < K; ++k) {
          dt[k] = cfg.baseline.genie_isi ? ep.packet.bits[k] : pass1_t(ep, k);
          dy[k] = cfg.baseline.genie_isi ? ep.packet.bits[k] : pass1_y(ep, k);
        }
        for (int k = 0; k < K; ++k) {
          const auto y = std::span<const Count>(ep.packet.frames[k].counts);
          const int b = ep.packet.bits[k];
          ++n[b];
          const auto off_t = isi_prediction(past_from(dt, k, ch.L), ch, r_ref, gain);
          const auto e = evaluate_symbol(y, cal.tmpl, cal.gate, {}, std::span<const double>(off_t));
          if (e.gate_pass && e.converged) td[b].push_back(e.statistic);
          const auto off_y = isi_prediction(past_from(dy, k, ch.L), ch, r_ref, gain);
          const double ybar_d = windowed_mean(y, cal.tmpl, std::span<const double>(off_y));
          if (cal.gate.passes(ybar_d)) yd[b].push_back(ybar_d);
        }
      }
      thr_td = min_error_threshold(td[0], td[1], n[0], n[1]);
      thr_yd = as_mean_threshold(min_error_threshold(yd[0], yd[1], n[0], n[1]));
    }
    res.rows.push_back(value_row("isi", "L", x, "dfe", "isi_gain", gain, 0));

    const auto ev =
        evaluate_packets(cfg, make_packets(cfg, ch, mob, derive_seed(master, "isi/eval"), 0, cfg.run.n_packets), cal.tmpl);
    ErrorCount et, etd, ey, eyd;
    for (const auto& ep : ev) {
      const int K = ep.packet.K();
      const auto& pk = ep.packet;
      const std::span<const int> genie =
          cfg.baseline.genie_isi ? std::span<const int>(pk.bits) : std::span<const int>();
      auto counts = [&](int k) { return std::span<const Count>(pk.frames[k].counts); };
      const auto rt = dfe_wrap(
          K, ch.L,
          [&](int k) { return regate(ep.eval[k], cal.gate, cal.tdelta); },
          [&](int k, std::span<const int> past) {
            const auto off = isi_prediction(past, ch, r_ref, gain);
            return detect(counts(k), cal.tmpl, cal.gate, thr_td, {}, std::span<const double>(off));
          },
          genie);
      const auto ry = dfe_wrap(
          K, ch.L, [&](int k) { return mean_detector(counts(k), cal.tmpl, cal.gate, cal.mean); },
          [&](int k, std::span<const int> past) {
            const auto off = isi_prediction(past, ch, r_ref, gain);
            return mean_detector(counts(k), cal.tmpl, cal.gate, thr_yd, std::span<const double>(off));
          },
          genie);
      for (int k = 0; k < K; ++k) {
        const int b = pk.bits[k];
        et.add(rt.pass1[k].decision, b);
        etd.add(rt.pass2[k].decision, b);
        ey.add(ry.pass1[k].decision, b);
        eyd.add(ry.pass2[k].decision, b);
      }
    }
    if (cfg.wants("tdelta")) {
      res.rows.push_back(rate_row("isi", "L", x, "tdelta", "ber", et));
      res.rows.push_back(rate_row("isi", "L", x, "tdelta_dfe", "ber", etd));
    }
    if (cfg.wants("mean")) {
      res.rows.push_back(rate_row("isi", "L", x, "mean", "ber", ey));
      res.rows.push_back(rate_row("isi", "L", x, "mean_dfe", "ber", eyd));
    }
    if (cfg.wants("glrt") || cfg.wants("oracle")) {
      const auto lib = path_library(cfg, ch, mob, cal.tmpl);
      ErrorCount eg, egd, eo;
      for (auto [p, k] : first_symbols(ev, cfg.baseline.likelihood_symbols)) {
        const auto& pk = ev[p].packet;
        if (cfg.wants("glrt")) {
          const auto g = glrt_with_feedback(pk, k, lib, cal.gate, cfg);
          eg.add(g.plain.decision, pk.bits[k]);
          egd.add(g.dfe.decision, pk.bits[k]);
        }
        if (cfg.wants("oracle")) eo.add(oracle_for(pk, k, lib, cal.gate).decision, pk.bits[k]);
      }
      if (cfg.wants("glrt")) {
        res.rows.push_back(rate_row("isi", "L", x, "glrt", "ber", eg));
        res.rows.push_back(rate_row("isi", "L", x, "glrt_dfe", "ber", egd));
      }
      if (cfg.wants("oracle")) res.rows.push_back(rate_row("isi", "L", x, "oracle", "ber", eo));
    }
  }
  return res;
}

/// Both dependence arms: sampling under `sampling_cfg`, ISI under `isi_cfg`.
inline SweepResult run_correlation_isi(const ExperimentConfig& sampling_cfg, const ExperimentConfig& isi_cfg) {
  auto a = run_sampling(sampling_cfg);
  auto b = run_isi(isi_cfg);
  a.rows.insert(a.rows.end(), b.rows.begin(), b.rows.end());
  return a;
}

inline SweepResult run_sweep(const ExperimentConfig& cfg) {
  switch (cfg.experiment) {
    case Experiment::Gain: return run_gain_stability(cfg);
    case Experiment::Roc: return run_roc(cfg);
    case Experiment::Mobility: return run_mobility_contrast(cfg);
    case Experiment::Sampling: return run_sampling(cfg);
    case Experiment::Isi: return run_isi(cfg);
    case Experiment::Default: break;
  }
  throw ConfigError("run_sweep: config does not name an experiment");
}

}  // namespace mcdisp
