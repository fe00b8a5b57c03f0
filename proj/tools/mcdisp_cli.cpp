// mcdisp command line: simulate, calibrate, detect, analyze, sweep, selftest.
//
// Exit status: 0 success, 1 usage or configuration error, 2 runtime error,
// 3 self-test failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mcdisp/archive.hpp"
#include "mcdisp/harness.hpp"
#include "mcdisp/selftest.hpp"

namespace fs = std::filesystem;
using namespace mcdisp;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "out";
  std::string detectors;
  bool genie_isi = false;
};

ExperimentConfig resolve_config(const Common& c, Experiment base) {
  ExperimentConfig cfg = preset(base);
  if (!c.config_path.empty()) {
    if (!fs::exists(c.config_path)) throw UsageError("config file not found: " + c.config_path);
    cfg = load_config(c.config_path, cfg);
  }
  if (base != Experiment::Default) cfg.experiment = base;
  if (c.seed) cfg.run.master_seed = *c.seed;
  if (!c.detectors.empty()) cfg.sweep.detectors = detail::parse_list(c.detectors);
  if (c.genie_isi) cfg.baseline.genie_isi = true;
  cfg.validate();
  return cfg;
}

std::ofstream open_out(const std::string& dir, const std::string& name) {
  fs::create_directories(dir);
  const auto path = fs::path(dir) / name;
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.precision(17);
  return os;
}

std::vector<ArchivedPacket> load_archive(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("archive not found: " + path);
  auto a = read_archive(in);
  if (a.empty()) throw std::runtime_error("archive is empty: " + path);
  return a;
}

CalibrationBundle load_calibration(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("calibration file not found: " + path);
  return calibration_from_json(json::parse(in));
}

/// Channel/mobility of the archive, detector settings of the config.
ExperimentConfig config_for_archive(const Common& c, const ArchivedPacket& first) {
  auto cfg = resolve_config(c, Experiment::Default);
  cfg.channel = first.channel;
  cfg.mobility = first.mobility;
  return cfg;
}

int cmd_simulate(const Common& c, int packets) {
  auto cfg = resolve_config(c, Experiment::Default);
  if (packets > 0) cfg.run.n_packets = packets;
  const auto recs = detail::make_packets(cfg, cfg.channel, cfg.mobility, derive_seed(cfg.run.master_seed, "simulate"),
                                         0, cfg.run.n_packets);
  auto jsonl = open_out(c.out_dir, "packets.jsonl");
  auto csv = open_out(c.out_dir, "counts.csv");
  csv << serialize_config(cfg, "# ");
  write_counts_csv_header(csv);
  for (int i = 0; i < static_cast<int>(recs.size()); ++i) {
    const auto a = archive_view(recs[i], i);
    write_archive_line(jsonl, a);
    write_counts_csv(csv, a);
  }
  std::cout << "wrote " << recs.size() << " packets to " << c.out_dir << "\n";
  return 0;
}

int cmd_calibrate(const Common& c, const std::string& archive_path, int cal_packets) {
  const auto arch = load_archive(archive_path);
  const auto cfg = config_for_archive(c, arch.front());
  const int n_cal = std::min<int>(cal_packets > 0 ? cal_packets : cfg.run.calibration_packets,
                                  static_cast<int>(arch.size()));
  CalibrationBundle b;
  b.calibration_packets = n_cal;
  b.r_ref = cfg.baseline.r_ref;
  b.tmpl = learn_template(arch.front().counts, cfg.detector.alpha, cfg.detector.beta);

  std::vector<double> ybar0;
  for (int p = 0; p < n_cal; ++p)
    for (int k = 0; k < arch[p].K(); ++k)
      if (arch[p].bits[k] == 0) ybar0.push_back(windowed_mean(std::span<const Count>(arch[p].counts[k]), b.tmpl));
  b.gate = cfg.detector.alpha_gate == 0.0 ? open_gate() : calibrate_gate_from_means(ybar0, cfg.detector.alpha_gate);

  std::array<std::vector<double>, 2> t, y;
  std::vector<PilotSymbol> pilots;
  for (int p = 0; p < n_cal; ++p)
    for (int k = 0; k < arch[p].K(); ++k) {
      const auto counts = std::span<const Count>(arch[p].counts[k]);
      const int s = arch[p].bits[k];
      pilots.push_back({counts, s, past_from(arch[p].bits, k, cfg.channel.L)});
      const auto ev = evaluate_symbol(counts, b.tmpl, b.gate);
      if (!ev.gate_pass) continue;
      y[s].push_back(ev.ybar);
      if (ev.converged) t[s].push_back(ev.statistic);
    }
  const ThresholdOptions topt{cfg.detector.min_tail_count};
  b.tdelta = calibrate_threshold(t[0], cfg.detector.pfa_target, t[1], topt);
  b.mean = calibrate_mean_threshold(y[0], cfg.detector.pfa_target, topt);
  if (cfg.channel.L > 1) b.isi_gain = estimate_isi_gain(pilots, b.tmpl, cfg.channel, b.r_ref);

  auto os = open_out(c.out_dir, "calibration.json");
  os << to_json(b, cfg).dump(2) << '\n';
  std::cout << "calibrated on " << n_cal << " packets: tau_T " << b.tdelta.tau_T << " kappa " << b.tdelta.kappa
            << " window [" << b.tmpl.m1() << ", " << b.tmpl.m2() << "]\n";
  return 0;
}

int cmd_detect(const Common& c, const std::string& archive_path, const std::string& cal_path) {
  const auto arch = load_archive(archive_path);
  const auto cfg = config_for_archive(c, arch.front());
  const auto b = load_calibration(cal_path);
  if (b.tmpl.M() != cfg.channel.M) throw std::runtime_error("calibration template length differs from archive M");
  std::optional<PathLibrary> lib;
  if (cfg.wants("glrt") || cfg.wants("oracle"))
    lib.emplace(cfg.channel, cfg.mobility, b.tmpl, MarginalLikelihoodConfig{cfg.baseline.n_paths, cfg.baseline.common_seed});
  const auto gc = detail::glrt_config(cfg);
  const int L = cfg.channel.L;

  auto os = open_out(c.out_dir, "verdicts.csv");
  os << serialize_config(cfg, "# ");
  write_verdict_header(os);
  for (std::size_t p = static_cast<std::size_t>(b.calibration_packets); p < arch.size(); ++p) {
    const auto& pk = arch[p];
    auto counts = [&](int k) { return std::span<const Count>(pk.counts[k]); };
    std::vector<DetectorVerdict> vt, vy, vg, vo;
    for (int k = 0; k < pk.K(); ++k) {
      if (cfg.wants("tdelta")) vt.push_back(detect(counts(k), b.tmpl, b.gate, b.tdelta));
      if (cfg.wants("mean")) vy.push_back(mean_detector(counts(k), b.tmpl, b.gate, b.mean));
    }
    if (cfg.wants("glrt")) {
      const std::vector<int> silent(std::max(0, L - 1), 0);
      const auto r = dfe_wrap(
          pk.K(), L, [&](int k) { return glrt(counts(k), std::span<const int>(silent), *lib, b.gate, gc); },
          [&](int k, std::span<const int> past) { return glrt(counts(k), past, *lib, b.gate, gc); },
          cfg.baseline.genie_isi ? std::span<const int>(pk.bits) : std::span<const int>());
      vg = r.pass2;
    }
    if (cfg.wants("oracle"))
      for (int k = 0; k < pk.K(); ++k)
        vo.push_back(oracle_lrt(counts(k), NuisanceVector{pk.psi, pk.channel.lambda_bg, past_from(pk.bits, k, L)},
                                *lib, b.gate));
    for (int k = 0; k < pk.K(); ++k) {
      const int s = pk.bits[k];
      if (!vt.empty()) write_verdict(os, "tdelta", pk.index, k, s, vt[k]);
      if (!vy.empty()) write_verdict(os, "mean", pk.index, k, s, vy[k]);
      if (!vg.empty()) write_verdict(os, "glrt", pk.index, k, s, vg[k]);
      if (!vo.empty()) write_verdict(os, "oracle", pk.index, k, s, vo[k]);
    }
  }
  std::cout << "wrote verdicts for " << arch.size() - std::min<std::size_t>(arch.size(), b.calibration_packets)
            << " packets\n";
  return 0;
}

int cmd_analyze(const Common& c, const std::string& archive_path, const std::string& cal_path) {
  const auto arch = load_archive(archive_path);
  const auto cfg = config_for_archive(c, arch.front());
  const auto b = load_calibration(cal_path);
  std::array<std::vector<double>, 2> t;
  std::array<std::vector<std::vector<double>>, 2> psi;
  std::array<long, 2> n{0, 0};
  for (std::size_t p = static_cast<std::size_t>(b.calibration_packets); p < arch.size(); ++p)
    for (int k = 0; k < arch[p].K(); ++k) {
      const auto counts = std::span<const Count>(arch[p].counts[k]);
      const int s = arch[p].bits[k];
      ++n[s];
      const auto ev = evaluate_symbol(counts, b.tmpl, b.gate);
      if (!ev.gate_pass || !ev.converged) continue;
      t[s].push_back(ev.statistic);
      psi[s].push_back(psi_sequence(counts, ev.fit, b.tmpl));
    }
  if (n[0] == 0 || n[1] == 0) throw std::runtime_error("analyze: archive lacks one hypothesis after calibration packets");
  const LRVOptions lopt{cfg.detector.L_max, 3, 2.0};
  const auto g = fit_gaussian_model(t[0], t[1], psi[0], psi[1], 2, lopt);
  const double g0 = static_cast<double>(t[0].size()) / n[0], g1 = static_cast<double>(t[1].size()) / n[1];
  const auto hbar = isi_profile(cfg.channel, b.tmpl, b.r_ref);
  const auto sep = separability(g, hbar);
  std::vector<std::vector<double>> pooled = psi[0];
  pooled.insert(pooled.end(), psi[1].begin(), psi[1].end());
  const auto corr = correlation_diagnostics(pooled, cfg.channel.Tsym / cfg.channel.M, lopt);
  const auto op = roc_at_pfa(g, cfg.detector.pfa_target, g0, g1);

  auto lrv_json = [](const LRVEstimate& e) {
    return json{{"gamma", e.gamma}, {"L_s", e.L_s}, {"omega2", e.omega2}, {"Omega", e.Omega}, {"n_symbols", e.n_symbols}};
  };
  json j{{"model",
          {{"delta0", g.delta0}, {"delta1", g.delta1}, {"omega2_0", g.omega2_0}, {"omega2_1", g.omega2_1},
           {"M_eff", g.M_eff}, {"p", g.p}, {"mT0", g.mT0}, {"mT1", g.mT1}, {"vT0", g.vT0}, {"vT1", g.vT1},
           {"lrv0", lrv_json(g.lrv0)}, {"lrv1", lrv_json(g.lrv1)}}},
         {"gate_pass", {{"h0", g0}, {"h1", g1}}},
         {"operating_point",
          {{"pfa_conditional_target", cfg.detector.pfa_target}, {"pfa", op.pfa}, {"pd", op.pd}, {"tau", op.tau},
           {"pb", op.pb}}},
         {"separability",
          {{"D_C", sep.D_C}, {"a_star", sep.a_star}, {"D_B", sep.D_B}, {"D_KL", sep.D_KL}, {"rho_ISI", sep.rho_ISI}}},
         {"correlation", {{"tau_psi", corr.tau_psi}, {"M_corr", corr.M_corr}, {"ratio", corr.ratio}}},
         {"symbols", {{"h0", n[0]}, {"h1", n[1]}}},
         {"params_snapshot", serialize_config(cfg)}};
  auto os = open_out(c.out_dir, "analysis.json");
  os << j.dump(2) << '\n';

  auto roc = open_out(c.out_dir, "roc.csv");
  roc << serialize_config(cfg, "# ") << "source,pfa,pd\n";
  for (int i = 1; i < 200; ++i) {
    const auto pt = roc_at_pfa(g, i / 200.0, g0, g1);
    roc << "gaussian," << detail::fmt17(pt.pfa) << ',' << detail::fmt17(pt.pd) << '\n';
  }
  std::vector<detail::Scored> sc;
  for (int s = 0; s < 2; ++s) {
    for (double v : t[s]) sc.push_back({s, true, g.kappa() * v});
    for (long i = static_cast<long>(t[s].size()); i < n[s]; ++i) sc.push_back({s, false, 0.0});
  }
  for (const auto& pt : detail::empirical_roc("tdelta", sc, g.kappa()).points)
    roc << "empirical," << detail::fmt17(pt.pfa) << ',' << detail::fmt17(pt.pd) << '\n';
  std::cout << "D_B " << sep.D_B << " predicted P_D " << op.pd << " at P_FA " << op.pfa << "\n";
  return 0;
}

int cmd_sweep(const Common& c, const std::string& which) {
  const auto cfg = resolve_config(c, parse_experiment(which));
  const auto r = run_sweep(cfg);
  auto os = open_out(c.out_dir, which + ".csv");
  write_sweep_csv(os, r);
  if (!r.curves.empty()) {
    auto cs = open_out(c.out_dir, which + "_curves.csv");
    write_curves_csv(cs, r);
  }
  std::cout << "wrote " << r.rows.size() << " rows to " << (fs::path(c.out_dir) / (which + ".csv")).string() << "\n";
  return 0;
}

int cmd_selftest() {
  const auto res = run_selftest();
  bool ok = true;
  for (const auto& r : res) {
    std::cout << (r.pass ? "PASS " : "FAIL ") << r.name << "  " << r.detail << "\n";
    ok = ok && r.pass;
  }
  return ok ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mcdisp: dispersion-based detection for mobile molecular links"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "Config file (sectioned key = value)");
    sub->add_option("--seed", common.seed, "Master seed (overrides run.master_seed)");
    sub->add_option("--out", common.out_dir, "Output directory")->capture_default_str();
    sub->add_option("--detectors", common.detectors, "Comma-separated: tdelta,mean,glrt,oracle");
    sub->add_flag("--genie-isi", common.genie_isi, "Use true past bits for ISI cancellation");
  };

  int packets = 0;
  auto* sim = app.add_subcommand("simulate", "Generate a packet archive (JSON lines) and counts CSV");
  add_common(sim);
  sim->add_option("--packets", packets, "Number of packets (default run.n_packets)");

  std::string archive, calibration;
  int cal_packets = 0;
  auto* cal = app.add_subcommand("calibrate", "Learn template, gate and thresholds from an archive");
  add_common(cal);
  cal->add_option("--archive", archive, "Packet archive (JSON lines)")->required();
  cal->add_option("--calibration-packets", cal_packets, "Leading packets used (default run.calibration_packets)");

  auto* det = app.add_subcommand("detect", "Write the verdict stream for an archive");
  add_common(det);
  det->add_option("--archive", archive, "Packet archive (JSON lines)")->required();
  det->add_option("--calibration", calibration, "calibration.json from calibrate")->required();

  auto* ana = app.add_subcommand("analyze", "Gaussian working model, separability and correlation report");
  add_common(ana);
  ana->add_option("--archive", archive, "Packet archive (JSON lines)")->required();
  ana->add_option("--calibration", calibration, "calibration.json from calibrate")->required();

  std::string which;
  auto* sweep = app.add_subcommand("sweep", "Run an experiment sweep");
  add_common(sweep);
  sweep->add_option("experiment", which, "gain | roc | mobility | sampling | isi")
      ->required()
      ->check(CLI::IsMember({"gain", "roc", "mobility", "sampling", "isi"}));

  auto* self = app.add_subcommand("selftest", "Run the property oracles");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*sim) return cmd_simulate(common, packets);
    if (*cal) return cmd_calibrate(common, archive, cal_packets);
    if (*det) return cmd_detect(common, archive, calibration);
    if (*ana) return cmd_analyze(common, archive, calibration);
    if (*sweep) return cmd_sweep(common, which);
    if (*self) return cmd_selftest();
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
