#include <gtest/gtest.h>

#include <sstream>
#include <string>

#include "mcdisp/archive.hpp"
#include "mcdisp/config.hpp"

using namespace mcdisp;

TEST(Config, DefaultsFollowTableValues) {
  const ExperimentConfig c;
  EXPECT_EQ(c.channel.Dm, 1e-10);
  EXPECT_EQ(c.channel.lambda_bg, 2.0);
  EXPECT_EQ(c.channel.r_min, 0.8e-6);
  EXPECT_EQ(c.mobility.v0, 0.0);
  EXPECT_EQ(c.mobility.v1, 30e-6);
  EXPECT_EQ(c.mobility.Dr0, 8.0);
  EXPECT_EQ(c.mobility.Dr1, 0.8);
  EXPECT_EQ(c.mobility.Dt, 2e-13);
  EXPECT_EQ(c.mobility.dt_traj, 1e-3);
  EXPECT_EQ(c.mobility.x0, (Vec3{10e-6, 0, 0}));
  EXPECT_EQ(c.run.n_packets, 500);
  EXPECT_EQ(c.run.K, 64);
  EXPECT_EQ(c.baseline.n_paths, 512);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, RoundTripsEveryPreset) {
  for (auto e : {Experiment::Default, Experiment::Gain, Experiment::Roc, Experiment::Mobility, Experiment::Sampling,
                 Experiment::Isi}) {
    auto c = preset(e);
    c.channel.Dm = 1.0 / 3.0 * 1e-9;
    c.mobility.x0 = {1.0 / 7.0 * 1e-5, 2e-7, -3e-8};
    c.run.master_seed = 0xFFFFFFFFFFFFFFFFULL;
    c.sweep.gain_grid = {0.1, 0.2 + 0.1};
    const auto text = serialize_config(c);
    EXPECT_EQ(parse_config_string(text), c) << experiment_name(e);
    EXPECT_EQ(serialize_config(parse_config_string(text)), text);
  }
}

TEST(Config, UnitsConvertAtParse) {
  const auto c = parse_config_string(
      "[channel]\nDm = 100 um^2/s\nr_min = 0.8 um\nTsym = 2000 ms\n"
      "[mobility]\nv1 = 30 um/s\nx0 = 10, 0, 0 um\n"
      "[sweep]\nv1_grid = 0, 1, 3 um/s\n");
  EXPECT_NEAR(c.channel.Dm, 1e-10, 1e-24);
  EXPECT_NEAR(c.channel.r_min, 0.8e-6, 1e-20);
  EXPECT_NEAR(c.channel.Tsym, 2.0, 1e-15);
  EXPECT_NEAR(c.mobility.v1, 30e-6, 1e-20);
  EXPECT_NEAR(c.mobility.x0[0], 10e-6, 1e-20);
  ASSERT_EQ(c.sweep.v1_grid.size(), 3u);
  EXPECT_NEAR(c.sweep.v1_grid[2], 3e-6, 1e-20);
}

TEST(Config, CommentsAndSections) {
  const auto c = parse_config_string(
      "# leading comment\n\n[run]\nexperiment = isi   # preset first\nn_packets = 12\n"
      "[sweep]\ndetectors = tdelta, mean\n");
  EXPECT_EQ(c.experiment, Experiment::Isi);
  EXPECT_EQ(c.channel.A0, 0.0);
  EXPECT_EQ(c.run.n_packets, 12);
  EXPECT_EQ(c.sweep.detectors, (std::vector<std::string>{"tdelta", "mean"}));
  EXPECT_TRUE(c.wants("mean"));
  EXPECT_FALSE(c.wants("glrt"));
}

TEST(Config, Errors) {
  EXPECT_THROW(parse_config_string("[channel]\nbogus = 1\n"), ConfigError);
  EXPECT_THROW(parse_config_string("M = 3\n"), ConfigError);
  EXPECT_THROW(parse_config_string("[channel\nM = 3\n"), ConfigError);
  EXPECT_THROW(parse_config_string("[channel]\nM 3\n"), ConfigError);
  EXPECT_THROW(parse_config_string("[channel]\nM = 3.5\n"), ConfigError);
  EXPECT_THROW(parse_config_string("[channel]\nDm = 1 parsecs\n"), ConfigError);
  EXPECT_THROW(parse_config_string("[channel]\nM = 0\n"), ConfigError);
  EXPECT_THROW(parse_config_string("[run]\nn_packets = 3\nexperiment = roc\n"), ConfigError);
  EXPECT_THROW(parse_config_string("[sweep]\ndetectors = tdelta, viterbi\n"), ConfigError);
  EXPECT_THROW(parse_config_string("[run]\nrandom_warmup = maybe\n"), ConfigError);
  try {
    load_config("/nonexistent/dir/x.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/x.cfg"), std::string::npos);
  }
}

TEST(Config, ErrorsNameTheLine) {
  try {
    parse_config_string("[channel]\nM = 40\nL = two\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
}

TEST(Archive, JsonLinesRoundTrip) {
  ChannelParams ch;
  ch.L = 2;
  MobilityParams mob;
  mob.Dt = 1.0 / 3.0 * 1e-12;
  std::stringstream ss;
  std::vector<ArchivedPacket> written;
  for (int p = 0; p < 3; ++p) {
    const std::vector<int> bits{1, 0, p % 2};
    const auto rec = generate_packet(bits, 0.7 + 0.1 * p, ch, mob, derive_seed(1, "archive", p));
    written.push_back(archive_view(rec, p));
    write_archive_line(ss, written.back());
  }
  const auto back = read_archive(ss);
  EXPECT_EQ(back, written);
}

TEST(Archive, RecordLayout) {
  ChannelParams ch;
  ch.M = 3;
  MobilityParams mob;
  mob.dt_traj = 1e-3;
  const std::vector<int> bits{1, 0};
  const auto a = archive_view(generate_packet(bits, 1.0, ch, mob, 9), 4);
  const auto j = nlohmann::json::parse(to_json(a).dump());
  for (const char* key : {"packet", "seed", "psi", "bits", "counts", "params"}) EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_TRUE(j["params"].contains("channel"));
  EXPECT_TRUE(j["params"].contains("mobility"));
  EXPECT_EQ(j["counts"].size(), 2u);
  EXPECT_EQ(j["counts"][0].size(), 3u);

  std::stringstream csv;
  write_counts_csv_header(csv);
  write_counts_csv(csv, a);
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "packet,k,m,Y");
  std::getline(csv, line);
  EXPECT_EQ(line.rfind("4,1,1,", 0), 0u);
}

TEST(Archive, MalformedLineIsReported) {
  std::stringstream ss("\n{\"packet\": 1}\n");
  try {
    read_archive(ss);
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(Archive, TemplateAndCalibrationRoundTrip) {
  std::vector<double> u(40);
  for (int m = 0; m < 40; ++m) u[m] = 0.2 + std::exp(-0.03 * (m - 12) * (m - 12)) / 3.0;
  CalibrationBundle b;
  b.tmpl = make_template(u, 0.05, 0.1);
  b.gate = {1.0 / 3.0, 0.05, false};
  b.tdelta = {0.123456789012345678, 0.05, -1};
  b.mean = {7.25, 0.05, 1};
  b.isi_gain = 0.93;
  b.calibration_packets = 12;
  const auto j = nlohmann::json::parse(to_json(b, ExperimentConfig{}).dump());
  EXPECT_EQ(calibration_from_json(j), b);
  EXPECT_EQ(template_from_json(to_json(b.tmpl)), b.tmpl);
  EXPECT_TRUE(j.contains("params_snapshot"));
  auto bad = to_json(b.tmpl);
  bad["m2"] = 41;
  EXPECT_THROW(template_from_json(bad), ContractError);
}

TEST(Archive, VerdictRows) {
  std::stringstream ss;
  write_verdict_header(ss);
  DetectorVerdict a;
  write_verdict(ss, "tdelta", 3, 0, 1, a);
  a.gated = true;
  a.decision = 1;
  a.statistic = 0.5;
  write_verdict(ss, "mean", 3, 1, 1, a);
  EXPECT_EQ(ss.str(),
            "detector,packet,k,truth_bit,decision,gated,statistic\n"
            "tdelta,3,1,1,0,0,\n"
            "mean,3,2,1,1,1,0.5\n");
}
