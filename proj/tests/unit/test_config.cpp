// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "mpib/config.hpp"
#include "mpib/report.hpp"

using namespace mpib;
using namespace mpib::config;

namespace {

RunConfig base(const std::string& command) {
  RunConfig c;
  c.command = command;
  return c;
}

bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

}  // namespace

TEST(Config, DefaultsAreValid) {
  for (const auto& cmd : commands()) {
    RunConfig c = base(cmd);
    if (cmd == "eval" || cmd == "leakage" || cmd == "privacy-tradeoff") c.checkpoint = "model.bin";
    EXPECT_TRUE(validate_config(c).empty()) << cmd;
  }
}

TEST(Config, CollectsEveryViolation) {
  RunConfig c = base("train");
  c.bits = 7;
  c.n_speakers = 5;
  c.format = "xml";
  c.folds = 1;
  const auto e = validate_config(c);
  EXPECT_TRUE(contains(e, "bits=7 is not a supported precision"));
  EXPECT_TRUE(contains(e, "n_speakers must be >= 10"));
  EXPECT_TRUE(contains(e, "format must be json or csv"));
  EXPECT_TRUE(contains(e, "folds must be >= 2"));
  try {
    require_valid(c);
    FAIL();
  } catch (const ConfigError& err) {
    EXPECT_EQ(err.errors(), e);
  }
  RunConfig energy = base("energy");
  energy.window_s = 6.0;
  EXPECT_TRUE(contains(validate_config(energy), "window_s must not exceed cadence_s"));
  EXPECT_TRUE(contains(validate_config(base("eval")), "checkpoint is required for eval"));
  EXPECT_TRUE(contains(validate_config(base("frobnicate")), "unknown command 'frobnicate'"));
}

TEST(Config, ApplyJsonRejectsUnknownAndMistypedKeys) {
  std::vector<std::string> errors;
  const Json j = Json::parse(R"({"seed": 9, "bits": 8, "sigmas": [1.5], "bench_iterations": 3, "epochs": "ten"})");
  const RunConfig c = apply_json(base("train"), j, errors);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.bits, 8);
  EXPECT_TRUE(contains(errors, "unknown key 'sigmas' for command train"));
  EXPECT_TRUE(contains(errors, "unknown key 'bench_iterations' for command train"));
  EXPECT_TRUE(contains(errors, "key 'epochs' has the wrong type"));
  errors.clear();
  apply_json(base("train"), Json::array(), errors);
  EXPECT_TRUE(contains(errors, "config must be a JSON object"));
}

TEST(Config, LoadFromFile) {
  const auto dir = std::filesystem::temp_directory_path() / "mpib_config_test";
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "ok.json") << R"({"n_speakers": 12, "sessions": 3})";
  const RunConfig c = load_config(dir / "ok.json", "synth");
  EXPECT_EQ(c.n_speakers, 12);
  EXPECT_EQ(c.sessions, 3);
  std::ofstream(dir / "bad.json") << R"({"n_speakers": 3, "bits": 4})";
  try {
    load_config(dir / "bad.json", "synth");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_TRUE(contains(e.errors(), "unknown key 'bits' for command synth"));
  }
  std::filesystem::remove_all(dir);
}

TEST(Config, ResolvedJsonAndHash) {
  RunConfig c = base("energy");
  const Json j = to_json(c);
  EXPECT_EQ(j.begin().key(), "command");
  EXPECT_TRUE(j.contains("p_active_mw"));
  EXPECT_FALSE(j.contains("bits"));
  const std::string h = config_hash(c);
  EXPECT_EQ(h.size(), 16u);
  EXPECT_EQ(h, config_hash(c));
  RunConfig other = c;
  other.bits = 8;  // not an energy key
  EXPECT_EQ(config_hash(other), h);
  other.p_idle_mw = 16.0;
  EXPECT_NE(config_hash(other), h);
  char want[17];
  std::snprintf(want, sizeof want, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  EXPECT_EQ(h, want);
}

TEST(Config, ModelConfigRoundTrip) {
  model::ModelConfig mc;
  mc.state_dim = 16;
  mc.state_bits = 6;
  const auto back = model_config_from_json(model_config_to_json(mc));
  EXPECT_EQ(back.state_dim, 16);
  EXPECT_EQ(back.state_bits, 6);
}

TEST(Report, SixSignificantDigitsAndEnvelope) {
  EXPECT_EQ(report::fmt6(2.5738461), "2.57385");
  EXPECT_DOUBLE_EQ(report::round6(0.12800004), 0.128);
  const Json r = report::rounded(Json::parse(R"({"a": [1.23456789, 2], "b": {"c": 3.14159265}})"));
  EXPECT_DOUBLE_EQ(r["a"][0].get<double>(), 1.23457);
  EXPECT_TRUE(r["a"][1].is_number_integer());
  RunConfig c = base("energy");
  const Json env = report::envelope(c, Json{{"x", 1.0 / 3.0}});
  EXPECT_EQ(env["config_hash"], config_hash(c));
  EXPECT_DOUBLE_EQ(env["results"]["x"].get<double>(), 0.333333);
}

TEST(Report, CsvAppendsHashAndSeed) {
  RunConfig c = base("energy");
  c.seed = 42;
  report::Table t;
  t.header = {"name", "n", "v"};
  t.rows.push_back({std::string("a"), 3LL, 0.1234567});
  const std::string csv = report::to_csv(t, c);
  EXPECT_EQ(csv, "name,n,v,config_hash,seed\na,3,0.123457," + config_hash(c) + ",42\n");
}
