// SPDX-License-Identifier: Apache-2.0
/**
 * @file config.hpp
 * @brief Run configuration for the command-line driver: parsing, validation and the
 *        resolved-config serialization embedded in every report.
 */
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "mpib/model.hpp"

namespace mpib::config {

using Json = nlohmann::ordered_json;

/// Thrown when a configuration is invalid; carries every problem found.
class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> errors);
  const std::vector<std::string>& errors() const { return errors_; }

 private:
  std::vector<std::string> errors_;
};

const std::vector<std::string>& commands();

struct RunConfig {
  std::string command;
  std::uint64_t seed = 1;
  std::string out = "out";
  std::string format = "json";

  // corpus
  std::string corpus;  // directory written by `synth`; empty = generate in memory
  int n_speakers = 120;
  int sessions = 4;
  int windows_per_session = 20;
  double agitation_mean = 1.42;
  double agitation_std = 0.89;
  double noise_fraction = 0.123;

  // model and training
  int bits = 4;
  int state_dim = 32;
  std::vector<int> bits_list{2, 3, 4, 5, 6, 8, 16};
  bool capacity_matched = false;
  std::string preset = "impl";
  int epochs = 0;  // 0: preset default
  int pretrain_epochs = 0;
  std::string pretrained;  // checkpoint whose encoder initializes training
  std::string checkpoint;  // model checkpoint to evaluate / write
  std::string mode = "fp16";
  int folds = 5;
  std::vector<int> fold_ids;  // empty: all folds
  int enroll = 3;
  int bootstrap = 1000;

  // privacy
  std::vector<double> sigmas{0.0, 25.3, 253.0};
  int noise_seeds = 5;

  // energy
  double p_active_mw = 110.0;
  double p_idle_mw = 15.0;
  double inference_s = 0.0234;
  double cadence_s = 5.0;
  double window_s = 0.640;

  // bench
  int bench_iterations = 200;
};

/// Keys accepted for @p command (besides the common seed/out/format).
const std::vector<std::string>& allowed_keys(const std::string& command);

/// Applies a JSON object onto @p base. Unknown keys and type errors are collected.
RunConfig apply_json(const RunConfig& base, const Json& j, std::vector<std::string>& errors);
RunConfig load_config(const std::filesystem::path& path, const std::string& command);

/// All constraint violations (empty when valid).
std::vector<std::string> validate_config(const RunConfig& cfg);
/// Throws ConfigError listing every violation.
void require_valid(const RunConfig& cfg);

/// Resolved configuration restricted to the keys relevant to its command, in stable order.
Json to_json(const RunConfig& cfg);
/// FNV-1a of the compact resolved-config dump, as 16 hex digits.
std::string config_hash(const RunConfig& cfg);

Json model_config_to_json(const model::ModelConfig& mc);
model::ModelConfig model_config_from_json(const Json& j);

}  // namespace mpib::config
