// SPDX-License-Identifier: Apache-2.0
#include "mpib/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "mpib/common.hpp"

namespace mpib::config {

namespace {

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (const auto& e : v) s += (s.empty() ? "" : "; ") + e;
  return s;
}

const std::set<int> kSupportedBits{2, 3, 4, 5, 6, 8, 16};

}  // namespace

ConfigError::ConfigError(std::vector<std::string> errors)
    : Error("invalid config: " + join(errors)), errors_(std::move(errors)) {}

const std::vector<std::string>& commands() {
  static const std::vector<std::string> c{"synth", "pretrain", "train", "eval", "sweep",
                                          "leakage", "privacy-tradeoff", "energy", "bench"};
  return c;
}

const std::vector<std::string>& allowed_keys(const std::string& command) {
  static const std::vector<std::string> corpus{"corpus", "n_speakers", "sessions", "windows_per_session",
                                               "agitation_mean", "agitation_std", "noise_fraction"};
  auto with = [&](std::vector<std::string> extra) {
    std::vector<std::string> k = corpus;
    k.insert(k.end(), extra.begin(), extra.end());
    return k;
  };
  static const std::map<std::string, std::vector<std::string>> table{
      {"synth", with({})},
      {"pretrain", with({"pretrain_epochs", "checkpoint"})},
      {"train", with({"bits", "state_dim", "preset", "epochs", "pretrained", "checkpoint", "mode", "folds",
                      "fold_ids"})},
      {"eval", with({"checkpoint", "folds", "fold_ids", "enroll"})},
      {"sweep", with({"bits_list", "capacity_matched", "state_dim", "preset", "epochs", "pretrain_epochs",
                      "pretrained", "folds", "fold_ids", "enroll", "bootstrap", "mode"})},
      {"leakage", with({"checkpoint", "folds", "fold_ids", "enroll", "bootstrap"})},
      {"privacy-tradeoff", with({"checkpoint", "folds", "fold_ids", "enroll", "sigmas", "noise_seeds"})},
      {"energy", {"p_active_mw", "p_idle_mw", "inference_s", "cadence_s", "window_s"}},
      {"bench", {"bench_iterations"}},
  };
  const auto it = table.find(command);
  if (it == table.end()) throw ConfigError({"unknown command '" + command + "'"});
  return it->second;
}

namespace {

template <class T>
void read(const Json& j, const char* key, T& dst, std::vector<std::string>& errors) {
  try {
    dst = j.get<T>();
  } catch (const nlohmann::json::exception&) {
    errors.push_back(std::string("key '") + key + "' has the wrong type");
  }
}

}  // namespace

RunConfig apply_json(const RunConfig& base, const Json& j, std::vector<std::string>& errors) {
  RunConfig c = base;
  if (!j.is_object()) {
    errors.push_back("config must be a JSON object");
    return c;
  }
  const auto& allowed = allowed_keys(c.command);
  for (const auto& [key, v] : j.items()) {
    const bool common = key == "seed" || key == "out" || key == "format";
    if (!common && std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      errors.push_back("unknown key '" + key + "' for command " + c.command);
      continue;
    }
#define MPIB_KEY(name)             \
  if (key == #name) {              \
    read(v, #name, c.name, errors); \
    continue;                      \
  }
    MPIB_KEY(seed)
    MPIB_KEY(out)
    MPIB_KEY(format)
    MPIB_KEY(corpus)
    MPIB_KEY(n_speakers)
    MPIB_KEY(sessions)
    MPIB_KEY(windows_per_session)
    MPIB_KEY(agitation_mean)
    MPIB_KEY(agitation_std)
    MPIB_KEY(noise_fraction)
    MPIB_KEY(bits)
    MPIB_KEY(state_dim)
    MPIB_KEY(bits_list)
    MPIB_KEY(capacity_matched)
    MPIB_KEY(preset)
    MPIB_KEY(epochs)
    MPIB_KEY(pretrain_epochs)
    MPIB_KEY(pretrained)
    MPIB_KEY(checkpoint)
    MPIB_KEY(mode)
    MPIB_KEY(folds)
    MPIB_KEY(fold_ids)
    MPIB_KEY(enroll)
    MPIB_KEY(bootstrap)
    MPIB_KEY(sigmas)
    MPIB_KEY(noise_seeds)
    MPIB_KEY(p_active_mw)
    MPIB_KEY(p_idle_mw)
    MPIB_KEY(inference_s)
    MPIB_KEY(cadence_s)
    MPIB_KEY(window_s)
    MPIB_KEY(bench_iterations)
#undef MPIB_KEY
  }
  return c;
}

RunConfig load_config(const std::filesystem::path& path, const std::string& command) {
  std::ifstream is(path);
  if (!is) throw ConfigError({"cannot open config " + path.string()});
  Json j;
  try {
    j = Json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError({std::string("config is not valid JSON: ") + e.what()});
  }
  RunConfig base;
  base.command = command;
  std::vector<std::string> errors;
  auto c = apply_json(base, j, errors);
  if (!errors.empty()) throw ConfigError(errors);
  return c;
}

std::vector<std::string> validate_config(const RunConfig& c) {
  std::vector<std::string> e;
  if (std::find(commands().begin(), commands().end(), c.command) == commands().end()) {
    e.push_back("unknown command '" + c.command + "'");
  }
  if (c.format != "json" && c.format != "csv") e.push_back("format must be json or csv");
  if (c.out.empty()) e.push_back("out must not be empty");
  if (c.n_speakers < 10) e.push_back("n_speakers must be >= 10");
  if (c.sessions < 1) e.push_back("sessions must be >= 1");
  if (c.windows_per_session < 2) e.push_back("windows_per_session must be >= 2");
  if (!(c.agitation_std >= 0.0)) e.push_back("agitation_std must be non-negative");
  if (!(c.noise_fraction >= 0.0 && c.noise_fraction <= 1.0)) e.push_back("noise_fraction must be in [0, 1]");
  if (!kSupportedBits.count(c.bits)) e.push_back("bits=" + std::to_string(c.bits) + " is not a supported precision");
  for (int b : c.bits_list) {
    if (!kSupportedBits.count(b)) e.push_back("bits_list entry " + std::to_string(b) + " is not a supported precision");
  }
  if (c.state_dim < 1) e.push_back("state_dim must be >= 1");
  if (c.preset != "impl" && c.preset != "exp") e.push_back("preset must be impl or exp");
  if (c.epochs < 0) e.push_back("epochs must be >= 0");
  if (c.pretrain_epochs < 0) e.push_back("pretrain_epochs must be >= 0");
  try {
    model::parse_encoder_mode(c.mode);
  } catch (const Error&) {
    e.push_back("mode must be fp16, int8_ptq or int8_qat");
  }
  if (c.folds < 2) e.push_back("folds must be >= 2");
  if (c.folds > c.n_speakers) e.push_back("folds exceeds n_speakers");
  for (int f : c.fold_ids) {
    if (f < 0 || f >= c.folds) e.push_back("fold id " + std::to_string(f) + " out of range");
  }
  if (c.enroll < 1) e.push_back("enroll must be >= 1");
  if (c.bootstrap < 1) e.push_back("bootstrap must be >= 1");
  if (c.sigmas.empty()) e.push_back("sigmas must not be empty");
  for (double s : c.sigmas) {
    if (!(s >= 0.0)) e.push_back("sigma must be non-negative");
  }
  if (c.noise_seeds < 1) e.push_back("noise_seeds must be >= 1");
  if (!(c.p_active_mw >= 0.0)) e.push_back("p_active_mw must be non-negative");
  if (!(c.p_idle_mw >= 0.0)) e.push_back("p_idle_mw must be non-negative");
  if (!(c.inference_s > 0.0)) e.push_back("inference_s must be positive");
  if (!(c.cadence_s > 0.0)) e.push_back("cadence_s must be positive");
  if (!(c.window_s > 0.0)) e.push_back("window_s must be positive");
  if (c.window_s > c.cadence_s) e.push_back("window_s must not exceed cadence_s");
  if (c.bench_iterations < 1) e.push_back("bench_iterations must be >= 1");
  if ((c.command == "eval" || c.command == "leakage" || c.command == "privacy-tradeoff") && c.checkpoint.empty()) {
    e.push_back("checkpoint is required for " + c.command);
  }
  return e;
}

void require_valid(const RunConfig& cfg) {
  auto e = validate_config(cfg);
  if (!e.empty()) throw ConfigError(std::move(e));
}

Json to_json(const RunConfig& c) {
  Json full;
  full["seed"] = c.seed;
  full["out"] = c.out;
  full["format"] = c.format;
  full["corpus"] = c.corpus;
  full["n_speakers"] = c.n_speakers;
  full["sessions"] = c.sessions;
  full["windows_per_session"] = c.windows_per_session;
  full["agitation_mean"] = c.agitation_mean;
  full["agitation_std"] = c.agitation_std;
  full["noise_fraction"] = c.noise_fraction;
  full["bits"] = c.bits;
  full["state_dim"] = c.state_dim;
  full["bits_list"] = c.bits_list;
  full["capacity_matched"] = c.capacity_matched;
  full["preset"] = c.preset;
  full["epochs"] = c.epochs;
  full["pretrain_epochs"] = c.pretrain_epochs;
  full["pretrained"] = c.pretrained;
  full["checkpoint"] = c.checkpoint;
  full["mode"] = c.mode;
  full["folds"] = c.folds;
  full["fold_ids"] = c.fold_ids;
  full["enroll"] = c.enroll;
  full["bootstrap"] = c.bootstrap;
  full["sigmas"] = c.sigmas;
  full["noise_seeds"] = c.noise_seeds;
  full["p_active_mw"] = c.p_active_mw;
  full["p_idle_mw"] = c.p_idle_mw;
  full["inference_s"] = c.inference_s;
  full["cadence_s"] = c.cadence_s;
  full["window_s"] = c.window_s;
  full["bench_iterations"] = c.bench_iterations;

  Json j;
  j["command"] = c.command;
  j["seed"] = c.seed;
  j["out"] = c.out;
  j["format"] = c.format;
  for (const auto& k : allowed_keys(c.command)) j[k] = full[k];
  return j;
}

std::string config_hash(const RunConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_json(cfg).dump())));
  return buf;
}

Json model_config_to_json(const model::ModelConfig& mc) {
  Json j;
  j["n_mels"] = mc.n_mels;
  j["frames"] = mc.frames;
  j["stem_channels"] = mc.stem_channels;
  j["conv_blocks"] = mc.conv_blocks;
  j["embed_dim"] = mc.embed_dim;
  j["encoder_dropout"] = mc.encoder_dropout;
  j["trait_dim"] = mc.trait_dim;
  j["trait_dropout"] = mc.trait_dropout;
  j["state_dim"] = mc.state_dim;
  j["state_bits"] = mc.state_bits;
  j["state_dropout"] = mc.state_dropout;
  j["agit_hidden1"] = mc.agit_hidden1;
  j["agit_hidden2"] = mc.agit_hidden2;
  j["agit_bias_init"] = mc.agit_bias_init;
  j["recon_hidden"] = mc.recon_hidden;
  j["recon_pool"] = mc.recon_pool;
  j["tmae_patch"] = mc.tmae_patch;
  j["tmae_hidden"] = mc.tmae_hidden;
  j["ln_eps"] = mc.ln_eps;
  j["calibration_interval"] = mc.calibration_interval;
  return j;
}

model::ModelConfig model_config_from_json(const Json& j) {
  model::ModelConfig mc;
  try {
    mc.n_mels = j.at("n_mels").get<int>();
    mc.frames = j.at("frames").get<int>();
    mc.stem_channels = j.at("stem_channels").get<int>();
    mc.conv_blocks = j.at("conv_blocks").get<int>();
    mc.embed_dim = j.at("embed_dim").get<int>();
    mc.encoder_dropout = j.at("encoder_dropout").get<double>();
    mc.trait_dim = j.at("trait_dim").get<int>();
    mc.trait_dropout = j.at("trait_dropout").get<double>();
    mc.state_dim = j.at("state_dim").get<int>();
    mc.state_bits = j.at("state_bits").get<int>();
    mc.state_dropout = j.at("state_dropout").get<double>();
    mc.agit_hidden1 = j.at("agit_hidden1").get<int>();
    mc.agit_hidden2 = j.at("agit_hidden2").get<int>();
    mc.agit_bias_init = j.at("agit_bias_init").get<double>();
    mc.recon_hidden = j.at("recon_hidden").get<int>();
    mc.recon_pool = j.at("recon_pool").get<int>();
    mc.tmae_patch = j.at("tmae_patch").get<int>();
    mc.tmae_hidden = j.at("tmae_hidden").get<int>();
    mc.ln_eps = j.at("ln_eps").get<double>();
    mc.calibration_interval = j.at("calibration_interval").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("bad model config: ") + e.what());
  }
  mc.validate();
  return mc;
}

}  // namespace mpib::config
