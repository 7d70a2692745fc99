// SPDX-License-Identifier: Apache-2.0
// Command-line driver: synth, pretrain, train, eval, sweep, leakage, privacy-tradeoff,
// energy, bench. Exit codes: 0 success, 1 runtime failure, 2 configuration error.
#include <Eigen/Core>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "mpib/adapt.hpp"
#include "mpib/common.hpp"
#include "mpib/config.hpp"
#include "mpib/eval.hpp"
#include "mpib/experiments.hpp"
#include "mpib/kernels.hpp"
#include "mpib/report.hpp"
#include "mpib/synth.hpp"
#include "mpib/train.hpp"

namespace fs = std::filesystem;
using namespace mpib;
using config::Json;
using config::RunConfig;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

synth::SynthConfig synth_config(const RunConfig& c, std::uint64_t seed) {
  synth::SynthConfig s;
  s.n_speakers = c.n_speakers;
  s.sessions = c.sessions;
  s.windows_per_session = c.windows_per_session;
  s.agitation_mean = c.agitation_mean;
  s.agitation_std = c.agitation_std;
  s.noise_fraction = c.noise_fraction;
  s.seed = seed;
  return s;
}

synth::Corpus load_corpus(const RunConfig& c) {
  if (!c.corpus.empty()) {
    spdlog::info("reading corpus from {}", c.corpus);
    return synth::read_corpus(c.corpus);
  }
  spdlog::info("generating corpus in memory ({} speakers, seed {})", c.n_speakers, c.seed);
  return synth::generate_corpus(synth_config(c, c.seed));
}

experiments::ProtocolOptions protocol(const RunConfig& c) {
  experiments::ProtocolOptions o;
  o.preset = c.preset;
  o.epochs = c.epochs;
  o.pretrain_epochs = c.pretrain_epochs;
  o.seed = c.seed;
  o.enroll = c.enroll;
  o.folds = c.folds;
  o.bootstrap = c.bootstrap;
  o.mode = model::parse_encoder_mode(c.mode);
  return o;
}

std::vector<experiments::Split> splits_for(const RunConfig& c, const synth::Corpus& corpus) {
  return experiments::fold_splits(corpus, c.folds, derive_seed(c.seed, "folds"));
}

void emit(const RunConfig& c, const std::string& stem, const Json& results, const report::Table& table) {
  const fs::path dir = c.out;
  if (c.format == "csv") {
    const auto p = report::write_text(dir, stem + ".csv", report::to_csv(table, c));
    report::write_text(dir, stem + ".config.json", report::dump_json(report::rounded(config::to_json(c))));
    spdlog::info("wrote {}", p.string());
  } else {
    const auto p = report::write_text(dir, stem + ".json", report::dump_json(report::envelope(c, results)));
    spdlog::info("wrote {}", p.string());
  }
}

/// Loads a checkpoint written by `train`, plus the run configuration that produced it.
struct Loaded {
  std::unique_ptr<model::MpibModel> model;
  features::GlobalNormStats norm;
  RunConfig run;
  int fold = -1;
};

Loaded load_trained(const std::string& path) {
  const Json meta = Json::parse(model::peek_checkpoint_config(path));
  Loaded l;
  l.model = std::make_unique<model::MpibModel>(config::model_config_from_json(meta.at("model")), 0);
  l.norm = model::load_checkpoint(path, *l.model).norm;
  RunConfig base;
  Json run = meta.at("run");
  base.command = run.value("command", std::string("train"));
  std::vector<std::string> errors;
  run.erase("command");
  l.run = config::apply_json(base, run, errors);
  if (!errors.empty()) throw Error("checkpoint carries an invalid run config");
  l.fold = meta.value("fold", -1);
  return l;
}

/// Training and held-out rows of the checkpoint's fold (all rows for both when unsplit).
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> rows_of(const Loaded& l, const synth::Corpus& corpus) {
  if (l.fold < 0) {
    std::vector<std::size_t> all(corpus.samples.size());
    std::iota(all.begin(), all.end(), 0);
    return {all, all};
  }
  const auto sp = splits_for(l.run, corpus)[static_cast<std::size_t>(l.fold)];
  return {sp.train, sp.test};
}

int cmd_synth(const RunConfig& c) {
  const auto corpus = synth::generate_corpus(synth_config(c, c.seed));
  const fs::path dir = fs::path(c.out) / "corpus";
  synth::write_corpus(corpus, dir);
  Json r;
  r["corpus_dir"] = dir.string();
  r["samples"] = corpus.samples.size();
  r["speakers"] = corpus.speakers.size();
  std::size_t noisy = 0;
  for (const auto& s : corpus.samples) noisy += s.noisy ? 1 : 0;
  r["noisy_fraction"] = static_cast<double>(noisy) / static_cast<double>(corpus.samples.size());
  report::Table t{{"samples", "speakers", "noisy"},
                  {{static_cast<long long>(corpus.samples.size()), static_cast<long long>(corpus.speakers.size()),
                    static_cast<long long>(noisy)}}};
  emit(c, "synth", r, t);
  return 0;
}

int cmd_pretrain(const RunConfig& c) {
  // Pretraining never sees the evaluation corpus: it uses its own seed stream.
  const auto corpus = c.corpus.empty() ? synth::generate_corpus(synth_config(c, derive_seed(c.seed, "pretrain-corpus")))
                                       : synth::read_corpus(c.corpus);
  const int epochs = c.pretrain_epochs > 0 ? c.pretrain_epochs : train::PretrainOptions{}.epochs;
  auto p = experiments::pretrain_encoder(corpus, epochs, c.seed);
  const std::string ckpt = c.checkpoint.empty() ? (fs::path(c.out) / "pretrained.mpck").string() : c.checkpoint;
  fs::create_directories(fs::path(ckpt).parent_path().empty() ? fs::path(".") : fs::path(ckpt).parent_path());
  std::vector<std::size_t> rows(corpus.samples.size());
  std::iota(rows.begin(), rows.end(), 0);
  Json meta;
  meta["model"] = config::model_config_to_json(p.model->config());
  meta["run"] = config::to_json(c);
  model::save_checkpoint(ckpt, *p.model, train::fit_norm(corpus, rows), meta.dump());
  Json r;
  r["checkpoint"] = ckpt;
  r["epoch_loss"] = p.losses;
  report::Table t{{"epoch", "loss"}, {}};
  for (std::size_t i = 0; i < p.losses.size(); ++i) t.rows.push_back({static_cast<long long>(i + 1), p.losses[i]});
  emit(c, "pretrain", r, t);
  return 0;
}

std::unique_ptr<model::MpibModel> load_pretrained(const RunConfig& c) {
  if (c.pretrained.empty()) return nullptr;
  return std::move(load_trained(c.pretrained).model);
}

int cmd_train(const RunConfig& c) {
  const auto corpus = load_corpus(c);
  const int fold = c.fold_ids.empty() ? -1 : c.fold_ids.front();
  std::vector<std::size_t> rows;
  if (fold < 0) {
    rows.resize(corpus.samples.size());
    std::iota(rows.begin(), rows.end(), 0);
  } else {
    rows = splits_for(c, corpus)[static_cast<std::size_t>(fold)].train;
  }
  auto init = load_pretrained(c);
  const experiments::Arm arm{c.bits, c.state_dim};
  auto t = experiments::train_arm(corpus, rows, arm, protocol(c), derive_seed(c.seed, "train"), init.get());
  const std::string ckpt = c.checkpoint.empty() ? (fs::path(c.out) / "model.mpck").string() : c.checkpoint;
  fs::create_directories(fs::path(ckpt).has_parent_path() ? fs::path(ckpt).parent_path() : fs::path("."));
  Json meta;
  meta["model"] = config::model_config_to_json(t.model->config());
  meta["run"] = config::to_json(c);
  meta["fold"] = fold;
  model::save_checkpoint(ckpt, *t.model, t.norm, meta.dump());
  Json r;
  r["checkpoint"] = ckpt;
  r["arm"] = arm.label();
  r["fold"] = fold;
  Json epochs = Json::array();
  report::Table tab{{"epoch", "total", "agit", "stab", "smooth", "orth", "recon"}, {}};
  for (const auto& l : t.logs) {
    epochs.push_back({{"epoch", l.epoch},
                      {"total", l.mean.total},
                      {"agit", l.mean.agit},
                      {"stab", l.mean.stab},
                      {"smooth", l.mean.smooth},
                      {"orth", l.mean.orth},
                      {"recon", l.mean.recon}});
    tab.rows.push_back({static_cast<long long>(l.epoch), l.mean.total, l.mean.agit, l.mean.stab, l.mean.smooth,
                        l.mean.orth, l.mean.recon});
  }
  r["epochs"] = epochs;
  emit(c, "train", r, tab);
  return 0;
}

int cmd_eval(const RunConfig& c) {
  auto l = load_trained(c.checkpoint);
  const auto corpus = load_corpus(l.run);
  const auto [train_rows, test_rows] = rows_of(l, corpus);
  const auto test = train::make_dataset(corpus, test_rows, l.norm);
  const auto e = experiments::evaluate(*l.model, test, c.enroll);
  Json r;
  r["fold"] = l.fold;
  r["rho"] = e.rho;
  r["state"] = {{"top1", e.top1}, {"top5", e.top5}, {"eer", e.eer}, {"mi_bits", e.mi_bits}};
  r["trait"] = {{"top1", e.trait_top1}, {"eer", e.trait_eer}};
  report::Table t{{"rho", "top1", "top5", "eer", "mi_bits", "trait_top1", "trait_eer"},
                  {{e.rho, e.top1, e.top5, e.eer, e.mi_bits, e.trait_top1, e.trait_eer}}};
  emit(c, "eval", r, t);
  return 0;
}

int cmd_sweep(const RunConfig& c) {
  const auto corpus = load_corpus(c);
  std::unique_ptr<model::MpibModel> init = load_pretrained(c);
  if (!init && c.pretrain_epochs > 0) {
    const auto pc = synth::generate_corpus(synth_config(c, derive_seed(c.seed, "pretrain-corpus")));
    init = std::move(experiments::pretrain_encoder(pc, c.pretrain_epochs, c.seed).model);
  }
  const auto arms = c.capacity_matched ? experiments::capacity_matched_arms()
                                       : experiments::arms_for_bits(c.bits_list, c.state_dim);
  const auto rep = experiments::run_bitwidth_sweep(corpus, arms, protocol(c), c.fold_ids, init.get());
  emit(c, "sweep", report::sweep_json(rep), report::sweep_table(rep));
  return 0;
}

int cmd_leakage(const RunConfig& c) {
  auto l = load_trained(c.checkpoint);
  const auto corpus = load_corpus(l.run);
  const auto [train_rows, test_rows] = rows_of(l, corpus);
  const auto members = train::make_dataset(corpus, train_rows, l.norm);
  const auto test = train::make_dataset(corpus, test_rows, l.norm);
  const auto rep = experiments::leakage_report(*l.model, members, test, c.enroll, c.bootstrap, c.seed);
  emit(c, "leakage", report::leakage_json(rep), report::leakage_table(rep));
  return 0;
}

int cmd_privacy(const RunConfig& c) {
  auto l = load_trained(c.checkpoint);
  const auto corpus = load_corpus(l.run);
  const auto [train_rows, test_rows] = rows_of(l, corpus);
  const auto members = train::make_dataset(corpus, train_rows, l.norm);
  const auto test = train::make_dataset(corpus, test_rows, l.norm);
  experiments::TradeoffOptions o;
  o.sigmas = c.sigmas;
  o.noise_seeds = c.noise_seeds;
  o.seed = c.seed;
  o.enroll = c.enroll;
  const auto rows = experiments::privacy_tradeoff(*l.model, members, test, o);
  emit(c, "privacy_tradeoff", report::tradeoff_json(rows), report::tradeoff_table(rows));
  return 0;
}

int cmd_energy(const RunConfig& c) {
  eval::EnergyParams p;
  p.p_active_mw = c.p_active_mw;
  p.p_idle_mw = c.p_idle_mw;
  p.inference_s = c.inference_s;
  p.cadence_s = c.cadence_s;
  p.window_s = c.window_s;
  const auto r = eval::energy_report(p);
  for (const auto& a : r.audit) spdlog::warn("energy audit: {}", a);
  emit(c, "energy", report::energy_json(r), report::energy_table(r));
  return 0;
}

int cmd_bench(const RunConfig& c) {
  const std::vector<kernels::GemmSpec> specs{{32, 128, 1, 8, 4, c.seed}, {32, 128, 1, 8, 8, c.seed},
                                             {32, 128, 1, 8, 16, c.seed}, {128, 384, 1, 8, 8, c.seed}};
  Json rows = Json::array();
  report::Table t{{"op", "m", "k", "n", "b_bits", "ns_per_call", "bytes_weights", "checksum"}, {}};
  for (const auto& s : specs) {
    const auto b = kernels::bench_kernel(s, static_cast<std::size_t>(c.bench_iterations));
    rows.push_back({{"op", b.op_name},
                    {"m", s.m},
                    {"k", s.k},
                    {"n", s.n},
                    {"b_bits", s.b_bits},
                    {"ns_per_call", b.ns_per_call},
                    {"bytes_weights", b.bytes_weights},
                    {"checksum", b.checksum}});
    t.rows.push_back({b.op_name, static_cast<long long>(s.m), static_cast<long long>(s.k),
                      static_cast<long long>(s.n), static_cast<long long>(s.b_bits), b.ns_per_call,
                      static_cast<long long>(b.bytes_weights), static_cast<long long>(b.checksum)});
  }
  // End-to-end encoder latency on one window, float and INT8 paths.
  model::MpibModel m(model::ModelConfig{}, c.seed);
  Rng rng = make_rng(c.seed, "bench");
  std::normal_distribution<double> nd;
  nn::Mat x(1, static_cast<Eigen::Index>(features::kWindowFrames) * features::kMelBands);
  for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = nd(rng);
  m.encoder.calibrate_ptq(x, features::kWindowFrames);
  Json enc;
  for (auto mode : {model::EncoderMode::fp16, model::EncoderMode::int8_ptq}) {
    const int iters = std::max(1, c.bench_iterations / 10);
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < iters; ++i) m.encoder.forward(x, features::kWindowFrames, mode, false, rng);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() / iters;
    enc[model::to_string(mode)] = ms;
    t.rows.push_back({"encoder_" + model::to_string(mode), 0LL, 0LL, 1LL, 0LL, ms * 1e6, 0LL, 0LL});
  }
  Json r;
  r["kernels"] = rows;
  r["encoder_ms_per_window"] = enc;
  emit(c, "bench", r, t);
  return 0;
}

int dispatch(const RunConfig& c) {
  if (c.command == "synth") return cmd_synth(c);
  if (c.command == "pretrain") return cmd_pretrain(c);
  if (c.command == "train") return cmd_train(c);
  if (c.command == "eval") return cmd_eval(c);
  if (c.command == "sweep") return cmd_sweep(c);
  if (c.command == "leakage") return cmd_leakage(c);
  if (c.command == "privacy-tradeoff") return cmd_privacy(c);
  if (c.command == "energy") return cmd_energy(c);
  if (c.command == "bench") return cmd_bench(c);
  throw config::ConfigError({"unknown command '" + c.command + "'"});
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("mpib"));
  CLI::App app{"Mixed-precision trait/state voice embedding toolkit"};
  app.require_subcommand(1, 1);
  std::string config_path, out, format;
  std::optional<std::uint64_t> seed;
  bool verbose = false;
  app.add_option("--config", config_path, "JSON run configuration");
  app.add_option("--seed", seed, "root seed (overrides the config)");
  app.add_option("--out", out, "output directory (overrides the config)");
  app.add_option("--format", format, "report format: json or csv")->check(CLI::IsMember({"json", "csv"}));
  app.add_flag("-v,--verbose", verbose, "debug logging");
  for (const auto& name : config::commands()) app.add_subcommand(name, "run " + name)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);
  const std::string command = app.get_subcommands().front()->get_name();

  RunConfig cfg;
  try {
    if (const char* t = std::getenv("MPIB_THREADS")) {
      char* end = nullptr;
      const long n = std::strtol(t, &end, 10);
      if (end == t || *end != '\0' || n < 1) throw config::ConfigError({"MPIB_THREADS must be a positive integer"});
      Eigen::setNbThreads(static_cast<int>(n));
    }
    if (!config_path.empty()) {
      cfg = config::load_config(config_path, command);
    } else {
      cfg.command = command;
    }
    if (seed) cfg.seed = *seed;
    if (!out.empty()) cfg.out = out;
    if (!format.empty()) cfg.format = format;
    config::require_valid(cfg);
  } catch (const config::ConfigError& e) {
    for (const auto& msg : e.errors()) std::cerr << "config error: " << msg << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  spdlog::info("resolved config: {}", config::to_json(cfg).dump());

  try {
    return dispatch(cfg);
  } catch (const config::ConfigError& e) {
    for (const auto& msg : e.errors()) std::cerr << "config error: " << msg << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}
