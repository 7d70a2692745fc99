// SPDX-License-Identifier: Apache-2.0
/**
 * @file experiments.hpp
 * @brief Experiment protocols on the synthetic corpus: speaker-independent fold runs,
 *        the state bit-width sweep, leakage and privacy trade-off reports, and the
 *        temporal-stability protocol.
 */
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mpib/eval.hpp"
#include "mpib/model.hpp"
#include "mpib/privacy.hpp"
#include "mpib/synth.hpp"
#include "mpib/train.hpp"

namespace mpib::experiments {

/// One state-head configuration (bits 16 means unquantized).
struct Arm {
  int bits = 4;
  int dim = 32;
  std::string label() const;  // e.g. "INT4-32", "FP16-8"
  long capacity() const { return eval::capacity_bits(dim, bits); }
};

/// The capacity-matched configurations that all carry 128 state bits.
std::vector<Arm> capacity_matched_arms();

struct ProtocolOptions {
  std::string preset = "impl";  // loss weights and optimizer preset
  int epochs = 0;               // 0: the preset's epoch count
  int pretrain_epochs = 0;      // 0: no masked-patch pretraining
  std::uint64_t seed = 1;
  int enroll = 3;
  int folds = 5;
  int bootstrap = 1000;
  model::EncoderMode mode = model::EncoderMode::fp16;
};

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Speaker-independent k-fold splits (sample row indices into the corpus).
std::vector<Split> fold_splits(const synth::Corpus& corpus, int k, std::uint64_t seed);

/// Held-out metrics of one trained model.
struct EvalResult {
  double rho = 0.0;
  double top1 = 0.0;
  double top5 = 0.0;
  double eer = 0.5;
  double mi_bits = 0.0;
  double trait_top1 = 0.0;
  double trait_eer = 0.5;
  std::vector<double> pred, truth;  // agitation predictions / labels per test row
  std::vector<double> hits1;        // per-probe top-1 hit (state embedding)
  std::vector<eval::Trial> trials;  // state-embedding trials
};
EvalResult evaluate(model::MpibModel& m, const train::Dataset& test, int enroll, bool with_mi = true);

/// Encoder pretrained with masked patches on a separate corpus (never the evaluation corpus).
struct Pretrained {
  std::unique_ptr<model::MpibModel> model;
  std::vector<double> losses;
};
Pretrained pretrain_encoder(const synth::Corpus& pretrain_corpus, int epochs, std::uint64_t seed);

struct TrainedArm {
  std::unique_ptr<model::MpibModel> model;
  features::GlobalNormStats norm;
  std::vector<train::EpochLog> logs;
};

train::TrainOptions make_train_options(const Arm& arm, const ProtocolOptions& o, std::uint64_t seed);

/// Trains one arm on @p train_rows; the encoder starts from @p init when given.
TrainedArm train_arm(const synth::Corpus& corpus, const std::vector<std::size_t>& train_rows, const Arm& arm,
                     const ProtocolOptions& o, std::uint64_t seed, model::MpibModel* init = nullptr);

struct FoldRun {
  int fold = 0;
  Arm arm;
  EvalResult result;
};
using FoldCallback = std::function<void(const FoldRun&)>;

/// Trains and evaluates @p arm on each listed fold (all folds when @p fold_ids is empty).
std::vector<FoldRun> run_folds(const synth::Corpus& corpus, const std::vector<Split>& splits, const Arm& arm,
                               const ProtocolOptions& o, const std::vector<int>& fold_ids = {},
                               model::MpibModel* init = nullptr, const FoldCallback& cb = {});

struct Metric {
  double value = 0.0;  // mean over folds
  double pooled = 0.0;  // statistic over pooled test items
  eval::Interval ci;    // percentile bootstrap of the pooled statistic
};

struct SweepRow {
  int bits = 16;
  int dim = 32;
  long capacity = 0;
  Metric rho, top1, eer;
  std::vector<double> fold_rho, fold_top1, fold_eer;
};

struct SweepReport {
  std::vector<SweepRow> rows;
};

SweepRow summarize(const Arm& arm, const std::vector<FoldRun>& runs, int resamples, std::uint64_t seed);

/// Trains each configuration from the same pretrained encoder (when given) and summarizes.
SweepReport run_bitwidth_sweep(const synth::Corpus& corpus, const std::vector<Arm>& arms, const ProtocolOptions& o,
                               const std::vector<int>& fold_ids = {}, model::MpibModel* init = nullptr,
                               const FoldCallback& cb = {});
std::vector<Arm> arms_for_bits(const std::vector<int>& bits, int dim = 32);

struct LeakageMetrics {
  double top1 = 0.0, top5 = 0.0, eer = 0.5, mi_bits = 0.0, mia_auc = 0.5;
  eval::Interval top1_ci, top5_ci, eer_ci, mia_auc_ci;
};
struct LeakageReport {
  LeakageMetrics state, trait;
};
/// Identification, verification, MI and membership-inference metrics of both embeddings.
LeakageReport leakage_report(model::MpibModel& m, const train::Dataset& members, const train::Dataset& test,
                             int enroll, int resamples, std::uint64_t seed);

struct TradeoffOptions {
  std::vector<double> sigmas{0.0, 25.3, 253.0};
  int noise_seeds = 5;      // noise draws averaged per sigma (common across sigmas)
  std::size_t mia_rows = 600;  // per class
  std::uint64_t seed = 1;
  int enroll = 3;
};
/// Adds trait-embedding noise at each sigma and re-measures identification and MIA.
/// rho comes from the state path, which the trait noise does not touch.
std::vector<privacy::TradeoffRow> privacy_tradeoff(model::MpibModel& m, const train::Dataset& members,
                                                   const train::Dataset& test, const TradeoffOptions& o);

struct TemporalResult {
  double rho_in_session = 0.0;  // test speakers, training-era sessions
  double rho_later = 0.0;       // test speakers, later session
  double relative_drop = 0.0;   // 1 - later / in_session
  double reonboard_fraction = 0.0;  // profiles flagged by the drift check on the later session
  std::size_t profiles = 0;
};
/// Trains on sessions @p train_sessions of the training speakers of one fold and compares
/// held-out rho on those sessions with rho on @p test_session. Trait profiles are
/// onboarded from the first session and frozen.
TemporalResult temporal_protocol(const synth::Corpus& corpus, const Split& split, const Arm& arm,
                                 const ProtocolOptions& o, const std::vector<int>& train_sessions = {1, 2},
                                 int test_session = 4, model::MpibModel* init = nullptr,
                                 double drift_threshold = 0.3);

}  // namespace mpib::experiments
