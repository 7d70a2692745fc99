// SPDX-License-Identifier: Apache-2.0
/**
 * @file train.hpp
 * @brief Dataset assembly, participant-structured batching and the training loops.
 */
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mpib/features.hpp"
#include "mpib/model.hpp"
#include "mpib/synth.hpp"

namespace mpib::train {

using nn::Mat;

/// Normalized windows in model layout plus per-row labels.
struct Dataset {
  Mat x;  // [N x frames*n_mels]
  int frames = features::kWindowFrames;
  std::vector<int> participant;
  std::vector<int> session;
  std::vector<int> index;  // window position within its session
  std::vector<double> agitation;
  std::vector<std::int64_t> timestamp;
  std::vector<int> demographic;

  std::size_t size() const { return participant.size(); }
  Dataset subset(const std::vector<std::size_t>& rows) const;
};

features::GlobalNormStats fit_norm(const synth::Corpus& corpus, const std::vector<std::size_t>& rows);
Dataset make_dataset(const synth::Corpus& corpus, const std::vector<std::size_t>& rows,
                     const features::GlobalNormStats& norm);

/// Optimizer and schedule presets. "impl": lr 1e-3, wd 1e-3, 60 epochs;
/// "exp": lr 3e-4, wd 1e-4, 100 epochs. Both use batch 64 and cosine annealing.
struct OptimPreset {
  double lr = 1e-3;
  double weight_decay = 1e-3;
  int epochs = 60;
  int batch_size = 64;
  static OptimPreset named(const std::string& name);
};

struct TrainOptions {
  model::TrainConfig tc;
  double lr = 1e-3;
  double weight_decay = 1e-3;
  int epochs = 60;
  int participants_per_batch = 16;  // each contributes 2 sessions x run_length windows
  int run_length = 2;
  bool cosine = true;
  std::uint64_t seed = 1;
};

/// Batches of P participants x 2 sessions x run_length consecutive windows, so every
/// anchor has cross-session positives and smoothness has adjacent pairs.
class BatchSampler {
 public:
  BatchSampler(const Dataset& data, int participants, int run_length, std::uint64_t seed);
  /// Row indices for every batch of one epoch (covers roughly size()/batch batches).
  std::vector<std::vector<std::size_t>> epoch();
  model::Batch make(const std::vector<std::size_t>& rows) const;

 private:
  const Dataset* data_;
  int participants_, run_;
  Rng rng_;
  // participant -> session -> rows ordered by window index
  std::vector<std::vector<std::vector<std::size_t>>> groups_;
};

struct EpochLog {
  int epoch = 0;
  losses::LossBreakdown mean;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Supervised training with the composite objective. Returns one log row per epoch.
std::vector<EpochLog> fit(model::MpibModel& m, const Dataset& data, const TrainOptions& opt,
                          const EpochCallback& cb = {});

struct PretrainOptions {
  int epochs = 100;
  int batch_size = 64;
  double lr = 1e-4;
  double mask_ratio = 0.75;
  double weight_decay = 1e-3;
  std::uint64_t seed = 1;
};

/// Masked-patch pretraining of the encoder; returns the mean loss per epoch.
std::vector<double> pretrain_tmae(model::MpibModel& m, const Dataset& data, const PretrainOptions& opt);

/// Records INT8 activation ranges from up to @p max_rows training windows.
void calibrate_encoder(model::MpibModel& m, const Dataset& data, std::size_t max_rows = 512);

/// Copies encoder weights (and ranges) from @p src into @p dst.
void copy_encoder(model::MpibModel& src, model::MpibModel& dst);

}  // namespace mpib::train
