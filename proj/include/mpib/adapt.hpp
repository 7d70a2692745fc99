// SPDX-License-Identifier: Apache-2.0
/**
 * @file adapt.hpp
 * @brief Uncertainty-gated state precision (DPS) and multi-scale temporal fusion (MSTF).
 */
#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "mpib/features.hpp"
#include "mpib/model.hpp"

namespace mpib::adapt {

using nn::Mat;

enum class UncertaintyStat { state_pre, agitation };

struct DpsConfig {
  int b_base = 4;
  int delta_b = 2;
  int passes = 10;
  double gate_threshold = 0.5;
  double window_s = 5.0;
  double subwindow_ms = 100.0;
  int calibration_window = 500;  // windows kept for the running UC mean/std
  UncertaintyStat stat = UncertaintyStat::state_pre;
  void validate() const;
  int subwindows() const;
};

/// Mean across-pass variance (unbiased, over passes) of the chosen statistic with dropout
/// active, one value per input row. Calibration state of the model is left untouched.
std::vector<double> estimate_uncertainty(model::MpibModel& m, const Mat& x, int frames, int passes, Rng& rng,
                                         UncertaintyStat stat = UncertaintyStat::state_pre);
double estimate_uncertainty_one(model::MpibModel& m, const Mat& x_row, int frames, int passes, Rng& rng,
                                UncertaintyStat stat = UncertaintyStat::state_pre);

/// Running mean/std of UC over the last N windows.
class UcNormalizer {
 public:
  explicit UcNormalizer(int capacity = 500) : cap_(capacity) {}
  void push(double uc);
  double mean() const;
  double stddev() const;  // population std over the window
  std::size_t size() const { return buf_.size(); }

 private:
  int cap_;
  std::deque<double> buf_;
};

/// Binary gate: b_base + delta_b when sigmoid((uc - mu) / sigma) >= threshold, else b_base.
int effective_bitwidth(double uc, const DpsConfig& cfg, double mu, double sigma);
int effective_bitwidth(double uc, const DpsConfig& cfg, const UcNormalizer& norm);

struct UncertaintyCache {
  std::int64_t window_id = -1;
  double uc_value = 0.0;
  std::int64_t computed_at = 0;
};

struct DpsDecision {
  std::int64_t window_id = 0;
  double uc = 0.0;
  int bits = 4;
  std::string trigger_reason;  // "uc>=mean" or "below"
  bool cache_hit = false;
};

/// Per-stream scheduler: one UC computation per window, reused by every sub-window.
class DpsScheduler {
 public:
  explicit DpsScheduler(DpsConfig cfg) : cfg_(cfg), norm_(cfg.calibration_window) { cfg_.validate(); }
  /// @p compute is invoked only on a cache miss.
  template <class F>
  DpsDecision decide(std::int64_t window_id, std::int64_t now, F&& compute) {
    DpsDecision d;
    d.window_id = window_id;
    if (cache_.window_id == window_id) {
      d.cache_hit = true;
      ++hits_;
    } else {
      cache_ = {window_id, compute(), now};
      norm_.push(cache_.uc_value);
      ++misses_;
    }
    d.uc = cache_.uc_value;
    d.bits = effective_bitwidth(d.uc, cfg_, norm_);
    d.trigger_reason = d.bits > cfg_.b_base ? "uc>=mean" : "below";
    return d;
  }
  double hit_rate() const;
  const UncertaintyCache& cache() const { return cache_; }

 private:
  DpsConfig cfg_;
  UcNormalizer norm_;
  UncertaintyCache cache_;
  long hits_ = 0, misses_ = 0;
};

/// CSV line "window_id,uc,bits,trigger_reason" (header via dps_csv_header()).
std::string dps_csv_header();
std::string dps_csv_row(const DpsDecision& d);

struct DpsTiming {
  int subwindows = 50;
  double amortized_pass_ms = 0.0;  // passes * pass_ms / subwindows
  double overhead_per_subwindow_ms = 0.0;
  double overhead_per_window_ms = 0.0;
  double total_per_subwindow_ms = 0.0;  // base + overhead
};
DpsTiming dps_timing_model(const DpsConfig& cfg, double base_ms, double pass_ms, double var_ms, double select_ms,
                           double int6_ms, double trigger_rate);

// ---------------------------------------------------------------- multi-scale fusion

struct ScaleWindows {
  static constexpr double scales_s[3] = {0.5, 2.0, 10.0};
  static constexpr double overlaps[3] = {0.5, 0.25, 0.10};
};

struct Segment {
  std::size_t start = 0;  // first frame
  std::size_t length = 0;
};

/// hop = scale * (1 - overlap); tail windows shorter than scale are dropped.
std::vector<Segment> segment_windows(std::size_t n_frames, double scale_s, double overlap,
                                     double frame_rate = 100.0);
std::vector<features::FeatureMatrix> segment_windows(const features::FeatureMatrix& f, double scale_s,
                                                     double overlap, double frame_rate = 100.0);

/// Multi-head self-attention over the three scale tokens of the state embedding.
class MstfAttention {
 public:
  MstfAttention() = default;
  MstfAttention(int state_dim, int model_dim, int heads, Rng& rng);

  struct Output {
    nn::RowVec state;               // fused state (mean of the attended tokens)
    nn::RowVec trait;               // mean of the trait tokens
    std::vector<Mat> attention;     // per head [3 x 3], rows sum to 1
  };
  Output fuse(const std::vector<nn::RowVec>& state_embs, const std::vector<nn::RowVec>& trait_embs) const;

  std::size_t param_count() const;
  int heads() const { return heads_; }
  nn::Linear q, k, v, o;

 private:
  int heads_ = 4;
};

}  // namespace mpib::adapt
