// SPDX-License-Identifier: Apache-2.0
/**
 * @file eval.hpp
 * @brief Identity-leakage metrics, statistics and the capacity/size/energy calculators.
 */
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mpib/nn.hpp"

namespace mpib::eval {

using nn::Mat;

// ---------------------------------------------------------------- identification

struct Trial {
  int probe = 0;    // row index of the probe embedding
  int claimed = 0;  // claimed speaker label
  bool target = false;
  double score = 0.0;
};

/// Enrolled centroids (mean of the first @p enroll rows of each speaker, in row order),
/// probe rows and the all-vs-all trial list (every probe against every enrolled speaker).
struct TrialList {
  std::vector<int> speakers;        // enrolled speaker labels
  Mat centroids;                    // [speakers x dim]
  std::vector<int> probes;          // probe row indices
  std::vector<int> probe_speaker;   // index into speakers for each probe
  std::vector<Trial> trials;
};

TrialList build_trials(const Mat& embs, std::span<const int> labels, int enroll = 3);

struct TopK {
  double top1 = 0.0;
  double top5 = 0.0;
  std::size_t n_probes = 0;
  std::size_t n_speakers = 0;
};

/// Cosine scoring against enrolled centroids; top-k hit rates over probes.
TopK topk_identification(const Mat& embs, std::span<const int> labels, int enroll = 3);
TopK topk_from_trials(const TrialList& t);
/// Per-probe hit indicators for k = 1 and k = 5 (used by the bootstrap).
std::pair<std::vector<double>, std::vector<double>> topk_hits(const TrialList& t);

/// Accept when score >= threshold; linear interpolation at the FAR/FRR crossing.
double compute_eer(std::span<const double> scores, std::span<const std::uint8_t> is_target);
double compute_eer(const std::vector<Trial>& trials);

/// Mixed continuous/discrete k-NN mutual information in bits with a Miller-Madow
/// corrected label-entropy term. Classes with <= k samples are excluded.
double knn_mi(const Mat& embs, std::span<const int> labels, int k = 3);

// ---------------------------------------------------------------- statistics

/// ROC-AUC as the Mann-Whitney probability P(score_pos > score_neg) + 0.5 P(tie).
double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> positive);

/// Average ranks (1-based) with ties sharing the mean rank.
std::vector<double> average_ranks(std::span<const double> x);
double pearson(std::span<const double> a, std::span<const double> b);
double spearman_rho(std::span<const double> pred, std::span<const double> target);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};
using IndexStat = std::function<double(std::span<const std::size_t>)>;
/// Percentile bootstrap over resampled index sets of size @p n.
Interval bootstrap_ci(const IndexStat& stat, std::size_t n, int resamples = 1000, double level = 0.95,
                      std::uint64_t seed = 1);
/// Convenience form for a statistic of a real sample.
Interval bootstrap_ci(const std::function<double(std::span<const double>)>& stat, std::span<const double> data,
                      int resamples = 1000, double level = 0.95, std::uint64_t seed = 1);

/// Two-tailed paired signed-rank test; exact null for n <= 25 after dropping zeros.
double wilcoxon_paired(std::span<const double> a, std::span<const double> b);

// ---------------------------------------------------------------- calculators

long capacity_bits(int dim, int bits);

struct SizeComponent {
  std::string name;
  std::size_t params = 0;
  int bits = 16;
};
struct SizeRow {
  std::string name;
  std::size_t params = 0;
  int bits = 16;
  double bytes = 0.0;
  double kb = 0.0;  // decimal kilobytes
};
struct SizeReport {
  std::vector<SizeRow> rows;
  double total_bytes = 0.0;
  double total_kb = 0.0;
};
SizeReport model_size_report(const std::vector<SizeComponent>& components);

struct EnergyParams {
  double p_active_mw = 110.0;
  double p_idle_mw = 15.0;
  double inference_s = 0.0234;
  double cadence_s = 5.0;
  double window_s = 0.640;
  void validate() const;
};

struct EnergyReport {
  double inferences_per_day = 0.0;
  double duty_cycle = 0.0;
  double e_per_inference_mJ = 0.0;
  // per-inference accounting: active time = inferences x inference_s
  double daily_active_J = 0.0;
  double daily_active_mWh = 0.0;
  double daily_idle_mWh = 0.0;
  double daily_total_mWh = 0.0;
  double annual_Wh = 0.0;
  // duty-cycle accounting: active time = duty x 24 h
  double duty_daily_active_mWh = 0.0;
  double duty_daily_idle_mWh = 0.0;
  double duty_daily_total_mWh = 0.0;
  double duty_annual_Wh = 0.0;
  std::vector<std::string> audit;  // unit-consistency findings
};
EnergyReport energy_report(const EnergyParams& p);

}  // namespace mpib::eval
