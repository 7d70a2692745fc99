// SPDX-License-Identifier: Apache-2.0
/**
 * @file features.hpp
 * @brief Log-Mel front end, global normalization and the feature cache format.
 */
#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

namespace mpib::features {

inline constexpr int kSampleRate = 16000;
inline constexpr int kMelBands = 96;
inline constexpr int kWindowFrames = 64;
inline constexpr double kDbFloor = -80.0;
inline constexpr double kDbCeil = 0.0;

struct AudioClip {
  std::vector<double> samples;
  int sample_rate = kSampleRate;
};

/// Row-major [rows x cols] real matrix; rows are time frames, cols are mel bands.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  FeatureMatrix() = default;
  FeatureMatrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), values(r * c, fill) {}

  double& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
};

struct GlobalNormStats {
  double mean = 0.0;
  double std = 1.0;
  std::size_t n_frames_fitted = 0;
};

/// Number of frames produced for a signal of @p len samples.
std::size_t frame_count(std::size_t len, std::size_t win, std::size_t hop);

/// HTK mel scale conversions.
double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Triangular filterbank [n_mels x (n_fft/2+1)] spanning 0..sr/2 on the HTK scale.
std::vector<std::vector<double>> mel_filterbank(int n_mels, int n_fft, int sample_rate);

/// Periodic Hann window of length n.
std::vector<double> hann_window(std::size_t n);

FeatureMatrix compute_logmel(const AudioClip& clip, int n_mels = kMelBands,
                             double win_ms = 25.0, double hop_ms = 10.0);

GlobalNormStats fit_global_norm(std::span<const FeatureMatrix> train_features);
FeatureMatrix apply_norm(const FeatureMatrix& f, const GlobalNormStats& stats);
FeatureMatrix invert_norm(const FeatureMatrix& f, const GlobalNormStats& stats);

/// Splits a feature matrix into consecutive model windows of @p frames rows.
std::vector<FeatureMatrix> slice_windows(const FeatureMatrix& f, std::size_t frames = kWindowFrames,
                                         std::size_t stride = kWindowFrames);

AudioClip read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const AudioClip& clip);

void write_feature_cache(const std::filesystem::path& path, const FeatureMatrix& f);
FeatureMatrix read_feature_cache(const std::filesystem::path& path);

}  // namespace mpib::features
