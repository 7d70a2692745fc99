// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <numbers>
#include <random>

#include "mpib/common.hpp"
#include "mpib/features.hpp"

using namespace mpib;
using namespace mpib::features;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "mpib_unit";
  std::filesystem::create_directories(dir);
  return dir / name;
}

AudioClip tone_clip(double hz, double seconds, double amp, std::uint64_t seed) {
  AudioClip c;
  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, 1e-3);
  const auto n = static_cast<std::size_t>(seconds * kSampleRate);
  c.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    c.samples[i] = amp * std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(i) / kSampleRate) + noise(rng);
  }
  return c;
}

}  // namespace

TEST(Mel, HtkScale) {
  EXPECT_NEAR(hz_to_mel(700.0), 2595.0 * std::log10(2.0), 1e-9);
  for (double hz : {0.0, 100.0, 1000.0, 4000.0, 8000.0}) EXPECT_NEAR(mel_to_hz(hz_to_mel(hz)), hz, 1e-7);
}

TEST(Mel, FilterbankShape) {
  const auto fb = mel_filterbank(96, 512, kSampleRate);
  ASSERT_EQ(fb.size(), 96u);
  for (const auto& f : fb) {
    ASSERT_EQ(f.size(), 257u);
    double peak = 0.0;
    for (double w : f) {
      EXPECT_GE(w, 0.0);
      EXPECT_LE(w, 1.0);
      peak = std::max(peak, w);
    }
    EXPECT_GT(peak, 0.0);
  }
}

TEST(Framing, CountsAndWindow) {
  EXPECT_EQ(frame_count(400, 400, 160), 1u);
  EXPECT_EQ(frame_count(399, 400, 160), 0u);
  EXPECT_EQ(frame_count(16000, 400, 160), 98u);
  const auto w = hann_window(8);
  EXPECT_NEAR(w[0], 0.0, 1e-15);
  EXPECT_NEAR(w[4], 1.0, 1e-15);
  EXPECT_NEAR(w[2], 0.5, 1e-15);
}

TEST(LogMel, MatchesNaiveDft) {
  const AudioClip clip = tone_clip(440.0, 0.2, 0.3, 5);
  const FeatureMatrix fm = compute_logmel(clip);
  ASSERT_EQ(fm.rows, frame_count(clip.samples.size(), 400, 160));
  ASSERT_EQ(fm.cols, 96u);

  // Independent oracle for frame 3: direct O(N^2) DFT of the zero-padded windowed frame.
  const std::size_t win = 400, nfft = 512, hop = 160, t = 3;
  std::vector<double> frame(nfft, 0.0);
  double wsum = 0.0;
  for (std::size_t i = 0; i < win; ++i) {
    const double w = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / win);
    wsum += w;
    frame[i] = clip.samples[t * hop + i] * w;
  }
  std::vector<double> power(nfft / 2 + 1);
  for (std::size_t k = 0; k < power.size(); ++k) {
    std::complex<double> acc = 0.0;
    for (std::size_t i = 0; i < nfft; ++i) acc += frame[i] * std::polar(1.0, -2.0 * std::numbers::pi * k * i / nfft);
    power[k] = std::norm(acc) / (wsum * wsum);
  }
  const auto fb = mel_filterbank(96, 512, kSampleRate);
  for (std::size_t m = 0; m < 96; ++m) {
    double e = 0.0;
    for (std::size_t k = 0; k < power.size(); ++k) e += fb[m][k] * power[k];
    const double db = std::clamp(10.0 * std::log10(std::max(e, 1e-10)), kDbFloor, kDbCeil);
    EXPECT_NEAR(fm.at(t, m), db, 1e-8) << "band " << m;
  }
}

TEST(LogMel, ToneLandsInItsBand) {
  const FeatureMatrix fm = compute_logmel(tone_clip(1000.0, 0.5, 0.5, 1));
  const auto fb = mel_filterbank(96, 512, kSampleRate);
  const std::size_t bin = 32;  // 1000 Hz at 31.25 Hz per bin
  std::size_t best_band = 0;
  for (std::size_t m = 1; m < fb.size(); ++m) {
    if (fb[m][bin] > fb[best_band][bin]) best_band = m;
  }
  std::size_t argmax = 0;
  for (std::size_t m = 1; m < fm.cols; ++m) {
    if (fm.at(10, m) > fm.at(10, argmax)) argmax = m;
  }
  EXPECT_LE(std::abs(static_cast<long>(argmax) - static_cast<long>(best_band)), 1);
  for (double v : fm.values) {
    EXPECT_GE(v, kDbFloor);
    EXPECT_LE(v, kDbCeil);
  }
}

TEST(LogMel, RejectsBadInput) {
  AudioClip c = tone_clip(300.0, 0.1, 0.1, 2);
  c.sample_rate = 8000;
  EXPECT_THROW(compute_logmel(c), Error);
  AudioClip short_clip;
  short_clip.samples.assign(100, 0.0);
  EXPECT_THROW(compute_logmel(short_clip), Error);
  AudioClip nan_clip = tone_clip(300.0, 0.1, 0.1, 2);
  nan_clip.samples[50] = std::nan("");
  EXPECT_THROW(compute_logmel(nan_clip), Error);
}

TEST(Norm, PooledStatsMatchDirect) {
  Rng rng(9);
  std::normal_distribution<double> d(-30.0, 12.0);
  std::vector<FeatureMatrix> mats;
  std::vector<double> all;
  for (std::size_t r : {5u, 17u, 64u}) {
    FeatureMatrix f(r, 96);
    for (double& v : f.values) {
      v = d(rng);
      all.push_back(v);
    }
    mats.push_back(f);
  }
  double mean = 0.0;
  for (double v : all) mean += v;
  mean /= static_cast<double>(all.size());
  double var = 0.0;
  for (double v : all) var += (v - mean) * (v - mean);
  var /= static_cast<double>(all.size());
  const auto st = fit_global_norm(mats);
  EXPECT_NEAR(st.mean, mean, 1e-9);
  EXPECT_NEAR(st.std, std::sqrt(var), 1e-9);
  EXPECT_EQ(st.n_frames_fitted, 86u);
  const auto back = invert_norm(apply_norm(mats[1], st), st);
  for (std::size_t i = 0; i < back.values.size(); ++i) EXPECT_NEAR(back.values[i], mats[1].values[i], 1e-9);

  std::vector<FeatureMatrix> flat{FeatureMatrix(4, 4, -3.0)};
  EXPECT_THROW(fit_global_norm(flat), Error);
}

TEST(Windows, SliceCoversConsecutiveRows) {
  FeatureMatrix f(200, 3);
  for (std::size_t i = 0; i < f.values.size(); ++i) f.values[i] = static_cast<double>(i);
  const auto w = slice_windows(f, 64, 64);
  ASSERT_EQ(w.size(), 3u);
  EXPECT_EQ(w[2].at(0, 0), f.at(128, 0));
  EXPECT_EQ(w[1].at(63, 2), f.at(127, 2));
  EXPECT_TRUE(slice_windows(FeatureMatrix(10, 3), 64, 64).empty());
}

TEST(Io, WavRoundTrip) {
  AudioClip c = tone_clip(220.0, 0.05, 0.7, 3);
  const auto p = temp_path("rt.wav");
  write_wav(p, c);
  EXPECT_EQ(std::filesystem::file_size(p), 44u + 2 * c.samples.size());
  const AudioClip back = read_wav(p);
  ASSERT_EQ(back.samples.size(), c.samples.size());
  for (std::size_t i = 0; i < c.samples.size(); ++i) EXPECT_NEAR(back.samples[i], c.samples[i], 1.0 / 32768.0);
}

TEST(Io, FeatureCacheRoundTrip) {
  FeatureMatrix f(7, 96);
  for (std::size_t i = 0; i < f.values.size(); ++i) f.values[i] = -0.5 * static_cast<double>(i);
  const auto p = temp_path("rt.mpfc");
  write_feature_cache(p, f);
  const FeatureMatrix back = read_feature_cache(p);
  EXPECT_EQ(back.rows, 7u);
  EXPECT_EQ(back.cols, 96u);
  EXPECT_EQ(back.values, f.values);
  EXPECT_THROW(read_feature_cache(temp_path("missing.mpfc")), Error);
}
