// SPDX-License-Identifier: Apache-2.0
/**
 * @file synth.hpp
 * @brief Parametric trait/state spectrogram corpus with known ground truth, plus
 *        speaker-independent folds and session-based splits.
 */
#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <vector>

#include "mpib/features.hpp"

namespace mpib::synth {

struct SynthConfig {
  int n_speakers = 120;
  int sessions = 4;
  int windows_per_session = 20;
  double agitation_mean = 1.42;
  double agitation_std = 0.89;
  double autocorrelation = 0.7;  // lag-1, within a session
  double noise_fraction = 0.123;
  std::uint64_t seed = 1;
};

struct SpeakerFactors {
  double base_pitch_offset = 0.0;  // mel-bin position of the lowest harmonic
  double harmonic_spacing = 10.0;
  std::uint64_t formant_pattern_seed = 0;
  double energy_bias = 0.0;  // dB
  double spectral_tilt = 0.0;  // dB across the band
  double mean_agitation = 1.42;
  int pseudo_demographic = 0;
};

/// Monotone state gains derived from an agitation value.
struct StateFactors {
  double agitation = 0.0;
  double pitch_variance_gain = 0.0;
  double rate_gain = 0.0;
  double energy_variance_gain = 0.0;
  static StateFactors from_agitation(double a);
};

struct CorpusSample {
  int sample_id = 0;
  int speaker_id = 0;
  int session = 1;  // 1-based
  int index = 0;    // window position within the session
  std::int64_t timestamp = 0;  // seconds
  double agitation = 0.0;
  int pseudo_demographic = 0;
  bool noisy = false;  // broadband noise was injected
  features::FeatureMatrix features;  // kWindowFrames x kMelBands, dB scale
};

struct Corpus {
  std::vector<SpeakerFactors> speakers;
  std::vector<CorpusSample> samples;  // ordered by speaker, session, index
};

Corpus generate_corpus(const SynthConfig& cfg);

/// Renders one window; exposed so tests can probe the generator contract directly.
features::FeatureMatrix render_window(const SpeakerFactors& spk, double session_level, double session_tilt,
                                      const StateFactors& state, bool inject_noise, std::uint64_t seed);

/// Frame-to-frame variance of total band energy (dB), the generator's agitation statistic.
double band_energy_variance(const features::FeatureMatrix& f);

/// Fold index per speaker id (size n_speakers), stratified on speaker mean-agitation quantile.
std::vector<int> speaker_independent_folds(const Corpus& corpus, int k, std::uint64_t seed);

struct SessionSplit {
  std::vector<std::size_t> train, test, unused;  // sample indices
};
SessionSplit temporal_split(const Corpus& corpus, const std::set<int>& train_sessions = {1, 2},
                            const std::set<int>& test_sessions = {4});

/// Writes manifest.csv plus one MPIB feature cache per sample under @p dir.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
/// Reads a corpus written by write_corpus (speaker factors are not persisted).
Corpus read_corpus(const std::filesystem::path& dir);

}  // namespace mpib::synth
