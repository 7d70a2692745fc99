// SPDX-License-Identifier: Apache-2.0
#include "mpib/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "mpib/common.hpp"

namespace mpib::synth {

namespace {

constexpr double kFrameRate = 100.0;  // frames per second at a 10 ms hop
constexpr std::int64_t kWindowCadence = 5;  // seconds between windows
// Session start offsets in days; the fourth session sits three weeks after the third.
constexpr std::int64_t kSessionDay[] = {0, 7, 14, 35, 42, 49, 56, 63};

struct Formant {
  double center, width, amp;
};

std::vector<Formant> formants_for(std::uint64_t seed) {
  Rng r(seed);
  std::uniform_real_distribution<double> c(8.0, 88.0), w(4.0, 10.0), a(6.0, 15.0);
  std::vector<Formant> f(3);
  for (auto& x : f) x = {c(r), w(r), a(r)};
  return f;
}

}  // namespace

StateFactors StateFactors::from_agitation(double a) {
  StateFactors s;
  s.agitation = a;
  s.pitch_variance_gain = 0.4 + 0.6 * a;
  s.rate_gain = 3.0 + 1.0 * a;
  s.energy_variance_gain = 1.0 + 1.0 * a;
  return s;
}

features::FeatureMatrix render_window(const SpeakerFactors& spk, double session_level, double session_tilt,
                                      const StateFactors& st, bool inject_noise, std::uint64_t seed) {
  const int t_n = features::kWindowFrames, f_n = features::kMelBands;
  Rng r(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  const auto fm = formants_for(spk.formant_pattern_seed);
  std::vector<double> env(static_cast<std::size_t>(f_n));
  for (int f = 0; f < f_n; ++f) {
    const double x = f / static_cast<double>(f_n - 1) - 0.5;
    // Arousal raises high-band energy relative to low-band energy.
    double e = (spk.spectral_tilt + session_tilt + 8.0 * (st.agitation - 1.42)) * x;
    for (const auto& p : fm) e += p.amp * std::exp(-0.5 * std::pow((f - p.center) / p.width, 2));
    env[static_cast<std::size_t>(f)] = e;
  }

  const double phase = 2.0 * std::numbers::pi * unif(r);
  const double depth = 2.0 + 1.5 * st.agitation;
  double drift = 0.0;
  features::FeatureMatrix out(static_cast<std::size_t>(t_n), static_cast<std::size_t>(f_n));
  for (int t = 0; t < t_n; ++t) {
    drift = 0.8 * drift + 0.6 * st.pitch_variance_gain * gauss(r);
    const double pitch = spk.base_pitch_offset + drift;
    const double level = spk.energy_bias + session_level + 1.2 * st.agitation +
                         depth * std::sin(2.0 * std::numbers::pi * st.rate_gain * t / kFrameRate + phase) +
                         st.energy_variance_gain * gauss(r);
    for (int f = 0; f < f_n; ++f) {
      double comb = 0.02 * (1.0 + 1.5 * st.agitation);  // breathy inter-harmonic fill
      for (double pos = pitch; pos < f_n + 4.0; pos += spk.harmonic_spacing) {
        comb += std::exp(-0.5 * std::pow((f - pos) / 1.5, 2));
      }
      double p = std::pow(10.0, (level + env[static_cast<std::size_t>(f)] - 30.0) / 10.0) * comb + 1e-7;
      if (inject_noise) p += std::pow(10.0, -3.0) * -std::log(1.0 - unif(r));
      const double db = 10.0 * std::log10(p) + 0.5 * gauss(r);
      out.at(static_cast<std::size_t>(t), static_cast<std::size_t>(f)) =
          std::clamp(db, features::kDbFloor, features::kDbCeil);
    }
  }
  return out;
}

double band_energy_variance(const features::FeatureMatrix& f) {
  if (f.rows < 3) throw Error("insufficient frames");
  std::vector<double> e(f.rows);
  for (std::size_t t = 0; t < f.rows; ++t) {
    double s = 0.0;
    for (double v : f.row(t)) s += std::pow(10.0, v / 10.0);
    e[t] = 10.0 * std::log10(s);
  }
  double mean = 0.0;
  for (std::size_t t = 1; t < e.size(); ++t) mean += e[t] - e[t - 1];
  mean /= static_cast<double>(e.size() - 1);
  double var = 0.0;
  for (std::size_t t = 1; t < e.size(); ++t) var += std::pow(e[t] - e[t - 1] - mean, 2);
  return var / static_cast<double>(e.size() - 2);
}

Corpus generate_corpus(const SynthConfig& cfg) {
  if (cfg.n_speakers < 10) throw Error("need at least 10 speakers");
  if (cfg.sessions < 1 || cfg.sessions > 8) throw Error("sessions must be in [1, 8]");
  if (cfg.windows_per_session < 1) throw Error("windows_per_session must be >= 1");
  if (cfg.noise_fraction < 0.0 || cfg.noise_fraction > 1.0) throw Error("noise_fraction out of range");

  constexpr double kSpeakerStd = 0.25, kSessionStd = 0.25;
  const double resid = std::sqrt(std::max(0.0, cfg.agitation_std * cfg.agitation_std - kSpeakerStd * kSpeakerStd -
                                                  kSessionStd * kSessionStd));
  const double innov = resid * std::sqrt(1.0 - cfg.autocorrelation * cfg.autocorrelation);

  Corpus c;
  c.speakers.resize(static_cast<std::size_t>(cfg.n_speakers));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  int sid = 0;
  for (int s = 0; s < cfg.n_speakers; ++s) {
    Rng r = make_rng(cfg.seed, "speaker:" + std::to_string(s));
    SpeakerFactors& spk = c.speakers[static_cast<std::size_t>(s)];
    spk.base_pitch_offset = 4.0 + 10.0 * unif(r);
    spk.harmonic_spacing = 8.0 + 6.0 * unif(r);
    spk.formant_pattern_seed = r();
    spk.energy_bias = 3.0 * gauss(r);
    spk.spectral_tilt = 3.0 * gauss(r);
    spk.mean_agitation = std::clamp(cfg.agitation_mean + kSpeakerStd * gauss(r), 0.0, 4.0);
    spk.pseudo_demographic = unif(r) < 0.5 ? 0 : 1;

    for (int sess = 1; sess <= cfg.sessions; ++sess) {
      const double level = 1.5 * gauss(r);
      const double tilt = 1.0 * gauss(r);
      const double offset = kSessionStd * gauss(r);
      double x = resid * gauss(r);
      for (int w = 0; w < cfg.windows_per_session; ++w) {
        if (w > 0) x = cfg.autocorrelation * x + innov * gauss(r);
        CorpusSample smp;
        smp.sample_id = sid;
        smp.speaker_id = s;
        smp.session = sess;
        smp.index = w;
        smp.timestamp = kSessionDay[sess - 1] * 86400 + static_cast<std::int64_t>(w) * kWindowCadence;
        smp.agitation = std::clamp(spk.mean_agitation + offset + x, 0.0, 4.0);
        smp.pseudo_demographic = spk.pseudo_demographic;
        smp.noisy = unif(r) < cfg.noise_fraction;
        smp.features = render_window(spk, level, tilt, StateFactors::from_agitation(smp.agitation), smp.noisy,
                                     derive_seed(cfg.seed, "window:" + std::to_string(sid)));
        c.samples.push_back(std::move(smp));
        ++sid;
      }
    }
  }
  return c;
}

std::vector<int> speaker_independent_folds(const Corpus& corpus, int k, std::uint64_t seed) {
  int n_spk = 0;
  for (const auto& s : corpus.samples) n_spk = std::max(n_spk, s.speaker_id + 1);
  if (k < 2) throw Error("k must be >= 2");
  if (k > n_spk) throw Error("k exceeds speakers");
  std::vector<double> sum(static_cast<std::size_t>(n_spk), 0.0);
  std::vector<int> cnt(static_cast<std::size_t>(n_spk), 0);
  for (const auto& s : corpus.samples) {
    sum[static_cast<std::size_t>(s.speaker_id)] += s.agitation;
    ++cnt[static_cast<std::size_t>(s.speaker_id)];
  }
  std::vector<int> order(static_cast<std::size_t>(n_spk));
  for (int i = 0; i < n_spk; ++i) order[static_cast<std::size_t>(i)] = i;
  auto mean = [&](int i) { return cnt[i] ? sum[i] / cnt[i] : 0.0; };
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return mean(a) < mean(b); });

  // Consecutive groups of k speakers form a stratum; each stratum contributes one
  // speaker to every fold, in an order shuffled per stratum.
  Rng r = make_rng(seed, "folds");
  std::vector<int> fold(static_cast<std::size_t>(n_spk), 0);
  std::vector<int> slots(static_cast<std::size_t>(k));
  std::vector<int> fill(static_cast<std::size_t>(k), 0);
  for (int start = 0; start < n_spk; start += k) {
    const int m = std::min(k, n_spk - start);
    for (int i = 0; i < k; ++i) slots[static_cast<std::size_t>(i)] = i;
    std::shuffle(slots.begin(), slots.end(), r);
    if (m < k) {
      // Partial last stratum: prefer the currently smallest folds.
      std::stable_sort(slots.begin(), slots.end(), [&](int a, int b) { return fill[a] < fill[b]; });
    }
    for (int i = 0; i < m; ++i) {
      fold[static_cast<std::size_t>(order[static_cast<std::size_t>(start + i)])] = slots[static_cast<std::size_t>(i)];
      ++fill[static_cast<std::size_t>(slots[static_cast<std::size_t>(i)])];
    }
  }
  return fold;
}

SessionSplit temporal_split(const Corpus& corpus, const std::set<int>& train_sessions,
                            const std::set<int>& test_sessions) {
  for (int s : train_sessions) {
    if (test_sessions.count(s)) throw Error("train and test sessions overlap");
  }
  SessionSplit out;
  for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
    const int s = corpus.samples[i].session;
    if (train_sessions.count(s)) {
      out.train.push_back(i);
    } else if (test_sessions.count(s)) {
      out.test.push_back(i);
    } else {
      out.unused.push_back(i);
    }
  }
  if (out.train.empty() || out.test.empty()) throw Error("empty split");
  return out;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "features");
  std::ofstream m(dir / "manifest.csv", std::ios::binary);
  if (!m) throw Error("cannot write manifest in " + dir.string());
  m << "sample_id,speaker_id,session,timestamp,agitation,pseudo_demographic,feature_file\n";
  char buf[64];
  for (const auto& s : corpus.samples) {
    std::snprintf(buf, sizeof buf, "features/s%06d.mpib", s.sample_id);
    const std::string rel = buf;
    std::snprintf(buf, sizeof buf, "%.9g", s.agitation);
    m << s.sample_id << ',' << s.speaker_id << ',' << s.session << ',' << s.timestamp << ',' << buf << ','
      << s.pseudo_demographic << ',' << rel << '\n';
    features::write_feature_cache(dir / rel, s.features);
  }
}

Corpus read_corpus(const std::filesystem::path& dir) {
  std::ifstream m(dir / "manifest.csv");
  if (!m) throw Error("cannot read manifest in " + dir.string());
  std::string line;
  std::getline(m, line);
  if (line.rfind("sample_id,speaker_id,session", 0) != 0) throw Error("bad manifest header");
  Corpus c;
  std::map<std::pair<int, int>, int> next_index;
  int n_spk = 0;
  while (std::getline(m, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::vector<std::string> f;
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 7) throw Error("bad manifest row: " + line);
    CorpusSample s;
    s.sample_id = std::stoi(f[0]);
    s.speaker_id = std::stoi(f[1]);
    s.session = std::stoi(f[2]);
    s.timestamp = std::stoll(f[3]);
    s.agitation = std::stod(f[4]);
    s.pseudo_demographic = std::stoi(f[5]);
    s.index = next_index[{s.speaker_id, s.session}]++;
    s.features = features::read_feature_cache(dir / f[6]);
    n_spk = std::max(n_spk, s.speaker_id + 1);
    c.samples.push_back(std::move(s));
  }
  c.speakers.resize(static_cast<std::size_t>(n_spk));
  return c;
}

}  // namespace mpib::synth
