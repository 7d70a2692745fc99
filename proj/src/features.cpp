// SPDX-License-Identifier: Apache-2.0
#include "mpib/features.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numbers>

#include "mpib/common.hpp"

namespace mpib::features {

namespace {

constexpr std::uint32_t kCacheVersion = 1;
constexpr double kPowerFloor = 1e-10;

std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

}  // namespace

std::size_t frame_count(std::size_t len, std::size_t win, std::size_t hop) {
  if (len < win || hop == 0) return 0;
  return (len - win) / hop + 1;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<std::vector<double>> mel_filterbank(int n_mels, int n_fft, int sample_rate) {
  const int n_bins = n_fft / 2 + 1;
  const double mel_lo = hz_to_mel(0.0);
  const double mel_hi = hz_to_mel(sample_rate / 2.0);
  std::vector<double> edges(static_cast<std::size_t>(n_mels) + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / (n_mels + 1));
  }
  std::vector<std::vector<double>> fb(n_mels, std::vector<double>(n_bins, 0.0));
  for (int m = 0; m < n_mels; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    for (int b = 0; b < n_bins; ++b) {
      const double f = static_cast<double>(b) * sample_rate / n_fft;
      double w = 0.0;
      if (f > lo && f <= mid) {
        w = (f - lo) / (mid - lo);
      } else if (f > mid && f < hi) {
        w = (hi - f) / (hi - mid);
      }
      fb[m][b] = w;
    }
  }
  return fb;
}

std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  }
  return w;
}

FeatureMatrix compute_logmel(const AudioClip& clip, int n_mels, double win_ms, double hop_ms) {
  if (clip.sample_rate != kSampleRate) throw Error("unsupported rate");
  if (!(win_ms > hop_ms && hop_ms > 0.0)) throw Error("invalid framing");
  if (n_mels <= 0) throw Error("invalid mel count");
  const auto win = static_cast<std::size_t>(std::lround(win_ms * clip.sample_rate / 1000.0));
  const auto hop = static_cast<std::size_t>(std::lround(hop_ms * clip.sample_rate / 1000.0));
  if (clip.samples.size() < win || win == 0) throw Error("insufficient audio");
  for (double s : clip.samples) {
    if (!std::isfinite(s)) throw Error("non-finite audio");
  }

  const std::size_t n_fft = next_pow2(win);
  const std::size_t n_bins = n_fft / 2 + 1;
  const std::size_t n_frames = frame_count(clip.samples.size(), win, hop);
  const auto window = hann_window(win);
  double wsum = 0.0;
  for (double w : window) wsum += w;
  const double norm = 1.0 / (wsum * wsum);
  const auto fb = mel_filterbank(n_mels, static_cast<int>(n_fft), clip.sample_rate);

  std::vector<double> in(n_fft, 0.0);
  std::vector<fftw_complex> out(n_bins);
  fftw_plan plan;
  {
    std::lock_guard lock(fftw_planner_mutex());
    plan = fftw_plan_dft_r2c_1d(static_cast<int>(n_fft), in.data(), out.data(), FFTW_ESTIMATE);
  }

  FeatureMatrix fm(n_frames, static_cast<std::size_t>(n_mels));
  std::vector<double> power(n_bins);
  for (std::size_t t = 0; t < n_frames; ++t) {
    const double* src = clip.samples.data() + t * hop;
    for (std::size_t i = 0; i < win; ++i) in[i] = src[i] * window[i];
    std::fill(in.begin() + static_cast<std::ptrdiff_t>(win), in.end(), 0.0);
    fftw_execute(plan);
    for (std::size_t b = 0; b < n_bins; ++b) {
      power[b] = (out[b][0] * out[b][0] + out[b][1] * out[b][1]) * norm;
    }
    for (int m = 0; m < n_mels; ++m) {
      double e = 0.0;
      const auto& filt = fb[m];
      for (std::size_t b = 0; b < n_bins; ++b) e += filt[b] * power[b];
      const double db = 10.0 * std::log10(std::max(e, kPowerFloor));
      fm.at(t, m) = std::clamp(db, kDbFloor, kDbCeil);
    }
  }
  {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  return fm;
}

GlobalNormStats fit_global_norm(std::span<const FeatureMatrix> train_features) {
  // Chan et al. pairwise merge of per-matrix (count, mean, M2).
  double n = 0.0, mean = 0.0, m2 = 0.0;
  std::size_t frames = 0;
  for (const auto& f : train_features) {
    if (f.values.empty()) continue;
    double fm = 0.0;
    for (double v : f.values) fm += v;
    const double nb = static_cast<double>(f.values.size());
    fm /= nb;
    double fm2 = 0.0;
    for (double v : f.values) fm2 += (v - fm) * (v - fm);
    const double delta = fm - mean;
    const double tot = n + nb;
    mean += delta * nb / tot;
    m2 += fm2 + delta * delta * n * nb / tot;
    n = tot;
    frames += f.rows;
  }
  if (frames == 0) throw Error("no frames");
  const double var = m2 / n;
  const double sd = std::sqrt(var);
  if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) throw Error("degenerate statistics");
  return GlobalNormStats{mean, sd, frames};
}

FeatureMatrix apply_norm(const FeatureMatrix& f, const GlobalNormStats& stats) {
  if (!(stats.std > 0.0)) throw Error("degenerate statistics");
  FeatureMatrix out = f;
  const double inv = 1.0 / stats.std;
  for (double& v : out.values) v = (v - stats.mean) * inv;
  return out;
}

FeatureMatrix invert_norm(const FeatureMatrix& f, const GlobalNormStats& stats) {
  FeatureMatrix out = f;
  for (double& v : out.values) v = v * stats.std + stats.mean;
  return out;
}

std::vector<FeatureMatrix> slice_windows(const FeatureMatrix& f, std::size_t frames, std::size_t stride) {
  std::vector<FeatureMatrix> out;
  if (frames == 0 || stride == 0 || f.rows < frames) return out;
  for (std::size_t start = 0; start + frames <= f.rows; start += stride) {
    FeatureMatrix w(frames, f.cols);
    std::copy_n(f.values.begin() + static_cast<std::ptrdiff_t>(start * f.cols), frames * f.cols,
                w.values.begin());
    out.push_back(std::move(w));
  }
  return out;
}

AudioClip read_wav(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  expect_magic(is, "RIFF");
  read_u32_le(is);
  expect_magic(is, "WAVE");
  int channels = 0, bits = 0, rate = 0, fmt = 0;
  std::vector<double> samples;
  bool have_fmt = false, have_data = false;
  while (is && !have_data) {
    std::string id(4, '\0');
    is.read(id.data(), 4);
    if (is.gcount() != 4) break;
    const std::uint32_t size = read_u32_le(is);
    if (id == "fmt ") {
      std::vector<char> buf(size);
      is.read(buf.data(), size);
      auto u16 = [&](std::size_t o) {
        return static_cast<int>(static_cast<unsigned char>(buf[o]) |
                                (static_cast<unsigned char>(buf[o + 1]) << 8));
      };
      if (size < 16) throw Error("bad wav fmt chunk");
      fmt = u16(0);
      channels = u16(2);
      rate = static_cast<int>(static_cast<std::uint32_t>(u16(4)) | (static_cast<std::uint32_t>(u16(6)) << 16));
      bits = u16(14);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw Error("wav data before fmt");
      if (fmt != 1 || bits != 16 || channels != 1) throw Error("unsupported wav encoding");
      const std::size_t n = size / 2;
      samples.resize(n);
      std::vector<unsigned char> raw(size);
      is.read(reinterpret_cast<char*>(raw.data()), size);
      if (static_cast<std::size_t>(is.gcount()) != size) throw Error("truncated file");
      for (std::size_t i = 0; i < n; ++i) {
        const auto s = static_cast<std::int16_t>(raw[2 * i] | (raw[2 * i + 1] << 8));
        samples[i] = static_cast<double>(s) / 32768.0;
      }
      have_data = true;
    } else {
      is.seekg(size + (size & 1u), std::ios::cur);
    }
  }
  if (!have_data) throw Error("wav without data chunk");
  return AudioClip{std::move(samples), rate};
}

void write_wav(const std::filesystem::path& path, const AudioClip& clip) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string());
  const auto data_bytes = static_cast<std::uint32_t>(clip.samples.size() * 2);
  write_magic(os, "RIFF");
  write_u32_le(os, 36 + data_bytes);
  write_magic(os, "WAVE");
  write_magic(os, "fmt ");
  write_u32_le(os, 16);
  const std::uint32_t rate = static_cast<std::uint32_t>(clip.sample_rate);
  const char fmt_body[4] = {1, 0, 1, 0};  // PCM, mono
  os.write(fmt_body, 4);
  write_u32_le(os, rate);
  write_u32_le(os, rate * 2);
  const char align_bits[4] = {2, 0, 16, 0};
  os.write(align_bits, 4);
  write_magic(os, "data");
  write_u32_le(os, data_bytes);
  for (double s : clip.samples) {
    const auto q = static_cast<std::int16_t>(std::clamp(std::lround(s * 32768.0), -32768L, 32767L));
    const char b[2] = {static_cast<char>(q & 0xff), static_cast<char>((q >> 8) & 0xff)};
    os.write(b, 2);
  }
}

void write_feature_cache(const std::filesystem::path& path, const FeatureMatrix& f) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string());
  write_magic(os, "MPIB");
  write_u32_le(os, kCacheVersion);
  write_u32_le(os, static_cast<std::uint32_t>(f.rows));
  write_u32_le(os, static_cast<std::uint32_t>(f.cols));
  for (double v : f.values) write_f32_le(os, static_cast<float>(v));
}

FeatureMatrix read_feature_cache(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  expect_magic(is, "MPIB");
  const auto version = read_u32_le(is);
  if (version != kCacheVersion) throw Error("unsupported cache version");
  const auto rows = read_u32_le(is);
  const auto cols = read_u32_le(is);
  FeatureMatrix f(rows, cols);
  for (double& v : f.values) v = read_f32_le(is);
  return f;
}

}  // namespace mpib::features
