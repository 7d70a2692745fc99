// SPDX-License-Identifier: Apache-2.0
#include "mpib/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "mpib/common.hpp"

namespace mpib::adapt {

void DpsConfig::validate() const {
  if (passes < 2) throw Error("insufficient passes");
  if (b_base < 1 || delta_b < 0 || b_base + delta_b > 8) throw Error("b_base + delta_b must be <= 8");
  if (!(window_s > 0.0 && subwindow_ms > 0.0)) throw Error("window sizes must be positive");
  if (calibration_window < 1) throw Error("calibration window must be >= 1");
}

int DpsConfig::subwindows() const { return static_cast<int>(std::lround(window_s * 1000.0 / subwindow_ms)); }

std::vector<double> estimate_uncertainty(model::MpibModel& m, const Mat& x, int frames, int passes, Rng& rng,
                                         UncertaintyStat stat) {
  if (passes < 2) throw Error("insufficient passes");
  const Eigen::Index n = x.rows();
  std::vector<Mat> samples;
  samples.reserve(static_cast<std::size_t>(passes));
  for (int p = 0; p < passes; ++p) {
    // Dropout active in the encoder; the state head runs in inference mode so its
    // calibration windows are not advanced.
    const Mat h = m.encoder.forward(x, frames, model::EncoderMode::fp16, true, rng);
    const auto st = m.state.forward(h, false, rng);
    if (stat == UncertaintyStat::state_pre) {
      samples.push_back(st.pre);
    } else {
      const auto pred = m.agit.apply(st.zq);
      samples.push_back(pred);
    }
  }
  std::vector<double> uc(static_cast<std::size_t>(n), 0.0);
  const Eigen::Index d = samples[0].cols();
  for (Eigen::Index r = 0; r < n; ++r) {
    double acc = 0.0;
    for (Eigen::Index c = 0; c < d; ++c) {
      // Shifted by the first pass so identical passes give exactly zero.
      const double ref = samples[0](r, c);
      double mean = 0.0;
      for (const auto& s : samples) mean += s(r, c) - ref;
      mean /= passes;
      double var = 0.0;
      for (const auto& s : samples) var += (s(r, c) - ref - mean) * (s(r, c) - ref - mean);
      acc += var / (passes - 1);
    }
    uc[static_cast<std::size_t>(r)] = acc / static_cast<double>(d);
  }
  return uc;
}

double estimate_uncertainty_one(model::MpibModel& m, const Mat& x_row, int frames, int passes, Rng& rng,
                                UncertaintyStat stat) {
  if (x_row.rows() != 1) throw Error("shape error");
  return estimate_uncertainty(m, x_row, frames, passes, rng, stat)[0];
}

void UcNormalizer::push(double uc) {
  buf_.push_back(uc);
  while (static_cast<int>(buf_.size()) > cap_) buf_.pop_front();
}

double UcNormalizer::mean() const {
  if (buf_.empty()) return 0.0;
  return std::accumulate(buf_.begin(), buf_.end(), 0.0) / static_cast<double>(buf_.size());
}

double UcNormalizer::stddev() const {
  if (buf_.size() < 2) return 0.0;
  const double m = mean();
  double s = 0.0;
  for (double v : buf_) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(buf_.size()));
}

int effective_bitwidth(double uc, const DpsConfig& cfg, double mu, double sigma) {
  if (uc < 0.0) throw Error("uncertainty must be non-negative");
  double z;
  if (sigma > 0.0) {
    z = (uc - mu) / sigma;
  } else {
    z = uc > mu ? std::numeric_limits<double>::infinity() : (uc < mu ? -std::numeric_limits<double>::infinity() : 0.0);
  }
  const double g = 1.0 / (1.0 + std::exp(-z));
  return g >= cfg.gate_threshold ? cfg.b_base + cfg.delta_b : cfg.b_base;
}

int effective_bitwidth(double uc, const DpsConfig& cfg, const UcNormalizer& norm) {
  return effective_bitwidth(uc, cfg, norm.mean(), norm.stddev());
}

double DpsScheduler::hit_rate() const {
  const long n = hits_ + misses_;
  return n ? static_cast<double>(hits_) / static_cast<double>(n) : 0.0;
}

std::string dps_csv_header() { return "window_id,uc,bits,trigger_reason"; }

std::string dps_csv_row(const DpsDecision& d) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%lld,%.6g,%d,%s", static_cast<long long>(d.window_id), d.uc, d.bits,
                d.trigger_reason.c_str());
  return buf;
}

DpsTiming dps_timing_model(const DpsConfig& cfg, double base_ms, double pass_ms, double var_ms, double select_ms,
                           double int6_ms, double trigger_rate) {
  cfg.validate();
  if (trigger_rate < 0.0 || trigger_rate > 1.0) throw Error("trigger rate out of range");
  DpsTiming t;
  t.subwindows = cfg.subwindows();
  if (t.subwindows < 1) throw Error("window shorter than a sub-window");
  const double n = t.subwindows;
  t.amortized_pass_ms = cfg.passes * pass_ms / n;
  t.overhead_per_subwindow_ms = (cfg.passes * pass_ms + var_ms + select_ms + trigger_rate * int6_ms * n) / n;
  t.overhead_per_window_ms = t.overhead_per_subwindow_ms * n;
  t.total_per_subwindow_ms = base_ms + t.overhead_per_subwindow_ms;
  return t;
}

// ---------------------------------------------------------------- multi-scale fusion

std::vector<Segment> segment_windows(std::size_t n_frames, double scale_s, double overlap, double frame_rate) {
  if (!(overlap >= 0.0 && overlap < 1.0)) throw Error("overlap must be in [0, 1)");
  if (!(scale_s > 0.0 && frame_rate > 0.0)) throw Error("scale must be positive");
  const auto win = static_cast<std::size_t>(std::llround(scale_s * frame_rate));
  const auto hop = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(scale_s * (1.0 - overlap) * frame_rate)));
  std::vector<Segment> out;
  if (win == 0) return out;
  for (std::size_t s = 0; s + win <= n_frames; s += hop) out.push_back({s, win});
  return out;
}

std::vector<features::FeatureMatrix> segment_windows(const features::FeatureMatrix& f, double scale_s,
                                                     double overlap, double frame_rate) {
  std::vector<features::FeatureMatrix> out;
  for (const auto& seg : segment_windows(f.rows, scale_s, overlap, frame_rate)) {
    features::FeatureMatrix w(seg.length, f.cols);
    std::copy(f.values.begin() + static_cast<std::ptrdiff_t>(seg.start * f.cols),
              f.values.begin() + static_cast<std::ptrdiff_t>((seg.start + seg.length) * f.cols), w.values.begin());
    out.push_back(std::move(w));
  }
  return out;
}

MstfAttention::MstfAttention(int state_dim, int model_dim, int heads, Rng& rng)
    : q("mstf.q", state_dim, model_dim, rng, false),
      k("mstf.k", state_dim, model_dim, rng, false),
      v("mstf.v", state_dim, model_dim, rng, false),
      o("mstf.o", model_dim, state_dim, rng, false),
      heads_(heads) {
  if (heads < 1 || model_dim % heads != 0) throw Error("model_dim must be divisible by heads");
}

std::size_t MstfAttention::param_count() const {
  std::size_t n = 0;
  for (const nn::Linear* l : {&q, &k, &v, &o}) n += static_cast<std::size_t>(l->W.size() + l->b.size());
  return n;
}

MstfAttention::Output MstfAttention::fuse(const std::vector<nn::RowVec>& state_embs,
                                          const std::vector<nn::RowVec>& trait_embs) const {
  if (state_embs.size() != 3 || trait_embs.size() != 3) throw Error("incomplete scales");
  const Eigen::Index ds = q.in();
  Mat s(3, ds);
  for (int i = 0; i < 3; ++i) {
    if (state_embs[static_cast<std::size_t>(i)].size() != ds) throw Error("shape error");
    s.row(i) = state_embs[static_cast<std::size_t>(i)];
  }
  const Mat qm = q.apply(s), km = k.apply(s), vm = v.apply(s);
  const int dh = static_cast<int>(qm.cols()) / heads_;
  Mat ctx(3, qm.cols());
  Output out;
  for (int h = 0; h < heads_; ++h) {
    const auto qh = qm.middleCols(h * dh, dh);
    const auto kh = km.middleCols(h * dh, dh);
    Mat a = (qh * kh.transpose()) / std::sqrt(static_cast<double>(dh));
    for (Eigen::Index r = 0; r < 3; ++r) {
      const double mx = a.row(r).maxCoeff();
      a.row(r) = (a.row(r).array() - mx).exp();
      a.row(r) /= a.row(r).sum();
    }
    ctx.middleCols(h * dh, dh) = a * vm.middleCols(h * dh, dh);
    out.attention.push_back(std::move(a));
  }
  out.state = o.apply(ctx).colwise().mean();
  const Eigen::Index dt = trait_embs[0].size();
  out.trait = nn::RowVec::Zero(dt);
  for (const auto& t : trait_embs) {
    if (t.size() != dt) throw Error("shape error");
    out.trait += t / 3.0;
  }
  return out;
}

}  // namespace mpib::adapt
