// SPDX-License-Identifier: Apache-2.0
#include "mpib/model.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mpib/common.hpp"
#include "mpib/kernels.hpp"

namespace mpib::model {

EncoderMode parse_encoder_mode(const std::string& s) {
  if (s == "fp16") return EncoderMode::fp16;
  if (s == "int8_ptq") return EncoderMode::int8_ptq;
  if (s == "int8_qat") return EncoderMode::int8_qat;
  throw Error("unknown encoder mode: " + s);
}

std::string to_string(EncoderMode m) {
  switch (m) {
    case EncoderMode::fp16: return "fp16";
    case EncoderMode::int8_ptq: return "int8_ptq";
    case EncoderMode::int8_qat: return "int8_qat";
  }
  return "?";
}

void ModelConfig::validate() const {
  if (n_mels <= 0 || frames <= 0) throw Error("invalid input dims");
  if (!quant::supported_bits(state_bits)) throw Error("unsupported precision");
  if (state_dim < 2 || trait_dim < 2) throw Error("embedding dims must be >= 2");
  for (double p : {encoder_dropout, trait_dropout, state_dropout}) {
    if (p < 0.0 || p >= 1.0) throw Error("dropout rate out of range");
  }
  if (frames % tmae_patch != 0 || n_mels % tmae_patch != 0) throw Error("window not divisible by patch");
  if (frames % recon_pool != 0 || n_mels % recon_pool != 0) throw Error("window not divisible by pool");
  if (calibration_interval < 1) throw Error("calibration interval must be >= 1");
}

// ---------------------------------------------------------------- fake quantization

FakeQuant fake_quant_tensor(const Mat& x, double scale, int bits) {
  const int lo = quant::clip_lo_for(bits), hi = quant::clip_hi_for(bits);
  FakeQuant out{Mat(x.rows(), x.cols()), Mat(x.rows(), x.cols())};
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double t = x.data()[i] / scale;
    out.mask.data()[i] = (t >= lo && t <= hi) ? 1.0 : 0.0;
    out.value.data()[i] = quant::quantize_value(x.data()[i], scale, lo, hi) * scale;
  }
  return out;
}

FakeQuant fake_quant_rows(const Mat& w, int bits) {
  const auto scheme = quant::calibrate_scales(std::span<const double>(w.data(), static_cast<std::size_t>(w.size())),
                                              static_cast<std::size_t>(w.rows()), static_cast<std::size_t>(w.cols()),
                                              bits);
  FakeQuant out{Mat(w.rows(), w.cols()), Mat::Ones(w.rows(), w.cols())};
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    const double s = scheme.scales[static_cast<std::size_t>(r)];
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      out.value(r, c) = quant::quantize_value(w(r, c), s, scheme.clip_lo, scheme.clip_hi) * s;
    }
  }
  return out;
}

namespace {

struct Int8Tensor {
  std::vector<std::int8_t> codes;
  std::vector<double> scales;
};

Int8Tensor int8_weights(const Mat& w) {
  const auto scheme = quant::calibrate_scales(std::span<const double>(w.data(), static_cast<std::size_t>(w.size())),
                                              static_cast<std::size_t>(w.rows()), static_cast<std::size_t>(w.cols()), 8);
  Int8Tensor t;
  t.scales = scheme.scales;
  t.codes.resize(static_cast<std::size_t>(w.size()));
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      t.codes[static_cast<std::size_t>(r * w.cols() + c)] =
          static_cast<std::int8_t>(quant::quantize_value(w(r, c), t.scales[static_cast<std::size_t>(r)], -128, 127));
    }
  }
  return t;
}

std::vector<std::int8_t> int8_acts(const Mat& a, double scale) {
  std::vector<std::int8_t> q(static_cast<std::size_t>(a.size()));
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    q[static_cast<std::size_t>(i)] = static_cast<std::int8_t>(quant::quantize_value(a.data()[i], scale, -128, 127));
  }
  return q;
}

double act_scale_from(double absmax) { return quant::absmax_scale(absmax, 8); }

Mat int8_linear(const Mat& x, double x_absmax, const nn::Linear& lin) {
  const double xs = act_scale_from(x_absmax);
  const auto xq = int8_acts(x, xs);
  const auto wq = int8_weights(lin.W.value);
  const auto y = kernels::gemm_int8(xq, wq.codes, static_cast<std::size_t>(x.rows()),
                                    static_cast<std::size_t>(x.cols()), static_cast<std::size_t>(lin.out()), xs,
                                    wq.scales);
  Mat out = Eigen::Map<const Mat>(y.data(), x.rows(), lin.out());
  out.rowwise() += lin.b.value.row(0);
  return out;
}

Mat int8_depthwise(const Mat& x, const nn::Shape4& s, double x_absmax, const nn::Depthwise3x3& dw) {
  const double xs = act_scale_from(x_absmax);
  const auto xq = int8_acts(x, xs);
  const auto wq = int8_weights(dw.W.value);
  const nn::Shape4 o = dw.out_shape(s);
  Mat y(o.rows(), s.c);
  std::vector<std::int32_t> acc(static_cast<std::size_t>(s.c));
  for (int n = 0; n < s.n; ++n) {
    for (int oy = 0; oy < o.h; ++oy) {
      for (int ox = 0; ox < o.w; ++ox) {
        std::fill(acc.begin(), acc.end(), 0);
        for (int ky = 0; ky < 3; ++ky) {
          const int iy = oy * dw.stride + ky - 1;
          if (iy < 0 || iy >= s.h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int ix = ox * dw.stride + kx - 1;
            if (ix < 0 || ix >= s.w) continue;
            const std::size_t irow = (static_cast<std::size_t>(n) * s.h + iy) * s.w + ix;
            const int tap = ky * 3 + kx;
            for (int c = 0; c < s.c; ++c) {
              acc[c] += static_cast<std::int32_t>(xq[irow * s.c + c]) * wq.codes[static_cast<std::size_t>(c) * 9 + tap];
            }
          }
        }
        const Eigen::Index orow = (static_cast<Eigen::Index>(n) * o.h + oy) * o.w + ox;
        for (int c = 0; c < s.c; ++c) y(orow, c) = xs * wq.scales[c] * acc[c] + dw.b.value(0, c);
      }
    }
  }
  return y;
}

}  // namespace

// ---------------------------------------------------------------- Encoder

Encoder::Encoder(const ModelConfig& cfg, Rng& rng) : cfg_(cfg), drop_(cfg.encoder_dropout) {
  int ch = cfg.stem_channels;
  stem_ = nn::Conv3x3("enc.stem", 1, ch, 2, rng);
  int w = nn::conv_out(cfg.n_mels, 2);
  for (int i = 0; i < cfg.conv_blocks; ++i) {
    dw_.emplace_back("enc.dw" + std::to_string(i), ch, 2, rng);
    pw_.emplace_back("enc.pw" + std::to_string(i), ch, ch * 2, rng);
    dw_relu_.emplace_back();
    pw_relu_.emplace_back();
    ch *= 2;
    w = nn::conv_out(w, 2);
  }
  fc_ = nn::Linear("enc.fc", w * ch, cfg.embed_dim, rng, false);
}

std::vector<nn::Param*> Encoder::params() {
  std::vector<nn::Param*> p{&stem_.lin.W, &stem_.lin.b};
  for (std::size_t i = 0; i < dw_.size(); ++i) {
    p.push_back(&dw_[i].W);
    p.push_back(&dw_[i].b);
    p.push_back(&pw_[i].W);
    p.push_back(&pw_[i].b);
  }
  p.push_back(&fc_.W);
  p.push_back(&fc_.b);
  return p;
}

std::size_t Encoder::param_count() const {
  std::size_t n = static_cast<std::size_t>(stem_.lin.W.size() + stem_.lin.b.size());
  for (std::size_t i = 0; i < dw_.size(); ++i) {
    n += static_cast<std::size_t>(dw_[i].W.size() + dw_[i].b.size() + pw_[i].W.size() + pw_[i].b.size());
  }
  return n + static_cast<std::size_t>(fc_.W.size() + fc_.b.size());
}

void Encoder::observe(std::size_t slot, const Mat& a, bool qat) {
  const double m = a.cwiseAbs().maxCoeff();
  if (act_absmax_.size() <= slot) act_absmax_.resize(2 + 2 * dw_.size(), 0.0);
  if (qat && act_absmax_[slot] > 0.0) {
    act_absmax_[slot] = 0.9 * act_absmax_[slot] + 0.1 * m;
  } else {
    act_absmax_[slot] = std::max(act_absmax_[slot], m);
  }
}

Mat Encoder::maybe_fq(std::size_t slot, const Mat& a, bool qat) {
  if (!qat) return a;
  observe(slot, a, true);
  auto fq = fake_quant_tensor(a, act_scale_from(act_absmax_[slot]), 8);
  if (fq_masks_.size() <= slot) fq_masks_.resize(2 + 2 * dw_.size());
  fq_masks_[slot] = std::move(fq.mask);
  return fq.value;
}

Mat Encoder::fq_backward(std::size_t slot, const Mat& g) const {
  if (!last_qat_) return g;
  return g.cwiseProduct(fq_masks_[slot]);
}

Mat Encoder::forward_float(const Mat& x, int frames, bool train, bool qat, Rng& rng) {
  const int b = static_cast<int>(x.rows());
  last_qat_ = qat;
  shapes_.clear();
  nn::Shape4 s{b, frames, cfg_.n_mels, 1};
  Mat a = Eigen::Map<const Mat>(x.data(), s.rows(), 1);
  a = maybe_fq(0, a, qat);
  shapes_.push_back(s);
  {
    const Mat cols = nn::im2col3x3(a, s, stem_.stride);
    a = qat ? stem_.lin.forward_with(cols, fake_quant_rows(stem_.lin.W.value, 8).value) : stem_.lin.forward(cols);
    a = stem_relu_.forward(a);
    s = stem_.out_shape(s);
  }
  for (std::size_t i = 0; i < dw_.size(); ++i) {
    a = maybe_fq(1 + 2 * i, a, qat);
    shapes_.push_back(s);
    a = qat ? dw_[i].forward_with(a, s, fake_quant_rows(dw_[i].W.value, 8).value) : dw_[i].forward(a, s);
    s = dw_[i].out_shape(s);
    a = dw_relu_[i].forward(a);
    a = maybe_fq(2 + 2 * i, a, qat);
    shapes_.push_back(s);
    a = qat ? pw_[i].forward_with(a, fake_quant_rows(pw_[i].W.value, 8).value) : pw_[i].forward(a);
    s.c = pw_[i].out();
    a = pw_relu_[i].forward(a);
  }
  pool_shape_ = s;
  Mat pooled = nn::pool_time(a, s);
  pooled = maybe_fq(1 + 2 * dw_.size(), pooled, qat);
  Mat h = qat ? fc_.forward_with(pooled, fake_quant_rows(fc_.W.value, 8).value) : fc_.forward(pooled);
  return drop_.forward(h, train, rng);
}

Mat Encoder::forward_int8(const Mat& x, int frames) const {
  if (act_absmax_.size() != 2 + 2 * dw_.size()) throw Error("encoder not calibrated for int8");
  const int b = static_cast<int>(x.rows());
  nn::Shape4 s{b, frames, cfg_.n_mels, 1};
  Mat a = Eigen::Map<const Mat>(x.data(), s.rows(), 1);
  a = int8_linear(nn::im2col3x3(a, s, stem_.stride), act_absmax_[0], stem_.lin).cwiseMax(0.0);
  s = stem_.out_shape(s);
  for (std::size_t i = 0; i < dw_.size(); ++i) {
    a = int8_depthwise(a, s, act_absmax_[1 + 2 * i], dw_[i]).cwiseMax(0.0);
    s = dw_[i].out_shape(s);
    a = int8_linear(a, act_absmax_[2 + 2 * i], pw_[i]).cwiseMax(0.0);
    s.c = pw_[i].out();
  }
  const Mat pooled = nn::pool_time(a, s);
  return int8_linear(pooled, act_absmax_[1 + 2 * dw_.size()], fc_);
}

void Encoder::calibrate_ptq(const Mat& x, int frames) {
  // Ranges are observed on a float forward: each quantized op input is recorded.
  act_absmax_.assign(2 + 2 * dw_.size(), 0.0);
  const int b = static_cast<int>(x.rows());
  nn::Shape4 s{b, frames, cfg_.n_mels, 1};
  Mat a = Eigen::Map<const Mat>(x.data(), s.rows(), 1);
  observe(0, a, false);
  a = stem_.lin.apply(nn::im2col3x3(a, s, stem_.stride)).cwiseMax(0.0);
  s = stem_.out_shape(s);
  for (std::size_t i = 0; i < dw_.size(); ++i) {
    observe(1 + 2 * i, a, false);
    a = dw_[i].apply(a, s, dw_[i].W.value).cwiseMax(0.0);
    s = dw_[i].out_shape(s);
    observe(2 + 2 * i, a, false);
    a = pw_[i].apply(a).cwiseMax(0.0);
    s.c = pw_[i].out();
  }
  observe(1 + 2 * dw_.size(), nn::pool_time(a, s), false);
}

Mat Encoder::forward(const Mat& x, int frames, EncoderMode mode, bool train, Rng& rng) {
  if (x.cols() != static_cast<Eigen::Index>(frames) * cfg_.n_mels) throw Error("shape error");
  if (frames < 1) throw Error("shape error");
  if (!warned_range_ && x.size() > 0 && x.cwiseAbs().maxCoeff() > 20.0) {
    spdlog::warn("encoder input exceeds 20 standard deviations; is it normalized?");
    warned_range_ = true;
  }
  switch (mode) {
    case EncoderMode::fp16: return forward_float(x, frames, train, false, rng);
    case EncoderMode::int8_qat:
      if (train) return forward_float(x, frames, true, true, rng);
      return forward_int8(x, frames);
    case EncoderMode::int8_ptq:
      if (train) return forward_float(x, frames, true, false, rng);
      return forward_int8(x, frames);
  }
  return {};
}

Mat Encoder::backward(const Mat& dh) {
  Mat g = drop_.backward(dh);
  g = fc_.backward(g);
  g = fq_backward(1 + 2 * dw_.size(), g);
  g = nn::pool_time_backward(g, pool_shape_);
  for (std::size_t ii = dw_.size(); ii-- > 0;) {
    g = pw_relu_[ii].backward(g);
    g = pw_[ii].backward(g);
    g = fq_backward(2 + 2 * ii, g);
    g = dw_relu_[ii].backward(g);
    g = dw_[ii].backward(g);
    g = fq_backward(1 + 2 * ii, g);
  }
  g = stem_relu_.backward(g);
  g = nn::col2im3x3(stem_.lin.backward(g), shapes_[0], stem_.stride);
  g = fq_backward(0, g);
  const int b = shapes_[0].n;
  return Eigen::Map<const Mat>(g.data(), b, static_cast<Eigen::Index>(shapes_[0].h) * shapes_[0].w);
}

Mat Encoder::tangent(const Mat& dx) const {
  const nn::Shape4& s0 = shapes_[0];
  Mat t = Eigen::Map<const Mat>(dx.data(), s0.rows(), 1);
  t = stem_.lin.tangent(nn::im2col3x3(t, s0, stem_.stride));
  t = stem_relu_.tangent(t);
  for (std::size_t i = 0; i < dw_.size(); ++i) {
    t = dw_[i].tangent(t);
    t = dw_relu_[i].tangent(t);
    t = pw_[i].tangent(t);
    t = pw_relu_[i].tangent(t);
  }
  t = nn::pool_time(t, pool_shape_);
  t = fc_.tangent(t);
  return drop_.tangent(t);
}

// ---------------------------------------------------------------- TraitHead

TraitHead::TraitHead(const ModelConfig& cfg, Rng& rng)
    : lin("trait.lin", cfg.embed_dim, cfg.trait_dim, rng, false), ln(cfg.ln_eps), drop(cfg.trait_dropout) {}

Mat TraitHead::forward(const Mat& h, bool train, Rng& rng) {
  return drop.forward(ln.forward(lin.forward(h)), train, rng);
}

Mat TraitHead::backward(const Mat& dz) { return lin.backward(ln.backward(drop.backward(dz))); }

Mat TraitHead::tangent(const Mat& dh) const { return drop.tangent(ln.tangent(lin.tangent(dh))); }

// ---------------------------------------------------------------- StateHead

StateHead::StateHead(const ModelConfig& cfg, Rng& rng)
    : lin("state.lin", cfg.embed_dim, cfg.state_dim, rng, false),
      bits_(cfg.state_bits),
      eps_(cfg.ln_eps),
      interval_(cfg.calibration_interval),
      drop_(cfg.state_dropout),
      plain_ln_(cfg.ln_eps) {}

void StateHead::set_scales(quant::QuantScheme w, double act, double out, double in) {
  wscheme_ = std::move(w);
  act_scale_ = act;
  out_scale_ = out;
  in_scale_ = in;
}

Mat StateHead::effective_weight() const {
  if (bits_ == 16) return lin.W.value;
  const Mat& w = lin.W.value;
  const auto scheme = wscheme_.scales.empty()
                          ? quant::calibrate_scales(std::span<const double>(w.data(), static_cast<std::size_t>(w.size())),
                                                    static_cast<std::size_t>(w.rows()),
                                                    static_cast<std::size_t>(w.cols()), bits_)
                          : wscheme_;
  Mat q(w.rows(), w.cols());
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    const double s = scheme.scales[static_cast<std::size_t>(r)];
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      q(r, c) = quant::quantize_value(w(r, c), s, scheme.clip_lo, scheme.clip_hi) * s;
    }
  }
  return q;
}

void StateHead::observe(const Mat& h, const Mat& a, const Mat& n) {
  win_in_ = std::max(win_in_, h.cwiseAbs().maxCoeff());
  win_act_ = std::max(win_act_, a.cwiseAbs().maxCoeff());
  if (n.size() > 0) win_out_ = std::max(win_out_, n.cwiseAbs().maxCoeff());
}

void StateHead::recalibrate() {
  const Mat& w = lin.W.value;
  wscheme_ = quant::calibrate_scales(std::span<const double>(w.data(), static_cast<std::size_t>(w.size())),
                                     static_cast<std::size_t>(w.rows()), static_cast<std::size_t>(w.cols()),
                                     bits_ == 16 ? 8 : bits_);
  wscheme_.calibration_interval = interval_;
}

Mat StateHead::qln(const Mat& a, Vec& inv_std, Mat& int8_mask) const {
  // INT8 per-tensor codes; mean and variance are formed from exact integer sums so the
  // activation scale cancels: n_i = (d q_i - S1) / sqrt(d S2 - S1^2 + d^2 eps / s^2).
  const Eigen::Index d = a.cols();
  const double s = act_scale_;
  Mat n(a.rows(), d);
  int8_mask.resize(a.rows(), d);
  inv_std.resize(a.rows());
  std::vector<std::int64_t> q(static_cast<std::size_t>(d));
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    std::int64_t s1 = 0, s2 = 0;
    for (Eigen::Index c = 0; c < d; ++c) {
      const double t = a(r, c) / s;
      int8_mask(r, c) = (t >= -128.0 && t <= 127.0) ? 1.0 : 0.0;
      q[c] = quant::quantize_value(a(r, c), s, -128, 127);
      s1 += q[c];
      s2 += q[c] * q[c];
    }
    const std::int64_t v = d * s2 - s1 * s1;
    const double denom = std::sqrt(static_cast<double>(v) + static_cast<double>(d * d) * eps_ / (s * s));
    for (Eigen::Index c = 0; c < d; ++c) n(r, c) = static_cast<double>(d * q[c] - s1) / denom;
    inv_std(r) = static_cast<double>(d) / (s * denom);
  }
  return n;
}

StateOutput StateHead::forward(const Mat& h, bool train, Rng& rng) {
  StateOutput out;
  out.emb.bits = bits_;
  if (bits_ == 16) {
    const Mat a = lin.forward(h);
    pre_ = plain_ln_.forward(a);
    out.pre = pre_;
    out.zq = pre_;
    out.emb.scale = 1.0;
    out.z = drop_.forward(out.zq, train, rng);
    return out;
  }

  const bool cadence = train && (steps_ % interval_ == 0);
  if (cadence || wscheme_.scales.empty()) recalibrate();
  const Mat w_eff = effective_weight();
  wmask_.resize(lin.W.value.rows(), lin.W.value.cols());
  for (Eigen::Index r = 0; r < wmask_.rows(); ++r) {
    const double s = wscheme_.scales[static_cast<std::size_t>(r)];
    for (Eigen::Index c = 0; c < wmask_.cols(); ++c) {
      const double t = lin.W.value(r, c) / s;
      wmask_(r, c) = (t >= wscheme_.clip_lo && t <= wscheme_.clip_hi) ? 1.0 : 0.0;
    }
  }
  const Mat a = lin.forward_with(h, w_eff);

  if (train || act_scale_ <= 0.0) {
    observe(h, a, Mat());
    if (cadence || act_scale_ <= 0.0) {
      act_scale_ = act_scale_from(win_act_);
      in_scale_ = act_scale_from(win_in_);
      win_act_ = 0.0;
      win_in_ = 0.0;
    }
  }
  pre_ = qln(a, inv_std_, int8_mask_);
  if (train || out_scale_ <= 0.0) {
    win_out_ = std::max(win_out_, pre_.cwiseAbs().maxCoeff());
    if (cadence || out_scale_ <= 0.0) {
      out_scale_ = quant::absmax_scale(win_out_, bits_);
      win_out_ = 0.0;
    }
  }
  if (train) ++steps_;

  const int lo = quant::clip_lo_for(bits_), hi = quant::clip_hi_for(bits_);
  out.pre = pre_;
  out.zq.resize(pre_.rows(), pre_.cols());
  out_mask_.resize(pre_.rows(), pre_.cols());
  out.emb.codes.resize(static_cast<std::size_t>(pre_.size()));
  out.emb.scale = out_scale_;
  for (Eigen::Index i = 0; i < pre_.size(); ++i) {
    const double t = pre_.data()[i] / out_scale_;
    out_mask_.data()[i] = (t >= lo && t <= hi) ? 1.0 : 0.0;
    const auto code = quant::quantize_value(pre_.data()[i], out_scale_, lo, hi);
    out.emb.codes[static_cast<std::size_t>(i)] = code;
    out.zq.data()[i] = code * out_scale_;
  }
  out.z = drop_.forward(out.zq, train, rng);
  return out;
}

Mat StateHead::backward(const Mat& dz, const Mat& dzq) {
  Mat g = drop_.backward(dz);
  if (dzq.size() > 0) g += dzq;
  if (bits_ == 16) return lin.backward(plain_ln_.backward(g));
  g = g.cwiseProduct(out_mask_);
  Mat da = nn::LayerNorm::backward_from(pre_, inv_std_, g).cwiseProduct(int8_mask_);
  const Mat before = lin.W.grad;
  Mat dh = lin.backward(da);
  lin.W.grad = before + (lin.W.grad - before).cwiseProduct(wmask_);
  return dh;
}

quant::PackedInt4Matrix StateHead::packed_weights() const {
  if (bits_ != 4) throw Error("packed weights require 4-bit state head");
  const Mat& w = lin.W.value;
  const auto scheme = wscheme_.scales.empty()
                          ? quant::calibrate_scales(std::span<const double>(w.data(), static_cast<std::size_t>(w.size())),
                                                    static_cast<std::size_t>(w.rows()),
                                                    static_cast<std::size_t>(w.cols()), 4)
                          : wscheme_;
  const auto q = quant::quantize_ste(std::span<const double>(w.data(), static_cast<std::size_t>(w.size())),
                                     static_cast<std::size_t>(w.rows()), static_cast<std::size_t>(w.cols()), scheme);
  quant::PackedInt4Matrix m;
  m.rows = static_cast<std::size_t>(w.rows());
  m.cols = static_cast<std::size_t>(w.cols());
  m.blocks = quant::pack_int4(q.q.codes, m.rows, m.cols);
  m.scales.assign(scheme.scales.begin(), scheme.scales.end());
  return m;
}

StateEmbedding StateHead::forward_deploy(const Mat& h) const {
  if (bits_ != 4) throw Error("deploy path requires 4-bit state head");
  if (act_scale_ <= 0.0 || out_scale_ <= 0.0 || in_scale_ <= 0.0) throw Error("state head not calibrated");
  const auto packed = packed_weights();
  Mat a(h.rows(), lin.out());
  std::vector<std::int8_t> hq(static_cast<std::size_t>(h.cols()));
  for (Eigen::Index r = 0; r < h.rows(); ++r) {
    for (Eigen::Index c = 0; c < h.cols(); ++c) {
      hq[static_cast<std::size_t>(c)] =
          static_cast<std::int8_t>(quant::quantize_value(h(r, c), in_scale_, -128, 127));
    }
    const auto y = kernels::gemv_int4_packed(packed.blocks, packed.rows, packed.cols, packed.scales, hq, in_scale_);
    for (Eigen::Index c = 0; c < a.cols(); ++c) a(r, c) = y[static_cast<std::size_t>(c)] + lin.b.value(0, c);
  }
  Vec inv_std;
  Mat mask;
  const Mat n = qln(a, inv_std, mask);
  StateEmbedding e;
  e.bits = 4;
  e.scale = out_scale_;
  e.codes.resize(static_cast<std::size_t>(n.size()));
  for (Eigen::Index i = 0; i < n.size(); ++i) {
    e.codes[static_cast<std::size_t>(i)] = quant::quantize_value(n.data()[i], out_scale_, -8, 7);
  }
  return e;
}

// ---------------------------------------------------------------- small MLPs

AgitationMLP::AgitationMLP(const ModelConfig& cfg, int in_dim, Rng& rng)
    : l1("agit.l1", in_dim, cfg.agit_hidden1, rng),
      l2("agit.l2", cfg.agit_hidden1, cfg.agit_hidden2, rng),
      l3("agit.l3", cfg.agit_hidden2, 1, rng) {
  l3.W.value.setZero();
  l3.b.value.setConstant(cfg.agit_bias_init);
}

Mat AgitationMLP::forward(const Mat& z) { return l3.forward(r2_.forward(l2.forward(r1_.forward(l1.forward(z))))); }

Mat AgitationMLP::backward(const Mat& dy) {
  return l1.backward(r1_.backward(l2.backward(r2_.backward(l3.backward(dy)))));
}

Mat AgitationMLP::apply(const Mat& z) const {
  return l3.apply(l2.apply(l1.apply(z).cwiseMax(0.0)).cwiseMax(0.0));
}

std::vector<double> AgitationMLP::predict(const Mat& z) const {
  const Mat y = apply(z);
  std::vector<double> out(static_cast<std::size_t>(y.rows()));
  for (Eigen::Index i = 0; i < y.rows(); ++i) out[static_cast<std::size_t>(i)] = std::clamp(y(i, 0), 0.0, 4.0);
  return out;
}

std::vector<nn::Param*> AgitationMLP::params() { return {&l1.W, &l1.b, &l2.W, &l2.b, &l3.W, &l3.b}; }

std::size_t AgitationMLP::param_count() const {
  return static_cast<std::size_t>(l1.W.size() + l1.b.size() + l2.W.size() + l2.b.size() + l3.W.size() +
                                  l3.b.size());
}

Mlp2::Mlp2(const std::string& name, int in, int hidden, int out, Rng& rng)
    : a(name + ".a", in, hidden, rng), b(name + ".b", hidden, out, rng, false) {}

Mat Mlp2::forward(const Mat& x) { return b.forward(r_.forward(a.forward(x))); }
Mat Mlp2::backward(const Mat& dy) { return a.backward(r_.backward(b.backward(dy))); }
std::vector<nn::Param*> Mlp2::params() { return {&a.W, &a.b, &b.W, &b.b}; }
std::size_t Mlp2::param_count() const {
  return static_cast<std::size_t>(a.W.size() + a.b.size() + b.W.size() + b.b.size());
}

Mat pool_input(const Mat& x, int frames, int n_mels, int pool) {
  const int ph = frames / pool, pw = n_mels / pool;
  Mat out = Mat::Zero(x.rows(), static_cast<Eigen::Index>(ph) * pw);
  const double inv = 1.0 / (pool * pool);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (int t = 0; t < ph * pool; ++t) {
      for (int f = 0; f < pw * pool; ++f) {
        out(r, (t / pool) * pw + f / pool) += inv * x(r, static_cast<Eigen::Index>(t) * n_mels + f);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------- MpibModel

MpibModel::MpibModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg.validate();
  Rng rng = make_rng(seed, "model-init");
  encoder = Encoder(cfg, rng);
  trait = TraitHead(cfg, rng);
  state = StateHead(cfg, rng);
  agit = AgitationMLP(cfg, cfg.state_dim, rng);
  recon = Mlp2("recon", cfg.trait_dim + cfg.state_dim, cfg.recon_hidden,
               (cfg.frames / cfg.recon_pool) * (cfg.n_mels / cfg.recon_pool), rng);
  const int patches = (cfg.frames / cfg.tmae_patch) * (cfg.n_mels / cfg.tmae_patch);
  tmae = Mlp2("tmae", cfg.embed_dim + patches, cfg.tmae_hidden, cfg.tmae_patch * cfg.tmae_patch, rng);
}

std::vector<nn::Param*> MpibModel::params() {
  std::vector<nn::Param*> p = encoder.params();
  for (auto* q : trait.params()) p.push_back(q);
  for (auto* q : state.params()) p.push_back(q);
  for (auto* q : agit.params()) p.push_back(q);
  for (auto* q : recon.params()) p.push_back(q);
  return p;
}

std::size_t MpibModel::param_count() {
  return encoder.param_count() + trait.param_count() + state.param_count() + agit.param_count();
}

void MpibModel::zero_grad() {
  for (auto* p : params()) p->zero_grad();
  for (auto* p : tmae.params()) p->zero_grad();
}

losses::LossBreakdown MpibModel::loss_and_grad(const Batch& batch, const TrainConfig& tc, bool train, Rng& rng,
                                               ForwardCache* cache) {
  const Eigen::Index b = batch.x.rows();
  if (static_cast<Eigen::Index>(batch.agitation.size()) != b) throw Error("shape error");
  zero_grad();
  const auto& w = tc.weights;

  const Mat h = encoder.forward(batch.x, batch.frames, tc.mode, train, rng);
  const Mat zt = trait.forward(h, train, rng);
  StateOutput st = state.forward(h, train, rng);
  const Mat pred = agit.forward(st.z);

  losses::LossBreakdown c;
  Mat dzt = Mat::Zero(zt.rows(), zt.cols());
  Mat dzs = Mat::Zero(st.z.rows(), st.z.cols());
  Mat dzq = Mat::Zero(st.zq.rows(), st.zq.cols());

  Mat target(b, 1);
  for (Eigen::Index i = 0; i < b; ++i) target(i, 0) = batch.agitation[static_cast<std::size_t>(i)];
  const auto agit_loss = losses::mse_loss(pred, target);
  c.agit = agit_loss.value;

  Mat recon_pred, recon_target;
  if (tc.use_recon) {
    Mat in(b, zt.cols() + st.z.cols());
    in << zt, st.z;
    recon_pred = recon.forward(in);
    recon_target = pool_input(batch.x, batch.frames, cfg_.n_mels, cfg_.recon_pool);
    const auto r = losses::mse_loss(recon_pred, recon_target);
    c.recon = r.value;
    const Mat din = recon.backward(r.grad);
    dzt += din.leftCols(zt.cols());
    dzs += din.rightCols(st.z.cols());
  }

  try {
    const auto s = losses::stability_loss(zt, batch.participant, batch.session, tc.tau);
    c.stab = s.value;
    if (w.stab != 0.0) dzt += w.stab * s.grad;
  } catch (const Error& e) {
    if (std::string(e.what()) != "no positives") throw;
    spdlog::warn("stability term skipped: batch has no positive pairs");
  }

  if (!batch.smooth_pairs.empty()) {
    const auto sm = losses::smoothness_pairs(st.zq, batch.smooth_pairs);
    c.smooth = sm.value;
    if (w.smooth != 0.0) dzq += w.smooth * sm.grad;
  }

  if (b >= 2) {
    c.orth = losses::opl_loss(zt, st.zq);
    if (w.orth != 0.0) {
      auto [gt, gs] = losses::opl_grad(zt, st.zq);
      dzt += w.orth * gt;
      if (tc.opl_state_grad) dzq += w.orth * gs;
    }
  }

  dzs += agit.backward(w.agit * agit_loss.grad);
  c = losses::composite_loss(c, w);

  Mat dh = trait.backward(dzt);
  dh += state.backward(dzs, dzq);
  if (!tc.freeze_encoder) encoder.backward(dh);

  if (cache) {
    cache->h = h;
    cache->zt = zt;
    cache->state = std::move(st);
    cache->pred = pred;
    cache->recon_pred = std::move(recon_pred);
    cache->recon_target = std::move(recon_target);
  }
  return c;
}

losses::LossBreakdown MpibModel::train_step(const Batch& batch, const TrainConfig& tc, nn::AdamW& opt, double lr,
                                            Rng& rng) {
  const auto c = loss_and_grad(batch, tc, true, rng);
  std::vector<nn::Param*> p;
  if (!tc.freeze_encoder) p = encoder.params();
  for (auto* q : trait.params()) p.push_back(q);
  for (auto* q : state.params()) p.push_back(q);
  for (auto* q : agit.params()) p.push_back(q);
  if (tc.use_recon) {
    for (auto* q : recon.params()) p.push_back(q);
  }
  opt.step(p, lr);
  if (tc.spectral_bound > 0.0) nn::project_spectral_norm(trait.lin.W.value, tc.spectral_bound);
  return c;
}

double MpibModel::tmae_loss_and_grad(const Mat& x, int frames, double mask_ratio, Rng& rng) {
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw Error("invalid ratio");
  const int p = cfg_.tmae_patch;
  if (frames % p != 0 || cfg_.n_mels % p != 0) throw Error("window not divisible by patch");
  const int pt = frames / p, pf = cfg_.n_mels / p;
  const int n_patches = pt * pf;
  const int n_mask = std::clamp(static_cast<int>(std::lround(mask_ratio * n_patches)), 1, n_patches);
  const Eigen::Index b = x.rows();

  zero_grad();
  Mat xm = x;
  std::vector<std::vector<int>> masked(static_cast<std::size_t>(b));
  std::vector<int> order(static_cast<std::size_t>(n_patches));
  for (Eigen::Index r = 0; r < b; ++r) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    masked[static_cast<std::size_t>(r)].assign(order.begin(), order.begin() + n_mask);
    for (int id : masked[static_cast<std::size_t>(r)]) {
      const int t0 = (id / pf) * p, f0 = (id % pf) * p;
      for (int t = 0; t < p; ++t) {
        for (int f = 0; f < p; ++f) xm(r, static_cast<Eigen::Index>(t0 + t) * cfg_.n_mels + f0 + f) = 0.0;
      }
    }
  }

  const Mat h = encoder.forward(xm, frames, EncoderMode::fp16, true, rng);
  const Eigen::Index rows = b * n_mask;
  Mat in = Mat::Zero(rows, cfg_.embed_dim + n_patches);
  Mat target(rows, p * p);
  for (Eigen::Index r = 0; r < b; ++r) {
    for (int k = 0; k < n_mask; ++k) {
      const Eigen::Index row = r * n_mask + k;
      const int id = masked[static_cast<std::size_t>(r)][static_cast<std::size_t>(k)];
      in.row(row).head(cfg_.embed_dim) = h.row(r);
      in(row, cfg_.embed_dim + id) = 1.0;
      const int t0 = (id / pf) * p, f0 = (id % pf) * p;
      for (int t = 0; t < p; ++t) {
        for (int f = 0; f < p; ++f) target(row, t * p + f) = x(r, static_cast<Eigen::Index>(t0 + t) * cfg_.n_mels + f0 + f);
      }
    }
  }
  const Mat out = tmae.forward(in);
  const auto l = losses::mse_loss(out, target);
  const Mat din = tmae.backward(l.grad);
  Mat dh = Mat::Zero(b, cfg_.embed_dim);
  for (Eigen::Index r = 0; r < b; ++r) {
    for (int k = 0; k < n_mask; ++k) dh.row(r) += din.row(r * n_mask + k).head(cfg_.embed_dim);
  }
  encoder.backward(dh);
  return l.value;
}

double MpibModel::tmae_pretrain_step(const Mat& x, int frames, double mask_ratio, nn::AdamW& opt, double lr,
                                     Rng& rng) {
  const double loss = tmae_loss_and_grad(x, frames, mask_ratio, rng);
  std::vector<nn::Param*> p = encoder.params();
  for (auto* q : tmae.params()) p.push_back(q);
  opt.step(p, lr);
  return loss;
}

MpibModel::Embeddings MpibModel::embed(const Mat& x, int frames, EncoderMode mode) {
  Embeddings e;
  const Eigen::Index n = x.rows();
  e.h.resize(n, cfg_.embed_dim);
  e.zt.resize(n, cfg_.trait_dim);
  e.zs_pre.resize(n, cfg_.state_dim);
  e.zq.resize(n, cfg_.state_dim);
  e.agitation.resize(static_cast<std::size_t>(n));
  e.state.bits = state.bits();
  Rng rng(0);
  constexpr Eigen::Index kChunk = 256;
  for (Eigen::Index s = 0; s < n; s += kChunk) {
    const Eigen::Index m = std::min(kChunk, n - s);
    const Mat xc = x.middleRows(s, m);
    const Mat h = encoder.forward(xc, frames, mode, false, rng);
    const Mat zt = trait.forward(h, false, rng);
    const auto st = state.forward(h, false, rng);
    const auto pred = agit.predict(st.zq);
    e.h.middleRows(s, m) = h;
    e.zt.middleRows(s, m) = zt;
    e.zs_pre.middleRows(s, m) = st.pre;
    e.zq.middleRows(s, m) = st.zq;
    std::copy(pred.begin(), pred.end(), e.agitation.begin() + s);
    e.state.scale = st.emb.scale;
    e.state.codes.insert(e.state.codes.end(), st.emb.codes.begin(), st.emb.codes.end());
  }
  return e;
}

// ---------------------------------------------------------------- onboarding

TraitProfile onboard(const std::array<std::vector<double>, 3>& embeddings, const std::array<double, 3>& confidence,
                     double delta, std::int64_t created_at) {
  std::string flagged;
  for (int i = 0; i < 3; ++i) {
    if (confidence[i] > delta) {
      if (!flagged.empty()) flagged += ",";
      flagged += std::to_string(i);
    }
  }
  if (!flagged.empty()) throw Error("recording flagged: " + flagged);
  const std::size_t d = embeddings[0].size();
  if (d == 0 || embeddings[1].size() != d || embeddings[2].size() != d) throw Error("shape error");
  TraitProfile p;
  p.centroid.resize(d);
  for (std::size_t j = 0; j < d; ++j) {
    double v[3] = {embeddings[0][j], embeddings[1][j], embeddings[2][j]};
    std::sort(v, v + 3);
    p.centroid[j] = v[1];
  }
  p.created_at = created_at;
  p.source_count = 3;
  return p;
}

double state_confidence(double agitation_pred) { return std::clamp(agitation_pred, 0.0, 4.0) / 4.0; }

DriftStatus check_drift(const TraitProfile& profile, const std::vector<double>& recent, double threshold) {
  if (profile.centroid.size() != recent.size()) throw Error("shape error");
  const Eigen::Map<const RowVec> a(profile.centroid.data(), static_cast<Eigen::Index>(recent.size()));
  const Eigen::Map<const RowVec> b(recent.data(), static_cast<Eigen::Index>(recent.size()));
  const double dist = 1.0 - nn::cosine_similarity(a, b);
  // Strict inequality with a rounding allowance so a constructed distance of exactly
  // the threshold is not flipped by the last ulp of the cosine.
  return dist > threshold + 1e-12 ? DriftStatus::reonboard : DriftStatus::ok;
}

std::vector<std::uint8_t> serialize_profile(const TraitProfile& p) {
  std::vector<std::uint8_t> out;
  out.reserve(p.centroid.size() * 2 + 8);
  for (double v : p.centroid) {
    const std::uint16_t h = float_to_half(static_cast<float>(v));
    out.push_back(static_cast<std::uint8_t>(h & 0xff));
    out.push_back(static_cast<std::uint8_t>(h >> 8));
  }
  const auto ts = static_cast<std::uint64_t>(p.created_at);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((ts >> (8 * i)) & 0xff));
  return out;
}

TraitProfile deserialize_profile(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || (bytes.size() - 8) % 2 != 0) throw Error("bad profile size");
  TraitProfile p;
  const std::size_t d = (bytes.size() - 8) / 2;
  p.centroid.resize(d);
  for (std::size_t i = 0; i < d; ++i) {
    const auto h = static_cast<std::uint16_t>(bytes[2 * i] | (bytes[2 * i + 1] << 8));
    p.centroid[i] = half_to_float(h);
  }
  std::uint64_t ts = 0;
  for (int i = 0; i < 8; ++i) ts |= static_cast<std::uint64_t>(bytes[2 * d + i]) << (8 * i);
  p.created_at = static_cast<std::int64_t>(ts);
  return p;
}

}  // namespace mpib::model
