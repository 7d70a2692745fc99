// SPDX-License-Identifier: Apache-2.0
#include "mpib/nn.hpp"

#include <cmath>
#include <numbers>

namespace mpib::nn {

Param::Param(std::string n, Mat init, bool wd) : name(std::move(n)), value(std::move(init)), decay(wd) {
  grad = Mat::Zero(value.rows(), value.cols());
  m = Mat::Zero(value.rows(), value.cols());
  v = Mat::Zero(value.rows(), value.cols());
}

void init_he_uniform(Mat& w, int fan_in, Rng& rng) {
  const double a = std::sqrt(6.0 / fan_in);
  std::uniform_real_distribution<double> d(-a, a);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = d(rng);
}

void init_xavier_uniform(Mat& w, int fan_in, int fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> d(-a, a);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = d(rng);
}

// ---------------------------------------------------------------- Linear

Linear::Linear(std::string name, int in, int out, Rng& rng, bool he) {
  Mat w(out, in);
  if (he) {
    init_he_uniform(w, in, rng);
  } else {
    init_xavier_uniform(w, in, out, rng);
  }
  W = Param(name + ".W", std::move(w), true);
  b = Param(name + ".b", Mat::Zero(1, out), false);
}

Mat Linear::forward(const Mat& x) {
  x_ = x;
  use_eff_ = false;
  Mat y = x * W.value.transpose();
  y.rowwise() += b.value.row(0);
  return y;
}

Mat Linear::forward_with(const Mat& x, const Mat& w_eff) {
  x_ = x;
  w_eff_ = w_eff;
  use_eff_ = true;
  Mat y = x * w_eff_.transpose();
  y.rowwise() += b.value.row(0);
  return y;
}

Mat Linear::backward(const Mat& dy) {
  W.grad.noalias() += dy.transpose() * x_;
  b.grad.row(0) += dy.colwise().sum();
  return dy * (w_used());
}

Mat Linear::tangent(const Mat& dx) const { return dx * w_used().transpose(); }

Mat Linear::apply(const Mat& x) const {
  Mat y = x * W.value.transpose();
  y.rowwise() += b.value.row(0);
  return y;
}

// ---------------------------------------------------------------- ReLU / Dropout

Mat ReLU::forward(const Mat& x) {
  mask_ = (x.array() > 0.0).cast<double>().matrix();
  return x.cwiseMax(0.0);
}

Mat ReLU::backward(const Mat& dy) const { return dy.cwiseProduct(mask_); }

Mat Dropout::forward(const Mat& x, bool train, Rng& rng) {
  if (!train || p_ <= 0.0) {
    active_ = false;
    return x;
  }
  std::bernoulli_distribution keep(1.0 - p_);
  const double inv = 1.0 / (1.0 - p_);
  mask_.resize(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < mask_.size(); ++i) mask_.data()[i] = keep(rng) ? inv : 0.0;
  active_ = true;
  return x.cwiseProduct(mask_);
}

Mat Dropout::backward(const Mat& dy) const {
  if (!active_) return dy;
  return dy.cwiseProduct(mask_);
}

// ---------------------------------------------------------------- LayerNorm

Mat LayerNorm::forward(const Mat& x) {
  const auto d = static_cast<double>(x.cols());
  y_.resize(x.rows(), x.cols());
  inv_std_.resize(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).sum() / d;
    const double var = (x.row(r).array() - mu).square().sum() / d;
    const double is = 1.0 / std::sqrt(var + eps_);
    inv_std_(r) = is;
    y_.row(r) = (x.row(r).array() - mu) * is;
  }
  return y_;
}

Mat LayerNorm::backward_from(const Mat& y, const Vec& inv_std, const Mat& dy) {
  const auto d = static_cast<double>(y.cols());
  Mat dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double mdy = dy.row(r).sum() / d;
    const double mdyy = dy.row(r).dot(y.row(r)) / d;
    dx.row(r) = inv_std(r) * (dy.row(r).array() - mdy - y.row(r).array() * mdyy);
  }
  return dx;
}

Mat LayerNorm::backward(const Mat& dy) const { return backward_from(y_, inv_std_, dy); }

// ---------------------------------------------------------------- convolutions

int conv_out(int in, int stride) { return (in + 2 - 3) / stride + 1; }

Mat im2col3x3(const Mat& x, const Shape4& s, int stride) {
  const int ho = conv_out(s.h, stride), wo = conv_out(s.w, stride);
  Mat cols = Mat::Zero(static_cast<Eigen::Index>(s.n) * ho * wo, 9 * s.c);
  for (int n = 0; n < s.n; ++n) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        const Eigen::Index orow = (static_cast<Eigen::Index>(n) * ho + oy) * wo + ox;
        for (int ky = 0; ky < 3; ++ky) {
          const int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= s.h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int ix = ox * stride + kx - 1;
            if (ix < 0 || ix >= s.w) continue;
            const Eigen::Index irow = (static_cast<Eigen::Index>(n) * s.h + iy) * s.w + ix;
            const int tap = ky * 3 + kx;
            for (int c = 0; c < s.c; ++c) cols(orow, tap * s.c + c) = x(irow, c);
          }
        }
      }
    }
  }
  return cols;
}

Mat col2im3x3(const Mat& cols, const Shape4& s, int stride) {
  const int ho = conv_out(s.h, stride), wo = conv_out(s.w, stride);
  Mat x = Mat::Zero(s.rows(), s.c);
  for (int n = 0; n < s.n; ++n) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        const Eigen::Index orow = (static_cast<Eigen::Index>(n) * ho + oy) * wo + ox;
        for (int ky = 0; ky < 3; ++ky) {
          const int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= s.h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int ix = ox * stride + kx - 1;
            if (ix < 0 || ix >= s.w) continue;
            const Eigen::Index irow = (static_cast<Eigen::Index>(n) * s.h + iy) * s.w + ix;
            const int tap = ky * 3 + kx;
            for (int c = 0; c < s.c; ++c) x(irow, c) += cols(orow, tap * s.c + c);
          }
        }
      }
    }
  }
  return x;
}

Conv3x3::Conv3x3(std::string name, int cin, int cout, int stride_, Rng& rng)
    : lin(std::move(name), 9 * cin, cout, rng), stride(stride_) {}

Shape4 Conv3x3::out_shape(const Shape4& s) const {
  return Shape4{s.n, conv_out(s.h, stride), conv_out(s.w, stride), lin.out()};
}

Mat Conv3x3::forward(const Mat& x, const Shape4& s) {
  in_shape_ = s;
  return lin.forward(im2col3x3(x, s, stride));
}

Mat Conv3x3::backward(const Mat& dy) { return col2im3x3(lin.backward(dy), in_shape_, stride); }

Mat Conv3x3::tangent(const Mat& dx) const { return lin.tangent(im2col3x3(dx, in_shape_, stride)); }

Depthwise3x3::Depthwise3x3(std::string name, int channels, int stride_, Rng& rng) : stride(stride_) {
  Mat w(channels, 9);
  init_he_uniform(w, 9, rng);
  W = Param(name + ".W", std::move(w), true);
  b = Param(name + ".b", Mat::Zero(1, channels), false);
}

Shape4 Depthwise3x3::out_shape(const Shape4& s) const {
  return Shape4{s.n, conv_out(s.h, stride), conv_out(s.w, stride), s.c};
}

Mat Depthwise3x3::conv(const Mat& x, const Shape4& s, const Mat& w, bool bias) const {
  const Shape4 o = out_shape(s);
  Mat y(o.rows(), s.c);
  if (bias) {
    y.rowwise() = b.value.row(0);
  } else {
    y.setZero();
  }
  for (int n = 0; n < s.n; ++n) {
    for (int oy = 0; oy < o.h; ++oy) {
      for (int ox = 0; ox < o.w; ++ox) {
        const Eigen::Index orow = (static_cast<Eigen::Index>(n) * o.h + oy) * o.w + ox;
        double* yr = y.row(orow).data();
        for (int ky = 0; ky < 3; ++ky) {
          const int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= s.h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int ix = ox * stride + kx - 1;
            if (ix < 0 || ix >= s.w) continue;
            const Eigen::Index irow = (static_cast<Eigen::Index>(n) * s.h + iy) * s.w + ix;
            const double* xr = x.row(irow).data();
            const int tap = ky * 3 + kx;
            for (int c = 0; c < s.c; ++c) yr[c] += w(c, tap) * xr[c];
          }
        }
      }
    }
  }
  return y;
}

Mat Depthwise3x3::forward(const Mat& x, const Shape4& s) {
  x_ = x;
  in_shape_ = s;
  use_eff_ = false;
  return conv(x, s, W.value, true);
}

Mat Depthwise3x3::forward_with(const Mat& x, const Shape4& s, const Mat& w_eff) {
  x_ = x;
  in_shape_ = s;
  w_eff_ = w_eff;
  use_eff_ = true;
  return conv(x, s, w_eff_, true);
}

Mat Depthwise3x3::apply(const Mat& x, const Shape4& s, const Mat& w) const { return conv(x, s, w, true); }

Mat Depthwise3x3::tangent(const Mat& dx) const { return conv(dx, in_shape_, w_used(), false); }

Mat Depthwise3x3::backward(const Mat& dy) {
  const Shape4& s = in_shape_;
  const Shape4 o = out_shape(s);
  const Mat& w = w_used();
  Mat dx = Mat::Zero(s.rows(), s.c);
  b.grad.row(0) += dy.colwise().sum();
  for (int n = 0; n < s.n; ++n) {
    for (int oy = 0; oy < o.h; ++oy) {
      for (int ox = 0; ox < o.w; ++ox) {
        const Eigen::Index orow = (static_cast<Eigen::Index>(n) * o.h + oy) * o.w + ox;
        const double* g = dy.row(orow).data();
        for (int ky = 0; ky < 3; ++ky) {
          const int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= s.h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int ix = ox * stride + kx - 1;
            if (ix < 0 || ix >= s.w) continue;
            const Eigen::Index irow = (static_cast<Eigen::Index>(n) * s.h + iy) * s.w + ix;
            const double* xr = x_.row(irow).data();
            double* dxr = dx.row(irow).data();
            const int tap = ky * 3 + kx;
            for (int c = 0; c < s.c; ++c) {
              W.grad(c, tap) += g[c] * xr[c];
              dxr[c] += g[c] * w(c, tap);
            }
          }
        }
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------- pooling

Mat pool_time(const Mat& x, const Shape4& s) {
  Mat y = Mat::Zero(s.n, static_cast<Eigen::Index>(s.w) * s.c);
  const double inv = 1.0 / s.h;
  for (int n = 0; n < s.n; ++n) {
    for (int t = 0; t < s.h; ++t) {
      for (int f = 0; f < s.w; ++f) {
        const Eigen::Index irow = (static_cast<Eigen::Index>(n) * s.h + t) * s.w + f;
        y.block(n, static_cast<Eigen::Index>(f) * s.c, 1, s.c) += inv * x.row(irow);
      }
    }
  }
  return y;
}

Mat pool_time_backward(const Mat& dy, const Shape4& s) {
  Mat dx(s.rows(), s.c);
  const double inv = 1.0 / s.h;
  for (int n = 0; n < s.n; ++n) {
    for (int t = 0; t < s.h; ++t) {
      for (int f = 0; f < s.w; ++f) {
        const Eigen::Index irow = (static_cast<Eigen::Index>(n) * s.h + t) * s.w + f;
        dx.row(irow) = inv * dy.block(n, static_cast<Eigen::Index>(f) * s.c, 1, s.c);
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------- optimizer

void AdamW::step(const std::vector<Param*>& params, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (Param* p : params) {
    if (!p->trainable) continue;
    if (p->m.size() != p->value.size()) {
      p->m = Mat::Zero(p->value.rows(), p->value.cols());
      p->v = Mat::Zero(p->value.rows(), p->value.cols());
    }
    p->m = cfg_.beta1 * p->m + (1.0 - cfg_.beta1) * p->grad;
    p->v = cfg_.beta2 * p->v + (1.0 - cfg_.beta2) * p->grad.cwiseProduct(p->grad);
    if (p->decay && cfg_.weight_decay > 0.0) p->value *= (1.0 - lr * cfg_.weight_decay);
    p->value.array() -= lr * (p->m.array() / bc1) / ((p->v.array() / bc2).sqrt() + cfg_.eps);
  }
}

double cosine_lr(double base_lr, long step, long total_steps) {
  if (total_steps <= 1) return base_lr;
  const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * t));
}

double spectral_norm(const Mat& w, int iterations, std::uint64_t seed) {
  if (w.size() == 0) return 0.0;
  Rng rng = make_rng(seed, "spectral-norm");
  std::normal_distribution<double> nd;
  Vec v(w.cols());
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = nd(rng);
  v.normalize();
  double sigma = 0.0;
  for (int it = 0; it < iterations; ++it) {
    Vec u = w * v;
    const double un = u.norm();
    if (un == 0.0) return 0.0;
    Vec nv = w.transpose() * (u / un);
    sigma = nv.norm();
    if (sigma == 0.0) return 0.0;
    v = nv / sigma;
  }
  return (w * v).norm();
}

void project_spectral_norm(Mat& w, double bound) {
  if (!(bound > 0.0)) throw Error("bound must be positive");
  if (w.size() == 0) return;
  const double s = Eigen::BDCSVD<Mat>(w).singularValues()(0);
  if (s > bound) w *= bound / s;
}

double cosine_similarity(const Eigen::Ref<const RowVec>& a, const Eigen::Ref<const RowVec>& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw Error("undefined similarity");
  return a.dot(b) / (na * nb);
}

}  // namespace mpib::nn
