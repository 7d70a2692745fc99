// SPDX-License-Identifier: Apache-2.0
/**
 * @file nn.hpp
 * @brief Minimal layer library with hand-written backward and tangent (JVP) passes.
 *
 * Activations are row-major Eigen matrices in double precision. Spatial tensors
 * use NHWC layout flattened to a (n*h*w) x c matrix.
 */
#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "mpib/common.hpp"

namespace mpib::nn {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

struct Param {
  std::string name;
  Mat value;
  Mat grad;
  Mat m;  // first moment
  Mat v;  // second moment
  bool decay = true;
  bool trainable = true;

  Param() = default;
  Param(std::string n, Mat init, bool wd = true);
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Eigen::Index size() const { return value.size(); }
};

void init_he_uniform(Mat& w, int fan_in, Rng& rng);
void init_xavier_uniform(Mat& w, int fan_in, int fan_out, Rng& rng);

/// y = x W^T + b with W [out x in]. The effective weight used in forward may be a
/// fake-quantized copy; gradients w.r.t. it land in W.grad (caller applies STE).
class Linear {
 public:
  Linear() = default;
  Linear(std::string name, int in, int out, Rng& rng, bool he = true);

  Mat forward(const Mat& x);
  Mat forward_with(const Mat& x, const Mat& w_eff);
  /// Accumulates weight and bias gradients; returns dL/dx.
  Mat backward(const Mat& dy);
  /// J v for a tangent of the cached input (bias excluded).
  Mat tangent(const Mat& dx) const;
  /// Forward without caching (inference).
  Mat apply(const Mat& x) const;

  int in() const { return static_cast<int>(W.value.cols()); }
  int out() const { return static_cast<int>(W.value.rows()); }

  Param W;
  Param b;

 private:
  Mat x_;
  bool use_eff_ = false;
  Mat w_eff_;
  const Mat& w_used() const { return use_eff_ ? w_eff_ : W.value; }
};

class ReLU {
 public:
  Mat forward(const Mat& x);
  Mat backward(const Mat& dy) const;
  Mat tangent(const Mat& dx) const { return backward(dx); }

 private:
  Mat mask_;
};

class Dropout {
 public:
  explicit Dropout(double p = 0.0) : p_(p) {}
  /// Inverted dropout; identity when !train or p == 0.
  Mat forward(const Mat& x, bool train, Rng& rng);
  Mat backward(const Mat& dy) const;
  Mat tangent(const Mat& dx) const { return backward(dx); }
  double rate() const { return p_; }
  void set_rate(double p) { p_ = p; }
  const Mat& mask() const { return mask_; }
  void set_mask(const Mat& m) { mask_ = m; active_ = true; }

 private:
  double p_;
  Mat mask_;
  bool active_ = false;
};

/// Row-wise normalization to zero mean and unit variance, no affine parameters.
class LayerNorm {
 public:
  explicit LayerNorm(double eps = 1e-5) : eps_(eps) {}
  Mat forward(const Mat& x);
  Mat backward(const Mat& dy) const;
  /// The row Jacobian is symmetric, so the tangent equals the backward map.
  Mat tangent(const Mat& dx) const { return backward(dx); }
  double eps() const { return eps_; }
  /// Applies the backward map given a cached normalized output and inverse std.
  static Mat backward_from(const Mat& y, const Vec& inv_std, const Mat& dy);

 private:
  double eps_;
  Mat y_;
  Vec inv_std_;
};

struct Shape4 {
  int n = 0, h = 0, w = 0, c = 0;
  Eigen::Index rows() const { return static_cast<Eigen::Index>(n) * h * w; }
};

int conv_out(int in, int stride);  // 3x3 kernel, padding 1

/// Gathers 3x3 patches (stride s, pad 1) into [(n*ho*wo) x (9*c)], tap-major then channel.
Mat im2col3x3(const Mat& x, const Shape4& s, int stride);
/// Adjoint of im2col3x3.
Mat col2im3x3(const Mat& cols, const Shape4& s, int stride);

/// Dense 3x3 convolution with stride, implemented as im2col followed by a Linear.
class Conv3x3 {
 public:
  Conv3x3() = default;
  Conv3x3(std::string name, int cin, int cout, int stride, Rng& rng);
  Mat forward(const Mat& x, const Shape4& s);
  Mat backward(const Mat& dy);
  Mat tangent(const Mat& dx) const;
  Shape4 out_shape(const Shape4& s) const;
  Linear lin;
  int stride = 2;

 private:
  Shape4 in_shape_;
};

/// Depthwise 3x3 convolution, padding 1; W [c x 9], b [1 x c].
class Depthwise3x3 {
 public:
  Depthwise3x3() = default;
  Depthwise3x3(std::string name, int channels, int stride, Rng& rng);
  Mat forward(const Mat& x, const Shape4& s);
  Mat forward_with(const Mat& x, const Shape4& s, const Mat& w_eff);
  Mat backward(const Mat& dy);
  Mat tangent(const Mat& dx) const;
  Mat apply(const Mat& x, const Shape4& s, const Mat& w) const;
  Shape4 out_shape(const Shape4& s) const;
  Param W;
  Param b;
  int stride = 1;

 private:
  Mat conv(const Mat& x, const Shape4& s, const Mat& w, bool bias) const;
  Mat x_;
  Shape4 in_shape_;
  bool use_eff_ = false;
  Mat w_eff_;
  const Mat& w_used() const { return use_eff_ ? w_eff_ : W.value; }
};

/// Mean over the h (time) axis: [(n*h*w) x c] -> [n x (w*c)].
Mat pool_time(const Mat& x, const Shape4& s);
Mat pool_time_backward(const Mat& dy, const Shape4& s);

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-3;
};

class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}
  void step(const std::vector<Param*>& params, double lr);
  long steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  long t_ = 0;
};

double cosine_lr(double base_lr, long step, long total_steps);

/// Largest singular value by power iteration on W^T W from a seeded start vector.
double spectral_norm(const Mat& w, int iterations = 100, std::uint64_t seed = 0);
/// W <- W * min(1, bound / sigma_max(W)), sigma_max from a dense SVD.
void project_spectral_norm(Mat& w, double bound);

/// Numeric helpers shared by heads and metrics.
double cosine_similarity(const Eigen::Ref<const RowVec>& a, const Eigen::Ref<const RowVec>& b);

}  // namespace mpib::nn
