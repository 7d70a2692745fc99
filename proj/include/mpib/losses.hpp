// SPDX-License-Identifier: Apache-2.0
/**
 * @file losses.hpp
 * @brief Loss terms of the composite objective with analytic gradients.
 */
#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mpib/nn.hpp"

namespace mpib::losses {

using nn::Mat;
using nn::Vec;

struct LossWeights {
  double stab = 0.5;    // lambda1
  double smooth = 0.3;  // lambda2
  double orth = 1.0;    // lambda3
  double agit = 1.0;    // lambda4

  /// "exp": grid-searched weights; "impl": implementation-section weights.
  static LossWeights preset(const std::string& name);
  void validate() const;
};

struct LossBreakdown {
  double recon = 0.0;
  double stab = 0.0;
  double smooth = 0.0;
  double orth = 0.0;
  double agit = 0.0;
  double total = 0.0;
};

struct ValueGrad {
  double value = 0.0;
  Mat grad;
};

/// Dequantized state matrix from integer codes and a per-tensor scale.
Mat dequantize(std::span<const std::int32_t> codes, Eigen::Index rows, Eigen::Index cols, double scale);

/// (1/B^2) * ||Zt_c^T Zs_c||_F^2 on column-centered inputs.
double opl_loss(const Mat& zt, const Mat& zs);
/// Gradients w.r.t. zt and zs (uncentered inputs).
std::pair<Mat, Mat> opl_grad(const Mat& zt, const Mat& zs);

/// Contrastive loss over cosine similarities / tau. For every anchor i and every positive p
/// (same participant, different session) the term is -log softmax over candidates
/// {positives of i} U {samples of other participants}; the loss is the mean over (i, p).
ValueGrad stability_loss(const Mat& zt, std::span<const int> participant, std::span<const int> session,
                         double tau = 0.07);

/// Squared L2 distance between two vectors.
double smoothness_loss(const Eigen::Ref<const nn::RowVec>& prev, const Eigen::Ref<const nn::RowVec>& curr);
/// Mean squared L2 distance over index pairs; grad w.r.t. z.
ValueGrad smoothness_pairs(const Mat& z, std::span<const std::pair<int, int>> pairs);

double mse_loss(std::span<const double> pred, std::span<const double> target);
ValueGrad mse_loss(const Mat& pred, const Mat& target);

LossBreakdown composite_loss(const LossBreakdown& components, const LossWeights& w);

/// Mean absolute entry of the centered cross-covariance (1/B) Zt_c^T Zs_c.
double mean_abs_cross_cov(const Mat& zt, const Mat& zs);

}  // namespace mpib::losses
