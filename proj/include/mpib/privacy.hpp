// SPDX-License-Identifier: Apache-2.0
/**
 * @file privacy.hpp
 * @brief Gaussian perturbation of trait embeddings, Lipschitz estimation and a
 *        membership-inference attack used to audit leakage empirically.
 *
 * The Gaussian noise is a perturbation heuristic. No formal (epsilon, delta) guarantee
 * is claimed: the sensitivity bound below is a local estimate, not a global one.
 */
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mpib/model.hpp"

namespace mpib::privacy {

using nn::Mat;

/// Adds sigma * N(0, 1) per coordinate. The standard normal draws depend only on
/// @p seed and the shape, so runs over a sigma grid share common random numbers.
Mat perturb_trait(const Mat& z, double sigma, std::uint64_t seed);

struct LipschitzEstimate {
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
  double rel_change = 0.0;
};

/// Power iteration on J^T J given matrix-free J v and J^T u maps of a [1 x n] input.
LipschitzEstimate estimate_lipschitz(const std::function<Mat(const Mat&)>& jvp,
                                     const std::function<Mat(const Mat&)>& vjp, Eigen::Index dim_in,
                                     int max_iter = 100, double tol = 1e-6, std::uint64_t seed = 0);

/// Local Lipschitz constant of input -> trait embedding at @p x_ref (one row, dropout off).
LipschitzEstimate trait_lipschitz(model::MpibModel& m, const Mat& x_ref, int frames, int max_iter = 100,
                                  double tol = 1e-6, std::uint64_t seed = 0);
/// Same for input -> encoder embedding h.
LipschitzEstimate encoder_lipschitz(model::MpibModel& m, const Mat& x_ref, int frames, int max_iter = 100,
                                    double tol = 1e-6, std::uint64_t seed = 0);

struct SensitivityEstimate {
  double lipschitz = 0.0;
  double input_norm_bound = 0.0;
  double delta2 = 0.0;  // lipschitz * input_norm_bound
};
SensitivityEstimate make_sensitivity(double lipschitz, double input_norm_bound);

/// Rescales W so its largest singular value is at most @p bound.
void project_spectral_norm(Mat& w, double bound);

struct MiaConfig {
  int hidden = 128;
  int layers = 4;  // linear layers including the output
  int epochs = 60;
  int batch = 64;
  double lr = 1e-3;
  std::uint64_t seed = 1;
};

struct MiaResult {
  double auc = 0.5;
  std::size_t n_train = 0;
  std::size_t n_eval = 0;
};

/// Trains an MLP attack on half of each class and reports ROC-AUC on the other half.
MiaResult mia_evaluate(const Mat& members, const Mat& nonmembers, const MiaConfig& cfg = {});

struct TradeoffRow {
  double sigma = 0.0;
  double rho = 0.0;
  double mia_auc = 0.5;
  double top1 = 0.0;
  double eer = 0.5;
};
std::string tradeoff_csv(const std::vector<TradeoffRow>& rows);

}  // namespace mpib::privacy
