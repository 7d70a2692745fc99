// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <Eigen/SVD>
#include <cmath>

#include "../support/gradcheck.hpp"
#include "mpib/privacy.hpp"

using namespace mpib;
using namespace mpib::privacy;
using mpib::testing::random_mat;

TEST(Perturb, IdentityAtZeroAndNoiseScale) {
  Rng rng(1);
  const Mat z = random_mat(50, 64, rng);
  EXPECT_EQ(perturb_trait(z, 0.0, 3), z);
  const Mat big = Mat::Zero(10000, 1);
  const Mat noisy = perturb_trait(big, 2.5, 11);
  const double mean = noisy.mean();
  const double sd = std::sqrt((noisy.array() - mean).square().sum() / (noisy.size() - 1));
  EXPECT_NEAR(sd, 2.5, 0.03 * 2.5);
  EXPECT_EQ(perturb_trait(big, 2.5, 11), noisy);
  // Common random numbers across the sigma grid.
  EXPECT_LE((perturb_trait(big, 5.0, 11) - 2.0 * noisy).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Lipschitz, LinearMapMatchesSvd) {
  Rng rng(2);
  const Mat a = random_mat(16, 16, rng);
  auto jvp = [&](const Mat& v) -> Mat { return v * a.transpose(); };
  auto vjp = [&](const Mat& u) -> Mat { return u * a; };
  const auto est = estimate_lipschitz(jvp, vjp, 16, 2000, 1e-12);
  const double oracle = Eigen::JacobiSVD<Mat>(a).singularValues()(0);
  EXPECT_NEAR(est.value, oracle, 1e-4 * oracle);
  EXPECT_TRUE(est.converged);
}

TEST(Lipschitz, ScaledIdentity) {
  for (double s : {1.0, 3.2}) {
    auto jvp = [&](const Mat& v) -> Mat { return s * v; };
    const auto est = estimate_lipschitz(jvp, jvp, 32);
    EXPECT_NEAR(est.value, s, 1e-12);
  }
}

TEST(Lipschitz, FlagsNonConvergence) {
  // One iteration cannot meet a 1e-12 tolerance.
  Rng rng(3);
  const Mat a = random_mat(16, 16, rng);
  auto jvp = [&](const Mat& v) -> Mat { return v * a.transpose(); };
  auto vjp = [&](const Mat& u) -> Mat { return u * a; };
  const auto est = estimate_lipschitz(jvp, vjp, 16, 1, 1e-12);
  EXPECT_EQ(est.iterations, 1);
  EXPECT_FALSE(est.converged);
  EXPECT_GT(est.value, 0.0);
}

TEST(Lipschitz, TraitMapOfModel) {
  model::MpibModel m(model::ModelConfig{}, 5);
  Rng rng(4);
  const Mat x = random_mat(1, features::kWindowFrames * features::kMelBands, rng);
  const auto est = trait_lipschitz(m, x, features::kWindowFrames);
  EXPECT_GT(est.value, 0.0);
  EXPECT_TRUE(std::isfinite(est.value));
  const auto s = make_sensitivity(3.2, 2.0);
  EXPECT_DOUBLE_EQ(s.delta2, 6.4);
}

TEST(SpectralProjection, ScalesOnlyWhenAboveBound) {
  Mat w = Mat::Zero(4, 4);
  w.diagonal() << 0.5, 0.2, 0.1, 0.05;
  const Mat before = w;
  project_spectral_norm(w, 1.0);
  EXPECT_EQ(w, before);
  Rng rng(5);
  const Mat q = Eigen::HouseholderQR<Mat>(random_mat(6, 6, rng)).householderQ();
  Mat w2 = 2.0 * q;
  project_spectral_norm(w2, 1.0);
  EXPECT_LE((w2 - q).cwiseAbs().maxCoeff(), 1e-6);
  Mat w3 = random_mat(8, 5, rng, 3.0);
  project_spectral_norm(w3, 1.0);
  const Mat once = w3;
  project_spectral_norm(w3, 1.0);
  EXPECT_LE((w3 - once).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LE(Eigen::JacobiSVD<Mat>(w3).singularValues()(0), 1.0 + 1e-6);
}

TEST(Mia, NullDistributionIsChance) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    const Mat members = random_mat(300, 64, rng);
    const Mat nonmembers = random_mat(300, 64, rng);
    MiaConfig cfg;
    cfg.seed = seed;
    const auto r = mia_evaluate(members, nonmembers, cfg);
    EXPECT_GE(r.auc, 0.45) << "seed " << seed;
    EXPECT_LE(r.auc, 0.55) << "seed " << seed;
    EXPECT_EQ(r.n_train + r.n_eval, 600u);
  }
}

TEST(Mia, SeparatedSupports) {
  Rng rng(6);
  const Mat members = (random_mat(100, 16, rng).array().abs() + 1.0).matrix();
  const Mat nonmembers = (-random_mat(100, 16, rng).array().abs() - 1.0).matrix();
  EXPECT_GE(mia_evaluate(members, nonmembers).auc, 0.99);
  try {
    mia_evaluate(members.topRows(9), nonmembers);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "insufficient attack data");
  }
}

TEST(Tradeoff, CsvShape) {
  const std::string csv = tradeoff_csv({{0.0, 0.5, 0.51, 0.2, 0.4}, {25.3, 0.45, 0.5, 0.1, 0.45}});
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "sigma,rho,mia_auc,top1,eer");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}
