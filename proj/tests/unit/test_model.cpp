// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>

#include "../support/gradcheck.hpp"
#include "mpib/eval.hpp"
#include "mpib/model.hpp"
#include "mpib/synth.hpp"
#include "mpib/train.hpp"

using namespace mpib;
using namespace mpib::model;
using mpib::testing::random_mat;

namespace {

constexpr int kIn = features::kWindowFrames * features::kMelBands;

}  // namespace

TEST(Model, ParameterBudget) {
  ModelConfig mc;
  MpibModel m(mc, 1);
  EXPECT_EQ(m.trait.param_count(), 8256u);
  EXPECT_EQ(m.state.param_count(), 4128u);
  EXPECT_LE(m.param_count(), 600000u);
  EXPECT_EQ(m.param_count(), m.encoder.param_count() + 8256u + 4128u + m.agit.param_count());
  EXPECT_EQ(eval::capacity_bits(mc.trait_dim, 16) / eval::capacity_bits(mc.state_dim, mc.state_bits), 8);
  EXPECT_EQ(m.trait.drop.rate(), 0.1);
  EXPECT_EQ(m.state.dropout().rate(), 0.3);
}

TEST(Model, ConfigValidation) {
  ModelConfig mc;
  mc.state_bits = 7;
  EXPECT_NO_THROW(mc.validate());
  mc.state_bits = 12;
  EXPECT_THROW(mc.validate(), Error);
  EXPECT_THROW(parse_encoder_mode("int4"), Error);
  EXPECT_EQ(to_string(parse_encoder_mode("int8_qat")), "int8_qat");
}

TEST(Encoder, DeterministicWithoutDropout) {
  ModelConfig mc;
  Rng init(1), r1(2), r2(3);
  Encoder enc(mc, init);
  const Mat x = Mat::Zero(1, kIn);
  const Mat a = enc.forward(x, mc.frames, EncoderMode::fp16, false, r1);
  const Mat b = enc.forward(x, mc.frames, EncoderMode::fp16, false, r2);
  EXPECT_EQ(a.cols(), 128);
  EXPECT_EQ(a, b);
}

TEST(Encoder, PtqStaysCloseToFloat) {
  ModelConfig mc;
  Rng init(4), rng(5);
  Encoder enc(mc, init);
  enc.calibrate_ptq(random_mat(32, kIn, rng), mc.frames);
  ASSERT_TRUE(enc.int8_ready());
  const Mat x = random_mat(8, kIn, rng);
  const Mat fp = enc.forward(x, mc.frames, EncoderMode::fp16, false, rng);
  const Mat q = enc.forward(x, mc.frames, EncoderMode::int8_ptq, false, rng);
  for (Eigen::Index i = 0; i < x.rows(); ++i) EXPECT_LE((q.row(i) - fp.row(i)).norm(), 0.1 * fp.row(i).norm());
}

TEST(TraitHead, LayerNormStatistics) {
  ModelConfig mc;
  Rng init(2), rng(3);
  TraitHead th(mc, init);
  const Mat h = random_mat(5, 128, rng, 3.0);
  const Mat z = th.forward(h, false, rng);
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double mu = z.row(i).mean();
    const double var = (z.row(i).array() - mu).square().mean();
    EXPECT_LE(std::abs(mu), 1e-6);
    EXPECT_NEAR(var, 1.0, 1e-4);
  }
  th.lin.W.value.setZero();
  th.lin.b.value.setZero();
  const Mat zero = th.forward(h, false, rng);
  EXPECT_EQ(zero.cwiseAbs().maxCoeff(), 0.0);
}

TEST(StateHead, PassthroughAtSixteenBits) {
  ModelConfig mc;
  mc.state_bits = 16;
  Rng init(6), rng(7);
  StateHead sh(mc, init);
  const Mat h = random_mat(4, 128, rng);
  const auto out = sh.forward(h, false, rng);
  nn::LayerNorm ln(mc.ln_eps);
  const Mat want = ln.forward(sh.lin.apply(h));
  EXPECT_EQ(out.zq, want);
  EXPECT_TRUE(out.emb.codes.empty());
}

TEST(StateHead, FourBitCodesAndDeployPath) {
  ModelConfig mc;
  Rng init(8), rng(9);
  StateHead sh(mc, init);
  const Mat h = random_mat(400, 128, rng);
  sh.forward(h.topRows(64), true, rng);  // calibrates scales
  const auto out = sh.forward(h, false, rng);
  for (Eigen::Index c = 0; c < out.zq.cols(); ++c) {
    std::set<double> levels;
    for (Eigen::Index r = 0; r < out.zq.rows(); ++r) levels.insert(out.zq(r, c));
    EXPECT_LE(levels.size(), 16u);
  }
  for (auto code : out.emb.codes) {
    EXPECT_GE(code, -8);
    EXPECT_LE(code, 7);
  }
  const auto packed = sh.packed_weights();
  EXPECT_EQ(packed.blocks.size() * quant::kBlockBytes, 32u * 128u / 2u);
  const auto dep = sh.forward_deploy(h.topRows(16));
  ASSERT_EQ(dep.codes.size(), 16u * 32u);
  // Integer deployment differs from fake quantization only by activation rounding.
  std::size_t agree = 0;
  for (std::size_t i = 0; i < dep.codes.size(); ++i) agree += std::abs(dep.codes[i] - out.emb.codes[i]) <= 1;
  EXPECT_GE(static_cast<double>(agree) / static_cast<double>(dep.codes.size()), 0.95);
}

TEST(Agitation, InitAndRange) {
  ModelConfig mc;
  Rng init(1), rng(2);
  AgitationMLP ag(mc, mc.state_dim, init);
  const auto p0 = ag.predict(Mat::Zero(3, mc.state_dim));
  for (double v : p0) EXPECT_EQ(v, 2.0);
  ag.l3.W.value = random_mat(1, mc.agit_hidden2, rng, 5.0);
  for (double v : ag.predict(random_mat(50, mc.state_dim, rng, 4.0))) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 4.0);
  }
  EXPECT_EQ(state_confidence(5.0), 1.0);
  EXPECT_EQ(state_confidence(1.0), 0.25);
}

TEST(Tmae, ZeroDecoderGivesMaskedEnergy) {
  ModelConfig mc;
  MpibModel m(mc, 3);
  for (auto* p : m.tmae.params()) p->value.setZero();
  Rng rng(4);
  const Mat x = Mat::Constant(2, kIn, 1.5);
  EXPECT_NEAR(m.tmae_loss_and_grad(x, mc.frames, 0.75, rng), 2.25, 1e-12);
  EXPECT_THROW(m.tmae_loss_and_grad(x, mc.frames, 1.0, rng), Error);
  EXPECT_THROW(m.tmae_loss_and_grad(x, mc.frames, 0.0, rng), Error);
  // 96 x 64 window in 16 x 16 patches: 6 x 4 = 24 patches, 75% masked.
  EXPECT_EQ(std::lround(0.75 * (mc.n_mels / mc.tmae_patch) * (mc.frames / mc.tmae_patch)), 18);
}

TEST(Tmae, PretrainingHalvesLoss) {
  synth::SynthConfig sc;
  sc.n_speakers = 10;
  sc.windows_per_session = 4;
  sc.seed = 21;
  const auto corpus = synth::generate_corpus(sc);
  std::vector<std::size_t> rows(corpus.samples.size());
  std::iota(rows.begin(), rows.end(), 0);
  const auto data = train::make_dataset(corpus, rows, train::fit_norm(corpus, rows));
  ModelConfig mc;
  MpibModel m(mc, 5);
  nn::AdamW opt(nn::AdamWConfig{.lr = 1e-3, .weight_decay = 0.0});
  Rng rng(6);
  const Mat batch = data.x.topRows(16);
  Rng eval_rng(7);
  const double initial = m.tmae_loss_and_grad(batch, mc.frames, 0.75, eval_rng);
  for (int s = 0; s < 200; ++s) m.tmae_pretrain_step(batch, mc.frames, 0.75, opt, 1e-3, rng);
  Rng eval_rng2(7);
  EXPECT_LT(m.tmae_loss_and_grad(batch, mc.frames, 0.75, eval_rng2), 0.5 * initial);
}

TEST(TrainStep, AccountingIdentityAndDegenerateWeights) {
  ModelConfig mc;
  MpibModel m(mc, 11);
  Rng rng(12);
  Batch b;
  b.x = random_mat(6, kIn, rng);
  b.participant = {0, 0, 1, 1, 2, 2};
  b.session = {1, 2, 1, 2, 1, 2};
  b.agitation = {0.5, 1.0, 2.0, 3.5, 1.5, 0.0};
  b.smooth_pairs = {{0, 1}};
  TrainConfig tc;
  tc.weights = losses::LossWeights::preset("impl");
  Rng r(1);
  const auto c = m.loss_and_grad(b, tc, false, r);
  const auto& w = tc.weights;
  EXPECT_NEAR(c.total, c.recon + w.stab * c.stab + w.smooth * c.smooth + w.orth * c.orth + w.agit * c.agit, 1e-9);
  for (double v : {c.recon, c.stab, c.smooth, c.orth, c.agit, c.total}) EXPECT_GE(v, 0.0);

  tc.weights = losses::LossWeights{0, 0, 0, 1};
  tc.use_recon = false;
  ForwardCache cache;
  Rng r2(1);
  const auto only = m.loss_and_grad(b, tc, false, r2, &cache);
  std::vector<double> pred(6);
  for (int i = 0; i < 6; ++i) pred[i] = cache.pred(i, 0);
  EXPECT_NEAR(only.total, losses::mse_loss(pred, b.agitation), 1e-12);

  // A batch without cross-session positives skips the stability term.
  Batch lone = b;
  lone.session = {1, 1, 1, 1, 1, 1};
  Rng r3(1);
  EXPECT_EQ(m.loss_and_grad(lone, tc, false, r3).stab, 0.0);
}

TEST(TrainStep, ReducesLossOnFixedBatch) {
  ModelConfig mc;
  MpibModel m(mc, 13);
  Rng rng(14);
  Batch b;
  b.x = random_mat(8, kIn, rng);
  b.participant = {0, 0, 1, 1, 2, 2, 3, 3};
  b.session = {1, 2, 1, 2, 1, 2, 1, 2};
  b.agitation = {0.5, 1.0, 2.0, 3.5, 1.5, 0.0, 2.5, 3.0};
  TrainConfig tc;
  nn::AdamW opt(nn::AdamWConfig{});
  Rng r0(1);
  const double first = m.loss_and_grad(b, tc, false, r0).total;
  for (int s = 0; s < 30; ++s) m.train_step(b, tc, opt, 1e-3, rng);
  Rng r1(1);
  EXPECT_LT(m.loss_and_grad(b, tc, false, r1).total, first);
  EXPECT_LE(nn::spectral_norm(m.trait.lin.W.value), 1.0 + 1e-6);
}

TEST(Onboarding, MedianProfile) {
  std::vector<double> e(64, 0.25);
  auto p = onboard({e, e, e}, {0.1, 0.2, 0.3}, 0.5, 42);
  EXPECT_EQ(p.centroid, e);
  std::vector<double> outlier = e;
  outlier[3] += 100.0;
  std::vector<double> other = e;
  other[3] = 0.5;
  p = onboard({e, outlier, other}, {0, 0, 0}, 0.5);
  EXPECT_EQ(p.centroid[3], 0.5);
  try {
    onboard({e, e, e}, {0.9, 0.1, 0.8}, 0.5);
    FAIL() << "expected flagged recordings";
  } catch (const Error& err) {
    EXPECT_STREQ(err.what(), "recording flagged: 0,2");
  }
}

TEST(Onboarding, ProfileSerialization) {
  TraitProfile p;
  p.centroid.resize(64);
  for (int i = 0; i < 64; ++i) p.centroid[i] = 0.125 * (i - 32);
  p.created_at = 1700000000;
  const auto bytes = serialize_profile(p);
  EXPECT_EQ(bytes.size(), 128u + 8u);
  const auto back = deserialize_profile(bytes);
  EXPECT_EQ(back.centroid, p.centroid);  // multiples of 1/8 are exact in binary16
  EXPECT_EQ(back.created_at, p.created_at);
}

TEST(Onboarding, DriftBoundary) {
  TraitProfile p;
  p.centroid = {1.0, 0.0};
  EXPECT_EQ(check_drift(p, {2.0, 0.0}), DriftStatus::ok);
  EXPECT_EQ(check_drift(p, {0.0, 1.0}), DriftStatus::reonboard);
  // Distance equal to the threshold is not a drift.
  EXPECT_EQ(check_drift(p, {3.0, 0.0}, 0.0), DriftStatus::ok);
  EXPECT_EQ(check_drift(p, {0.0, 1.0}, 1.0), DriftStatus::ok);
  EXPECT_THROW(check_drift(p, {0.0, 0.0}), Error);
}

TEST(Checkpoint, RoundTrip) {
  ModelConfig mc;
  MpibModel m(mc, 21);
  Rng rng(22);
  const Mat x = random_mat(16, kIn, rng);
  m.state.forward(m.encoder.forward(x, mc.frames, EncoderMode::fp16, false, rng), true, rng);
  const auto path = std::filesystem::temp_directory_path() / "mpib_unit_ckpt.mpck";
  save_checkpoint(path, m, features::GlobalNormStats{-40.0, 12.0, 100}, "{\"k\":1}");
  EXPECT_EQ(peek_checkpoint_config(path), "{\"k\":1}");
  MpibModel back(mc, 99);
  const auto loaded = load_checkpoint(path, back);
  EXPECT_EQ(loaded.norm.mean, -40.0);
  EXPECT_EQ(loaded.norm.std, 12.0);
  const auto e1 = m.embed(x, mc.frames);
  const auto e2 = back.embed(x, mc.frames);
  EXPECT_LE((e1.zt - e2.zt).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_EQ(e1.state.codes, e2.state.codes);
  EXPECT_EQ(e1.agitation.size(), 16u);
}
