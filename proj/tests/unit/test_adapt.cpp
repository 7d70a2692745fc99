// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "../support/gradcheck.hpp"
#include "mpib/adapt.hpp"
#include "mpib/synth.hpp"
#include "mpib/train.hpp"

using namespace mpib;
using namespace mpib::adapt;
using mpib::testing::random_mat;

namespace {

constexpr int kIn = features::kWindowFrames * features::kMelBands;

}  // namespace

TEST(DpsConfig, Validation) {
  DpsConfig cfg;
  EXPECT_EQ(cfg.subwindows(), 50);
  cfg.passes = 1;
  try {
    cfg.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "insufficient passes");
  }
  cfg.passes = 10;
  cfg.delta_b = 5;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(Uncertainty, ZeroWithoutDropout) {
  model::MpibModel m(model::ModelConfig{}, 1);
  m.encoder.dropout().set_rate(0.0);
  Rng rng(2);
  const Mat x = random_mat(3, kIn, rng);
  m.state.dropout().set_rate(0.0);
  for (double uc : estimate_uncertainty(m, x, features::kWindowFrames, 10, rng)) EXPECT_EQ(uc, 0.0);
  EXPECT_THROW(estimate_uncertainty(m, x, features::kWindowFrames, 1, rng), Error);
}

TEST(Uncertainty, SeededAndNonNegative) {
  model::MpibModel m(model::ModelConfig{}, 1);
  Rng data(3);
  const Mat x = random_mat(4, kIn, data);
  Rng r1(9), r2(9);
  const auto a = estimate_uncertainty(m, x, features::kWindowFrames, 10, r1);
  const auto b = estimate_uncertainty(m, x, features::kWindowFrames, 10, r2);
  EXPECT_EQ(a, b);
  for (double v : a) EXPECT_GT(v, 0.0);
  Rng r3(9);
  EXPECT_EQ(estimate_uncertainty_one(m, x.row(2), features::kWindowFrames, 10, r3), a[0] * 0 + [&] {
    Rng r4(9);
    return estimate_uncertainty(m, x.row(2), features::kWindowFrames, 10, r4)[0];
  }());
}

TEST(Uncertainty, GrowsWithInputNoise) {
  synth::SynthConfig sc;
  sc.n_speakers = 10;
  sc.windows_per_session = 2;
  sc.noise_fraction = 0.0;
  const auto c = synth::generate_corpus(sc);
  std::vector<std::size_t> rows(c.samples.size());
  std::iota(rows.begin(), rows.end(), 0);
  const auto data = train::make_dataset(c, rows, train::fit_norm(c, rows));
  model::MpibModel m(model::ModelConfig{}, 4);
  std::vector<double> level;
  for (double amp : {0.25, 0.5, 1.0}) {
    Rng noise(5);
    const Mat x = data.x + random_mat(data.x.rows(), data.x.cols(), noise, amp);
    Rng rng(6);
    const auto uc = estimate_uncertainty(m, x, data.frames, 10, rng);
    level.push_back(std::accumulate(uc.begin(), uc.end(), 0.0) / static_cast<double>(uc.size()));
  }
  EXPECT_LT(level[0], level[1]);
  EXPECT_LT(level[1], level[2]);
}

TEST(Gate, BinaryWithInclusiveBoundary) {
  DpsConfig cfg;
  EXPECT_EQ(effective_bitwidth(1.0, cfg, 1.0, 0.5), 6);
  EXPECT_EQ(effective_bitwidth(0.0, cfg, 1.0, 0.5), 4);
  EXPECT_EQ(effective_bitwidth(1e9, cfg, 1.0, 0.5), 6);
  EXPECT_EQ(effective_bitwidth(0.999, cfg, 1.0, 0.0), 4);
  EXPECT_EQ(effective_bitwidth(1.001, cfg, 1.0, 0.0), 6);
  EXPECT_THROW(effective_bitwidth(-1.0, cfg, 1.0, 0.5), Error);
  for (double uc = 0.0; uc < 3.0; uc += 0.05) {
    const int b = effective_bitwidth(uc, cfg, 1.0, 0.3);
    EXPECT_TRUE(b == 4 || b == 6);
  }
}

TEST(Gate, RunningNormalizer) {
  UcNormalizer n(4);
  for (double v : {10.0, 1.0, 2.0, 3.0, 4.0}) n.push(v);
  EXPECT_EQ(n.size(), 4u);
  EXPECT_NEAR(n.mean(), 2.5, 1e-15);
  EXPECT_NEAR(n.stddev(), std::sqrt(1.25), 1e-15);
  DpsConfig cfg;
  EXPECT_EQ(effective_bitwidth(2.5, cfg, n), 6);
  EXPECT_EQ(effective_bitwidth(1.0, cfg, n), 4);
}

TEST(Scheduler, ComputesOncePerWindow) {
  DpsScheduler s(DpsConfig{});
  int calls = 0;
  auto uc = [&] {
    ++calls;
    return 0.5 * calls;
  };
  for (int w = 0; w < 3; ++w) {
    for (int sub = 0; sub < 50; ++sub) {
      const auto d = s.decide(w, w * 5000 + sub * 100, uc);
      EXPECT_EQ(d.cache_hit, sub > 0);
      EXPECT_EQ(d.window_id, w);
    }
  }
  EXPECT_EQ(calls, 3);
  EXPECT_NEAR(s.hit_rate(), 147.0 / 150.0, 1e-12);
  EXPECT_EQ(s.cache().window_id, 2);
  DpsDecision d;
  d.window_id = 7;
  d.uc = 0.25;
  d.bits = 6;
  d.trigger_reason = "uc>=mean";
  EXPECT_EQ(dps_csv_header(), "window_id,uc,bits,trigger_reason");
  EXPECT_EQ(dps_csv_row(d), "7,0.25,6,uc>=mean");
}

TEST(Timing, AmortizationStructure) {
  DpsConfig cfg;
  const auto t = dps_timing_model(cfg, 4.1, 0.7, 0.3, 0.1, 0.4, 0.123);
  EXPECT_EQ(t.subwindows, 50);
  EXPECT_NEAR(t.amortized_pass_ms, 7.0 / 50.0, 1e-12);
  EXPECT_NEAR(t.overhead_per_subwindow_ms, (7.0 + 0.3 + 0.1 + 0.123 * 0.4 * 50.0) / 50.0, 1e-12);
  EXPECT_NEAR(t.overhead_per_window_ms, 7.0 + 0.3 + 0.1 + 0.123 * 0.4 * 50.0, 1e-12);
  EXPECT_NEAR(t.total_per_subwindow_ms, 4.1 + t.overhead_per_subwindow_ms, 1e-12);
  const auto no_trigger = dps_timing_model(cfg, 4.1, 0.7, 0.3, 0.1, 0.4, 0.0);
  EXPECT_NEAR(no_trigger.overhead_per_subwindow_ms, 0.148, 1e-12);
  const auto free_passes = dps_timing_model(cfg, 4.1, 0.0, 0.3, 0.1, 0.4, 0.0);
  EXPECT_NEAR(free_passes.overhead_per_subwindow_ms, 0.4 / 50.0, 1e-12);
  DpsConfig longer = cfg;
  longer.window_s = 10.0;
  EXPECT_EQ(longer.subwindows(), 100);
  EXPECT_NEAR(dps_timing_model(longer, 4.1, 0.7, 0.3, 0.1, 0.4, 0.1).amortized_pass_ms, t.amortized_pass_ms / 2.0, 1e-12);
}

TEST(Segments, CountsAndCoverage) {
  EXPECT_EQ(segment_windows(1000, 0.5, 0.5).size(), 39u);
  const auto tiles = segment_windows(1000, 2.0, 0.0);
  ASSERT_EQ(tiles.size(), 5u);
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    EXPECT_EQ(tiles[i].start, 200 * i);
    EXPECT_EQ(tiles[i].length, 200u);
  }
  for (int s = 0; s < 3; ++s) {
    const double scale = ScaleWindows::scales_s[s], ov = ScaleWindows::overlaps[s];
    for (std::size_t n : {1000u, 1234u, 2999u}) {
      const auto segs = segment_windows(n, scale, ov);
      std::vector<int> hit(n, 0);
      for (const auto& g : segs) {
        ASSERT_LE(g.start + g.length, n);
        for (std::size_t t = g.start; t < g.start + g.length; ++t) hit[t] = 1;
      }
      // Uncovered frames form a tail shorter than one hop.
      const auto hop = static_cast<std::size_t>(std::llround(scale * (1 - ov) * 100));
      std::size_t first_gap = n;
      for (std::size_t t = 0; t < n; ++t) {
        if (!hit[t]) {
          first_gap = t;
          break;
        }
      }
      for (std::size_t t = first_gap; t < n; ++t) EXPECT_EQ(hit[t], 0);
      EXPECT_LT(n - first_gap, hop);
    }
  }
  features::FeatureMatrix f(300, 2);
  for (std::size_t i = 0; i < f.values.size(); ++i) f.values[i] = static_cast<double>(i);
  const auto w = segment_windows(f, 0.5, 0.5);
  ASSERT_EQ(w.size(), 11u);
  EXPECT_EQ(w[1].at(0, 0), f.at(25, 0));
  EXPECT_THROW(segment_windows(100, 0.5, 1.0), Error);
}

TEST(Mstf, ConstructedIdentityAttention) {
  Rng rng(1);
  MstfAttention att(32, 64, 4, rng);
  att.q.W.value.setZero();
  att.k.W.value.setZero();
  att.q.b.value.setZero();
  att.k.b.value.setZero();
  att.v.W.value.setZero();
  att.v.W.value.topRows(32) = Mat::Identity(32, 32);
  att.v.b.value.setZero();
  att.o.W.value.setZero();
  att.o.W.value.leftCols(32) = Mat::Identity(32, 32);
  att.o.b.value.setZero();
  std::vector<nn::RowVec> st, tr;
  for (int s = 0; s < 3; ++s) {
    st.push_back(random_mat(1, 32, rng).row(0));
    tr.push_back(random_mat(1, 64, rng).row(0));
  }
  const auto out = att.fuse(st, tr);
  const nn::RowVec want_state = (st[0] + st[1] + st[2]) / 3.0;
  const nn::RowVec want_trait = (tr[0] + tr[1] + tr[2]) / 3.0;
  EXPECT_LE((out.state - want_state).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((out.trait - want_trait).cwiseAbs().maxCoeff(), 1e-12);
  ASSERT_EQ(out.attention.size(), 4u);
  for (const auto& a : out.attention) EXPECT_LE((a.array() - 1.0 / 3.0).abs().maxCoeff(), 1e-12);
}

TEST(Mstf, SoftmaxRowsAndErrors) {
  Rng rng(2);
  MstfAttention att(32, 64, 4, rng);
  std::vector<nn::RowVec> st, tr;
  for (int s = 0; s < 3; ++s) {
    st.push_back(random_mat(1, 32, rng, 3.0).row(0));
    tr.push_back(nn::RowVec::Constant(64, 0.5));
  }
  const auto out = att.fuse(st, tr);
  EXPECT_EQ(out.state.size(), 32);
  EXPECT_LE((out.trait.array() - 0.5).abs().maxCoeff(), 1e-15);
  for (const auto& a : out.attention) {
    for (Eigen::Index r = 0; r < 3; ++r) EXPECT_NEAR(a.row(r).sum(), 1.0, 1e-6);
  }
  st.pop_back();
  try {
    att.fuse(st, tr);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "incomplete scales");
  }
  EXPECT_EQ(att.param_count(), 3u * (64 * 32 + 64) + (32 * 64 + 32));
}

TEST(Dps, TriggerRateTracksInjectedNoise) {
  synth::SynthConfig sc;
  sc.n_speakers = 20;
  sc.windows_per_session = 10;
  sc.noise_fraction = 0.12;
  sc.seed = 5;
  const auto c = synth::generate_corpus(sc);
  std::vector<std::size_t> rows(c.samples.size());
  std::iota(rows.begin(), rows.end(), 0);
  const auto norm = train::fit_norm(c, rows);
  const auto data = train::make_dataset(c, rows, norm);
  model::MpibModel m(model::ModelConfig{}, 3);
  train::TrainOptions o;
  o.epochs = 5;
  train::fit(m, data, o);
  Rng rng(7);
  const auto uc = estimate_uncertainty(m, data.x, data.frames, 10, rng);
  DpsScheduler sched(DpsConfig{});
  int triggered = 0;
  for (std::size_t i = 0; i < uc.size(); ++i) {
    triggered += sched.decide(static_cast<std::int64_t>(i), 0, [&] { return uc[i]; }).bits == 6;
  }
  const double rate = static_cast<double>(triggered) / static_cast<double>(uc.size());
  EXPECT_GE(rate, 0.08);
  EXPECT_LE(rate, 0.16);
}
