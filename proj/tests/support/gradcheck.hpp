// SPDX-License-Identifier: Apache-2.0
// Central finite-difference gradient checks shared by the unit and acceptance suites.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mpib/common.hpp"
#include "mpib/losses.hpp"
#include "mpib/model.hpp"
#include "mpib/nn.hpp"

namespace mpib::testing {

using nn::Mat;

inline constexpr double kFdStep = 1e-4;
// Deep ReLU stacks have tens of thousands of pre-activations; a 1e-4 step flips some
// of them and the difference quotient straddles a kink. Compositions use a finer step.
inline constexpr double kFdStepDeep = 1e-7;

struct GradCheck {
  std::string name;
  double rel_err = 0.0;
};

inline Mat random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double sd = 1.0) {
  std::normal_distribution<double> d(0.0, sd);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

/// Norm-wise relative error ||a - n|| / max(||a||, ||n||); zero when both vanish.
inline double rel_error(const std::vector<double>& a, const std::vector<double>& n) {
  double diff = 0.0, na = 0.0, nn_ = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn_ += n[i] * n[i];
  }
  const double denom = std::sqrt(std::max(na, nn_));
  if (denom < 1e-12) return std::sqrt(diff);
  return std::sqrt(diff) / denom;
}

/// Compares an analytic gradient against central differences of f over (a sample of) the entries of x.
inline double check_entries(Mat& x, const Mat& analytic, const std::function<double()>& f, Rng& rng,
                            std::size_t max_entries = 0, double step = kFdStep) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(x.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<Eigen::Index>(i);
  if (max_entries > 0 && idx.size() > max_entries) {
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(max_entries);
  }
  std::vector<double> a, n;
  for (Eigen::Index i : idx) {
    const double orig = x.data()[i];
    x.data()[i] = orig + step;
    const double fp = f();
    x.data()[i] = orig - step;
    const double fm = f();
    x.data()[i] = orig;
    n.push_back((fp - fm) / (2 * step));
    a.push_back(analytic.data()[i]);
  }
  return rel_error(a, n);
}

/// Compares a Jacobian-vector product against the central difference along v.
inline double check_jvp(Mat& x, const Mat& v, const Mat& jvp, const std::function<Mat()>& f,
                        double step = kFdStep) {
  const Mat orig = x;
  x = orig + step * v;
  const Mat fp = f();
  x = orig - step * v;
  const Mat fm = f();
  x = orig;
  const Mat fd = (fp - fm) / (2 * step);
  std::vector<double> a(jvp.data(), jvp.data() + jvp.size()), n(fd.data(), fd.data() + fd.size());
  return rel_error(a, n);
}

inline double dot(const Mat& a, const Mat& b) { return (a.array() * b.array()).sum(); }

inline void randomize_bias(nn::Param& b, Rng& rng) { b.value = random_mat(b.value.rows(), b.value.cols(), rng, 0.3); }

/// Runs every layer and loss check for one seed; returns the worst relative error per item.
inline std::vector<GradCheck> gradient_suite(std::uint64_t seed, bool include_model = true) {
  Rng rng = make_rng(seed, "gradcheck");
  std::vector<GradCheck> out;
  auto worst = [](std::initializer_list<double> v) { return *std::max_element(v.begin(), v.end()); };

  {  // Linear: input, weight and bias gradients plus tangent
    nn::Linear lin("t.lin", 7, 5, rng);
    randomize_bias(lin.b, rng);
    Mat x = random_mat(4, 7, rng);
    const Mat g = random_mat(4, 5, rng);
    lin.W.zero_grad();
    lin.b.zero_grad();
    lin.forward(x);
    const Mat dx = lin.backward(g);
    const Mat dw = lin.W.grad, db = lin.b.grad;
    auto f = [&] { return dot(lin.apply(x), g); };
    const double e1 = check_entries(x, dx, f, rng);
    const double e2 = check_entries(lin.W.value, dw, f, rng);
    const double e3 = check_entries(lin.b.value, db, f, rng);
    lin.forward(x);
    const Mat v = random_mat(4, 7, rng);
    const double e4 = check_jvp(x, v, lin.tangent(v), [&] { return lin.apply(x); });
    out.push_back({"linear", worst({e1, e2, e3, e4})});
  }
  {  // ReLU, inputs kept away from the kink
    nn::ReLU relu;
    Mat x = random_mat(5, 6, rng);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      if (std::abs(x.data()[i]) < 0.05) x.data()[i] = 0.1;
    }
    const Mat g = random_mat(5, 6, rng);
    relu.forward(x);
    const Mat dx = relu.backward(g);
    nn::ReLU probe;
    out.push_back({"relu", check_entries(x, dx, [&] { return dot(probe.forward(x), g); }, rng)});
  }
  {  // Dropout with a frozen mask
    nn::Dropout drop(0.3);
    Mat x = random_mat(6, 8, rng);
    Rng mrng(seed);
    drop.forward(x, true, mrng);
    const Mat mask = drop.mask();
    const Mat g = random_mat(6, 8, rng);
    const Mat dx = drop.backward(g);
    auto f = [&] {
      nn::Dropout d2(0.3);
      Rng r2(seed);
      return dot(d2.forward(x, true, r2), g);
    };
    out.push_back({"dropout", check_entries(x, dx, f, rng)});
  }
  {  // LayerNorm
    nn::LayerNorm ln(1e-5);
    Mat x = random_mat(4, 9, rng, 2.0);
    const Mat g = random_mat(4, 9, rng);
    ln.forward(x);
    const Mat dx = ln.backward(g);
    const Mat v = random_mat(4, 9, rng);
    const Mat jv = ln.tangent(v);
    auto f = [&] {
      nn::LayerNorm l2(1e-5);
      return l2.forward(x);
    };
    const double e1 = check_entries(x, dx, [&] { return dot(f(), g); }, rng);
    const double e2 = check_jvp(x, v, jv, f);
    out.push_back({"layernorm", worst({e1, e2})});
  }
  for (int stride : {1, 2}) {  // dense 3x3 convolution
    nn::Conv3x3 conv("t.conv", 3, 4, stride, rng);
    randomize_bias(conv.lin.b, rng);
    const nn::Shape4 s{2, 5, 6, 3};
    Mat x = random_mat(s.rows(), 3, rng);
    const nn::Shape4 os = conv.out_shape(s);
    const Mat g = random_mat(os.rows(), 4, rng);
    conv.lin.W.zero_grad();
    conv.lin.b.zero_grad();
    conv.forward(x, s);
    const Mat dx = conv.backward(g);
    const Mat dw = conv.lin.W.grad, db = conv.lin.b.grad;
    auto fwd = [&] {
      nn::Conv3x3 c2 = conv;
      return c2.forward(x, s);
    };
    auto f = [&] { return dot(fwd(), g); };
    const double e1 = check_entries(x, dx, f, rng);
    const double e2 = check_entries(conv.lin.W.value, dw, f, rng);
    const double e3 = check_entries(conv.lin.b.value, db, f, rng);
    conv.forward(x, s);
    const Mat v = random_mat(s.rows(), 3, rng);
    const double e4 = check_jvp(x, v, conv.tangent(v), fwd);
    out.push_back({"conv3x3/s" + std::to_string(stride), worst({e1, e2, e3, e4})});
  }
  for (int stride : {1, 2}) {  // depthwise 3x3 convolution
    nn::Depthwise3x3 dw3("t.dw", 4, stride, rng);
    randomize_bias(dw3.b, rng);
    const nn::Shape4 s{2, 6, 5, 4};
    Mat x = random_mat(s.rows(), 4, rng);
    const nn::Shape4 os = dw3.out_shape(s);
    const Mat g = random_mat(os.rows(), 4, rng);
    dw3.W.zero_grad();
    dw3.b.zero_grad();
    dw3.forward(x, s);
    const Mat dx = dw3.backward(g);
    const Mat dw = dw3.W.grad, db = dw3.b.grad;
    auto fwd = [&] { return dw3.apply(x, s, dw3.W.value); };
    auto f = [&] { return dot(fwd(), g); };
    const double e1 = check_entries(x, dx, f, rng);
    const double e2 = check_entries(dw3.W.value, dw, f, rng);
    const double e3 = check_entries(dw3.b.value, db, f, rng);
    dw3.forward(x, s);
    const Mat v = random_mat(s.rows(), 4, rng);
    const double e4 = check_jvp(x, v, dw3.tangent(v), fwd);
    out.push_back({"depthwise3x3/s" + std::to_string(stride), worst({e1, e2, e3, e4})});
  }
  {  // time pooling
    const nn::Shape4 s{2, 4, 3, 5};
    Mat x = random_mat(s.rows(), 5, rng);
    const Mat g = random_mat(2, 15, rng);
    const Mat dx = nn::pool_time_backward(g, s);
    out.push_back({"pool_time", check_entries(x, dx, [&] { return dot(nn::pool_time(x, s), g); }, rng)});
  }

  model::ModelConfig mc;
  {  // encoder (float path, dropout off): input, sampled parameters, tangent
    Rng init = make_rng(seed, "enc");
    model::Encoder enc(mc, init);
    for (auto* p : enc.params()) {
      if (p->name.ends_with(".b")) randomize_bias(*p, rng);
    }
    Mat x = random_mat(2, mc.frames * mc.n_mels, rng);
    const Mat g = random_mat(2, mc.embed_dim, rng);
    Rng r0(1);
    for (auto* p : enc.params()) p->zero_grad();
    enc.forward(x, mc.frames, model::EncoderMode::fp16, false, r0);
    const Mat dx = enc.backward(g);
    auto fwd = [&] {
      Rng r(1);
      return enc.forward(x, mc.frames, model::EncoderMode::fp16, false, r);
    };
    auto f = [&] { return dot(fwd(), g); };
    double e = 0.0;
    std::vector<std::pair<nn::Param*, Mat>> grads;
    for (auto* p : enc.params()) grads.emplace_back(p, p->grad);
    e = std::max(e, check_entries(x, dx, f, rng, 64, kFdStepDeep));
    for (auto& [p, gr] : grads) e = std::max(e, check_entries(p->value, gr, f, rng, 24, kFdStepDeep));
    fwd();
    const Mat v = random_mat(2, mc.frames * mc.n_mels, rng);
    const Mat jv = enc.tangent(v);
    e = std::max(e, check_jvp(x, v, jv, fwd, kFdStepDeep));
    out.push_back({"encoder", e});
  }
  {  // trait head
    Rng init = make_rng(seed, "trait");
    model::TraitHead th(mc, init);
    randomize_bias(th.lin.b, rng);
    Mat h = random_mat(3, mc.embed_dim, rng);
    const Mat g = random_mat(3, mc.trait_dim, rng);
    Rng r0(1);
    th.lin.W.zero_grad();
    th.lin.b.zero_grad();
    th.forward(h, false, r0);
    const Mat dh = th.backward(g);
    const Mat dw = th.lin.W.grad, db = th.lin.b.grad;
    auto fwd = [&] {
      model::TraitHead t2 = th;
      Rng r(1);
      return t2.forward(h, false, r);
    };
    auto f = [&] { return dot(fwd(), g); };
    const double e1 = check_entries(h, dh, f, rng);
    const double e2 = check_entries(th.lin.W.value, dw, f, rng, 200);
    const double e3 = check_entries(th.lin.b.value, db, f, rng);
    th.forward(h, false, r0);
    const Mat v = random_mat(3, mc.embed_dim, rng);
    const double e4 = check_jvp(h, v, th.tangent(v), fwd);
    out.push_back({"trait_head", worst({e1, e2, e3, e4})});
  }
  {  // state head, float path
    model::ModelConfig sc = mc;
    sc.state_bits = 16;
    Rng init = make_rng(seed, "state");
    model::StateHead sh(sc, init);
    randomize_bias(sh.lin.b, rng);
    Mat h = random_mat(3, sc.embed_dim, rng);
    const Mat gz = random_mat(3, sc.state_dim, rng), gq = random_mat(3, sc.state_dim, rng);
    Rng r0(1);
    sh.lin.W.zero_grad();
    sh.lin.b.zero_grad();
    sh.forward(h, false, r0);
    const Mat dh = sh.backward(gz, gq);
    const Mat dw = sh.lin.W.grad, db = sh.lin.b.grad;
    auto f = [&] {
      model::StateHead s2 = sh;
      Rng r(1);
      const auto o = s2.forward(h, false, r);
      return dot(o.z, gz) + dot(o.zq, gq);
    };
    out.push_back({"state_head_float", worst({check_entries(h, dh, f, rng), check_entries(sh.lin.W.value, dw, f, rng, 200),
                                              check_entries(sh.lin.b.value, db, f, rng)})});
  }
  {  // agitation regressor and two-layer MLP
    Rng init = make_rng(seed, "agit");
    model::AgitationMLP ag(mc, mc.state_dim, init);
    Mat z = random_mat(4, mc.state_dim, rng);
    const Mat g = random_mat(4, 1, rng);
    for (auto* p : ag.params()) {
      if (p->name.ends_with(".b")) randomize_bias(*p, rng);
      p->zero_grad();
    }
    ag.forward(z);
    const Mat dz = ag.backward(g);
    std::vector<std::pair<nn::Param*, Mat>> grads;
    for (auto* p : ag.params()) grads.emplace_back(p, p->grad);
    auto f = [&] { return dot(ag.apply(z), g); };
    double e = check_entries(z, dz, f, rng);
    for (auto& [p, gr] : grads) e = std::max(e, check_entries(p->value, gr, f, rng, 100));
    out.push_back({"agitation_mlp", e});

    model::Mlp2 mlp("t.mlp", 6, 9, 4, init);
    for (auto* p : mlp.params()) {
      if (p->name.ends_with(".b")) randomize_bias(*p, rng);
      p->zero_grad();
    }
    Mat x = random_mat(3, 6, rng);
    const Mat gm = random_mat(3, 4, rng);
    mlp.forward(x);
    const Mat dx = mlp.backward(gm);
    grads.clear();
    for (auto* p : mlp.params()) grads.emplace_back(p, p->grad);
    auto fm = [&] {
      model::Mlp2 m2 = mlp;
      return dot(m2.forward(x), gm);
    };
    double em = check_entries(x, dx, fm, rng);
    for (auto& [p, gr] : grads) em = std::max(em, check_entries(p->value, gr, fm, rng));
    out.push_back({"mlp2", em});
  }

  {  // losses
    Mat zt = random_mat(6, 5, rng), zs = random_mat(6, 4, rng);
    auto [gt, gs] = losses::opl_grad(zt, zs);
    auto fo = [&] { return losses::opl_loss(zt, zs); };
    out.push_back({"opl", worst({check_entries(zt, gt, fo, rng), check_entries(zs, gs, fo, rng)})});

    const std::vector<int> part{0, 0, 1, 1, 2, 2, 0}, sess{1, 2, 1, 2, 1, 2, 3};
    Mat z = random_mat(7, 5, rng);
    const auto st = losses::stability_loss(z, part, sess, 0.07);
    out.push_back({"stability", check_entries(z, st.grad, [&] { return losses::stability_loss(z, part, sess, 0.07).value; }, rng)});

    const std::vector<std::pair<int, int>> pairs{{0, 1}, {1, 2}, {4, 5}};
    Mat zq = random_mat(6, 4, rng);
    const auto sm = losses::smoothness_pairs(zq, pairs);
    out.push_back({"smoothness", check_entries(zq, sm.grad, [&] { return losses::smoothness_pairs(zq, pairs).value; }, rng)});

    Mat pred = random_mat(5, 3, rng);
    const Mat target = random_mat(5, 3, rng);
    const auto ms = losses::mse_loss(pred, target);
    out.push_back({"mse", check_entries(pred, ms.grad, [&] { return losses::mse_loss(pred, target).value; }, rng)});
  }

  if (include_model) {  // full objective on a 2-sample and a 4-sample batch, float path
    for (int b : {2, 4}) {
      model::ModelConfig fc = mc;
      fc.state_bits = 16;
      model::MpibModel m(fc, derive_seed(seed, "model"));
      for (auto* p : m.params()) {
        if (p->name.ends_with(".b")) randomize_bias(*p, rng);
      }
      model::Batch batch;
      batch.x = random_mat(b, fc.frames * fc.n_mels, rng);
      std::uniform_real_distribution<double> ag(0.0, 4.0);
      for (int i = 0; i < b; ++i) {
        batch.participant.push_back(i / 2);
        batch.session.push_back(1 + i % 2);
        batch.agitation.push_back(ag(rng));
      }
      batch.smooth_pairs = {{0, 1}};
      model::TrainConfig tc;
      tc.weights = losses::LossWeights::preset("impl");
      Rng r0(1);
      m.loss_and_grad(batch, tc, false, r0);
      std::vector<std::pair<nn::Param*, Mat>> grads;
      for (auto* p : m.params()) grads.emplace_back(p, p->grad);
      auto f = [&] {
        Rng r(1);
        return m.loss_and_grad(batch, tc, false, r).total;
      };
      double e = 0.0;
      for (auto& [p, gr] : grads) {
        if (p->name.starts_with("tmae")) continue;  // not part of the training objective
        e = std::max(e, check_entries(p->value, gr, f, rng, 12, kFdStepDeep));
      }
      out.push_back({"model_objective/b" + std::to_string(b), e});
    }
  }
  return out;
}

}  // namespace mpib::testing
