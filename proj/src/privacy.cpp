// SPDX-License-Identifier: Apache-2.0
#include "mpib/privacy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "mpib/common.hpp"
#include "mpib/eval.hpp"

namespace mpib::privacy {

Mat perturb_trait(const Mat& z, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw Error("sigma must be non-negative");
  Rng rng = make_rng(seed, "trait-noise");
  std::normal_distribution<double> nd(0.0, 1.0);
  Mat out = z;
  // Row-major draw order so a prefix of rows sees the same noise regardless of batch size.
  for (Eigen::Index r = 0; r < z.rows(); ++r)
    for (Eigen::Index c = 0; c < z.cols(); ++c) out(r, c) += sigma * nd(rng);
  return out;
}

LipschitzEstimate estimate_lipschitz(const std::function<Mat(const Mat&)>& jvp,
                                     const std::function<Mat(const Mat&)>& vjp, Eigen::Index dim_in, int max_iter,
                                     double tol, std::uint64_t seed) {
  if (dim_in < 1 || max_iter < 1) throw Error("invalid power iteration setup");
  Rng rng = make_rng(seed, "power-iteration");
  std::normal_distribution<double> nd(0.0, 1.0);
  Mat v(1, dim_in);
  for (Eigen::Index i = 0; i < dim_in; ++i) v(0, i) = nd(rng);
  v /= v.norm();
  LipschitzEstimate est;
  double prev = 0.0;
  for (int it = 1; it <= max_iter; ++it) {
    const Mat u = jvp(v);
    const double sigma = u.norm();
    Mat w = vjp(u);
    const double wn = w.norm();
    est.iterations = it;
    est.value = sigma;
    if (wn == 0.0) {
      est.converged = true;
      est.rel_change = 0.0;
      return est;
    }
    v = w / wn;
    est.rel_change = prev > 0.0 ? std::abs(sigma - prev) / prev : 1.0;
    if (it > 1 && est.rel_change < tol) {
      est.converged = true;
      return est;
    }
    prev = sigma;
  }
  return est;
}

namespace {

LipschitzEstimate local_lipschitz(model::MpibModel& m, const Mat& x_ref, int frames, bool through_trait,
                                  int max_iter, double tol, std::uint64_t seed) {
  if (x_ref.rows() != 1) throw Error("shape error");
  Rng rng = make_rng(seed, "lipschitz-forward");
  const Mat h = m.encoder.forward(x_ref, frames, model::EncoderMode::fp16, false, rng);
  if (through_trait) m.trait.forward(h, false, rng);
  auto jvp = [&](const Mat& v) {
    const Mat dh = m.encoder.tangent(v);
    return through_trait ? m.trait.tangent(dh) : dh;
  };
  auto vjp = [&](const Mat& u) {
    const Mat dh = through_trait ? m.trait.backward(u) : u;
    return m.encoder.backward(dh);
  };
  auto est = estimate_lipschitz(jvp, vjp, x_ref.cols(), max_iter, tol, seed);
  // backward() accumulated parameter gradients as a side effect
  m.zero_grad();
  return est;
}

}  // namespace

LipschitzEstimate trait_lipschitz(model::MpibModel& m, const Mat& x_ref, int frames, int max_iter, double tol,
                                  std::uint64_t seed) {
  return local_lipschitz(m, x_ref, frames, true, max_iter, tol, seed);
}

LipschitzEstimate encoder_lipschitz(model::MpibModel& m, const Mat& x_ref, int frames, int max_iter, double tol,
                                    std::uint64_t seed) {
  return local_lipschitz(m, x_ref, frames, false, max_iter, tol, seed);
}

SensitivityEstimate make_sensitivity(double lipschitz, double input_norm_bound) {
  if (!(lipschitz >= 0.0 && input_norm_bound >= 0.0)) throw Error("sensitivity inputs must be non-negative");
  return {lipschitz, input_norm_bound, lipschitz * input_norm_bound};
}

void project_spectral_norm(Mat& w, double bound) { nn::project_spectral_norm(w, bound); }

MiaResult mia_evaluate(const Mat& members, const Mat& nonmembers, const MiaConfig& cfg) {
  if (members.rows() < 10 || nonmembers.rows() < 10) throw Error("insufficient attack data");
  if (members.cols() != nonmembers.cols()) throw Error("shape error");
  if (cfg.layers < 2 || cfg.hidden < 1 || cfg.epochs < 1 || cfg.batch < 1) throw Error("invalid attack config");
  Rng rng = make_rng(cfg.seed, "mia");

  // 50/50 split within each class.
  auto split = [&](Eigen::Index n) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto half = idx.begin() + static_cast<std::ptrdiff_t>(n / 2);
    return std::pair{std::vector<Eigen::Index>(idx.begin(), half), std::vector<Eigen::Index>(half, idx.end())};
  };
  const auto [mem_tr, mem_ev] = split(members.rows());
  const auto [non_tr, non_ev] = split(nonmembers.rows());
  const Eigen::Index d = members.cols();
  auto gather = [&](const std::vector<Eigen::Index>& a, const std::vector<Eigen::Index>& b, Mat& x,
                    std::vector<double>& y) {
    x.resize(static_cast<Eigen::Index>(a.size() + b.size()), d);
    y.clear();
    Eigen::Index r = 0;
    for (auto i : a) {
      x.row(r++) = members.row(i);
      y.push_back(1.0);
    }
    for (auto i : b) {
      x.row(r++) = nonmembers.row(i);
      y.push_back(0.0);
    }
  };
  Mat xtr, xev;
  std::vector<double> ytr, yev;
  gather(mem_tr, non_tr, xtr, ytr);
  gather(mem_ev, non_ev, xev, yev);

  // Standardize with attack-train statistics.
  const nn::RowVec mu = xtr.colwise().mean();
  nn::RowVec sd = ((xtr.rowwise() - mu).array().square().colwise().mean()).sqrt();
  sd = sd.unaryExpr([](double v) { return v > 1e-12 ? v : 1.0; });
  auto standardize = [&](Mat& x) { x = (x.rowwise() - mu).array().rowwise() / sd.array(); };
  standardize(xtr);
  standardize(xev);

  std::vector<nn::Linear> lins;
  std::vector<nn::ReLU> relus(static_cast<std::size_t>(cfg.layers - 1));
  for (int l = 0; l < cfg.layers; ++l) {
    const int in = l == 0 ? static_cast<int>(d) : cfg.hidden;
    const int out = l == cfg.layers - 1 ? 1 : cfg.hidden;
    lins.emplace_back("mia." + std::to_string(l), in, out, rng, l < cfg.layers - 1);
  }
  std::vector<nn::Param*> params;
  for (auto& l : lins) {
    params.push_back(&l.W);
    params.push_back(&l.b);
  }
  nn::AdamW opt{nn::AdamWConfig{}};
  const auto n = static_cast<std::size_t>(xtr.rows());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int ep = 0; ep < cfg.epochs; ++ep) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t s = 0; s < n; s += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t e = std::min(n, s + static_cast<std::size_t>(cfg.batch));
      Mat xb(static_cast<Eigen::Index>(e - s), d);
      Mat yb(static_cast<Eigen::Index>(e - s), 1);
      for (std::size_t i = s; i < e; ++i) {
        xb.row(static_cast<Eigen::Index>(i - s)) = xtr.row(static_cast<Eigen::Index>(order[i]));
        yb(static_cast<Eigen::Index>(i - s), 0) = ytr[order[i]];
      }
      for (auto* p : params) p->zero_grad();
      Mat a = xb;
      for (int l = 0; l < cfg.layers; ++l) {
        a = lins[static_cast<std::size_t>(l)].forward(a);
        if (l < cfg.layers - 1) a = relus[static_cast<std::size_t>(l)].forward(a);
      }
      // d BCE-with-logits / d logit = sigmoid(logit) - y
      Mat g = (1.0 / (1.0 + (-a.array()).exp())).matrix() - yb;
      g /= static_cast<double>(e - s);
      for (int l = cfg.layers; l-- > 0;) {
        if (l < cfg.layers - 1) g = relus[static_cast<std::size_t>(l)].backward(g);
        g = lins[static_cast<std::size_t>(l)].backward(g);
      }
      opt.step(params, cfg.lr);
    }
  }

  Mat a = xev;
  for (int l = 0; l < cfg.layers; ++l) {
    a = lins[static_cast<std::size_t>(l)].apply(a);
    if (l < cfg.layers - 1) a = a.cwiseMax(0.0);
  }
  std::vector<double> scores(static_cast<std::size_t>(a.rows()));
  std::vector<std::uint8_t> pos(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    scores[i] = a(static_cast<Eigen::Index>(i), 0);
    pos[i] = yev[i] > 0.5 ? 1 : 0;
  }
  MiaResult r;
  r.auc = eval::roc_auc(scores, pos);
  r.n_train = n;
  r.n_eval = scores.size();
  return r;
}

std::string tradeoff_csv(const std::vector<TradeoffRow>& rows) {
  std::ostringstream os;
  os << "sigma,rho,mia_auc,top1,eer\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.6g,%.6g,%.6g,%.6g,%.6g\n", r.sigma, r.rho, r.mia_auc, r.top1, r.eer);
    os << buf;
  }
  return os.str();
}

}  // namespace mpib::privacy
