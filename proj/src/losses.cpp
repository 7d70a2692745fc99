// SPDX-License-Identifier: Apache-2.0
#include "mpib/losses.hpp"

#include <cmath>

#include "mpib/common.hpp"

namespace mpib::losses {

LossWeights LossWeights::preset(const std::string& name) {
  if (name == "exp") return LossWeights{0.5, 0.3, 1.0, 1.0};
  if (name == "impl") return LossWeights{2.0, 0.3, 1.0, 3.0};
  throw Error("unknown loss preset: " + name);
}

void LossWeights::validate() const {
  if (stab < 0 || smooth < 0 || orth < 0 || agit < 0) throw Error("negative loss weight");
}

Mat dequantize(std::span<const std::int32_t> codes, Eigen::Index rows, Eigen::Index cols, double scale) {
  if (static_cast<Eigen::Index>(codes.size()) != rows * cols) throw Error("shape error");
  Mat z(rows, cols);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = codes[static_cast<std::size_t>(i)] * scale;
  return z;
}

namespace {

Mat center_cols(const Mat& x) {
  Mat c = x;
  c.rowwise() -= x.colwise().mean();
  return c;
}

}  // namespace

double opl_loss(const Mat& zt, const Mat& zs) {
  if (zt.rows() != zs.rows()) throw Error("shape error");
  const auto b = static_cast<double>(zt.rows());
  if (zt.rows() < 2) throw Error("batch too small");
  const Mat c = center_cols(zt).transpose() * center_cols(zs);
  return c.squaredNorm() / (b * b);
}

std::pair<Mat, Mat> opl_grad(const Mat& zt, const Mat& zs) {
  if (zt.rows() != zs.rows()) throw Error("shape error");
  if (zt.rows() < 2) throw Error("batch too small");
  const auto b = static_cast<double>(zt.rows());
  const Mat tc = center_cols(zt);
  const Mat sc = center_cols(zs);
  const Mat c = tc.transpose() * sc;
  const double k = 2.0 / (b * b);
  return {k * sc * c.transpose(), k * tc * c};
}

ValueGrad stability_loss(const Mat& zt, std::span<const int> participant, std::span<const int> session,
                         double tau) {
  const Eigen::Index n = zt.rows();
  if (static_cast<Eigen::Index>(participant.size()) != n || static_cast<Eigen::Index>(session.size()) != n) {
    throw Error("shape error");
  }
  Vec norms(n);
  Mat u(n, zt.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    norms(i) = zt.row(i).norm();
    if (norms(i) == 0.0) throw Error("undefined similarity");
    u.row(i) = zt.row(i) / norms(i);
  }
  const Mat s = (u * u.transpose()) / tau;

  Mat g = Mat::Zero(n, n);  // dL/ds
  double total = 0.0;
  long pairs = 0;
  std::vector<Eigen::Index> cand;
  std::vector<double> prob;
  for (Eigen::Index i = 0; i < n; ++i) {
    cand.clear();
    std::vector<Eigen::Index> pos;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const bool same = participant[i] == participant[j];
      if (same && session[i] == session[j]) continue;
      cand.push_back(j);
      if (same) pos.push_back(j);
    }
    if (pos.empty()) continue;
    double mx = -1e300;
    for (auto j : cand) mx = std::max(mx, s(i, j));
    double z = 0.0;
    prob.assign(cand.size(), 0.0);
    for (std::size_t a = 0; a < cand.size(); ++a) {
      prob[a] = std::exp(s(i, cand[a]) - mx);
      z += prob[a];
    }
    const double lse = mx + std::log(z);
    for (double& p : prob) p /= z;
    for (auto p : pos) {
      total += lse - s(i, p);
      ++pairs;
      for (std::size_t a = 0; a < cand.size(); ++a) g(i, cand[a]) += prob[a];
      g(i, p) -= 1.0;
    }
  }
  if (pairs == 0) throw Error("no positives");
  const double inv = 1.0 / static_cast<double>(pairs);
  g *= inv;

  // s = u u^T / tau -> dL/du = (G + G^T) u / tau; then through row normalization.
  const Mat du = ((g + g.transpose()) * u) / tau;
  Mat dz(n, zt.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double proj = du.row(i).dot(u.row(i));
    dz.row(i) = (du.row(i) - proj * u.row(i)) / norms(i);
  }
  return {total * inv, dz};
}

double smoothness_loss(const Eigen::Ref<const nn::RowVec>& prev, const Eigen::Ref<const nn::RowVec>& curr) {
  if (prev.size() != curr.size()) throw Error("shape error");
  return (curr - prev).squaredNorm();
}

ValueGrad smoothness_pairs(const Mat& z, std::span<const std::pair<int, int>> pairs) {
  ValueGrad out{0.0, Mat::Zero(z.rows(), z.cols())};
  if (pairs.empty()) return out;
  const double inv = 1.0 / static_cast<double>(pairs.size());
  for (const auto& [a, b] : pairs) {
    const nn::RowVec d = z.row(b) - z.row(a);
    out.value += d.squaredNorm();
    out.grad.row(b) += 2.0 * inv * d;
    out.grad.row(a) -= 2.0 * inv * d;
  }
  out.value *= inv;
  return out;
}

double mse_loss(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) throw Error("shape error");
  if (pred.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    s += d * d;
  }
  return s / static_cast<double>(pred.size());
}

ValueGrad mse_loss(const Mat& pred, const Mat& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) throw Error("shape error");
  const auto n = static_cast<double>(pred.size());
  const Mat d = pred - target;
  return {d.squaredNorm() / n, (2.0 / n) * d};
}

LossBreakdown composite_loss(const LossBreakdown& c, const LossWeights& w) {
  for (double v : {c.recon, c.stab, c.smooth, c.orth, c.agit}) {
    if (!std::isfinite(v)) throw Error("non-finite loss component");
  }
  LossBreakdown out = c;
  out.total = c.recon + w.stab * c.stab + w.smooth * c.smooth + w.orth * c.orth + w.agit * c.agit;
  return out;
}

double mean_abs_cross_cov(const Mat& zt, const Mat& zs) {
  const auto b = static_cast<double>(zt.rows());
  const Mat c = (center_cols(zt).transpose() * center_cols(zs)) / b;
  return c.cwiseAbs().mean();
}

}  // namespace mpib::losses
