// SPDX-License-Identifier: Apache-2.0
#include "mpib/eval.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <boost/math/special_functions/digamma.hpp>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>

#include "mpib/common.hpp"

namespace mpib::eval {

using nn::Vec;

// ---------------------------------------------------------------- identification

TrialList build_trials(const Mat& embs, std::span<const int> labels, int enroll) {
  if (static_cast<Eigen::Index>(labels.size()) != embs.rows()) throw Error("shape error");
  if (enroll < 1) throw Error("enroll must be >= 1");
  std::map<int, std::vector<int>> rows;
  for (std::size_t i = 0; i < labels.size(); ++i) rows[labels[i]].push_back(static_cast<int>(i));

  TrialList t;
  std::vector<const std::vector<int>*> kept;
  for (const auto& [spk, r] : rows) {
    if (static_cast<int>(r.size()) < enroll + 1) {
      spdlog::warn("speaker {} has {} utterances; excluded", spk, r.size());
      continue;
    }
    t.speakers.push_back(spk);
    kept.push_back(&r);
  }
  if (t.speakers.empty()) throw Error("no speakers with enough utterances");

  auto unit = [](const nn::RowVec& v) -> nn::RowVec {
    const double n = v.norm();
    return n > 0.0 ? nn::RowVec(v / n) : v;
  };
  t.centroids.resize(static_cast<Eigen::Index>(t.speakers.size()), embs.cols());
  for (std::size_t s = 0; s < kept.size(); ++s) {
    nn::RowVec c = nn::RowVec::Zero(embs.cols());
    for (int k = 0; k < enroll; ++k) c += embs.row((*kept[s])[static_cast<std::size_t>(k)]);
    t.centroids.row(static_cast<Eigen::Index>(s)) = unit(c / enroll);
    for (std::size_t k = static_cast<std::size_t>(enroll); k < kept[s]->size(); ++k) {
      t.probes.push_back((*kept[s])[k]);
      t.probe_speaker.push_back(static_cast<int>(s));
    }
  }
  Mat p(static_cast<Eigen::Index>(t.probes.size()), embs.cols());
  for (std::size_t i = 0; i < t.probes.size(); ++i) p.row(static_cast<Eigen::Index>(i)) = unit(embs.row(t.probes[i]));
  const Mat scores = p * t.centroids.transpose();
  t.trials.reserve(t.probes.size() * t.speakers.size());
  for (std::size_t i = 0; i < t.probes.size(); ++i) {
    for (std::size_t s = 0; s < t.speakers.size(); ++s) {
      t.trials.push_back({t.probes[i], t.speakers[s], static_cast<int>(s) == t.probe_speaker[i],
                          scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s))});
    }
  }
  return t;
}

std::pair<std::vector<double>, std::vector<double>> topk_hits(const TrialList& t) {
  const std::size_t ns = t.speakers.size();
  std::vector<double> h1(t.probes.size()), h5(t.probes.size());
  for (std::size_t i = 0; i < t.probes.size(); ++i) {
    const double own = t.trials[i * ns + static_cast<std::size_t>(t.probe_speaker[i])].score;
    // Ties are broken uniformly at random in expectation: with b competitors strictly
    // better and t tied, the probe's rank is uniform on [b, b + t].
    std::size_t better = 0, tied = 0;
    for (std::size_t s = 0; s < ns; ++s) {
      if (static_cast<int>(s) == t.probe_speaker[i]) continue;
      const double v = t.trials[i * ns + s].score;
      if (v > own) {
        ++better;
      } else if (v == own) {
        ++tied;
      }
    }
    auto hit = [&](double k) {
      return std::clamp((k - static_cast<double>(better)) / static_cast<double>(tied + 1), 0.0, 1.0);
    };
    h1[i] = hit(1.0);
    h5[i] = hit(5.0);
  }
  return {h1, h5};
}

TopK topk_from_trials(const TrialList& t) {
  const auto [h1, h5] = topk_hits(t);
  TopK r;
  r.n_probes = t.probes.size();
  r.n_speakers = t.speakers.size();
  if (r.n_probes == 0) throw Error("no probes");
  r.top1 = std::accumulate(h1.begin(), h1.end(), 0.0) / static_cast<double>(r.n_probes);
  r.top5 = std::accumulate(h5.begin(), h5.end(), 0.0) / static_cast<double>(r.n_probes);
  return r;
}

TopK topk_identification(const Mat& embs, std::span<const int> labels, int enroll) {
  return topk_from_trials(build_trials(embs, labels, enroll));
}

double compute_eer(std::span<const double> scores, std::span<const std::uint8_t> is_target) {
  if (scores.size() != is_target.size()) throw Error("shape error");
  std::size_t nt = 0;
  for (auto t : is_target) nt += t ? 1 : 0;
  const std::size_t nn_ = scores.size() - nt;
  if (nt == 0 || nn_ == 0) throw Error("degenerate trials");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Sweep thresholds at each distinct score (accept score >= threshold), then +inf.
  // Below the threshold: rejected targets (FRR numerator) and rejected non-targets.
  double prev_far = 1.0, prev_frr = 0.0;
  std::size_t rej_t = 0, rej_n = 0;
  std::size_t i = 0;
  bool first = true;
  while (true) {
    const double far = static_cast<double>(nn_ - rej_n) / static_cast<double>(nn_);
    const double frr = static_cast<double>(rej_t) / static_cast<double>(nt);
    if (frr >= far) {
      if (first) return (far + frr) / 2.0;
      const double d0 = prev_frr - prev_far, d1 = frr - far;
      const double a = -d0 / (d1 - d0);
      return prev_far + a * (far - prev_far);
    }
    first = false;
    prev_far = far;
    prev_frr = frr;
    if (i >= order.size()) break;
    const double s = scores[order[i]];
    while (i < order.size() && scores[order[i]] == s) {
      if (is_target[order[i]]) {
        ++rej_t;
      } else {
        ++rej_n;
      }
      ++i;
    }
  }
  return 0.5;  // unreachable: at +inf FAR = 0 <= FRR = 1
}

double compute_eer(const std::vector<Trial>& trials) {
  std::vector<double> s(trials.size());
  std::vector<std::uint8_t> t(trials.size());
  for (std::size_t i = 0; i < trials.size(); ++i) {
    s[i] = trials[i].score;
    t[i] = trials[i].target ? 1 : 0;
  }
  return compute_eer(s, t);
}

double knn_mi(const Mat& embs, std::span<const int> labels, int k) {
  if (static_cast<Eigen::Index>(labels.size()) != embs.rows()) throw Error("shape error");
  if (k < 1) throw Error("k must be >= 1");
  std::map<int, int> counts;
  for (int l : labels) ++counts[l];
  std::vector<int> keep;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (counts[labels[i]] > k) keep.push_back(static_cast<int>(i));
  }
  for (const auto& [l, c] : counts) {
    if (c <= k) spdlog::warn("class {} has {} samples (<= k); excluded from MI", l, c);
  }
  const std::size_t n = keep.size();
  if (n == 0) throw Error("no class has more than k samples");

  Mat x(static_cast<Eigen::Index>(n), embs.cols());
  std::vector<int> y(n);
  std::map<int, int> nc;
  for (std::size_t i = 0; i < n; ++i) {
    x.row(static_cast<Eigen::Index>(i)) = embs.row(keep[i]);
    y[i] = labels[static_cast<std::size_t>(keep[i])];
    ++nc[y[i]];
  }
  const Vec sq = x.rowwise().squaredNorm();
  Mat d2 = (-2.0 * x * x.transpose()).colwise() + sq;
  d2.rowwise() += sq.transpose();

  using boost::math::digamma;
  double mean_psi_m = 0.0;
  std::vector<double> same;
  for (std::size_t i = 0; i < n; ++i) {
    same.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i && y[j] == y[i]) same.push_back(std::max(0.0, d2(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))));
    }
    std::nth_element(same.begin(), same.begin() + (k - 1), same.end());
    const double radius = same[static_cast<std::size_t>(k - 1)];
    int m = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i && std::max(0.0, d2(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))) <= radius) ++m;
    }
    mean_psi_m += digamma(static_cast<double>(m));
  }
  mean_psi_m /= static_cast<double>(n);

  double h = 0.0;
  for (const auto& [l, c] : nc) {
    const double p = static_cast<double>(c) / static_cast<double>(n);
    h -= p * std::log(p);
  }
  h += static_cast<double>(nc.size() - 1) / (2.0 * static_cast<double>(n));  // Miller-Madow
  const double mi = h + digamma(static_cast<double>(k)) - mean_psi_m;
  return mi / std::log(2.0);
}

// ---------------------------------------------------------------- statistics

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error("shape error");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw Error("undefined correlation");
  return sab / std::sqrt(saa * sbb);
}

double spearman_rho(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) throw Error("shape error");
  if (pred.size() < 3) throw Error("need at least 3 values");
  const auto ra = average_ranks(pred);
  const auto rb = average_ranks(target);
  return pearson(ra, rb);
}

namespace {

double quantile_sorted(const std::vector<double>& v, double q) {
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  const double f = pos - static_cast<double>(lo);
  return v[lo] + f * (v[hi] - v[lo]);
}

}  // namespace

Interval bootstrap_ci(const IndexStat& stat, std::size_t n, int resamples, double level, std::uint64_t seed) {
  if (n == 0) throw Error("empty data");
  if (resamples < 1) throw Error("resamples must be >= 1");
  if (!(level > 0.0 && level < 1.0)) throw Error("level must be in (0, 1)");
  Rng r = make_rng(seed, "bootstrap");
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::size_t> idx(n);
  std::vector<double> stats(static_cast<std::size_t>(resamples));
  for (auto& s : stats) {
    for (auto& i : idx) i = pick(r);
    s = stat(idx);
  }
  std::sort(stats.begin(), stats.end());
  const double a = (1.0 - level) / 2.0;
  return {quantile_sorted(stats, a), quantile_sorted(stats, 1.0 - a)};
}

Interval bootstrap_ci(const std::function<double(std::span<const double>)>& stat, std::span<const double> data,
                      int resamples, double level, std::uint64_t seed) {
  std::vector<double> buf;
  return bootstrap_ci(
      [&](std::span<const std::size_t> idx) {
        buf.resize(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) buf[i] = data[idx[i]];
        return stat(buf);
      },
      data.size(), resamples, level, seed);
}

double wilcoxon_paired(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error("shape error");
  if (a.size() < 5) throw Error("need at least 5 pairs");
  std::vector<double> d, mag;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i] - b[i];
    if (x != 0.0) {
      d.push_back(x);
      mag.push_back(std::fabs(x));
    }
  }
  if (d.empty()) throw Error("no signal");
  const auto ranks = average_ranks(mag);
  const std::size_t n = d.size();
  double w_plus = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (d[i] > 0) w_plus += ranks[i];
  }

  if (n <= 25) {
    // Exact null by dynamic programming over doubled (integer) ranks.
    std::vector<long> r2(n);
    long total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      r2[i] = std::lround(2.0 * ranks[i]);
      total += r2[i];
    }
    std::vector<double> dist(static_cast<std::size_t>(total) + 1, 0.0);
    dist[0] = 1.0;
    for (long r : r2) {
      for (long s = total; s >= r; --s) dist[static_cast<std::size_t>(s)] += dist[static_cast<std::size_t>(s - r)];
    }
    const double all = std::ldexp(1.0, static_cast<int>(n));
    const long w2 = std::lround(2.0 * w_plus);
    double lower = 0.0, upper = 0.0;
    for (long s = 0; s <= total; ++s) {
      if (s <= w2) lower += dist[static_cast<std::size_t>(s)];
      if (s >= w2) upper += dist[static_cast<std::size_t>(s)];
    }
    return std::min(1.0, 2.0 * std::min(lower, upper) / all);
  }

  // Normal approximation with tie correction.
  const double nn_ = static_cast<double>(n);
  const double mean = nn_ * (nn_ + 1.0) / 4.0;
  double var = nn_ * (nn_ + 1.0) * (2.0 * nn_ + 1.0) / 24.0;
  std::map<double, int> ties;
  for (double r : ranks) ++ties[r];
  for (const auto& [r, t] : ties) var -= (static_cast<double>(t) * t * t - t) / 48.0;
  const double z = (std::fabs(w_plus - mean) - 0.5) / std::sqrt(var);
  return std::min(1.0, std::erfc(std::max(0.0, z) / std::sqrt(2.0)));
}

// ---------------------------------------------------------------- calculators

long capacity_bits(int dim, int bits) {
  if (dim < 1 || bits < 1) throw Error("dim and bits must be >= 1");
  return static_cast<long>(dim) * bits;
}

SizeReport model_size_report(const std::vector<SizeComponent>& components) {
  SizeReport r;
  for (const auto& c : components) {
    if (c.bits < 1) throw Error("bits must be >= 1");
    SizeRow row{c.name, c.params, c.bits, static_cast<double>(c.params) * c.bits / 8.0, 0.0};
    row.kb = row.bytes / 1000.0;
    r.total_bytes += row.bytes;
    r.rows.push_back(row);
  }
  r.total_kb = r.total_bytes / 1000.0;
  return r;
}

void EnergyParams::validate() const {
  if (p_active_mw < 0 || p_idle_mw < 0) throw Error("power must be non-negative");
  if (!(inference_s > 0 && cadence_s > 0 && window_s > 0)) throw Error("times must be positive");
  if (inference_s > cadence_s || window_s > cadence_s) throw Error("active time exceeds cadence");
}

EnergyReport energy_report(const EnergyParams& p) {
  p.validate();
  constexpr double kDay = 86400.0;
  constexpr double kJoulePerMwh = 3.6;  // 1 mWh = 3.6 J
  EnergyReport r;
  r.inferences_per_day = kDay / p.cadence_s;
  r.duty_cycle = p.window_s / p.cadence_s;
  r.e_per_inference_mJ = p.p_active_mw * p.inference_s;

  r.daily_active_J = r.inferences_per_day * r.e_per_inference_mJ / 1000.0;
  r.daily_active_mWh = r.daily_active_J / kJoulePerMwh;
  const double idle_s = kDay - r.inferences_per_day * p.inference_s;
  r.daily_idle_mWh = p.p_idle_mw * idle_s / 3600.0;
  r.daily_total_mWh = r.daily_active_mWh + r.daily_idle_mWh;
  r.annual_Wh = r.daily_total_mWh * 365.0 / 1000.0;

  r.duty_daily_active_mWh = p.p_active_mw * r.duty_cycle * 24.0;
  r.duty_daily_idle_mWh = p.p_idle_mw * (1.0 - r.duty_cycle) * 24.0;
  r.duty_daily_total_mWh = r.duty_daily_active_mWh + r.duty_daily_idle_mWh;
  r.duty_annual_Wh = r.duty_daily_total_mWh * 365.0 / 1000.0;

  char buf[256];
  std::snprintf(buf, sizeof buf,
                "daily active energy %.4g J equals %.4g mWh (1 mWh = 3.6 J); a value of %.3g reported in mWh "
                "is the joule figure under the wrong unit",
                r.daily_active_J, r.daily_active_mWh, r.daily_active_J);
  r.audit.emplace_back(buf);
  std::snprintf(buf, sizeof buf,
                "per-inference accounting (%.4g mWh/day) and duty-cycle accounting (%.4g mWh/day) differ because "
                "inference time %.4g s != window %.4g s",
                r.daily_total_mWh, r.duty_daily_total_mWh, p.inference_s, p.window_s);
  r.audit.emplace_back(buf);
  std::snprintf(buf, sizeof buf, "idle energy is bounded by %.4g mWh/day at %.4g mW idle power",
                p.p_idle_mw * 24.0, p.p_idle_mw);
  r.audit.emplace_back(buf);
  return r;
}

double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> positive) {
  if (scores.size() != positive.size()) throw Error("length mismatch");
  const auto ranks = average_ranks(scores);
  double n_pos = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (positive[i]) {
      n_pos += 1.0;
      rank_sum += ranks[i];
    }
  }
  const double n_neg = static_cast<double>(scores.size()) - n_pos;
  if (n_pos == 0.0 || n_neg == 0.0) throw Error("need both classes");
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

}  // namespace mpib::eval
