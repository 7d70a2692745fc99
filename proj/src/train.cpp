// SPDX-License-Identifier: Apache-2.0
#include "mpib/train.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "mpib/common.hpp"

namespace mpib::train {

Dataset Dataset::subset(const std::vector<std::size_t>& rows) const {
  Dataset d;
  d.frames = frames;
  d.x.resize(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::size_t r = rows[i];
    d.x.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(r));
    d.participant.push_back(participant[r]);
    d.session.push_back(session[r]);
    d.index.push_back(index[r]);
    d.agitation.push_back(agitation[r]);
    d.timestamp.push_back(timestamp[r]);
    d.demographic.push_back(demographic[r]);
  }
  return d;
}

features::GlobalNormStats fit_norm(const synth::Corpus& corpus, const std::vector<std::size_t>& rows) {
  // Welford over every value of every selected window.
  double mean = 0.0, m2 = 0.0;
  std::size_t n = 0, frames = 0;
  for (std::size_t r : rows) {
    const auto& f = corpus.samples.at(r).features;
    frames += f.rows;
    for (double v : f.values) {
      ++n;
      const double d = v - mean;
      mean += d / static_cast<double>(n);
      m2 += d * (v - mean);
    }
  }
  if (n < 2) throw Error("degenerate statistics");
  const double sd = std::sqrt(m2 / static_cast<double>(n));
  if (!(sd > 0.0)) throw Error("degenerate statistics");
  return {mean, sd, frames};
}

Dataset make_dataset(const synth::Corpus& corpus, const std::vector<std::size_t>& rows,
                     const features::GlobalNormStats& norm) {
  Dataset d;
  if (rows.empty()) return d;
  const auto& f0 = corpus.samples.at(rows[0]).features;
  d.frames = static_cast<int>(f0.rows);
  d.x.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(f0.values.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& s = corpus.samples.at(rows[i]);
    if (s.features.values.size() != f0.values.size()) throw Error("shape error");
    for (std::size_t k = 0; k < s.features.values.size(); ++k) {
      d.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = (s.features.values[k] - norm.mean) / norm.std;
    }
    d.participant.push_back(s.speaker_id);
    d.session.push_back(s.session);
    d.index.push_back(s.index);
    d.agitation.push_back(s.agitation);
    d.timestamp.push_back(s.timestamp);
    d.demographic.push_back(s.pseudo_demographic);
  }
  return d;
}

OptimPreset OptimPreset::named(const std::string& name) {
  if (name == "impl") return {1e-3, 1e-3, 60, 64};
  if (name == "exp") return {3e-4, 1e-4, 100, 64};
  throw Error("unknown optimizer preset: " + name);
}

BatchSampler::BatchSampler(const Dataset& data, int participants, int run_length, std::uint64_t seed)
    : data_(&data), participants_(participants), run_(run_length), rng_(make_rng(seed, "batches")) {
  if (participants < 2 || run_length < 1) throw Error("invalid batch geometry");
  std::map<int, std::map<int, std::vector<std::size_t>>> g;
  for (std::size_t i = 0; i < data.size(); ++i) g[data.participant[i]][data.session[i]].push_back(i);
  for (auto& [p, sessions] : g) {
    std::vector<std::vector<std::size_t>> ss;
    for (auto& [s, rows] : sessions) {
      std::sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) { return data.index[a] < data.index[b]; });
      ss.push_back(rows);
    }
    groups_.push_back(std::move(ss));
  }
}

std::vector<std::vector<std::size_t>> BatchSampler::epoch() {
  const std::size_t per_batch = static_cast<std::size_t>(participants_) * 2 * run_;
  const std::size_t n_batches = std::max<std::size_t>(1, (data_->size() + per_batch - 1) / per_batch);
  const int n_groups = static_cast<int>(groups_.size());
  const int take = std::min(participants_, n_groups);
  std::vector<int> perm(static_cast<std::size_t>(n_groups));
  std::iota(perm.begin(), perm.end(), 0);
  std::size_t cursor = perm.size();
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < n_batches; ++b) {
    std::vector<std::size_t> rows;
    for (int k = 0; k < take; ++k) {
      if (cursor >= perm.size()) {
        std::shuffle(perm.begin(), perm.end(), rng_);
        cursor = 0;
      }
      const auto& sessions = groups_[static_cast<std::size_t>(perm[cursor++])];
      std::vector<std::size_t> sidx(sessions.size());
      std::iota(sidx.begin(), sidx.end(), 0);
      std::shuffle(sidx.begin(), sidx.end(), rng_);
      for (std::size_t j = 0; j < std::min<std::size_t>(2, sidx.size()); ++j) {
        const auto& srows = sessions[sidx[j]];
        const int len = std::min<int>(run_, static_cast<int>(srows.size()));
        std::uniform_int_distribution<int> start(0, static_cast<int>(srows.size()) - len);
        const int s0 = start(rng_);
        for (int t = 0; t < len; ++t) rows.push_back(srows[static_cast<std::size_t>(s0 + t)]);
      }
    }
    out.push_back(std::move(rows));
  }
  return out;
}

model::Batch BatchSampler::make(const std::vector<std::size_t>& rows) const {
  const Dataset& d = *data_;
  model::Batch b;
  b.frames = d.frames;
  b.x.resize(static_cast<Eigen::Index>(rows.size()), d.x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::size_t r = rows[i];
    b.x.row(static_cast<Eigen::Index>(i)) = d.x.row(static_cast<Eigen::Index>(r));
    b.participant.push_back(d.participant[r]);
    b.session.push_back(d.session[r]);
    b.agitation.push_back(d.agitation[r]);
    if (i > 0) {
      const std::size_t q = rows[i - 1];
      if (d.participant[q] == d.participant[r] && d.session[q] == d.session[r] && d.index[r] == d.index[q] + 1) {
        b.smooth_pairs.emplace_back(static_cast<int>(i - 1), static_cast<int>(i));
      }
    }
  }
  return b;
}

std::vector<EpochLog> fit(model::MpibModel& m, const Dataset& data, const TrainOptions& opt,
                          const EpochCallback& cb) {
  if (data.size() == 0) throw Error("empty training set");
  if (opt.epochs < 1) throw Error("epochs must be >= 1");
  BatchSampler sampler(data, opt.participants_per_batch, opt.run_length, opt.seed);
  nn::AdamWConfig ac;
  ac.lr = opt.lr;
  ac.weight_decay = opt.weight_decay;
  nn::AdamW adam(ac);
  Rng rng = make_rng(opt.seed, "train-dropout");

  std::vector<EpochLog> logs;
  long step = 0;
  long total_steps = -1;
  for (int e = 0; e < opt.epochs; ++e) {
    const auto batches = sampler.epoch();
    if (total_steps < 0) total_steps = static_cast<long>(batches.size()) * opt.epochs;
    EpochLog log;
    log.epoch = e + 1;
    for (const auto& rows : batches) {
      const double lr = opt.cosine ? nn::cosine_lr(opt.lr, step, total_steps) : opt.lr;
      const auto c = m.train_step(sampler.make(rows), opt.tc, adam, lr, rng);
      log.mean.recon += c.recon;
      log.mean.stab += c.stab;
      log.mean.smooth += c.smooth;
      log.mean.orth += c.orth;
      log.mean.agit += c.agit;
      log.mean.total += c.total;
      ++step;
    }
    const double inv = 1.0 / static_cast<double>(batches.size());
    for (double* v : {&log.mean.recon, &log.mean.stab, &log.mean.smooth, &log.mean.orth, &log.mean.agit,
                      &log.mean.total}) {
      *v *= inv;
    }
    spdlog::debug("epoch {} total {:.4f} agit {:.4f} stab {:.4f} orth {:.4f}", log.epoch, log.mean.total,
                  log.mean.agit, log.mean.stab, log.mean.orth);
    if (cb) cb(log);
    logs.push_back(log);
  }
  return logs;
}

std::vector<double> pretrain_tmae(model::MpibModel& m, const Dataset& data, const PretrainOptions& opt) {
  if (data.size() == 0) throw Error("empty training set");
  nn::AdamWConfig ac;
  ac.lr = opt.lr;
  ac.weight_decay = opt.weight_decay;
  nn::AdamW adam(ac);
  Rng rng = make_rng(opt.seed, "tmae");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = static_cast<std::size_t>(std::max(1, opt.batch_size));
  const long per_epoch = static_cast<long>((order.size() + bs - 1) / bs);
  const long total = per_epoch * opt.epochs;
  long step = 0;
  std::vector<double> out;
  for (int e = 0; e < opt.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    for (std::size_t s = 0; s < order.size(); s += bs) {
      const std::size_t n = std::min(bs, order.size() - s);
      Mat x(static_cast<Eigen::Index>(n), data.x.cols());
      for (std::size_t i = 0; i < n; ++i) x.row(static_cast<Eigen::Index>(i)) = data.x.row(static_cast<Eigen::Index>(order[s + i]));
      sum += m.tmae_pretrain_step(x, data.frames, opt.mask_ratio, adam, nn::cosine_lr(opt.lr, step, total), rng);
      ++step;
    }
    out.push_back(sum / static_cast<double>(per_epoch));
    spdlog::debug("tmae epoch {} loss {:.4f}", e + 1, out.back());
  }
  return out;
}

void calibrate_encoder(model::MpibModel& m, const Dataset& data, std::size_t max_rows) {
  const std::size_t n = std::min(max_rows, data.size());
  if (n == 0) throw Error("empty calibration set");
  m.encoder.calibrate_ptq(data.x.topRows(static_cast<Eigen::Index>(n)), data.frames);
}

void copy_encoder(model::MpibModel& src, model::MpibModel& dst) {
  auto a = src.encoder.params();
  auto b = dst.encoder.params();
  if (a.size() != b.size()) throw Error("encoder shape mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i]->value.rows() != b[i]->value.rows() || a[i]->value.cols() != b[i]->value.cols()) {
      throw Error("encoder shape mismatch");
    }
    b[i]->value = a[i]->value;
  }
  dst.encoder.set_activation_ranges(src.encoder.activation_ranges());
}

}  // namespace mpib::train
