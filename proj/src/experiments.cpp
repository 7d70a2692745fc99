// SPDX-License-Identifier: Apache-2.0
#include "mpib/experiments.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <spdlog/spdlog.h>

#include "mpib/common.hpp"
#include "mpib/losses.hpp"

namespace mpib::experiments {

std::string Arm::label() const {
  return (bits >= 16 ? std::string("FP16-") : "INT" + std::to_string(bits) + "-") + std::to_string(dim);
}

std::vector<Arm> capacity_matched_arms() { return {{16, 8}, {8, 16}, {4, 32}, {2, 64}}; }

std::vector<Arm> arms_for_bits(const std::vector<int>& bits, int dim) {
  std::vector<Arm> out;
  for (int b : bits) out.push_back({b, dim});
  return out;
}

std::vector<Split> fold_splits(const synth::Corpus& corpus, int k, std::uint64_t seed) {
  const auto fold = synth::speaker_independent_folds(corpus, k, seed);
  std::vector<Split> out(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
    const int f = fold[static_cast<std::size_t>(corpus.samples[i].speaker_id)];
    for (int j = 0; j < k; ++j) (j == f ? out[static_cast<std::size_t>(j)].test : out[static_cast<std::size_t>(j)].train).push_back(i);
  }
  return out;
}

namespace {

double safe_spearman(const std::vector<double>& a, const std::vector<double>& b) {
  try {
    return eval::spearman_rho(a, b);
  } catch (const Error& e) {
    spdlog::warn("spearman: {}; reporting 0", e.what());
    return 0.0;
  }
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

EvalResult evaluate(model::MpibModel& m, const train::Dataset& test, int enroll, bool with_mi) {
  EvalResult r;
  const auto e = m.embed(test.x, test.frames);
  r.pred = e.agitation;
  r.truth = test.agitation;
  r.rho = safe_spearman(r.pred, r.truth);

  const auto ts = eval::build_trials(e.zq, test.participant, enroll);
  r.hits1 = eval::topk_hits(ts).first;
  const auto tk = eval::topk_from_trials(ts);
  r.top1 = tk.top1;
  r.top5 = tk.top5;
  r.eer = eval::compute_eer(ts.trials);
  r.trials = ts.trials;
  if (with_mi) r.mi_bits = eval::knn_mi(e.zq, test.participant, 3);

  const auto tt = eval::build_trials(e.zt, test.participant, enroll);
  r.trait_top1 = eval::topk_from_trials(tt).top1;
  r.trait_eer = eval::compute_eer(tt.trials);
  return r;
}

Pretrained pretrain_encoder(const synth::Corpus& pretrain_corpus, int epochs, std::uint64_t seed) {
  std::vector<std::size_t> rows(pretrain_corpus.samples.size());
  std::iota(rows.begin(), rows.end(), 0);
  const auto norm = train::fit_norm(pretrain_corpus, rows);
  const auto ds = train::make_dataset(pretrain_corpus, rows, norm);
  Pretrained p;
  p.model = std::make_unique<model::MpibModel>(model::ModelConfig{}, derive_seed(seed, "pretrain-init"));
  train::PretrainOptions po;
  po.epochs = epochs;
  po.seed = derive_seed(seed, "pretrain");
  p.losses = train::pretrain_tmae(*p.model, ds, po);
  return p;
}

train::TrainOptions make_train_options(const Arm& arm, const ProtocolOptions& o, std::uint64_t seed) {
  const auto preset = train::OptimPreset::named(o.preset);
  train::TrainOptions t;
  t.tc.weights = losses::LossWeights::preset(o.preset);
  t.tc.mode = o.mode;
  t.lr = preset.lr;
  t.weight_decay = preset.weight_decay;
  t.epochs = o.epochs > 0 ? o.epochs : preset.epochs;
  t.seed = seed;
  (void)arm;
  return t;
}

TrainedArm train_arm(const synth::Corpus& corpus, const std::vector<std::size_t>& train_rows, const Arm& arm,
                     const ProtocolOptions& o, std::uint64_t seed, model::MpibModel* init) {
  TrainedArm t;
  t.norm = train::fit_norm(corpus, train_rows);
  const auto ds = train::make_dataset(corpus, train_rows, t.norm);
  model::ModelConfig mc;
  mc.state_bits = arm.bits;
  mc.state_dim = arm.dim;
  t.model = std::make_unique<model::MpibModel>(mc, derive_seed(seed, "init"));
  if (init) train::copy_encoder(*init, *t.model);
  const auto opts = make_train_options(arm, o, derive_seed(seed, "fit"));
  t.logs = train::fit(*t.model, ds, opts);
  if (o.mode != model::EncoderMode::fp16) train::calibrate_encoder(*t.model, ds);
  return t;
}

std::vector<FoldRun> run_folds(const synth::Corpus& corpus, const std::vector<Split>& splits, const Arm& arm,
                               const ProtocolOptions& o, const std::vector<int>& fold_ids, model::MpibModel* init,
                               const FoldCallback& cb) {
  std::vector<int> ids = fold_ids;
  if (ids.empty()) {
    ids.resize(splits.size());
    std::iota(ids.begin(), ids.end(), 0);
  }
  std::vector<FoldRun> out;
  for (int f : ids) {
    if (f < 0 || static_cast<std::size_t>(f) >= splits.size()) throw Error("fold index out of range");
    const auto& sp = splits[static_cast<std::size_t>(f)];
    const std::uint64_t seed = derive_seed(o.seed, "fold:" + std::to_string(f) + ":" + arm.label());
    auto trained = train_arm(corpus, sp.train, arm, o, seed, init);
    const auto test = train::make_dataset(corpus, sp.test, trained.norm);
    FoldRun run{f, arm, evaluate(*trained.model, test, o.enroll)};
    spdlog::info("{} fold {}: rho {:.3f} top1 {:.3f} eer {:.3f} (trait top1 {:.3f})", arm.label(), f,
                 run.result.rho, run.result.top1, run.result.eer, run.result.trait_top1);
    if (cb) cb(run);
    out.push_back(std::move(run));
  }
  return out;
}

SweepRow summarize(const Arm& arm, const std::vector<FoldRun>& runs, int resamples, std::uint64_t seed) {
  SweepRow row;
  row.bits = arm.bits;
  row.dim = arm.dim;
  row.capacity = arm.capacity();
  if (runs.empty()) return row;
  std::vector<double> pred, truth, hits;
  // probe clusters of trials: (begin, end) into the pooled trial list
  std::vector<eval::Trial> trials;
  std::vector<std::pair<std::size_t, std::size_t>> clusters;
  for (const auto& r : runs) {
    row.fold_rho.push_back(r.result.rho);
    row.fold_top1.push_back(r.result.top1);
    row.fold_eer.push_back(r.result.eer);
    pred.insert(pred.end(), r.result.pred.begin(), r.result.pred.end());
    truth.insert(truth.end(), r.result.truth.begin(), r.result.truth.end());
    hits.insert(hits.end(), r.result.hits1.begin(), r.result.hits1.end());
    // trials are emitted probe by probe
    std::size_t i = 0;
    const auto& t = r.result.trials;
    while (i < t.size()) {
      std::size_t j = i;
      while (j < t.size() && t[j].probe == t[i].probe) ++j;
      clusters.emplace_back(trials.size() + i, trials.size() + j);
      i = j;
    }
    trials.insert(trials.end(), t.begin(), t.end());
  }
  row.rho.value = mean_of(row.fold_rho);
  row.top1.value = mean_of(row.fold_top1);
  row.eer.value = mean_of(row.fold_eer);

  row.rho.pooled = safe_spearman(pred, truth);
  row.rho.ci = eval::bootstrap_ci(
      [&](std::span<const std::size_t> idx) {
        std::vector<double> a, b;
        a.reserve(idx.size());
        b.reserve(idx.size());
        for (auto i : idx) {
          a.push_back(pred[i]);
          b.push_back(truth[i]);
        }
        return safe_spearman(a, b);
      },
      pred.size(), resamples, 0.95, derive_seed(seed, "ci-rho"));

  row.top1.pooled = mean_of(hits);
  row.top1.ci = eval::bootstrap_ci([](std::span<const double> d) {
    return std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
  }, hits, resamples, 0.95, derive_seed(seed, "ci-top1"));

  row.eer.pooled = eval::compute_eer(trials);
  std::vector<double> scores;
  std::vector<std::uint8_t> target;
  row.eer.ci = eval::bootstrap_ci(
      [&](std::span<const std::size_t> idx) {
        scores.clear();
        target.clear();
        for (auto c : idx) {
          for (std::size_t t = clusters[c].first; t < clusters[c].second; ++t) {
            scores.push_back(trials[t].score);
            target.push_back(trials[t].target ? 1 : 0);
          }
        }
        return eval::compute_eer(scores, target);
      },
      clusters.size(), resamples, 0.95, derive_seed(seed, "ci-eer"));
  return row;
}

SweepReport run_bitwidth_sweep(const synth::Corpus& corpus, const std::vector<Arm>& arms, const ProtocolOptions& o,
                               const std::vector<int>& fold_ids, model::MpibModel* init, const FoldCallback& cb) {
  const auto splits = fold_splits(corpus, o.folds, derive_seed(o.seed, "folds"));
  SweepReport rep;
  for (const auto& arm : arms) {
    const auto runs = run_folds(corpus, splits, arm, o, fold_ids, init, cb);
    rep.rows.push_back(summarize(arm, runs, o.bootstrap, derive_seed(o.seed, "summary:" + arm.label())));
  }
  return rep;
}

namespace {

// Balanced row subsample of at most n rows, deterministic in seed.
std::vector<Eigen::Index> pick_rows(Eigen::Index total, std::size_t n, std::uint64_t seed) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(total));
  std::iota(idx.begin(), idx.end(), 0);
  if (idx.size() > n) {
    Rng rng = make_rng(seed, "rows");
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(n);
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

nn::Mat take_rows(const nn::Mat& m, const std::vector<Eigen::Index>& idx) {
  nn::Mat out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
  return out;
}

LeakageMetrics leakage_of(const nn::Mat& member_emb, const nn::Mat& test_emb, const std::vector<int>& labels,
                          int enroll, int resamples, std::uint64_t seed) {
  LeakageMetrics lm;
  const auto ts = eval::build_trials(test_emb, labels, enroll);
  const auto [h1, h5] = eval::topk_hits(ts);
  auto mean_stat = [](std::span<const double> d) {
    return std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
  };
  lm.top1 = mean_of(h1);
  lm.top5 = mean_of(h5);
  lm.top1_ci = eval::bootstrap_ci(mean_stat, h1, resamples, 0.95, derive_seed(seed, "top1"));
  lm.top5_ci = eval::bootstrap_ci(mean_stat, h5, resamples, 0.95, derive_seed(seed, "top5"));
  lm.eer = eval::compute_eer(ts.trials);
  std::vector<double> scores;
  std::vector<std::uint8_t> target;
  const std::size_t per = ts.speakers.size();
  lm.eer_ci = eval::bootstrap_ci(
      [&](std::span<const std::size_t> idx) {
        scores.clear();
        target.clear();
        for (auto p : idx) {
          for (std::size_t t = p * per; t < (p + 1) * per; ++t) {
            scores.push_back(ts.trials[t].score);
            target.push_back(ts.trials[t].target ? 1 : 0);
          }
        }
        return eval::compute_eer(scores, target);
      },
      ts.probes.size(), resamples, 0.95, derive_seed(seed, "eer"));
  lm.mi_bits = eval::knn_mi(test_emb, labels, 3);

  std::vector<double> aucs;
  constexpr int kAttackSeeds = 5;
  for (int s = 0; s < kAttackSeeds; ++s) {
    privacy::MiaConfig mc;
    mc.seed = derive_seed(seed, "mia:" + std::to_string(s));
    aucs.push_back(privacy::mia_evaluate(member_emb, test_emb, mc).auc);
  }
  lm.mia_auc = mean_of(aucs);
  lm.mia_auc_ci = {*std::min_element(aucs.begin(), aucs.end()), *std::max_element(aucs.begin(), aucs.end())};
  return lm;
}

}  // namespace

LeakageReport leakage_report(model::MpibModel& m, const train::Dataset& members, const train::Dataset& test,
                             int enroll, int resamples, std::uint64_t seed) {
  const auto em = m.embed(members.x, members.frames);
  const auto et = m.embed(test.x, test.frames);
  const auto rows = pick_rows(em.zq.rows(), static_cast<std::size_t>(et.zq.rows()), derive_seed(seed, "members"));
  LeakageReport r;
  r.state = leakage_of(take_rows(em.zq, rows), et.zq, test.participant, enroll, resamples, derive_seed(seed, "state"));
  r.trait = leakage_of(take_rows(em.zt, rows), et.zt, test.participant, enroll, resamples, derive_seed(seed, "trait"));
  return r;
}

std::vector<privacy::TradeoffRow> privacy_tradeoff(model::MpibModel& m, const train::Dataset& members,
                                                   const train::Dataset& test, const TradeoffOptions& o) {
  if (o.noise_seeds < 1) throw Error("noise_seeds must be >= 1");
  for (double s : o.sigmas) {
    if (!(s >= 0.0)) throw Error("sigma must be non-negative");
  }
  const auto em = m.embed(members.x, members.frames);
  const auto et = m.embed(test.x, test.frames);
  const double rho = safe_spearman(et.agitation, test.agitation);
  const auto mrows = pick_rows(em.zt.rows(), o.mia_rows, derive_seed(o.seed, "members"));
  const auto trows = pick_rows(et.zt.rows(), o.mia_rows, derive_seed(o.seed, "nonmembers"));
  const nn::Mat mem = take_rows(em.zt, mrows);

  std::vector<privacy::TradeoffRow> out;
  for (double sigma : o.sigmas) {
    privacy::TradeoffRow row;
    row.sigma = sigma;
    row.rho = rho;
    double top1 = 0.0, eer = 0.0, auc = 0.0;
    for (int s = 0; s < o.noise_seeds; ++s) {
      // The same noise seeds at every sigma (common random numbers).
      const std::uint64_t ns = derive_seed(o.seed, "noise:" + std::to_string(s));
      const nn::Mat zt = privacy::perturb_trait(et.zt, sigma, ns);
      const auto ts = eval::build_trials(zt, test.participant, o.enroll);
      top1 += eval::topk_from_trials(ts).top1;
      eer += eval::compute_eer(ts.trials);
      const nn::Mat zm = privacy::perturb_trait(mem, sigma, derive_seed(ns, "members"));
      privacy::MiaConfig mc;
      mc.seed = derive_seed(o.seed, "mia:" + std::to_string(s));
      auc += privacy::mia_evaluate(zm, take_rows(zt, trows), mc).auc;
    }
    row.top1 = top1 / o.noise_seeds;
    row.eer = eer / o.noise_seeds;
    row.mia_auc = auc / o.noise_seeds;
    spdlog::info("sigma {:.4g}: top1 {:.4f} eer {:.4f} mia {:.4f}", sigma, row.top1, row.eer, row.mia_auc);
    out.push_back(row);
  }
  return out;
}

TemporalResult temporal_protocol(const synth::Corpus& corpus, const Split& split, const Arm& arm,
                                 const ProtocolOptions& o, const std::vector<int>& train_sessions, int test_session,
                                 model::MpibModel* init, double drift_threshold) {
  auto in = [&](int s) { return std::find(train_sessions.begin(), train_sessions.end(), s) != train_sessions.end(); };
  if (in(test_session)) throw Error("train and test sessions overlap");
  std::vector<std::size_t> tr, te_in, te_later;
  for (auto i : split.train) {
    if (in(corpus.samples[i].session)) tr.push_back(i);
  }
  for (auto i : split.test) {
    const int s = corpus.samples[i].session;
    if (in(s)) te_in.push_back(i);
    else if (s == test_session) te_later.push_back(i);
  }
  if (tr.empty() || te_in.empty() || te_later.empty()) throw Error("empty split");

  auto trained = train_arm(corpus, tr, arm, o, derive_seed(o.seed, "temporal"), init);
  const auto d_in = train::make_dataset(corpus, te_in, trained.norm);
  const auto d_later = train::make_dataset(corpus, te_later, trained.norm);
  const auto e_in = trained.model->embed(d_in.x, d_in.frames);
  const auto e_later = trained.model->embed(d_later.x, d_later.frames);

  TemporalResult r;
  r.rho_in_session = safe_spearman(e_in.agitation, d_in.agitation);
  r.rho_later = safe_spearman(e_later.agitation, d_later.agitation);
  r.relative_drop = r.rho_in_session != 0.0 ? 1.0 - r.rho_later / r.rho_in_session : 0.0;

  // Frozen profiles: onboard each test speaker from the first three windows of its first
  // training-era session, then check the later session's mean trait embedding for drift.
  std::map<int, std::vector<Eigen::Index>> first, later;
  const int first_session = *std::min_element(train_sessions.begin(), train_sessions.end());
  for (std::size_t i = 0; i < d_in.size(); ++i) {
    if (d_in.session[i] == first_session) first[d_in.participant[i]].push_back(static_cast<Eigen::Index>(i));
  }
  for (std::size_t i = 0; i < d_later.size(); ++i) later[d_later.participant[i]].push_back(static_cast<Eigen::Index>(i));
  std::size_t flagged = 0;
  for (const auto& [spk, rows] : first) {
    if (rows.size() < 3 || !later.count(spk)) continue;
    std::array<std::vector<double>, 3> embs;
    std::array<double, 3> conf{};
    for (int j = 0; j < 3; ++j) {
      const auto row = e_in.zt.row(rows[static_cast<std::size_t>(j)]);
      embs[static_cast<std::size_t>(j)].assign(row.data(), row.data() + row.size());
      conf[static_cast<std::size_t>(j)] = model::state_confidence(e_in.agitation[static_cast<std::size_t>(rows[static_cast<std::size_t>(j)])]);
    }
    const auto profile = model::onboard(embs, conf, 1.0);
    nn::RowVec mean = nn::RowVec::Zero(e_later.zt.cols());
    for (auto i : later[spk]) mean += e_later.zt.row(i);
    mean /= static_cast<double>(later[spk].size());
    const std::vector<double> recent(mean.data(), mean.data() + mean.size());
    if (model::check_drift(profile, recent, drift_threshold) == model::DriftStatus::reonboard) ++flagged;
    ++r.profiles;
  }
  r.reonboard_fraction = r.profiles ? static_cast<double>(flagged) / static_cast<double>(r.profiles) : 0.0;
  return r;
}

}  // namespace mpib::experiments
