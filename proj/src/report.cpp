// SPDX-License-Identifier: Apache-2.0
#include "mpib/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mpib/common.hpp"

namespace mpib::report {

std::string fmt6(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

double round6(double v) {
  if (!std::isfinite(v)) return v;
  return std::strtod(fmt6(v).c_str(), nullptr);
}

Json rounded(const Json& j) {
  if (j.is_number_float()) return round6(j.get<double>());
  if (j.is_array()) {
    Json out = Json::array();
    for (const auto& e : j) out.push_back(rounded(e));
    return out;
  }
  if (j.is_object()) {
    Json out = Json::object();
    for (const auto& [k, v] : j.items()) out[k] = rounded(v);
    return out;
  }
  return j;
}

Json envelope(const config::RunConfig& cfg, const Json& results) {
  Json j;
  j["command"] = cfg.command;
  j["seed"] = cfg.seed;
  j["config_hash"] = config::config_hash(cfg);
  j["config"] = rounded(config::to_json(cfg));
  j["results"] = rounded(results);
  return j;
}

std::string dump_json(const Json& j) { return j.dump(2) + "\n"; }

std::string to_csv(const Table& t, const config::RunConfig& cfg) {
  std::ostringstream os;
  for (const auto& h : t.header) os << h << ',';
  os << "config_hash,seed\n";
  const std::string hash = config::config_hash(cfg);
  for (const auto& row : t.rows) {
    for (const auto& c : row) {
      if (const auto* s = std::get_if<std::string>(&c)) os << *s;
      else if (const auto* i = std::get_if<long long>(&c)) os << *i;
      else os << fmt6(std::get<double>(c));
      os << ',';
    }
    os << hash << ',' << cfg.seed << '\n';
  }
  return os.str();
}

namespace {

Json metric_json(const experiments::Metric& m, const std::vector<double>& folds) {
  Json j;
  j["mean"] = m.value;
  j["pooled"] = m.pooled;
  j["ci95"] = {m.ci.lo, m.ci.hi};
  j["folds"] = folds;
  return j;
}

Json ci(const eval::Interval& i) { return Json::array({i.lo, i.hi}); }

}  // namespace

Json sweep_json(const experiments::SweepReport& r) {
  Json rows = Json::array();
  for (const auto& row : r.rows) {
    Json j;
    j["bits"] = row.bits;
    j["dim"] = row.dim;
    j["capacity"] = row.capacity;
    j["rho"] = metric_json(row.rho, row.fold_rho);
    j["top1"] = metric_json(row.top1, row.fold_top1);
    j["eer"] = metric_json(row.eer, row.fold_eer);
    rows.push_back(j);
  }
  Json j;
  j["rows"] = rows;
  return j;
}

Table sweep_table(const experiments::SweepReport& r) {
  Table t;
  t.header = {"bits", "dim", "capacity", "rho", "rho_lo", "rho_hi", "top1", "top1_lo", "top1_hi", "eer", "eer_lo",
              "eer_hi"};
  for (const auto& row : r.rows) {
    t.rows.push_back({static_cast<long long>(row.bits), static_cast<long long>(row.dim),
                      static_cast<long long>(row.capacity), row.rho.value, row.rho.ci.lo, row.rho.ci.hi,
                      row.top1.value, row.top1.ci.lo, row.top1.ci.hi, row.eer.value, row.eer.ci.lo, row.eer.ci.hi});
  }
  return t;
}

Json leakage_json(const experiments::LeakageReport& r) {
  auto one = [](const experiments::LeakageMetrics& m) {
    Json j;
    j["top1"] = m.top1;
    j["top5"] = m.top5;
    j["eer"] = m.eer;
    j["mi_bits"] = m.mi_bits;
    j["mia_auc"] = m.mia_auc;
    j["ci95"] = {{"top1", ci(m.top1_ci)}, {"top5", ci(m.top5_ci)}, {"eer", ci(m.eer_ci)}, {"mia_auc", ci(m.mia_auc_ci)}};
    return j;
  };
  Json j;
  j["state"] = one(r.state);
  j["trait"] = one(r.trait);
  return j;
}

Table leakage_table(const experiments::LeakageReport& r) {
  Table t;
  t.header = {"embedding", "top1", "top5", "eer", "mi_bits", "mia_auc"};
  for (const auto& [name, m] : {std::pair{"state", &r.state}, std::pair{"trait", &r.trait}}) {
    t.rows.push_back({std::string(name), m->top1, m->top5, m->eer, m->mi_bits, m->mia_auc});
  }
  return t;
}

Json tradeoff_json(const std::vector<privacy::TradeoffRow>& rows) {
  Json a = Json::array();
  for (const auto& r : rows) {
    a.push_back({{"sigma", r.sigma}, {"rho", r.rho}, {"mia_auc", r.mia_auc}, {"top1", r.top1}, {"eer", r.eer}});
  }
  Json j;
  j["rows"] = a;
  return j;
}

Table tradeoff_table(const std::vector<privacy::TradeoffRow>& rows) {
  Table t;
  t.header = {"sigma", "rho", "mia_auc", "top1", "eer"};
  for (const auto& r : rows) t.rows.push_back({r.sigma, r.rho, r.mia_auc, r.top1, r.eer});
  return t;
}

Json energy_json(const eval::EnergyReport& r) {
  Json j;
  j["inferences_per_day"] = r.inferences_per_day;
  j["duty_cycle"] = r.duty_cycle;
  j["e_per_inference_mJ"] = r.e_per_inference_mJ;
  j["per_inference_accounting"] = {{"daily_active_J", r.daily_active_J},
                                   {"daily_active_mWh", r.daily_active_mWh},
                                   {"daily_idle_mWh", r.daily_idle_mWh},
                                   {"daily_total_mWh", r.daily_total_mWh},
                                   {"annual_Wh", r.annual_Wh}};
  j["duty_cycle_accounting"] = {{"daily_active_mWh", r.duty_daily_active_mWh},
                                {"daily_idle_mWh", r.duty_daily_idle_mWh},
                                {"daily_total_mWh", r.duty_daily_total_mWh},
                                {"annual_Wh", r.duty_annual_Wh}};
  j["audit"] = r.audit;
  return j;
}

Table energy_table(const eval::EnergyReport& r) {
  Table t;
  t.header = {"quantity", "value"};
  auto add = [&](const char* k, double v) { t.rows.push_back({std::string(k), v}); };
  add("inferences_per_day", r.inferences_per_day);
  add("duty_cycle", r.duty_cycle);
  add("e_per_inference_mJ", r.e_per_inference_mJ);
  add("daily_active_J", r.daily_active_J);
  add("daily_active_mWh", r.daily_active_mWh);
  add("daily_idle_mWh", r.daily_idle_mWh);
  add("daily_total_mWh", r.daily_total_mWh);
  add("annual_Wh", r.annual_Wh);
  add("duty_daily_active_mWh", r.duty_daily_active_mWh);
  add("duty_daily_idle_mWh", r.duty_daily_idle_mWh);
  add("duty_daily_total_mWh", r.duty_daily_total_mWh);
  add("duty_annual_Wh", r.duty_annual_Wh);
  return t;
}

Json timing_json(const adapt::DpsTiming& t) {
  Json j;
  j["subwindows"] = t.subwindows;
  j["amortized_pass_ms"] = t.amortized_pass_ms;
  j["overhead_per_subwindow_ms"] = t.overhead_per_subwindow_ms;
  j["overhead_per_window_ms"] = t.overhead_per_window_ms;
  j["total_per_subwindow_ms"] = t.total_per_subwindow_ms;
  return j;
}

Json temporal_json(const experiments::TemporalResult& r) {
  Json j;
  j["rho_in_session"] = r.rho_in_session;
  j["rho_later"] = r.rho_later;
  j["relative_drop"] = r.relative_drop;
  j["reonboard_fraction"] = r.reonboard_fraction;
  j["profiles"] = r.profiles;
  return j;
}

std::filesystem::path write_text(const std::filesystem::path& dir, const std::string& name, const std::string& text) {
  std::filesystem::create_directories(dir);
  const auto path = dir / name;
  const auto tmp = dir / (name + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw Error("cannot write " + tmp.string());
    os << text;
    if (!os) throw Error("cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
  return path;
}

}  // namespace mpib::report
