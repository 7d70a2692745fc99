// SPDX-License-Identifier: Apache-2.0
/**
 * @file report.hpp
 * @brief Machine-readable reports: JSON and CSV with stable field order, floats at six
 *        significant digits, and the resolved config hash and seed embedded.
 */
#pragma once

#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "mpib/adapt.hpp"
#include "mpib/config.hpp"
#include "mpib/eval.hpp"
#include "mpib/experiments.hpp"
#include "mpib/privacy.hpp"

namespace mpib::report {

using config::Json;

/// Rounds to six significant digits (the value printed by "%.6g").
double round6(double v);
std::string fmt6(double v);

/// Recursively rounds every floating-point value.
Json rounded(const Json& j);

/// {"command", "seed", "config_hash", "config", "results"} with results rounded.
Json envelope(const config::RunConfig& cfg, const Json& results);
std::string dump_json(const Json& j);

using Cell = std::variant<std::string, long long, double>;
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<Cell>> rows;
};
/// CSV text; config_hash and seed are appended as the last two columns of every row.
std::string to_csv(const Table& t, const config::RunConfig& cfg);

Json sweep_json(const experiments::SweepReport& r);
Table sweep_table(const experiments::SweepReport& r);
Json leakage_json(const experiments::LeakageReport& r);
Table leakage_table(const experiments::LeakageReport& r);
Json tradeoff_json(const std::vector<privacy::TradeoffRow>& rows);
Table tradeoff_table(const std::vector<privacy::TradeoffRow>& rows);
Json energy_json(const eval::EnergyReport& r);
Table energy_table(const eval::EnergyReport& r);
Json timing_json(const adapt::DpsTiming& t);
Json temporal_json(const experiments::TemporalResult& r);

/// Writes @p text to dir/name via a temporary file and rename.
std::filesystem::path write_text(const std::filesystem::path& dir, const std::string& name, const std::string& text);

}  // namespace mpib::report
