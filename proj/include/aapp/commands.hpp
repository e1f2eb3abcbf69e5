#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "aapp/config.hpp"

namespace aapp {

// CLI entry points, kept as library functions so tests can drive them
// directly. All of them throw on failure; nothing is half-written except
// where a partial file is explicitly marked incomplete (sweep).

// Builds the world, calibrates general/benign/harmful stores and writes the
// bank file. Prints a per-target summary to `log`.
void cmd_calibrate(const RunConfig& cfg, const std::string& bank_path, std::ostream& log);

// One experiment: metrics JSON plus a per-batch, per-target decision CSV.
// PP/AAPP require a bank whose binding hash matches the config.
void cmd_run(const RunConfig& cfg, const std::string& bank_path,
             const std::string& metrics_json_path, const std::string& decisions_csv_path,
             std::ostream& log);

// Long-format CSV over (method, ratio, seed) cells. The world and bank are
// built once per seed and shared across cells. On any cell failure the file
// is closed with an INCOMPLETE marker and the error is rethrown.
void cmd_sweep(const RunConfig& cfg, const std::vector<double>& ratios,
               const std::vector<Method>& methods, const std::vector<uint64_t>& seeds,
               const std::string& csv_path, std::ostream& log);

// Aggregates a sweep CSV into mean +/- stderr per (method, ratio) cell.
void cmd_report(const std::string& sweep_csv_path, const std::string& out_csv_path,
                std::ostream& log);

// Stable CSV headers (pinned by golden tests).
extern const char* const kDecisionsCsvHeader;
extern const char* const kSweepCsvHeader;
extern const char* const kReportCsvHeader;

}  // namespace aapp
