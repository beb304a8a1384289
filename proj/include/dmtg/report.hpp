#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dmtg/runner.hpp"

namespace dmtg {

/// Mean and population standard deviation.
struct Summary {
  double mean = 0.0;
  double spread = 0.0;
};

Summary summarize(const std::vector<double>& values);

struct ReportRow {
  std::string method;
  std::size_t runs = 0;
  std::size_t failed = 0;
  Summary total_loss;
  Summary normgain_pct;
  std::optional<double> exact_match_rate;
  std::optional<Summary> rand_index;
  /// Encoder multiply-adds relative to naive MTL.
  std::optional<double> relative_encoder;
};

struct Report {
  std::vector<ReportRow> rows;  // first-appearance order of methods
};

/// NormGain is recomputed from the per-task losses against the naive_mtl
/// record of the same seed when one exists, else taken from the record.
Report build_report(const std::vector<RunRecord>& records);

/// Reads <dir>/records.jsonl. Throws if it is missing or holds no records.
Report report_directory(const std::filesystem::path& dir);

std::string format_report(const Report& r);
std::string report_csv(const Report& r);

}  // namespace dmtg
