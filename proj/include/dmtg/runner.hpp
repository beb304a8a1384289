#pragma once

// Experiment orchestration and result files.
//
// An output directory holds:
//   manifest.json      schema versions, config hash, the full config
//   records.csv        one row per (seed, method), columns in kCsvColumns
//   records.jsonl      the same records with per-task arrays
//   oracle_table.csv   every oracle partition (when "oracle" ran), CSV schema as above
//   oracle_table.jsonl
// Records are written in (seed, method) order and flushed one at a time, so
// a killed run leaves a readable prefix. A failed job writes a record with
// method "<name>" and "failed": true and a CSV row with empty metric fields.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmtg/baselines.hpp"
#include "dmtg/config.hpp"
#include "dmtg/grouping.hpp"
#include "dmtg/metrics.hpp"

namespace dmtg {

constexpr int kCsvSchemaVersion = 1;
constexpr int kJsonlSchemaVersion = 1;

inline const char* const kCsvColumns =
    "config_hash,method,seed,K,N,partition,total_loss,mean_normgain_pct,exact_match,rand_index,wallclock_s";

struct DmtgResult {
  TrainState state;
  TrainHistory pretrain_history;
  Partition partition;
  std::vector<double> val_losses;
  std::vector<double> test_losses;
};

/// Pretrain a single-branch model on all tasks, clone it K times, train
/// weights and S jointly, read out argmax S.
DmtgResult run_dmtg(const TaskSuite& suite, std::size_t k_groups, const TrainingSetup& setup);

struct RunRecord {
  std::string config_hash;
  std::string method;
  std::uint64_t seed = 0;
  std::size_t k = 0;
  std::size_t n = 0;
  Partition partition;
  std::vector<double> val_losses;
  std::vector<double> test_losses;
  std::vector<double> gain_pct;
  double total_loss = 0.0;
  double mean_normgain_pct = 0.0;
  bool exact_match = false;
  double rand_index = 0.0;
  double wallclock_s = 0.0;
  Complexity complexity;
  std::size_t epochs = 0;
  std::uint64_t batch_seed = 0;
  bool failed = false;
  std::string error;

  [[nodiscard]] std::string csv_row() const;
  [[nodiscard]] nlohmann::json to_json() const;
  static RunRecord from_json(const nlohmann::json& j);
};

struct RunOptions {
  std::size_t workers = 1;
  /// Called after each record is written.
  std::function<void(const RunRecord&)> on_record;
};

struct RunOutput {
  std::vector<RunRecord> records;
  std::vector<RunRecord> oracle_table;
  bool any_failed = false;
};

/// Runs methods x seeds and writes the result files into config.output_dir.
RunOutput run(const ExperimentConfig& config, const RunOptions& options = {});

/// Oracle table only, for every seed.
RunOutput run_oracle(const ExperimentConfig& config, const RunOptions& options = {});

std::vector<RunRecord> read_records(const std::filesystem::path& jsonl);

}  // namespace dmtg
