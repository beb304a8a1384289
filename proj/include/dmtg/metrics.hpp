#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "dmtg/partition.hpp"

namespace dmtg {

struct NormGain {
  std::vector<double> per_task_pct;
  double mean_pct = 0.0;
};

/// 100 * (base - method) / base per task, and the mean over tasks.
/// Throws std::domain_error for a non-positive baseline.
NormGain norm_gain_loss(std::span<const double> method_losses, std::span<const double> naive_mtl_losses);
/// Same formula over a unified error measure.
NormGain norm_gain_error(std::span<const double> method_errors, std::span<const double> naive_mtl_errors);

struct Recovery {
  bool exact_match = false;
  double rand_index = 0.0;
};

/// Exact match up to relabelling, and the plain Rand index (1.0 when N < 2).
Recovery partition_recovery(const Partition& found, const Partition& planted);

double total_loss(std::span<const double> per_task_loss);

struct MetricsReport {
  std::vector<double> per_task_loss;
  std::vector<double> per_task_gain_pct;
  double mean_norm_gain_pct = 0.0;
  double total_loss = 0.0;
  Partition partition;
  Recovery recovery;
};

MetricsReport make_report(std::span<const double> losses, std::span<const double> naive_mtl_losses,
                          const Partition& partition, const Partition& planted);

}  // namespace dmtg
