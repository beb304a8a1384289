#pragma once

// Fixed-partition training and the reference grouping strategies.
//
// A fixed partition is trained as one independent single-branch model per
// non-empty group, on that group's tasks only. The init seed of a group is a
// function of its member set, so the same group gets the same weights
// wherever it appears (naive MTL, STL, oracle, HOA pairs).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "dmtg/grouping.hpp"
#include "dmtg/partition.hpp"
#include "dmtg/rng.hpp"
#include "dmtg/tasksuite.hpp"

namespace dmtg {

struct TrainingSetup {
  Architecture arch;
  /// `train.epochs` is the main budget; batch and noise seeds are derived from `seed`.
  TrainConfig train;
  std::size_t pretrain_epochs = 0;
  std::uint64_t seed = 0;

  [[nodiscard]] TrainConfig main_config() const;
  [[nodiscard]] TrainConfig pretrain_config() const;
};

std::uint64_t group_init_seed(std::uint64_t seed, std::span<const std::size_t> members);

struct PartitionScore {
  Partition partition;
  std::vector<double> per_task_val_loss;
  std::vector<double> per_task_test_loss;
  /// Mean NormGain vs naive MTL; unset until scored.
  std::optional<double> aggregate;
};

struct GroupResult {
  std::vector<std::size_t> members;
  GroupModel model;
  TrainHistory history;
  std::vector<double> val_losses;  // in member order
  std::vector<double> test_losses;
};

struct FixedResult {
  PartitionScore score;
  std::vector<GroupResult> groups;  // canonical group order
};

enum class FixedInit { Scratch, NaiveMtl };

/// Trains one group's tasks with a fresh (or given) single-branch model.
GroupResult train_group(const TaskSuite& suite, std::span<const std::size_t> members, const TrainingSetup& setup,
                        const GroupModel* init = nullptr);

/// `naive` must be the trained all-in-one model when init == NaiveMtl.
FixedResult train_fixed_partition(const Partition& partition, const TaskSuite& suite, const TrainingSetup& setup,
                                  FixedInit init = FixedInit::Scratch, const GroupModel* naive = nullptr);

FixedResult train_naive_mtl(const TaskSuite& suite, const TrainingSetup& setup);
FixedResult train_stl(const TaskSuite& suite, const TrainingSetup& setup);

/// Sets score.aggregate to the mean NormGain against the naive-MTL losses.
void score_against(PartitionScore& score, std::span<const double> naive_mtl_losses);

constexpr std::size_t kEnumerationLimit = 12;

/// Every partition of n tasks into at most k non-empty groups, canonical,
/// in lexicographic order of restricted-growth strings.
std::vector<Partition> enumerate_partitions(std::size_t n, std::size_t k);

struct OracleResult {
  std::size_t best = 0;  // index into all
  std::vector<PartitionScore> all;

  [[nodiscard]] const PartitionScore& best_score() const { return all.at(best); }
  /// Index of a partition (up to relabelling), if enumerated.
  [[nodiscard]] std::optional<std::size_t> find(const Partition& p) const;
};

/// Trains every enumerated partition and scores each against the all-in-one
/// entry. Each distinct group is trained once and reused across partitions;
/// training is deterministic, so this equals training each partition in turn.
OracleResult brute_force_oracle(const TaskSuite& suite, std::size_t k, const TrainingSetup& setup,
                                std::size_t workers = 1);

struct PairwiseAffinityTable {
  std::vector<double> singleton_loss;          // N
  std::vector<std::vector<double>> pair_loss;  // N x N, pair_loss[i][j] = loss of i trained with j
};

PairwiseAffinityTable build_affinity_table(const TaskSuite& suite, const TrainingSetup& setup);

/// Task-wise losses a group assignment is predicted to reach from pairwise results.
std::vector<double> approximate_losses(const PairwiseAffinityTable& table, const Partition& p);

struct HoaResult {
  Partition partition;
  double predicted_gain = 0.0;
  PairwiseAffinityTable table;
};

/// Picks the enumerated partition with the best predicted mean NormGain.
HoaResult hoa_select(const PairwiseAffinityTable& table, std::size_t k, std::span<const double> naive_mtl_losses);
HoaResult hoa_pairwise(const TaskSuite& suite, std::size_t k, const TrainingSetup& setup,
                       std::span<const double> naive_mtl_losses);

/// Each task assigned to a uniformly drawn group label in [0, k).
Partition random_group(std::size_t n, std::size_t k, Rng& rng);

}  // namespace dmtg
