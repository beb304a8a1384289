#pragma once

// One-shot differentiable task grouping.
//
// A GroupModel has an optional shared trunk, K branch encoders and, per
// branch, a linear head with one output per task. Evaluating every head on
// every task gives the N x K loss matrix L. During training the loss is
// sum(L * Z), where Z is a Gumbel-softmax sample from the task-to-group
// scores S; afterwards each task keeps only the head of argmax_k S[i, k].

#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmtg/autodiff.hpp"
#include "dmtg/partition.hpp"
#include "dmtg/rng.hpp"
#include "dmtg/tasksuite.hpp"

namespace dmtg {

/// N x K learnable scores, used as logits.
struct AssignmentMatrix {
  ad::Tensor s;

  /// Every entry 1/K.
  static AssignmentMatrix uniform(std::size_t n_tasks, std::size_t k_groups);
  [[nodiscard]] std::size_t n_tasks() const { return s.rows(); }
  [[nodiscard]] std::size_t k_groups() const { return s.cols(); }
  [[nodiscard]] double max_abs() const;
};

/// -log(-log(u)) for u in (0, 1).
double gumbel_from_uniform(double u);
/// i.i.d. standard Gumbel noise, n x k.
ad::Tensor sample_gumbel(std::size_t n, std::size_t k, Rng& rng);

/// row_softmax((S + g) / tau). Throws DomainError for tau <= 0.
ad::Tensor gumbel_softmax(ad::Tape& tape, const ad::Tensor& s, const ad::Tensor& g, double tau);

/// sum over (i, k) of L[i, k] * Z[i, k].
ad::Tensor masked_loss(ad::Tape& tape, const ad::Tensor& losses, const ad::Tensor& mask);

/// argmax per row of S, lowest index on ties.
Partition extract_partition(const AssignmentMatrix& s);

/// N x K one-hot matrix of a partition; labels must be < k.
ad::Tensor one_hot(const Partition& p, std::size_t k);

struct TemperatureSchedule {
  enum class Kind { Fixed, Anneal };
  Kind kind = Kind::Fixed;
  double tau = 1.5;  // Fixed
  double tau_start = 100.0;
  double tau_end = 4.0;
  double decay_factor = 0.5;
  std::size_t epochs_per_decay = 1;

  static TemperatureSchedule fixed(double tau);
  static TemperatureSchedule anneal(double start, double end, double factor, std::size_t every);

  /// Temperature during the given (0-based) epoch.
  [[nodiscard]] double at(std::size_t epoch) const;
  void validate() const;

  friend bool operator==(const TemperatureSchedule&, const TemperatureSchedule&) = default;
};

struct Architecture {
  std::size_t depth = 2;          // hidden layers from input to head, trunk included
  std::size_t width = 3;
  std::size_t shared_layers = 0;  // trunk depth, < depth

  void validate() const;
  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct Dense {
  ad::Tensor w;  // in x out
  ad::Tensor b;  // 1 x out

  [[nodiscard]] std::size_t in() const { return w.rows(); }
  [[nodiscard]] std::size_t out() const { return w.cols(); }
  [[nodiscard]] Dense clone() const { return {w.clone(), b.clone()}; }
};

class GroupModel {
 public:
  /// Weights drawn uniform in +-1/sqrt(fan_in); order: trunk, branches 0..K-1, heads 0..K-1.
  GroupModel(std::size_t input_dim, std::vector<ad::ColumnLoss> loss_kinds, std::size_t k_groups,
             const Architecture& arch, std::uint64_t seed);

  /// K weight-identical copies of a single-branch model's branch and head.
  static GroupModel cloned(const GroupModel& base, std::size_t k_groups);

  /// Single-branch copy of branch k keeping only the heads of `tasks`, in that order.
  [[nodiscard]] GroupModel restricted(std::size_t k, std::span<const std::size_t> tasks) const;

  /// Deep copy with fresh tensors.
  [[nodiscard]] GroupModel clone() const;

  [[nodiscard]] std::size_t input_dim() const { return input_dim_; }
  [[nodiscard]] std::size_t n_tasks() const { return loss_kinds_.size(); }
  [[nodiscard]] std::size_t k_groups() const { return branches_.size(); }
  [[nodiscard]] const Architecture& architecture() const { return arch_; }
  [[nodiscard]] std::span<const ad::ColumnLoss> loss_kinds() const { return loss_kinds_; }

  /// Branch k's raw head outputs, B x N.
  ad::Tensor branch_outputs(ad::Tape& tape, const ad::Tensor& x, std::size_t k) const;
  /// N x K matrix; entry (i, k) is task i's mean batch loss under branch k's head.
  ad::Tensor forward_loss_matrix(ad::Tape& tape, const Batch& batch) const;

  /// Every trainable tensor in a fixed order.
  [[nodiscard]] std::vector<ad::Tensor> parameters() const;
  [[nodiscard]] std::size_t parameter_count() const;

  [[nodiscard]] const std::vector<Dense>& trunk() const { return trunk_; }
  [[nodiscard]] const std::vector<std::vector<Dense>>& branches() const { return branches_; }
  [[nodiscard]] const std::vector<Dense>& heads() const { return heads_; }

 private:
  GroupModel() = default;

  std::size_t input_dim_ = 0;
  std::vector<ad::ColumnLoss> loss_kinds_;
  Architecture arch_;
  std::vector<Dense> trunk_;
  std::vector<std::vector<Dense>> branches_;
  std::vector<Dense> heads_;  // heads_[k] is width x N
};

struct Complexity {
  std::uint64_t encoder_flops_per_sample = 0;  // multiply-adds, trunk + all branches
  std::uint64_t head_flops_per_sample = 0;
  std::uint64_t encoder_params = 0;
  std::uint64_t head_params = 0;

  [[nodiscard]] double head_flops_portion() const {
    const auto total = encoder_flops_per_sample + head_flops_per_sample;
    return total == 0 ? 0.0 : static_cast<double>(head_flops_per_sample) / static_cast<double>(total);
  }
  friend bool operator==(const Complexity&, const Complexity&) = default;
};

Complexity count_complexity(const GroupModel& model);
Complexity count_complexity(std::size_t input_dim, const Architecture& arch, std::size_t n_tasks, std::size_t k_groups);

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t epochs = 150;
  std::size_t batch_size = 8;
  ad::AdamConfig adam{.lr = 0.03};
  /// Step size of S relative to adam.lr.
  double assignment_lr_scale = 1.0;
  std::size_t plateau_patience = 5;
  double plateau_factor = 0.5;
  TemperatureSchedule temperature;
  /// Seeds the batch order; runs sharing it see identical batches.
  std::uint64_t batch_seed = 0;
  /// Seeds the Gumbel noise.
  std::uint64_t noise_seed = 0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, std::size_t epoch, double tau, double max_abs_s)
      : std::runtime_error(what), epoch(epoch), tau(tau), max_abs_s(max_abs_s) {}
  std::size_t epoch;
  double tau;
  double max_abs_s;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double tau = 0.0;
  double lr = 0.0;
  double train_loss = 0.0;          // mean of the per-step training objective
  std::vector<double> val_losses;   // per task, hard assignment
  double val_total = 0.0;
  Partition partition;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  friend bool operator==(const TrainHistory&, const TrainHistory&) = default;
};

struct PlateauState {
  double best = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;
  friend bool operator==(const PlateauState&, const PlateauState&) = default;
};

/// Everything a training run mutates; this is what a checkpoint stores.
struct TrainState {
  GroupModel model;
  AssignmentMatrix assignment;
  /// When set, the mask is this fixed one-hot matrix and S is not trained.
  std::optional<Partition> fixed_partition;
  ad::Adam optimizer;
  PlateauState plateau;
  std::size_t epoch = 0;  // completed epochs
  Rng noise;
  TrainHistory history;

  /// Learns S jointly with the weights.
  static TrainState one_shot(GroupModel model, const TrainConfig& cfg);
  /// Trains the weights under a constant one-hot mask; labels must be < K.
  static TrainState fixed(GroupModel model, Partition partition, const TrainConfig& cfg);

  /// Current hard assignment.
  [[nodiscard]] Partition partition() const;
};

/// Per-task validation losses of the current model under its current hard assignment.
std::vector<double> evaluate(const TrainState& state, const Split& split);

/// Runs epochs state.epoch .. cfg.epochs - 1.
void train(TrainState& state, const TaskSuite& suite, const TrainConfig& cfg);

/// Builds a uniform-S one-shot state on `model` and trains it.
TrainState train_one_shot(GroupModel model, const TaskSuite& suite, const TrainConfig& cfg);

}  // namespace dmtg
