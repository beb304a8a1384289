#pragma once

// Synthetic multi-task suites with a planted task partition.
//
// Every planted group g owns an orthonormal basis B_g of r directions in the
// d-dimensional input space, mutually orthogonal across groups. Task i in
// group g has the noiseless signal f_i(x) = w_i . tanh(B_g^T x), so tasks in
// one group read the same latent projection and tasks in different groups
// read independent ones.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmtg/autodiff.hpp"
#include "dmtg/partition.hpp"

namespace dmtg {

enum class TaskKind { Regression, BinaryClassification };

std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& text);

class SubspaceCapacityError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct SampleCounts {
  std::size_t train = 2000;
  std::size_t val = 500;
  std::size_t test = 500;
};

struct PlantedSpec {
  Partition true_partition;
  std::size_t input_dim = 16;
  std::size_t latent_dim = 3;
  double noise_std = 0.1;
  SampleCounts samples;
  /// One per task; empty means all regression.
  std::vector<TaskKind> kinds;
  /// Spread of task weights around their group's centre direction.
  double weight_spread = 0.1;
  std::uint64_t seed = 0;

  /// Six tasks in three planted pairs.
  static PlantedSpec default_spec();

  [[nodiscard]] std::size_t n_tasks() const { return true_partition.n_tasks(); }
  [[nodiscard]] std::size_t planted_groups() const { return true_partition.group_count(); }
  [[nodiscard]] TaskKind kind(std::size_t task) const {
    return kinds.empty() ? TaskKind::Regression : kinds[task];
  }
  void validate() const;
};

/// Row-major dense matrix for datasets.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  [[nodiscard]] double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  [[nodiscard]] std::vector<double> column(std::size_t c) const;

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

struct Split {
  Matrix x;       // samples x d
  Matrix y;       // samples x N targets
  Matrix signal;  // samples x N noiseless signals

  [[nodiscard]] std::size_t size() const { return x.rows; }
  friend bool operator==(const Split&, const Split&) = default;
};

struct TaskSuite {
  PlantedSpec spec;
  std::vector<Matrix> bases;  // one d x r basis per planted group (canonical label order)
  Matrix task_weights;        // N x r
  Split train;
  Split val;
  Split test;

  [[nodiscard]] std::size_t n_tasks() const { return spec.n_tasks(); }
  [[nodiscard]] std::size_t input_dim() const { return spec.input_dim; }
  [[nodiscard]] std::vector<ad::ColumnLoss> loss_kinds() const;
};

TaskSuite generate(const PlantedSpec& spec);

/// Keeps only the listed tasks (in the given order); the planted partition is
/// restricted accordingly.
TaskSuite select_tasks(const TaskSuite& suite, std::span<const std::size_t> tasks);

/// Noiseless f_i(x) for every row of x.
Matrix noiseless_signals(const TaskSuite& suite, const Matrix& x);

/// Pearson correlation; 0 when either input is constant.
double correlation(std::span<const double> a, std::span<const double> b);

struct Batch {
  ad::Tensor x;  // B x d
  ad::Tensor y;  // B x N
};

/// Shuffled index batches for one epoch; the last partial batch is kept.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t n_samples, std::size_t batch_size,
                                                    std::uint64_t seed, std::uint64_t epoch);

/// Materialises the batches of one epoch.
std::vector<Batch> split_loaders(const Split& split, std::size_t batch_size, std::uint64_t seed,
                                 std::uint64_t epoch);

/// Whole split as a single batch.
Batch full_batch(const Split& split);

// Suite files: "DMTGSUIT", u32 version, u64 header length, JSON spec header,
// then the bases, task weights and the train/val/test splits as row-major
// little-endian float64 matrices, each prefixed by u64 rows and u64 cols.
void save_suite(const TaskSuite& suite, const std::filesystem::path& path);
TaskSuite load_suite(const std::filesystem::path& path);

}  // namespace dmtg
