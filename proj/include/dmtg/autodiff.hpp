#pragma once

// Minimal reverse-mode automatic differentiation over dense rank-2 tensors.
//
// A Tensor is a shared handle to a node holding row-major values and, when
// the node requires a gradient, a same-shape gradient buffer. Operations are
// recorded on an explicit Tape; Tape::backward() replays the record in
// reverse and then clears it. There is no broadcasting: biases go through
// Tape::replicate_rows().

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dmtg::ad {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Raised whenever an operation produces NaN or Inf.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct Node {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> value;
  std::vector<double> grad;  // empty unless requires_grad
  bool requires_grad = false;
  // Identifies the tape generation that produced this node; 0 for leaves.
  std::uint64_t tape_id = 0;
  std::uint64_t generation = 0;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false);
  static Tensor filled(std::size_t rows, std::size_t cols, double value, bool requires_grad = false);
  static Tensor from(std::size_t rows, std::size_t cols, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  [[nodiscard]] bool defined() const { return node_ != nullptr; }
  [[nodiscard]] std::size_t rows() const { return node_->rows; }
  [[nodiscard]] std::size_t cols() const { return node_->cols; }
  [[nodiscard]] std::size_t size() const { return node_->rows * node_->cols; }
  [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }

  [[nodiscard]] std::span<const double> values() const { return node_->value; }
  /// Direct write access, for optimizers and initialisation. Not recorded.
  [[nodiscard]] std::span<double> mutable_values() { return node_->value; }
  [[nodiscard]] std::span<const double> grad() const { return node_->grad; }
  [[nodiscard]] std::span<double> mutable_grad() { return node_->grad; }

  [[nodiscard]] double at(std::size_t r, std::size_t c) const { return node_->value[r * node_->cols + c]; }
  [[nodiscard]] double item() const;
  void zero_grad();

  /// Deep copy of values (and requires_grad flag) into a fresh leaf.
  [[nodiscard]] Tensor clone() const;

  [[nodiscard]] const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;

  friend class Tape;
};

enum class BinaryKind { Add, Sub, Mul };
enum class UnaryKind { Relu, Tanh, Exp, Log, Neg, Scale };
enum class ReduceKind { Sum, Mean, RowMean };
enum class ColumnLoss { SquaredError, LogisticWithLogits };

/// The computation record. Not copyable; one tape per worker.
class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind);
  Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Add); }
  Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Sub); }
  Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Mul); }

  Tensor unary(const Tensor& a, UnaryKind kind, double factor = 1.0);
  Tensor relu(const Tensor& a) { return unary(a, UnaryKind::Relu); }
  Tensor tanh(const Tensor& a) { return unary(a, UnaryKind::Tanh); }
  Tensor exp(const Tensor& a) { return unary(a, UnaryKind::Exp); }
  Tensor log(const Tensor& a) { return unary(a, UnaryKind::Log); }
  Tensor neg(const Tensor& a) { return unary(a, UnaryKind::Neg); }
  Tensor scale(const Tensor& a, double c) { return unary(a, UnaryKind::Scale, c); }

  /// Softmax along each row, stabilised by subtracting the row maximum.
  Tensor row_softmax(const Tensor& a);

  Tensor reduce(const Tensor& a, ReduceKind kind);
  Tensor sum(const Tensor& a) { return reduce(a, ReduceKind::Sum); }
  Tensor mean(const Tensor& a) { return reduce(a, ReduceKind::Mean); }
  /// rows x cols -> rows x 1.
  Tensor row_mean(const Tensor& a) { return reduce(a, ReduceKind::RowMean); }

  Tensor mse(const Tensor& pred, const Tensor& target);
  Tensor bce_with_logits(const Tensor& pred, const Tensor& target);
  /// Per-column mean loss of a batch: (B x N, B x N) -> 1 x N. Column j uses kinds[j].
  Tensor column_losses(const Tensor& pred, const Tensor& target, std::span<const ColumnLoss> kinds);

  /// 1 x n -> rows x n, gradient summed back over rows.
  Tensor replicate_rows(const Tensor& row, std::size_t rows);
  Tensor transpose(const Tensor& a);
  /// Stack tensors with equal column counts on top of each other.
  Tensor vstack(std::span<const Tensor> parts);

  /// Populates grads of every requires_grad tensor reachable from `loss`
  /// (accumulating), then clears the record.
  void backward(const Tensor& loss);

  /// Drops the record without back-propagating (evaluation passes).
  void clear();

  [[nodiscard]] std::size_t size() const { return records_.size(); }

 private:
  struct Record {
    std::shared_ptr<Node> output;
    std::function<void(const Node&)> backward;
  };

  Tensor make_output(std::size_t rows, std::size_t cols, std::vector<double> values,
                     std::initializer_list<const Tensor*> inputs, const char* op);
  void record(const Tensor& out, std::function<void(const Node&)> fn);

  std::uint64_t id_;
  std::uint64_t generation_ = 1;
  std::vector<Record> records_;
};

struct AdamConfig {
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers mirror the parameter shapes.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config);

  /// Applies one update from the current grads and zeroes them.
  void step();

  [[nodiscard]] double lr() const { return config_.lr; }
  void set_lr(double lr) { config_.lr = lr; }
  [[nodiscard]] const AdamConfig& config() const { return config_; }
  [[nodiscard]] std::uint64_t steps() const { return step_; }
  [[nodiscard]] const std::vector<Tensor>& params() const { return params_; }

  /// Parameter k steps with lr * scale; scales default to 1.
  void set_lr_scale(std::size_t k, double scale) { scale_.at(k) = scale; }
  [[nodiscard]] const std::vector<double>& lr_scales() const { return scale_; }

  // Checkpoint access.
  [[nodiscard]] const std::vector<std::vector<double>>& first_moments() const { return m_; }
  [[nodiscard]] const std::vector<std::vector<double>>& second_moments() const { return v_; }
  void restore(std::uint64_t step, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v);

 private:
  std::vector<Tensor> params_;
  AdamConfig config_;
  std::uint64_t step_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::vector<double> scale_;
};

/// Central finite-difference gradient of a scalar function of one tensor's
/// values. `f` is evaluated with the tensor perturbed in place.
std::vector<double> numeric_gradient(Tensor& x, const std::function<double()>& f, double h = 1e-5);

/// |a - b| / max(|a|, |b|, floor).
double relative_error(double a, double b, double floor = 1e-8);

}  // namespace dmtg::ad
