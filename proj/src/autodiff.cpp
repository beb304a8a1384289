#include "dmtg/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

namespace dmtg::ad {

namespace {

std::atomic<std::uint64_t> next_tape_id{1};

std::string shape_str(const Tensor& t) {
  std::ostringstream os;
  os << "(" << t.rows() << "x" << t.cols() << ")";
  return os.str();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw GraphError(std::string(op) + ": undefined tensor");
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// ---------------------------------------------------------------- Tensor

Tensor Tensor::zeros(std::size_t rows, std::size_t cols, bool requires_grad) {
  return filled(rows, cols, 0.0, requires_grad);
}

Tensor Tensor::filled(std::size_t rows, std::size_t cols, double value, bool requires_grad) {
  return from(rows, cols, std::vector<double>(rows * cols, value), requires_grad);
}

Tensor Tensor::from(std::size_t rows, std::size_t cols, std::vector<double> values, bool requires_grad) {
  if (values.size() != rows * cols) {
    throw DimensionError("Tensor::from: " + std::to_string(values.size()) + " values for shape (" +
                         std::to_string(rows) + "x" + std::to_string(cols) + ")");
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw NonFiniteError("Tensor::from: non-finite entry");
  }
  auto node = std::make_shared<Node>();
  node->rows = rows;
  node->cols = cols;
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  if (requires_grad) node->grad.assign(rows * cols, 0.0);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from(1, 1, {value}, requires_grad); }

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item: tensor is not a scalar " + shape_str(*this));
  return node_->value[0];
}

void Tensor::zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

Tensor Tensor::clone() const { return from(rows(), cols(), node_->value, node_->requires_grad); }

// ---------------------------------------------------------------- Tape

Tape::Tape() : id_(next_tape_id.fetch_add(1)) {}

Tensor Tape::make_output(std::size_t rows, std::size_t cols, std::vector<double> values,
                         std::initializer_list<const Tensor*> inputs, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NonFiniteError(std::string(op) + ": produced a non-finite value");
  }
  bool needs_grad = false;
  for (const Tensor* t : inputs) needs_grad = needs_grad || t->requires_grad();
  auto node = std::make_shared<Node>();
  node->rows = rows;
  node->cols = cols;
  node->value = std::move(values);
  node->requires_grad = needs_grad;
  if (needs_grad) node->grad.assign(rows * cols, 0.0);
  node->tape_id = id_;
  node->generation = generation_;
  return Tensor(std::move(node));
}

void Tape::record(const Tensor& out, std::function<void(const Node&)> fn) {
  if (out.requires_grad()) records_.push_back({out.node(), std::move(fn)});
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a) + " * " + shape_str(b));
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  std::vector<double> out(n * m, 0.0);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = bv + p * m;
      for (std::size_t j = 0; j < m; ++j) row[j] += aip * brow[j];
    }
  }
  Tensor result = make_output(n, m, std::move(out), {&a, &b}, "matmul");
  auto an = a.node(), bn = b.node();
  record(result, [an, bn, n, k, m](const Node& o) {
    const double* g = o.grad.data();
    if (an->requires_grad) {
      double* ga = an->grad.data();
      const double* bv = bn->value.data();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j) acc += g[i * m + j] * bv[p * m + j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (bn->requires_grad) {
      double* gb = bn->grad.data();
      const double* av = an->value.data();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += aip * g[i * m + j];
        }
      }
    }
  });
  return result;
}

Tensor Tape::binary(const Tensor& a, const Tensor& b, BinaryKind kind) {
  require_defined(a, "binary");
  require_defined(b, "binary");
  require_same_shape(a, b, "elementwise");
  const std::size_t n = a.size();
  std::vector<double> out(n);
  const auto av = a.values();
  const auto bv = b.values();
  switch (kind) {
    case BinaryKind::Add:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i];
      break;
    case BinaryKind::Sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - bv[i];
      break;
    case BinaryKind::Mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i];
      break;
  }
  Tensor result = make_output(a.rows(), a.cols(), std::move(out), {&a, &b}, "elementwise");
  auto an = a.node(), bn = b.node();
  record(result, [an, bn, n, kind](const Node& o) {
    const double* g = o.grad.data();
    if (an->requires_grad) {
      double* ga = an->grad.data();
      if (kind == BinaryKind::Mul) {
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bn->value[i];
      } else {
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
    }
    if (bn->requires_grad) {
      double* gb = bn->grad.data();
      switch (kind) {
        case BinaryKind::Add:
          for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
          break;
        case BinaryKind::Sub:
          for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
          break;
        case BinaryKind::Mul:
          for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * an->value[i];
          break;
      }
    }
  });
  return result;
}

Tensor Tape::unary(const Tensor& a, UnaryKind kind, double factor) {
  require_defined(a, "unary");
  const std::size_t n = a.size();
  const auto av = a.values();
  std::vector<double> out(n);
  switch (kind) {
    case UnaryKind::Relu:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
      break;
    case UnaryKind::Tanh:
      for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(av[i]);
      break;
    case UnaryKind::Exp:
      for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(av[i]);
      break;
    case UnaryKind::Log:
      for (std::size_t i = 0; i < n; ++i) {
        if (!(av[i] > 0.0)) throw DomainError("log: non-positive entry " + std::to_string(av[i]));
        out[i] = std::log(av[i]);
      }
      break;
    case UnaryKind::Neg:
      for (std::size_t i = 0; i < n; ++i) out[i] = -av[i];
      break;
    case UnaryKind::Scale:
      for (std::size_t i = 0; i < n; ++i) out[i] = factor * av[i];
      break;
  }
  Tensor result = make_output(a.rows(), a.cols(), std::move(out), {&a}, "unary");
  auto an = a.node();
  record(result, [an, n, kind, factor](const Node& o) {
    const double* g = o.grad.data();
    double* ga = an->grad.data();
    const double* x = an->value.data();
    const double* y = o.value.data();
    switch (kind) {
      case UnaryKind::Relu:
        for (std::size_t i = 0; i < n; ++i) ga[i] += x[i] > 0.0 ? g[i] : 0.0;
        break;
      case UnaryKind::Tanh:
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
        break;
      case UnaryKind::Exp:
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * y[i];
        break;
      case UnaryKind::Log:
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] / x[i];
        break;
      case UnaryKind::Neg:
        for (std::size_t i = 0; i < n; ++i) ga[i] -= g[i];
        break;
      case UnaryKind::Scale:
        for (std::size_t i = 0; i < n; ++i) ga[i] += factor * g[i];
        break;
    }
  });
  return result;
}

Tensor Tape::row_softmax(const Tensor& a) {
  require_defined(a, "row_softmax");
  const std::size_t rows = a.rows(), cols = a.cols();
  const auto av = a.values();
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * cols;
    double* y = out.data() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - mx);
      total += y[c];
    }
    for (std::size_t c = 0; c < cols; ++c) y[c] /= total;
  }
  Tensor result = make_output(rows, cols, std::move(out), {&a}, "row_softmax");
  auto an = a.node();
  record(result, [an, rows, cols](const Node& o) {
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = o.value.data() + r * cols;
      const double* g = o.grad.data() + r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += y[c] * g[c];
      double* ga = an->grad.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) ga[c] += y[c] * (g[c] - dot);
    }
  });
  return result;
}

Tensor Tape::reduce(const Tensor& a, ReduceKind kind) {
  require_defined(a, "reduce");
  const std::size_t rows = a.rows(), cols = a.cols();
  const auto av = a.values();
  if (kind == ReduceKind::RowMean) {
    if (cols == 0) throw DimensionError("row_mean: zero columns");
    std::vector<double> out(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < cols; ++c) acc += av[r * cols + c];
      out[r] = acc / static_cast<double>(cols);
    }
    Tensor result = make_output(rows, 1, std::move(out), {&a}, "row_mean");
    auto an = a.node();
    record(result, [an, rows, cols](const Node& o) {
      const double inv = 1.0 / static_cast<double>(cols);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) an->grad[r * cols + c] += o.grad[r] * inv;
      }
    });
    return result;
  }
  const std::size_t n = a.size();
  if (kind == ReduceKind::Mean && n == 0) throw DimensionError("mean: empty tensor");
  double acc = 0.0;
  for (double v : av) acc += v;
  const double factor = kind == ReduceKind::Mean ? 1.0 / static_cast<double>(n) : 1.0;
  Tensor result = make_output(1, 1, {acc * factor}, {&a}, "reduce");
  auto an = a.node();
  record(result, [an, n, factor](const Node& o) {
    const double g = o.grad[0] * factor;
    for (std::size_t i = 0; i < n; ++i) an->grad[i] += g;
  });
  return result;
}

Tensor Tape::mse(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "mse");
  const std::size_t n = pred.size();
  if (n == 0) throw DimensionError("mse: empty tensor");
  const auto p = pred.values();
  const auto t = target.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = p[i] - t[i];
    acc += d * d;
  }
  Tensor result = make_output(1, 1, {acc / static_cast<double>(n)}, {&pred, &target}, "mse");
  auto pn = pred.node(), tn = target.node();
  record(result, [pn, tn, n](const Node& o) {
    const double g = o.grad[0] * 2.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double d = pn->value[i] - tn->value[i];
      if (pn->requires_grad) pn->grad[i] += g * d;
      if (tn->requires_grad) tn->grad[i] -= g * d;
    }
  });
  return result;
}

Tensor Tape::bce_with_logits(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "bce_with_logits");
  const std::size_t n = pred.size();
  if (n == 0) throw DimensionError("bce_with_logits: empty tensor");
  const auto p = pred.values();
  const auto t = target.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (t[i] != 0.0 && t[i] != 1.0) throw DomainError("bce_with_logits: target outside {0,1}");
    acc += softplus(p[i]) - t[i] * p[i];
  }
  Tensor result = make_output(1, 1, {acc / static_cast<double>(n)}, {&pred}, "bce_with_logits");
  auto pn = pred.node(), tn = target.node();
  record(result, [pn, tn, n](const Node& o) {
    const double g = o.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) pn->grad[i] += g * (sigmoid(pn->value[i]) - tn->value[i]);
  });
  return result;
}

Tensor Tape::column_losses(const Tensor& pred, const Tensor& target, std::span<const ColumnLoss> kinds) {
  require_same_shape(pred, target, "column_losses");
  const std::size_t rows = pred.rows(), cols = pred.cols();
  if (kinds.size() != cols) throw DimensionError("column_losses: one loss kind per column required");
  if (rows == 0) throw DimensionError("column_losses: empty batch");
  const auto p = pred.values();
  const auto t = target.values();
  std::vector<double> out(cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      if (kinds[c] == ColumnLoss::SquaredError) {
        const double d = p[i] - t[i];
        out[c] += d * d;
      } else {
        if (t[i] != 0.0 && t[i] != 1.0) throw DomainError("column_losses: target outside {0,1}");
        out[c] += softplus(p[i]) - t[i] * p[i];
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(rows);
  for (double& v : out) v *= inv;
  Tensor result = make_output(1, cols, std::move(out), {&pred}, "column_losses");
  auto pn = pred.node(), tn = target.node();
  std::vector<ColumnLoss> ks(kinds.begin(), kinds.end());
  record(result, [pn, tn, rows, cols, inv, ks = std::move(ks)](const Node& o) {
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t i = r * cols + c;
        const double g = o.grad[c] * inv;
        if (ks[c] == ColumnLoss::SquaredError) {
          pn->grad[i] += g * 2.0 * (pn->value[i] - tn->value[i]);
        } else {
          pn->grad[i] += g * (sigmoid(pn->value[i]) - tn->value[i]);
        }
      }
    }
  });
  return result;
}

Tensor Tape::replicate_rows(const Tensor& row, std::size_t rows) {
  if (row.rows() != 1) throw DimensionError("replicate_rows: expected a 1 x n row, got " + shape_str(row));
  const std::size_t cols = row.cols();
  std::vector<double> out(rows * cols);
  const auto v = row.values();
  for (std::size_t r = 0; r < rows; ++r) std::copy(v.begin(), v.end(), out.begin() + r * cols);
  Tensor result = make_output(rows, cols, std::move(out), {&row}, "replicate_rows");
  auto rn = row.node();
  record(result, [rn, rows, cols](const Node& o) {
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) rn->grad[c] += o.grad[r * cols + c];
    }
  });
  return result;
}

Tensor Tape::transpose(const Tensor& a) {
  const std::size_t rows = a.rows(), cols = a.cols();
  std::vector<double> out(rows * cols);
  const auto v = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = v[r * cols + c];
  }
  Tensor result = make_output(cols, rows, std::move(out), {&a}, "transpose");
  auto an = a.node();
  record(result, [an, rows, cols](const Node& o) {
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) an->grad[r * cols + c] += o.grad[c * rows + r];
    }
  });
  return result;
}

Tensor Tape::vstack(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("vstack: no inputs");
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  bool needs_grad = false;
  for (const Tensor& p : parts) {
    if (p.cols() != cols) throw DimensionError("vstack: column counts differ");
    rows += p.rows();
    needs_grad = needs_grad || p.requires_grad();
  }
  std::vector<double> out;
  out.reserve(rows * cols);
  for (const Tensor& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  // make_output takes an initializer_list; the flag is applied directly here.
  Tensor result = make_output(rows, cols, std::move(out), {}, "vstack");
  if (needs_grad) {
    result.node_->requires_grad = true;
    result.node_->grad.assign(rows * cols, 0.0);
  }
  std::vector<std::shared_ptr<Node>> nodes;
  nodes.reserve(parts.size());
  for (const Tensor& p : parts) nodes.push_back(p.node());
  record(result, [nodes = std::move(nodes)](const Node& o) {
    std::size_t offset = 0;
    for (const auto& n : nodes) {
      const std::size_t len = n->value.size();
      if (n->requires_grad) {
        for (std::size_t i = 0; i < len; ++i) n->grad[i] += o.grad[offset + i];
      }
      offset += len;
    }
  });
  return result;
}

void Tape::backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.size() != 1) throw DimensionError("backward: loss must be a scalar, got " + shape_str(loss));
  const Node& ln = *loss.node();
  if (ln.tape_id != id_ || ln.generation != generation_) {
    throw GraphError("backward: loss was not produced by the current record of this tape");
  }
  if (records_.empty() || !ln.requires_grad) {
    throw GraphError("backward: nothing recorded that depends on a trainable tensor");
  }
  loss.node()->grad[0] += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->backward(*it->output);
  clear();
}

void Tape::clear() {
  records_.clear();
  ++generation_;
}

// ---------------------------------------------------------------- Adam

Adam::Adam(std::vector<Tensor> params, AdamConfig config) : params_(std::move(params)), config_(config) {
  for (const Tensor& p : params_) {
    if (!p.defined() || !p.requires_grad()) throw GraphError("Adam: every parameter must require grad");
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
  scale_.assign(params_.size(), 1.0);
}

void Adam::step() {
  ++step_;
  const double t = static_cast<double>(step_);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k];
    auto w = p.mutable_values();
    auto g = p.mutable_grad();
    if (g.size() != w.size()) throw GraphError("Adam: parameter without a gradient buffer");
    auto& m = m_[k];
    auto& v = v_[k];
    const double lr = config_.lr * scale_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
    p.zero_grad();
  }
}

void Adam::restore(std::uint64_t step, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v) {
  if (m.size() != params_.size() || v.size() != params_.size()) {
    throw DimensionError("Adam::restore: moment count mismatch");
  }
  for (std::size_t k = 0; k < params_.size(); ++k) {
    if (m[k].size() != params_[k].size() || v[k].size() != params_[k].size()) {
      throw DimensionError("Adam::restore: moment shape mismatch");
    }
  }
  step_ = step;
  m_ = std::move(m);
  v_ = std::move(v);
}

// ---------------------------------------------------------------- checks

std::vector<double> numeric_gradient(Tensor& x, const std::function<double()>& f, double h) {
  auto values = x.mutable_values();
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double orig = values[i];
    values[i] = orig + h;
    const double up = f();
    values[i] = orig - h;
    const double down = f();
    values[i] = orig;
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace dmtg::ad
