#include "dmtg/grouping.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace dmtg {

namespace {

enum Stream : std::uint64_t { kNoiseStream = 0x6e015e };

Dense make_dense(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  auto draw = [&](std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = bound * (2.0 * rng.uniform() - 1.0);
    return v;
  };
  Dense d;
  d.w = ad::Tensor::from(in, out, draw(in * out), true);
  d.b = ad::Tensor::from(1, out, draw(out), true);
  return d;
}

ad::Tensor affine(ad::Tape& tape, const ad::Tensor& x, const Dense& layer) {
  return tape.add(tape.matmul(x, layer.w), tape.replicate_rows(layer.b, x.rows()));
}

ad::Tensor hidden(ad::Tape& tape, const ad::Tensor& x, const std::vector<Dense>& layers) {
  ad::Tensor h = x;
  for (const Dense& layer : layers) h = tape.tanh(affine(tape, h, layer));
  return h;
}

std::vector<Dense> clone_layers(const std::vector<Dense>& layers) {
  std::vector<Dense> out;
  for (const Dense& d : layers) out.push_back(d.clone());
  return out;
}

std::uint64_t layer_flops(const std::vector<Dense>& layers) {
  std::uint64_t n = 0;
  for (const Dense& d : layers) n += d.in() * d.out();
  return n;
}

}  // namespace

AssignmentMatrix AssignmentMatrix::uniform(std::size_t n_tasks, std::size_t k_groups) {
  if (n_tasks == 0 || k_groups == 0) throw ad::DimensionError("AssignmentMatrix: N and K must be >= 1");
  return {ad::Tensor::filled(n_tasks, k_groups, 1.0 / static_cast<double>(k_groups), true)};
}

double AssignmentMatrix::max_abs() const {
  double m = 0.0;
  for (double v : s.values()) m = std::max(m, std::abs(v));
  return m;
}

double gumbel_from_uniform(double u) {
  if (!(u > 0.0 && u < 1.0)) throw ad::DomainError("gumbel_from_uniform: u must lie in (0, 1)");
  return -std::log(-std::log(u));
}

ad::Tensor sample_gumbel(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<double> g(n * k);
  for (auto& v : g) v = gumbel_from_uniform(rng.uniform());
  return ad::Tensor::from(n, k, std::move(g));
}

ad::Tensor gumbel_softmax(ad::Tape& tape, const ad::Tensor& s, const ad::Tensor& g, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ad::DomainError("gumbel_softmax: temperature must be > 0");
  return tape.row_softmax(tape.scale(tape.add(s, g), 1.0 / tau));
}

ad::Tensor masked_loss(ad::Tape& tape, const ad::Tensor& losses, const ad::Tensor& mask) {
  return tape.sum(tape.mul(losses, mask));
}

Partition extract_partition(const AssignmentMatrix& s) {
  Partition p;
  p.assignment.resize(s.n_tasks());
  for (std::size_t i = 0; i < s.n_tasks(); ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < s.k_groups(); ++k) {
      if (s.s.at(i, k) > s.s.at(i, best)) best = k;
    }
    p.assignment[i] = best;
  }
  return p;
}

ad::Tensor one_hot(const Partition& p, std::size_t k) {
  p.validate(k);
  auto t = ad::Tensor::zeros(p.n_tasks(), k);
  auto v = t.mutable_values();
  for (std::size_t i = 0; i < p.n_tasks(); ++i) v[i * k + p.assignment[i]] = 1.0;
  return t;
}

// ---------------------------------------------------------------------------

TemperatureSchedule TemperatureSchedule::fixed(double tau) {
  TemperatureSchedule s;
  s.kind = Kind::Fixed;
  s.tau = tau;
  s.validate();
  return s;
}

TemperatureSchedule TemperatureSchedule::anneal(double start, double end, double factor, std::size_t every) {
  TemperatureSchedule s;
  s.kind = Kind::Anneal;
  s.tau_start = start;
  s.tau_end = end;
  s.decay_factor = factor;
  s.epochs_per_decay = every;
  s.validate();
  return s;
}

double TemperatureSchedule::at(std::size_t epoch) const {
  if (kind == Kind::Fixed) return tau;
  const double steps = static_cast<double>(epoch / epochs_per_decay);
  return std::max(tau_end, tau_start * std::pow(decay_factor, steps));
}

void TemperatureSchedule::validate() const {
  if (kind == Kind::Fixed) {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw std::invalid_argument("temperature: tau must be > 0");
    return;
  }
  if (!(tau_start > 0.0) || !(tau_end > 0.0) || !std::isfinite(tau_start)) {
    throw std::invalid_argument("temperature: tau_start and tau_end must be > 0");
  }
  if (tau_end > tau_start) throw std::invalid_argument("temperature: tau_end must not exceed tau_start");
  if (!(decay_factor > 0.0 && decay_factor <= 1.0)) {
    throw std::invalid_argument("temperature: decay_factor must lie in (0, 1]");
  }
  if (epochs_per_decay == 0) throw std::invalid_argument("temperature: epochs_per_decay must be >= 1");
}

void Architecture::validate() const {
  if (depth == 0) throw std::invalid_argument("architecture: depth must be >= 1");
  if (width == 0) throw std::invalid_argument("architecture: width must be >= 1");
  if (shared_layers >= depth) throw std::invalid_argument("architecture: shared_layers must be < depth");
}

// ---------------------------------------------------------------------------

GroupModel::GroupModel(std::size_t input_dim, std::vector<ad::ColumnLoss> loss_kinds, std::size_t k_groups,
                       const Architecture& arch, std::uint64_t seed)
    : input_dim_(input_dim), loss_kinds_(std::move(loss_kinds)), arch_(arch) {
  arch.validate();
  if (input_dim == 0 || loss_kinds_.empty() || k_groups == 0) {
    throw ad::DimensionError("GroupModel: input_dim, N and K must be >= 1");
  }
  Rng rng(seed);
  const std::size_t h = arch.width;
  for (std::size_t l = 0; l < arch.shared_layers; ++l) trunk_.push_back(make_dense(l == 0 ? input_dim : h, h, rng));
  for (std::size_t k = 0; k < k_groups; ++k) {
    std::vector<Dense> branch;
    for (std::size_t l = arch.shared_layers; l < arch.depth; ++l) {
      branch.push_back(make_dense(l == 0 ? input_dim : h, h, rng));
    }
    branches_.push_back(std::move(branch));
  }
  for (std::size_t k = 0; k < k_groups; ++k) heads_.push_back(make_dense(h, n_tasks(), rng));
}

GroupModel GroupModel::cloned(const GroupModel& base, std::size_t k_groups) {
  if (base.k_groups() != 1) throw std::invalid_argument("GroupModel::cloned: base must have a single branch");
  if (k_groups == 0) throw ad::DimensionError("GroupModel::cloned: K must be >= 1");
  GroupModel m;
  m.input_dim_ = base.input_dim_;
  m.loss_kinds_ = base.loss_kinds_;
  m.arch_ = base.arch_;
  m.trunk_ = clone_layers(base.trunk_);
  for (std::size_t k = 0; k < k_groups; ++k) {
    m.branches_.push_back(clone_layers(base.branches_[0]));
    m.heads_.push_back(base.heads_[0].clone());
  }
  return m;
}

GroupModel GroupModel::restricted(std::size_t k, std::span<const std::size_t> tasks) const {
  if (k >= k_groups()) throw std::out_of_range("GroupModel::restricted: branch index out of range");
  if (tasks.empty()) throw ad::DimensionError("GroupModel::restricted: no tasks");
  GroupModel m;
  m.input_dim_ = input_dim_;
  m.arch_ = arch_;
  m.trunk_ = clone_layers(trunk_);
  m.branches_.push_back(clone_layers(branches_[k]));
  const Dense& head = heads_[k];
  const std::size_t h = head.in(), n = tasks.size();
  std::vector<double> w(h * n), b(n);
  for (std::size_t j = 0; j < n; ++j) {
    if (tasks[j] >= n_tasks()) throw std::out_of_range("GroupModel::restricted: task index out of range");
    m.loss_kinds_.push_back(loss_kinds_[tasks[j]]);
    for (std::size_t r = 0; r < h; ++r) w[r * n + j] = head.w.at(r, tasks[j]);
    b[j] = head.b.at(0, tasks[j]);
  }
  m.heads_.push_back({ad::Tensor::from(h, n, std::move(w), true), ad::Tensor::from(1, n, std::move(b), true)});
  return m;
}

GroupModel GroupModel::clone() const {
  GroupModel m;
  m.input_dim_ = input_dim_;
  m.loss_kinds_ = loss_kinds_;
  m.arch_ = arch_;
  m.trunk_ = clone_layers(trunk_);
  for (const auto& b : branches_) m.branches_.push_back(clone_layers(b));
  m.heads_ = clone_layers(heads_);
  return m;
}

ad::Tensor GroupModel::branch_outputs(ad::Tape& tape, const ad::Tensor& x, std::size_t k) const {
  if (x.cols() != input_dim_) throw ad::DimensionError("GroupModel: batch has wrong input width");
  return affine(tape, hidden(tape, hidden(tape, x, trunk_), branches_.at(k)), heads_.at(k));
}

ad::Tensor GroupModel::forward_loss_matrix(ad::Tape& tape, const Batch& batch) const {
  if (batch.x.cols() != input_dim_) throw ad::DimensionError("forward_loss_matrix: batch has wrong input width");
  if (batch.y.cols() != n_tasks() || batch.y.rows() != batch.x.rows()) {
    throw ad::DimensionError("forward_loss_matrix: targets do not match tasks or batch size");
  }
  const ad::Tensor shared = hidden(tape, batch.x, trunk_);
  std::vector<ad::Tensor> rows;
  for (std::size_t k = 0; k < k_groups(); ++k) {
    const ad::Tensor out = affine(tape, hidden(tape, shared, branches_[k]), heads_[k]);
    rows.push_back(tape.column_losses(out, batch.y, loss_kinds_));
  }
  return tape.transpose(tape.vstack(rows));
}

std::vector<ad::Tensor> GroupModel::parameters() const {
  std::vector<ad::Tensor> out;
  auto add = [&](const std::vector<Dense>& layers) {
    for (const Dense& d : layers) {
      out.push_back(d.w);
      out.push_back(d.b);
    }
  };
  add(trunk_);
  for (const auto& b : branches_) add(b);
  add(heads_);
  return out;
}

std::size_t GroupModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.size();
  return n;
}

Complexity count_complexity(const GroupModel& model) {
  Complexity c;
  c.encoder_flops_per_sample = layer_flops(model.trunk());
  for (const auto& b : model.branches()) c.encoder_flops_per_sample += layer_flops(b);
  c.head_flops_per_sample = layer_flops(model.heads());
  auto params = [](const std::vector<Dense>& layers) {
    std::uint64_t n = 0;
    for (const Dense& d : layers) n += d.w.size() + d.b.size();
    return n;
  };
  c.encoder_params = params(model.trunk());
  for (const auto& b : model.branches()) c.encoder_params += params(b);
  c.head_params = params(model.heads());
  return c;
}

Complexity count_complexity(std::size_t input_dim, const Architecture& arch, std::size_t n_tasks,
                            std::size_t k_groups) {
  arch.validate();
  const std::uint64_t d = input_dim, h = arch.width, n = n_tasks, k = k_groups;
  auto layer_in = [&](std::size_t l) -> std::uint64_t { return l == 0 ? d : h; };
  Complexity c;
  for (std::size_t l = 0; l < arch.depth; ++l) {
    const std::uint64_t copies = l < arch.shared_layers ? 1 : k;
    c.encoder_flops_per_sample += copies * layer_in(l) * h;
    c.encoder_params += copies * (layer_in(l) * h + h);
  }
  c.head_flops_per_sample = k * h * n;
  c.head_params = k * (h * n + n);
  return c;
}

// ---------------------------------------------------------------------------

TrainState TrainState::one_shot(GroupModel model, const TrainConfig& cfg) {
  AssignmentMatrix s = AssignmentMatrix::uniform(model.n_tasks(), model.k_groups());
  auto params = model.parameters();
  params.push_back(s.s);
  ad::Adam opt(std::move(params), cfg.adam);
  opt.set_lr_scale(opt.params().size() - 1, cfg.assignment_lr_scale);
  return TrainState{std::move(model), std::move(s), std::nullopt, std::move(opt), {}, 0,
                    Rng(mix_seed(cfg.noise_seed, kNoiseStream)), {}};
}

TrainState TrainState::fixed(GroupModel model, Partition partition, const TrainConfig& cfg) {
  partition.validate(model.k_groups());
  if (partition.n_tasks() != model.n_tasks()) throw ad::DimensionError("TrainState::fixed: partition size != N");
  AssignmentMatrix s{ad::Tensor::filled(model.n_tasks(), model.k_groups(), 1.0 / static_cast<double>(model.k_groups()))};
  ad::Adam opt(model.parameters(), cfg.adam);
  return TrainState{std::move(model), std::move(s), std::move(partition), std::move(opt), {}, 0,
                    Rng(mix_seed(cfg.noise_seed, kNoiseStream)), {}};
}

Partition TrainState::partition() const { return fixed_partition ? *fixed_partition : extract_partition(assignment); }

std::vector<double> evaluate(const TrainState& state, const Split& split) {
  ad::Tape tape;
  const ad::Tensor l = state.model.forward_loss_matrix(tape, full_batch(split));
  tape.clear();
  const Partition p = state.partition();
  std::vector<double> out(p.n_tasks());
  for (std::size_t i = 0; i < p.n_tasks(); ++i) out[i] = l.at(i, p.assignment[i]);
  return out;
}

void train(TrainState& state, const TaskSuite& suite, const TrainConfig& cfg) {
  cfg.temperature.validate();
  if (suite.n_tasks() != state.model.n_tasks()) throw ad::DimensionError("train: suite and model disagree on N");
  const std::size_t n = state.model.n_tasks(), k = state.model.k_groups();
  const ad::Tensor fixed_mask = state.fixed_partition ? one_hot(*state.fixed_partition, k) : ad::Tensor{};
  ad::Tape tape;

  for (; state.epoch < cfg.epochs; ++state.epoch) {
    const std::size_t epoch = state.epoch;
    const double tau = cfg.temperature.at(epoch);
    double train_sum = 0.0;
    std::size_t steps = 0;
    try {
      for (const Batch& batch : split_loaders(suite.train, cfg.batch_size, cfg.batch_seed, epoch)) {
        const ad::Tensor l = state.model.forward_loss_matrix(tape, batch);
        ad::Tensor mask = fixed_mask;
        if (!state.fixed_partition) {
          mask = gumbel_softmax(tape, state.assignment.s, sample_gumbel(n, k, state.noise), tau);
        }
        const ad::Tensor loss = masked_loss(tape, l, mask);
        train_sum += loss.item();
        ++steps;
        tape.backward(loss);
        state.optimizer.step();
      }
    } catch (const ad::NonFiniteError& e) {
      std::ostringstream msg;
      msg << "training diverged at epoch " << epoch << " (tau " << tau << ", max|S| " << state.assignment.max_abs()
          << "): " << e.what();
      throw TrainingDiverged(msg.str(), epoch, tau, state.assignment.max_abs());
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.tau = tau;
    rec.lr = state.optimizer.lr();
    rec.train_loss = train_sum / static_cast<double>(steps);
    rec.val_losses = evaluate(state, suite.val);
    for (double v : rec.val_losses) rec.val_total += v;
    rec.partition = state.partition();

    if (rec.val_total < state.plateau.best) {
      state.plateau.best = rec.val_total;
      state.plateau.bad_epochs = 0;
    } else if (++state.plateau.bad_epochs > cfg.plateau_patience) {
      state.optimizer.set_lr(state.optimizer.lr() * cfg.plateau_factor);
      state.plateau.bad_epochs = 0;
    }
    state.history.epochs.push_back(std::move(rec));
  }
}

TrainState train_one_shot(GroupModel model, const TaskSuite& suite, const TrainConfig& cfg) {
  TrainState state = TrainState::one_shot(std::move(model), cfg);
  train(state, suite, cfg);
  return state;
}

}  // namespace dmtg
