#include "dmtg/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace dmtg {

namespace {

constexpr char kMagic[8] = {'D', 'M', 'T', 'G', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}
  void u64(std::uint64_t v) { os_.write(reinterpret_cast<const char*>(&v), sizeof v); }
  void f64(double v) { os_.write(reinterpret_cast<const char*>(&v), sizeof v); }
  void doubles(std::span<const double> v) {
    u64(v.size());
    os_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  void sizes(std::span<const std::size_t> v) {
    u64(v.size());
    for (std::size_t x : v) u64(x);
  }
  void text(const std::string& s) {
    u64(s.size());
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}
  std::uint64_t u64() {
    std::uint64_t v = 0;
    read(&v, sizeof v);
    return v;
  }
  double f64() {
    double v = 0;
    read(&v, sizeof v);
    return v;
  }
  std::vector<double> doubles() {
    std::vector<double> v(length());
    read(v.data(), v.size() * sizeof(double));
    return v;
  }
  std::vector<std::size_t> sizes() {
    std::vector<std::size_t> v(length());
    for (auto& x : v) x = u64();
    return v;
  }
  std::string text() {
    std::string s(length(), '\0');
    read(s.data(), s.size());
    return s;
  }

 private:
  std::size_t length() {
    const std::uint64_t n = u64();
    if (n > (1ULL << 31)) throw CheckpointError("checkpoint: implausible field length");
    return n;
  }
  void read(void* dst, std::size_t n) {
    is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (!is_) throw CheckpointError("checkpoint: truncated file");
  }
  std::istream& is_;
};

bool same_bits(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

}  // namespace

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("checkpoint: cannot open " + path.string());
  os.write(kMagic, sizeof kMagic);
  os.write(reinterpret_cast<const char*>(&kCheckpointVersion), sizeof kCheckpointVersion);
  Writer w(os);
  const GroupModel& m = state.model;
  w.u64(m.input_dim());
  w.u64(m.architecture().depth);
  w.u64(m.architecture().width);
  w.u64(m.architecture().shared_layers);
  std::vector<std::size_t> kinds;
  for (auto k : m.loss_kinds()) kinds.push_back(static_cast<std::size_t>(k));
  w.sizes(kinds);
  w.u64(m.k_groups());
  w.u64(state.fixed_partition ? 1 : 0);
  if (state.fixed_partition) w.sizes(state.fixed_partition->assignment);
  w.u64(state.epoch);
  w.f64(state.plateau.best);
  w.u64(state.plateau.bad_epochs);
  w.text(state.noise.state());
  const ad::AdamConfig& a = state.optimizer.config();
  w.f64(a.lr);
  w.f64(a.beta1);
  w.f64(a.beta2);
  w.f64(a.eps);
  w.u64(state.optimizer.steps());
  w.doubles(state.optimizer.lr_scales());
  const auto params = m.parameters();
  w.u64(params.size());
  for (const auto& p : params) w.doubles(p.values());
  w.doubles(state.assignment.s.values());
  w.u64(state.optimizer.first_moments().size());
  for (const auto& v : state.optimizer.first_moments()) w.doubles(v);
  for (const auto& v : state.optimizer.second_moments()) w.doubles(v);
  w.u64(state.history.epochs.size());
  for (const EpochRecord& r : state.history.epochs) {
    w.u64(r.epoch);
    w.f64(r.tau);
    w.f64(r.lr);
    w.f64(r.train_loss);
    w.doubles(r.val_losses);
    w.f64(r.val_total);
    w.sizes(r.partition.assignment);
  }
  if (!os) throw CheckpointError("checkpoint: write failed for " + path.string());
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("checkpoint: cannot open " + path.string());
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof magic) != 0) throw CheckpointError("checkpoint: bad magic");
  std::uint32_t version = 0;
  is.read(reinterpret_cast<char*>(&version), sizeof version);
  if (!is || version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  }
  Reader r(is);
  const std::size_t input_dim = r.u64();
  Architecture arch;
  arch.depth = r.u64();
  arch.width = r.u64();
  arch.shared_layers = r.u64();
  std::vector<ad::ColumnLoss> kinds;
  for (std::size_t k : r.sizes()) {
    if (k > 1) throw CheckpointError("checkpoint: unknown loss kind");
    kinds.push_back(static_cast<ad::ColumnLoss>(k));
  }
  const std::size_t k_groups = r.u64();
  std::optional<Partition> fixed;
  if (r.u64() != 0) fixed = Partition{r.sizes()};
  const std::size_t epoch = r.u64();
  PlateauState plateau;
  plateau.best = r.f64();
  plateau.bad_epochs = r.u64();
  const std::string rng_state = r.text();
  TrainConfig cfg;
  cfg.adam.lr = r.f64();
  cfg.adam.beta1 = r.f64();
  cfg.adam.beta2 = r.f64();
  cfg.adam.eps = r.f64();
  const std::uint64_t steps = r.u64();
  const std::vector<double> lr_scales = r.doubles();

  GroupModel model(input_dim, std::move(kinds), k_groups, arch, 0);
  TrainState state = fixed ? TrainState::fixed(std::move(model), *fixed, cfg) : TrainState::one_shot(std::move(model), cfg);
  auto params = state.model.parameters();
  if (r.u64() != params.size()) throw CheckpointError("checkpoint: parameter count mismatch");
  for (auto& p : params) {
    const auto v = r.doubles();
    if (v.size() != p.size()) throw CheckpointError("checkpoint: parameter shape mismatch");
    std::copy(v.begin(), v.end(), p.mutable_values().begin());
  }
  const auto s = r.doubles();
  if (s.size() != state.assignment.s.size()) throw CheckpointError("checkpoint: S shape mismatch");
  std::copy(s.begin(), s.end(), state.assignment.s.mutable_values().begin());
  const std::size_t n_moments = r.u64();
  std::vector<std::vector<double>> m1, m2;
  for (std::size_t i = 0; i < n_moments; ++i) m1.push_back(r.doubles());
  for (std::size_t i = 0; i < n_moments; ++i) m2.push_back(r.doubles());
  try {
    state.optimizer.restore(steps, std::move(m1), std::move(m2));
  } catch (const ad::DimensionError& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
  if (lr_scales.size() != params.size() + (fixed ? 0 : 1)) throw CheckpointError("checkpoint: lr scale count mismatch");
  for (std::size_t i = 0; i < lr_scales.size(); ++i) state.optimizer.set_lr_scale(i, lr_scales[i]);
  state.epoch = epoch;
  state.plateau = plateau;
  state.noise.set_state(rng_state);
  const std::size_t n_hist = r.u64();
  for (std::size_t i = 0; i < n_hist; ++i) {
    EpochRecord rec;
    rec.epoch = r.u64();
    rec.tau = r.f64();
    rec.lr = r.f64();
    rec.train_loss = r.f64();
    rec.val_losses = r.doubles();
    rec.val_total = r.f64();
    rec.partition = Partition{r.sizes()};
    state.history.epochs.push_back(std::move(rec));
  }
  return state;
}

bool bit_identical(const TrainState& a, const TrainState& b) {
  const auto pa = a.model.parameters(), pb = b.model.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (!same_bits(pa[i].values(), pb[i].values())) return false;
  }
  if (!same_bits(a.assignment.s.values(), b.assignment.s.values())) return false;
  if (a.fixed_partition != b.fixed_partition || a.epoch != b.epoch) return false;
  if (!same_bits(a.plateau.best, b.plateau.best) || a.plateau.bad_epochs != b.plateau.bad_epochs) return false;
  if (a.noise.state() != b.noise.state()) return false;
  if (a.optimizer.steps() != b.optimizer.steps() || !same_bits(a.optimizer.lr(), b.optimizer.lr())) return false;
  if (!same_bits(a.optimizer.lr_scales(), b.optimizer.lr_scales())) return false;
  const auto &ma = a.optimizer.first_moments(), &mb = b.optimizer.first_moments();
  const auto &va = a.optimizer.second_moments(), &vb = b.optimizer.second_moments();
  if (ma.size() != mb.size()) return false;
  for (std::size_t i = 0; i < ma.size(); ++i) {
    if (!same_bits(ma[i], mb[i]) || !same_bits(va[i], vb[i])) return false;
  }
  if (a.history.epochs.size() != b.history.epochs.size()) return false;
  for (std::size_t i = 0; i < a.history.epochs.size(); ++i) {
    const auto &x = a.history.epochs[i], &y = b.history.epochs[i];
    if (x.epoch != y.epoch || !same_bits(x.tau, y.tau) || !same_bits(x.lr, y.lr) ||
        !same_bits(x.train_loss, y.train_loss) || !same_bits(x.val_losses, y.val_losses) ||
        !same_bits(x.val_total, y.val_total) || x.partition != y.partition) {
      return false;
    }
  }
  return true;
}

}  // namespace dmtg
