#include "dmtg/tasksuite.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "dmtg/json_io.hpp"
#include "dmtg/rng.hpp"

namespace dmtg {

namespace {

constexpr char kSuiteMagic[8] = {'D', 'M', 'T', 'G', 'S', 'U', 'I', 'T'};
constexpr std::uint32_t kSuiteVersion = 1;

// E[tanh(Z)^2] for Z ~ N(0, 1), by composite Simpson on [-12, 12].
double tanh_second_moment() {
  static const double value = [] {
    constexpr int n = 4000;
    constexpr double lo = -12.0, hi = 12.0;
    const double h = (hi - lo) / n;
    auto f = [](double z) {
      const double t = std::tanh(z);
      return t * t * std::exp(-0.5 * z * z) / std::sqrt(2.0 * 3.14159265358979323846);
    };
    double acc = f(lo) + f(hi);
    for (int i = 1; i < n; ++i) acc += f(lo + i * h) * (i % 2 ? 4.0 : 2.0);
    return acc * h / 3.0;
  }();
  return value;
}

// Orthonormal columns by modified Gram-Schmidt with one re-orthogonalisation pass.
Matrix orthonormal_columns(std::size_t d, std::size_t k, Rng& rng) {
  Matrix q(d, k);
  for (auto& v : q.data) v = rng.normal();
  for (std::size_t j = 0; j < k; ++j) {
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t p = 0; p < j; ++p) {
        double dot = 0.0;
        for (std::size_t i = 0; i < d; ++i) dot += q.at(i, p) * q.at(i, j);
        for (std::size_t i = 0; i < d; ++i) q.at(i, j) -= dot * q.at(i, p);
      }
    }
    double norm = 0.0;
    for (std::size_t i = 0; i < d; ++i) norm += q.at(i, j) * q.at(i, j);
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < d; ++i) q.at(i, j) /= norm;
  }
  return q;
}

double median_of(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

Split draw_split(const TaskSuite& suite, std::size_t n, Rng& rng) {
  const PlantedSpec& spec = suite.spec;
  const std::size_t d = spec.input_dim, tasks = spec.n_tasks();
  Split split;
  split.x = Matrix(n, d);
  for (auto& v : split.x.data) v = rng.normal();
  split.signal = noiseless_signals(suite, split.x);
  split.y = Matrix(n, tasks);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t t = 0; t < tasks; ++t) split.y.at(s, t) = split.signal.at(s, t) + spec.noise_std * rng.normal();
  }
  for (std::size_t t = 0; t < tasks; ++t) {
    if (spec.kind(t) != TaskKind::BinaryClassification || n == 0) continue;
    const double threshold = median_of(split.y.column(t));
    for (std::size_t s = 0; s < n; ++s) split.y.at(s, t) = split.y.at(s, t) > threshold ? 1.0 : 0.0;
  }
  return split;
}

void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw std::runtime_error("suite file: truncated");
  return v;
}

void write_matrix(std::ostream& os, const Matrix& m) {
  write_u64(os, m.rows);
  write_u64(os, m.cols);
  os.write(reinterpret_cast<const char*>(m.data.data()), static_cast<std::streamsize>(m.data.size() * sizeof(double)));
}

Matrix read_matrix(std::istream& is) {
  const std::uint64_t rows = read_u64(is);
  const std::uint64_t cols = read_u64(is);
  if (rows > (1ULL << 32) || cols > (1ULL << 32)) throw std::runtime_error("suite file: implausible matrix shape");
  Matrix m(rows, cols);
  is.read(reinterpret_cast<char*>(m.data.data()), static_cast<std::streamsize>(m.data.size() * sizeof(double)));
  if (!is) throw std::runtime_error("suite file: truncated matrix");
  return m;
}

void write_split(std::ostream& os, const Split& s) {
  write_matrix(os, s.x);
  write_matrix(os, s.y);
  write_matrix(os, s.signal);
}

Split read_split(std::istream& is) {
  Split s;
  s.x = read_matrix(is);
  s.y = read_matrix(is);
  s.signal = read_matrix(is);
  return s;
}

Split select_columns(const Split& in, std::span<const std::size_t> tasks) {
  Split out;
  out.x = in.x;
  out.y = Matrix(in.y.rows, tasks.size());
  out.signal = Matrix(in.signal.rows, tasks.size());
  for (std::size_t s = 0; s < in.y.rows; ++s) {
    for (std::size_t j = 0; j < tasks.size(); ++j) {
      out.y.at(s, j) = in.y.at(s, tasks[j]);
      out.signal.at(s, j) = in.signal.at(s, tasks[j]);
    }
  }
  return out;
}

}  // namespace

std::string to_string(TaskKind kind) {
  return kind == TaskKind::Regression ? "regression" : "binary_classification";
}

TaskKind task_kind_from_string(const std::string& text) {
  if (text == "regression") return TaskKind::Regression;
  if (text == "binary_classification" || text == "classification") return TaskKind::BinaryClassification;
  throw std::invalid_argument("unknown task kind '" + text + "'");
}

PlantedSpec PlantedSpec::default_spec() {
  PlantedSpec spec;
  spec.true_partition = Partition{{0, 0, 1, 1, 2, 2}};
  return spec;
}

void PlantedSpec::validate() const {
  if (n_tasks() == 0) throw std::invalid_argument("PlantedSpec: no tasks");
  if (input_dim == 0 || latent_dim == 0) throw std::invalid_argument("PlantedSpec: zero input or latent dimension");
  if (latent_dim * planted_groups() > input_dim) {
    throw SubspaceCapacityError("PlantedSpec: " + std::to_string(planted_groups()) + " groups of rank " +
                                std::to_string(latent_dim) + " do not fit in " + std::to_string(input_dim) +
                                " input dimensions");
  }
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw std::invalid_argument("PlantedSpec: noise_std < 0");
  if (!(weight_spread >= 0.0) || !std::isfinite(weight_spread)) {
    throw std::invalid_argument("PlantedSpec: weight_spread < 0");
  }
  if (!kinds.empty() && kinds.size() != n_tasks()) throw std::invalid_argument("PlantedSpec: one kind per task");
  if (samples.train == 0) throw std::invalid_argument("PlantedSpec: empty training split");
}

std::vector<double> Matrix::column(std::size_t c) const {
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) out[r] = at(r, c);
  return out;
}

std::vector<ad::ColumnLoss> TaskSuite::loss_kinds() const {
  std::vector<ad::ColumnLoss> out(n_tasks());
  for (std::size_t t = 0; t < n_tasks(); ++t) {
    out[t] = spec.kind(t) == TaskKind::Regression ? ad::ColumnLoss::SquaredError : ad::ColumnLoss::LogisticWithLogits;
  }
  return out;
}

TaskSuite generate(const PlantedSpec& spec) {
  spec.validate();
  TaskSuite suite;
  suite.spec = spec;
  suite.spec.true_partition = spec.true_partition.canonical();
  Rng rng(mix_seed(spec.seed, 0x5017e));

  const std::size_t d = spec.input_dim, r = spec.latent_dim, groups = spec.planted_groups();
  const Matrix all = orthonormal_columns(d, r * groups, rng);
  for (std::size_t g = 0; g < groups; ++g) {
    Matrix b(d, r);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < r; ++j) b.at(i, j) = all.at(i, g * r + j);
    }
    suite.bases.push_back(std::move(b));
  }

  // Task weights scattered around a per-group centre, scaled to unit signal variance.
  // Centres have unit-magnitude coordinates with random signs, so every group uses
  // all r latent directions rather than whichever one a Gaussian draw happens to favour.
  std::vector<std::vector<double>> centres(groups, std::vector<double>(r));
  for (auto& c : centres) {
    for (auto& v : c) v = rng.uniform() < 0.5 ? -1.0 : 1.0;
  }
  const double target_norm = 1.0 / std::sqrt(tanh_second_moment());
  suite.task_weights = Matrix(spec.n_tasks(), r);
  for (std::size_t t = 0; t < spec.n_tasks(); ++t) {
    const auto& c = centres[suite.spec.true_partition.assignment[t]];
    double norm = 0.0;
    for (std::size_t j = 0; j < r; ++j) {
      const double w = c[j] + spec.weight_spread * rng.normal();
      suite.task_weights.at(t, j) = w;
      norm += w * w;
    }
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < r; ++j) suite.task_weights.at(t, j) *= target_norm / norm;
  }

  suite.train = draw_split(suite, spec.samples.train, rng);
  suite.val = draw_split(suite, spec.samples.val, rng);
  suite.test = draw_split(suite, spec.samples.test, rng);
  return suite;
}

TaskSuite select_tasks(const TaskSuite& suite, std::span<const std::size_t> tasks) {
  TaskSuite out;
  out.spec = suite.spec;
  out.spec.true_partition.assignment.clear();
  out.spec.kinds.clear();
  for (std::size_t t : tasks) {
    if (t >= suite.n_tasks()) throw std::out_of_range("select_tasks: task index out of range");
    out.spec.true_partition.assignment.push_back(suite.spec.true_partition.assignment[t]);
    if (!suite.spec.kinds.empty()) out.spec.kinds.push_back(suite.spec.kinds[t]);
  }
  out.bases = suite.bases;
  out.task_weights = Matrix(tasks.size(), suite.task_weights.cols);
  for (std::size_t j = 0; j < tasks.size(); ++j) {
    for (std::size_t c = 0; c < suite.task_weights.cols; ++c) out.task_weights.at(j, c) = suite.task_weights.at(tasks[j], c);
  }
  out.train = select_columns(suite.train, tasks);
  out.val = select_columns(suite.val, tasks);
  out.test = select_columns(suite.test, tasks);
  return out;
}

Matrix noiseless_signals(const TaskSuite& suite, const Matrix& x) {
  const std::size_t n = x.rows, d = suite.spec.input_dim, r = suite.spec.latent_dim, tasks = suite.n_tasks();
  if (x.cols != d) throw ad::DimensionError("noiseless_signals: input has wrong width");
  // Latent tanh features per planted group.
  std::vector<Matrix> features;
  for (const Matrix& b : suite.bases) {
    Matrix f(n, r);
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t j = 0; j < r; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < d; ++i) acc += x.at(s, i) * b.at(i, j);
        f.at(s, j) = std::tanh(acc);
      }
    }
    features.push_back(std::move(f));
  }
  Matrix out(n, tasks);
  for (std::size_t t = 0; t < tasks; ++t) {
    const Matrix& f = features[suite.spec.true_partition.assignment[t]];
    for (std::size_t s = 0; s < n; ++s) {
      double acc = 0.0;
      for (std::size_t j = 0; j < r; ++j) acc += suite.task_weights.at(t, j) * f.at(s, j);
      out.at(s, t) = acc;
    }
  }
  return out;
}

double correlation(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw ad::DimensionError("correlation: length mismatch");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n_samples, std::size_t batch_size,
                                                    std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size == 0) throw std::invalid_argument("batch_indices: batch size must be >= 1");
  if (n_samples == 0) throw std::invalid_argument("batch_indices: empty dataset");
  std::vector<std::size_t> order(n_samples);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(seed, 0xba7c4, epoch));
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n_samples; start += batch_size) {
    const std::size_t end = std::min(n_samples, start + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

std::vector<Batch> split_loaders(const Split& split, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch) {
  const std::size_t d = split.x.cols, tasks = split.y.cols;
  std::vector<Batch> out;
  for (const auto& idx : batch_indices(split.size(), batch_size, seed, epoch)) {
    std::vector<double> x(idx.size() * d), y(idx.size() * tasks);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::memcpy(x.data() + r * d, split.x.data.data() + idx[r] * d, d * sizeof(double));
      std::memcpy(y.data() + r * tasks, split.y.data.data() + idx[r] * tasks, tasks * sizeof(double));
    }
    out.push_back({ad::Tensor::from(idx.size(), d, std::move(x)), ad::Tensor::from(idx.size(), tasks, std::move(y))});
  }
  return out;
}

Batch full_batch(const Split& split) {
  return {ad::Tensor::from(split.x.rows, split.x.cols, split.x.data),
          ad::Tensor::from(split.y.rows, split.y.cols, split.y.data)};
}

void save_suite(const TaskSuite& suite, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("save_suite: cannot open " + path.string());
  os.write(kSuiteMagic, sizeof kSuiteMagic);
  os.write(reinterpret_cast<const char*>(&kSuiteVersion), sizeof kSuiteVersion);
  const std::string header = planted_spec_to_json(suite.spec).dump();
  write_u64(os, header.size());
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  write_u64(os, suite.bases.size());
  for (const Matrix& b : suite.bases) write_matrix(os, b);
  write_matrix(os, suite.task_weights);
  write_split(os, suite.train);
  write_split(os, suite.val);
  write_split(os, suite.test);
  if (!os) throw std::runtime_error("save_suite: write failed for " + path.string());
}

TaskSuite load_suite(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_suite: cannot open " + path.string());
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kSuiteMagic, sizeof magic) != 0) throw std::runtime_error("load_suite: not a suite file");
  std::uint32_t version = 0;
  is.read(reinterpret_cast<char*>(&version), sizeof version);
  if (version != kSuiteVersion) throw std::runtime_error("load_suite: unsupported version " + std::to_string(version));
  const std::uint64_t header_len = read_u64(is);
  std::string header(header_len, '\0');
  is.read(header.data(), static_cast<std::streamsize>(header_len));
  TaskSuite suite;
  suite.spec = planted_spec_from_json(nlohmann::json::parse(header), "suite");
  const std::uint64_t n_bases = read_u64(is);
  for (std::uint64_t g = 0; g < n_bases; ++g) suite.bases.push_back(read_matrix(is));
  suite.task_weights = read_matrix(is);
  suite.train = read_split(is);
  suite.val = read_split(is);
  suite.test = read_split(is);
  return suite;
}

}  // namespace dmtg
