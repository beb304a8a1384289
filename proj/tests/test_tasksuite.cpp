#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "dmtg/tasksuite.hpp"

using namespace dmtg;

namespace {

double dot_columns(const Matrix& a, std::size_t i, const Matrix& b, std::size_t j) {
  double s = 0;
  for (std::size_t r = 0; r < a.rows; ++r) s += a.at(r, i) * b.at(r, j);
  return s;
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("same-group signals share the projection") {
  PlantedSpec spec;
  spec.true_partition = Partition::parse("0|0");
  spec.noise_std = 0.0;
  spec.samples = {1000, 10, 10};
  spec.seed = 4;
  const TaskSuite s = generate(spec);
  CHECK(correlation(s.train.signal.column(0), s.train.signal.column(1)) > 0.0);
  // With no noise the target is the signal itself.
  CHECK(correlation(s.train.y.column(0), s.train.y.column(0)) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s.train.y == s.train.signal);
}

TEST_CASE("cross-group signals are uncorrelated") {
  PlantedSpec spec;
  spec.true_partition = Partition::parse("0|1");
  spec.input_dim = 8;
  spec.latent_dim = 2;
  spec.noise_std = 0.0;
  spec.samples = {5000, 10, 10};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    spec.seed = seed;
    const TaskSuite s = generate(spec);
    CHECK(std::abs(correlation(s.train.signal.column(0), s.train.signal.column(1))) < 0.1);
  }
}

TEST_CASE("bases are orthonormal and mutually orthogonal") {
  PlantedSpec spec = PlantedSpec::default_spec();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    spec.seed = seed;
    const TaskSuite s = generate(spec);
    REQUIRE(s.bases.size() == 3);
    double worst = 0;
    for (std::size_t g = 0; g < 3; ++g) {
      for (std::size_t h = 0; h < 3; ++h) {
        for (std::size_t i = 0; i < 3; ++i) {
          for (std::size_t j = 0; j < 3; ++j) {
            const double expect = (g == h && i == j) ? 1.0 : 0.0;
            worst = std::max(worst, std::abs(dot_columns(s.bases[g], i, s.bases[h], j) - expect));
          }
        }
      }
    }
    CHECK(worst < 1e-10);
  }
}

TEST_CASE("planted signal separation on the default suite") {
  PlantedSpec spec = PlantedSpec::default_spec();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    spec.seed = seed;
    const TaskSuite s = generate(spec);
    double within = 0, cross = 0;
    int nw = 0, nc = 0;
    for (std::size_t i = 0; i < 6; ++i) {
      for (std::size_t j = i + 1; j < 6; ++j) {
        const double c = std::abs(correlation(s.train.signal.column(i), s.train.signal.column(j)));
        if (spec.true_partition.assignment[i] == spec.true_partition.assignment[j]) {
          within += c;
          ++nw;
        } else {
          cross += c;
          ++nc;
        }
      }
    }
    CHECK(within / nw - cross / nc >= 0.2);
  }
}

TEST_CASE("signals match their definition") {
  PlantedSpec spec = PlantedSpec::default_spec();
  spec.seed = 11;
  const TaskSuite s = generate(spec);
  CHECK(noiseless_signals(s, s.val.x) == s.val.signal);
  // f_i(x) = w_i . tanh(B_g^T x), recomputed by hand for one sample.
  const std::size_t row = 7, task = 3, g = spec.true_partition.assignment[task];
  double f = 0;
  for (std::size_t j = 0; j < spec.latent_dim; ++j) {
    double proj = 0;
    for (std::size_t c = 0; c < spec.input_dim; ++c) proj += s.bases[g].at(c, j) * s.val.x.at(row, c);
    f += s.task_weights.at(task, j) * std::tanh(proj);
  }
  CHECK(s.val.signal.at(row, task) == doctest::Approx(f).epsilon(1e-12));
}

TEST_CASE("classification targets are balanced binary labels") {
  PlantedSpec spec = PlantedSpec::default_spec();
  spec.kinds.assign(6, TaskKind::BinaryClassification);
  const TaskSuite s = generate(spec);
  for (std::size_t i = 0; i < 6; ++i) {
    const auto col = s.train.y.column(i);
    const auto ones = std::count(col.begin(), col.end(), 1.0);
    const auto zeros = std::count(col.begin(), col.end(), 0.0);
    CHECK(ones + zeros == static_cast<long>(col.size()));
    CHECK(std::abs(static_cast<double>(ones) - 1000.0) <= 1.0);
  }
}

TEST_CASE("regeneration is byte-identical and seeds differ") {
  PlantedSpec spec = PlantedSpec::default_spec();
  spec.seed = 5;
  const TaskSuite a = generate(spec), b = generate(spec);
  CHECK(a.train == b.train);
  CHECK(a.test == b.test);
  CHECK(a.bases == b.bases);
  spec.seed = 6;
  CHECK_FALSE(generate(spec).train == a.train);
}

TEST_CASE("subspace capacity is enforced") {
  PlantedSpec spec = PlantedSpec::default_spec();
  spec.latent_dim = 6;
  CHECK_THROWS_AS(generate(spec), SubspaceCapacityError);
  spec.latent_dim = 5;  // 15 of 16 dimensions
  CHECK_NOTHROW(generate(spec));
}

TEST_CASE("batching") {
  const auto b = batch_indices(10, 4, 1, 0);
  REQUIRE(b.size() == 3);
  CHECK(b[0].size() == 4);
  CHECK(b[1].size() == 4);
  CHECK(b[2].size() == 2);
  CHECK(batch_indices(10, 4, 1, 0) == b);
  CHECK_FALSE(batch_indices(10, 4, 1, 1) == b);
  std::set<std::size_t> seen;
  std::size_t total = 0;
  for (const auto& batch : b) {
    seen.insert(batch.begin(), batch.end());
    total += batch.size();
  }
  CHECK(total == 10);
  CHECK(seen.size() == 10);
  CHECK(*seen.rbegin() == 9);
  CHECK_THROWS(batch_indices(0, 4, 1, 0));
  CHECK_THROWS(batch_indices(10, 0, 1, 0));

  PlantedSpec spec = PlantedSpec::default_spec();
  spec.samples = {10, 5, 5};
  const TaskSuite s = generate(spec);
  const auto loaders = split_loaders(s.train, 4, 3, 2);
  REQUIRE(loaders.size() == 3);
  CHECK(loaders[2].x.rows() == 2);
  CHECK(loaders[0].y.cols() == 6);
}

TEST_CASE("task selection keeps the listed tasks") {
  const TaskSuite s = generate(PlantedSpec::default_spec());
  const std::vector<std::size_t> keep = {4, 1};
  const TaskSuite t = select_tasks(s, keep);
  CHECK(t.n_tasks() == 2);
  CHECK(t.train.y.column(0) == s.train.y.column(4));
  CHECK(t.train.y.column(1) == s.train.y.column(1));
  CHECK(t.train.x == s.train.x);
  CHECK(t.spec.true_partition.assignment[0] != t.spec.true_partition.assignment[1]);
}

TEST_CASE("suite files round-trip") {
  PlantedSpec spec = PlantedSpec::default_spec();
  spec.kinds = {TaskKind::Regression, TaskKind::BinaryClassification, TaskKind::Regression,
                TaskKind::Regression, TaskKind::BinaryClassification, TaskKind::Regression};
  const TaskSuite s = generate(spec);
  const auto dir = std::filesystem::temp_directory_path() / "dmtg_test_suite";
  std::filesystem::create_directories(dir);
  save_suite(s, dir / "a.bin");
  const TaskSuite r = load_suite(dir / "a.bin");
  CHECK(r.train == s.train);
  CHECK(r.val == s.val);
  CHECK(r.test == s.test);
  CHECK(r.bases == s.bases);
  CHECK(r.task_weights == s.task_weights);
  CHECK(r.spec.true_partition == s.spec.true_partition);
  CHECK(r.spec.kinds == s.spec.kinds);
  save_suite(r, dir / "b.bin");
  CHECK(file_bytes(dir / "a.bin") == file_bytes(dir / "b.bin"));
  std::ofstream(dir / "junk.bin") << "not a suite";
  CHECK_THROWS(load_suite(dir / "junk.bin"));
  std::filesystem::remove_all(dir);
}
