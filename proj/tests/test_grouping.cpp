#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "dmtg/baselines.hpp"
#include "dmtg/checkpoint.hpp"
#include "dmtg/grouping.hpp"
#include "dmtg/metrics.hpp"
#include "dmtg/runner.hpp"

using namespace dmtg;
using ad::Tape;
using ad::Tensor;

namespace {

TaskSuite small_suite(const std::string& planted, std::uint64_t seed, std::size_t train = 400) {
  PlantedSpec spec = PlantedSpec::default_spec();
  spec.true_partition = Partition::parse(planted);
  spec.samples = {train, 200, 200};
  spec.seed = seed;
  return generate(spec);
}

std::vector<double> values(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST_CASE("gumbel noise") {
  CHECK(gumbel_from_uniform(std::exp(-1.0)) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(gumbel_from_uniform(std::exp(-std::exp(1.0))) == doctest::Approx(-1.0).epsilon(1e-14));
  CHECK_THROWS_AS(gumbel_from_uniform(0.0), ad::DomainError);
  CHECK_THROWS_AS(gumbel_from_uniform(1.0), ad::DomainError);

  Rng rng(12);
  const Tensor g = sample_gumbel(1000, 1000, rng);
  const double mean = std::accumulate(g.values().begin(), g.values().end(), 0.0) / 1e6;
  CHECK(std::abs(mean - 0.5772156649) < 0.01);

  Rng a(3), b(3);
  CHECK(values(sample_gumbel(4, 3, a)) == values(sample_gumbel(4, 3, b)));
}

TEST_CASE("gumbel softmax") {
  Tape t;
  const Tensor s = AssignmentMatrix::uniform(3, 4).s;
  for (double tau : {0.1, 1.0, 7.0}) {
    const Tensor z = gumbel_softmax(t, s, Tensor::zeros(3, 4), tau);
    for (double v : z.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
  }
  const double e = std::exp(1.0);
  const Tensor z1 = gumbel_softmax(t, Tensor::from(1, 2, {1, 0}), Tensor::zeros(1, 2), 1.0);
  CHECK(z1.at(0, 0) == doctest::Approx(e / (e + 1)).epsilon(1e-14));
  CHECK(z1.at(0, 1) == doctest::Approx(1 / (e + 1)).epsilon(1e-14));
  const Tensor z2 = gumbel_softmax(t, Tensor::from(1, 2, {1, 0}), Tensor::zeros(1, 2), 0.01);
  CHECK(z2.at(0, 0) == 1.0);
  CHECK_THROWS_AS(gumbel_softmax(t, s, Tensor::zeros(3, 4), 0.0), ad::DomainError);
  CHECK_THROWS_AS(gumbel_softmax(t, s, Tensor::zeros(3, 4), -1.0), ad::DomainError);
}

TEST_CASE("relaxation invariants") {
  Rng rng(21);
  Tape t;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(5), k = 1 + rng.below(5);
    std::vector<double> sv(n * k);
    for (auto& v : sv) v = 6.0 * rng.normal();
    const Tensor s = Tensor::from(n, k, sv);
    const Tensor g = sample_gumbel(n, k, rng);
    const double tau = std::exp(-3.0 + 5.0 * rng.uniform());
    const Tensor z = gumbel_softmax(t, s, g, tau);
    // Shifting a row by a constant: use a power of two so the shift is exact.
    std::vector<double> shifted = sv;
    for (std::size_t c = 0; c < k; ++c) shifted[c] += 8.0;
    const Tensor zs = gumbel_softmax(t, Tensor::from(n, k, shifted), g, tau);
    for (std::size_t i = 0; i < n; ++i) {
      double sum = 0;
      for (std::size_t c = 0; c < k; ++c) sum += z.at(i, c);
      CHECK(std::abs(sum - 1.0) < 1e-9);
    }
    for (std::size_t c = 0; c < k; ++c) CHECK(zs.at(0, c) == doctest::Approx(z.at(0, c)).epsilon(1e-12));
    t.clear();
  }
  // One-hot limit is approached monotonically.
  const Tensor s = Tensor::from(1, 3, {0.4, 1.5, -0.2});
  double prev = 0;
  for (double tau : {4.0, 1.0, 0.1, 0.01}) {
    const double top = gumbel_softmax(t, s, Tensor::zeros(1, 3), tau).at(0, 1);
    CHECK(top > prev);
    prev = top;
  }
  CHECK(prev > 0.999);
}

TEST_CASE("masked loss") {
  Tape t;
  const Tensor l = Tensor::from(2, 2, {1, 2, 3, 4});
  CHECK(masked_loss(t, l, Tensor::from(2, 2, {1, 0, 0, 1})).item() == 5.0);
  CHECK(masked_loss(t, l, Tensor::filled(2, 2, 0.5)).item() == doctest::Approx(1.5 + 3.5));
  CHECK_THROWS_AS(masked_loss(t, l, Tensor::zeros(2, 3)), ad::DimensionError);

  // Gradient with respect to S on a 2 x 2 toy.
  Tensor s = Tensor::from(2, 2, {0.3, -0.2, 0.1, 0.7}, true);
  const Tensor g = Tensor::from(2, 2, {0.5, -0.4, 1.1, 0.2});
  auto f = [&](Tape& tp) { return masked_loss(tp, l, gumbel_softmax(tp, s, g, 0.8)); };
  t.backward(f(t));
  const std::vector<double> analytic(s.grad().begin(), s.grad().end());
  const auto numeric = ad::numeric_gradient(s, [&] {
    Tape tp;
    const double v = f(tp).item();
    tp.clear();
    return v;
  });
  for (std::size_t i = 0; i < 4; ++i) CHECK(ad::relative_error(analytic[i], numeric[i]) < 1e-4);
}

TEST_CASE("end-to-end gradient of the masked loss") {
  const TaskSuite suite = small_suite("0|0|1", 2, 32);
  GroupModel model(suite.input_dim(), suite.loss_kinds(), 2, {.depth = 2, .width = 4, .shared_layers = 1}, 5);
  AssignmentMatrix a{Tensor::from(3, 2, {0.2, 0.9, -0.3, 0.4, 0.0, 0.1}, true)};
  Rng rng(8);
  const Tensor g = sample_gumbel(3, 2, rng);
  const Batch batch = full_batch(suite.train);
  auto objective = [&] {
    Tape tp;
    const double v = masked_loss(tp, model.forward_loss_matrix(tp, batch), gumbel_softmax(tp, a.s, g, 1.3)).item();
    tp.clear();
    return v;
  };
  Tape t;
  t.backward(masked_loss(t, model.forward_loss_matrix(t, batch), gumbel_softmax(t, a.s, g, 1.3)));

  double worst = 0;
  std::size_t checked = 0;
  const auto sg = std::vector<double>(a.s.grad().begin(), a.s.grad().end());
  const auto sn = ad::numeric_gradient(a.s, objective);
  for (std::size_t i = 0; i < sg.size(); ++i, ++checked) worst = std::max(worst, ad::relative_error(sg[i], sn[i], 1e-6));
  for (Tensor p : model.parameters()) {
    const auto pg = std::vector<double>(p.grad().begin(), p.grad().end());
    const auto pn = ad::numeric_gradient(p, objective);
    for (std::size_t i = 0; i < pg.size(); ++i, ++checked) worst = std::max(worst, ad::relative_error(pg[i], pn[i], 1e-6));
  }
  CHECK(checked >= 56);
  CHECK(worst < 1e-4);
}

TEST_CASE("loss matrix") {
  const TaskSuite suite = small_suite("0|0|1", 3, 16);
  const Batch batch = full_batch(suite.train);
  Tape t;

  GroupModel one(suite.input_dim(), suite.loss_kinds(), 1, {}, 1);
  const Tensor l1 = one.forward_loss_matrix(t, batch);
  CHECK(l1.rows() == 3);
  CHECK(l1.cols() == 1);

  const GroupModel twin = GroupModel::cloned(one, 2);
  const Tensor l2 = twin.forward_loss_matrix(t, batch);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(l2.at(i, 0) - l2.at(i, 1)) < 1e-12);

  // Entry (i, k) depends only on branch k: perturbing branch 1 leaves column 0 alone.
  GroupModel three(suite.input_dim(), suite.loss_kinds(), 3, {}, 2);
  const Tensor before = three.forward_loss_matrix(t, batch);
  Tensor w = three.branches()[1][0].w;
  w.mutable_values()[0] += 0.5;
  const Tensor after = three.forward_loss_matrix(t, batch);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(after.at(i, 0) == before.at(i, 0));
    CHECK(after.at(i, 2) == before.at(i, 2));
    CHECK(after.at(i, 1) != before.at(i, 1));
  }
  t.clear();
}

TEST_CASE("loss matrix equals a hand-computed squared error") {
  // One task, one branch of a single tanh layer (width 2) on 3 samples of a 2-d input.
  GroupModel m(2, {ad::ColumnLoss::SquaredError}, 1, {.depth = 1, .width = 2, .shared_layers = 0}, 4);
  const Dense& layer = m.branches()[0][0];
  const Dense& head = m.heads()[0];
  const double x[3][2] = {{0.5, -1.0}, {1.5, 0.25}, {-0.75, 2.0}};
  const double y[3] = {0.3, -0.8, 1.1};
  double expect = 0;
  for (int r = 0; r < 3; ++r) {
    double out = head.b.at(0, 0);
    for (int h = 0; h < 2; ++h) {
      const double pre = layer.b.at(0, h) + x[r][0] * layer.w.at(0, h) + x[r][1] * layer.w.at(1, h);
      out += std::tanh(pre) * head.w.at(h, 0);
    }
    expect += (out - y[r]) * (out - y[r]) / 3.0;
  }
  const Batch b{Tensor::from(3, 2, {0.5, -1.0, 1.5, 0.25, -0.75, 2.0}), Tensor::from(3, 1, {0.3, -0.8, 1.1})};
  Tape t;
  CHECK(m.forward_loss_matrix(t, b).item() == doctest::Approx(expect).epsilon(1e-14));
  t.clear();
}

TEST_CASE("partition readout") {
  const auto read = [](std::size_t n, std::size_t k, std::vector<double> v) {
    return extract_partition(AssignmentMatrix{Tensor::from(n, k, std::move(v))}).assignment;
  };
  CHECK(read(2, 2, {0.9, 0.1, 0.2, 0.8}) == std::vector<std::size_t>{0, 1});
  CHECK(read(1, 2, {0.5, 0.5}) == std::vector<std::size_t>{0});
  CHECK(read(3, 3, {0, 2, 1, -1, 5, 0, 0.1, 0.2, 0.1}) == std::vector<std::size_t>{1, 1, 1});
  CHECK(extract_partition(AssignmentMatrix::uniform(4, 3)).assignment == std::vector<std::size_t>{0, 0, 0, 0});

  // Pruning: with a one-hot mask the masked loss is the sum of the N selected entries.
  Rng rng(30);
  Tape t;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> sv(12), lv(12);
    for (auto& v : sv) v = rng.normal();
    for (auto& v : lv) v = rng.uniform();
    const AssignmentMatrix a{Tensor::from(4, 3, sv)};
    const Partition p = extract_partition(a);
    p.validate(3);
    double expect = 0;
    for (std::size_t i = 0; i < 4; ++i) expect += lv[i * 3 + p.assignment[i]];
    CHECK(masked_loss(t, Tensor::from(4, 3, lv), one_hot(p, 3)).item() == doctest::Approx(expect).epsilon(1e-15));
    t.clear();
  }
}

TEST_CASE("temperature schedules") {
  const TemperatureSchedule a = TemperatureSchedule::anneal(100, 4, 0.5, 1);
  const std::vector<double> expect = {100, 50, 25, 12.5, 6.25, 4, 4, 4};
  for (std::size_t e = 0; e < expect.size(); ++e) CHECK(a.at(e) == expect[e]);
  const TemperatureSchedule slow = TemperatureSchedule::anneal(8, 1, 0.5, 3);
  CHECK(slow.at(2) == 8.0);
  CHECK(slow.at(3) == 4.0);
  CHECK(TemperatureSchedule::fixed(2.5).at(99) == 2.5);
  CHECK_THROWS(TemperatureSchedule::fixed(0.0).validate());
  CHECK_THROWS(TemperatureSchedule::anneal(4, 100, 0.5, 1).validate());
  CHECK_THROWS(TemperatureSchedule::anneal(100, 4, 1.5, 1).validate());
}

TEST_CASE("complexity counts") {
  CHECK(count_complexity(16, {.depth = 1, .width = 8, .shared_layers = 0}, 1, 1).encoder_flops_per_sample == 128);
  const Architecture arch{.depth = 2, .width = 8, .shared_layers = 1};
  const Complexity c4 = count_complexity(16, arch, 4, 2), c8 = count_complexity(16, arch, 8, 2);
  CHECK(c4.encoder_flops_per_sample == c8.encoder_flops_per_sample);
  CHECK(c8.head_flops_per_sample == 2 * c4.head_flops_per_sample);
  CHECK(count_complexity(16, arch, 4, 2).head_flops_per_sample == 2 * count_complexity(16, arch, 4, 1).head_flops_per_sample);
  // Trunk 16x8, two branches 8x8, heads 2 x (8 x 4).
  CHECK(c4.encoder_flops_per_sample == 16 * 8 + 2 * 8 * 8);
  CHECK(c4.head_flops_per_sample == 2 * 8 * 4);

  const TaskSuite suite = small_suite("0|0|1|1", 1, 16);
  const GroupModel m(suite.input_dim(), suite.loss_kinds(), 2, arch, 3);
  const Complexity cm = count_complexity(m);
  CHECK(cm == c4);
  CHECK(cm.encoder_params + cm.head_params == m.parameter_count());
}

TEST_CASE("training is deterministic and checkpoints resume bit-exactly") {
  const TaskSuite suite = small_suite("0|0|1|1", 4);
  TrainingSetup setup;
  setup.seed = 9;
  setup.train.epochs = 6;
  const auto fresh = [&] {
    return GroupModel::cloned(GroupModel(suite.input_dim(), suite.loss_kinds(), 1, setup.arch, 17), 2);
  };
  const TrainConfig cfg = setup.main_config();
  const TrainState full = train_one_shot(fresh(), suite, cfg);
  CHECK(bit_identical(full, train_one_shot(fresh(), suite, cfg)));
  CHECK(full.history.epochs.size() == 6);

  TrainConfig half = cfg;
  half.epochs = 3;
  TrainState part = train_one_shot(fresh(), suite, half);
  const auto path = std::filesystem::temp_directory_path() / "dmtg_test_ckpt.bin";
  save_checkpoint(part, path);
  TrainState resumed = load_checkpoint(path);
  CHECK(bit_identical(part, resumed));
  train(resumed, suite, cfg);
  CHECK(bit_identical(full, resumed));
  std::filesystem::remove(path);
}

TEST_CASE("divergence is reported with a diagnostic") {
  const TaskSuite suite = small_suite("0|0|1|1", 4, 64);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.adam.lr = 1e306;
  GroupModel model(suite.input_dim(), suite.loss_kinds(), 2, {}, 1);
  try {
    train_one_shot(std::move(model), suite, cfg);
    FAIL("expected divergence");
  } catch (const TrainingDiverged& e) {
    CHECK(e.tau == cfg.temperature.at(e.epoch));
    CHECK(std::string(e.what()).find("epoch") != std::string::npos);
  }
}

TEST_CASE("two tasks from one planted group end up together") {
  // Nine in ten, measured over twenty seeds.
  std::size_t together = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const TaskSuite suite = small_suite("0|0", seed, 2000);
    TrainingSetup setup;
    setup.seed = seed;
    const DmtgResult r = run_dmtg(suite, 2, setup);
    together += r.partition.assignment[0] == r.partition.assignment[1];
  }
  CHECK(together >= 18);
}

TEST_CASE("four tasks in two planted groups are recovered") {
  std::size_t exact = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const TaskSuite suite = small_suite("0|0|1|1", seed, 2000);
    TrainingSetup setup;
    setup.seed = seed;
    exact += partition_recovery(run_dmtg(suite, 2, setup).partition, suite.spec.true_partition).exact_match;
  }
  CHECK(exact >= 8);
}

TEST_CASE("naive-MTL pretraining precedes the one-shot phase") {
  const TaskSuite suite = small_suite("0|0|1|1", 3);
  TrainingSetup setup;
  setup.seed = 3;
  setup.train.epochs = 4;
  setup.pretrain_epochs = 3;
  const DmtgResult a = run_dmtg(suite, 2, setup);
  REQUIRE(a.pretrain_history.epochs.size() == 3);
  for (const EpochRecord& e : a.pretrain_history.epochs) {
    CHECK(e.partition == Partition::all_in_one(4));
    CHECK(std::isfinite(e.val_total));
  }
  CHECK(a.state.history.epochs.size() == 4);
  CHECK(run_dmtg(suite, 2, setup).state.history == a.state.history);
  setup.pretrain_epochs = 0;
  const DmtgResult b = run_dmtg(suite, 2, setup);
  CHECK(b.pretrain_history.epochs.empty());
  CHECK_FALSE(b.state.history == a.state.history);
}
