// dmtg_acceptance: one PASS/FAIL line per acceptance criterion.
//
//   dmtg_acceptance            all criteria
//   dmtg_acceptance 4 6        selected criteria
//
// Exit status is 0 only when every selected criterion passes.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dmtg/baselines.hpp"
#include "dmtg/checkpoint.hpp"
#include "dmtg/config.hpp"
#include "dmtg/grouping.hpp"
#include "dmtg/metrics.hpp"
#include "dmtg/runner.hpp"

using namespace dmtg;
using ad::Tape;
using ad::Tensor;

namespace {

// Tolerances and thresholds.
constexpr double kGoldenTol = 0.05;       // percentage points
constexpr double kGradTol = 1e-4;         // relative error
constexpr double kGradFloor = 1e-6;       // relative-error denominator floor
constexpr std::size_t kMinThetaEntries = 50;
constexpr std::size_t kRelaxTriples = 10000;
constexpr double kSimplexTol = 1e-9;
constexpr double kOneHotMin = 0.999;
constexpr std::size_t kSeeds = 10;
constexpr std::size_t kMinExact = 8;
constexpr double kMinRand = 0.9;
constexpr double kOracleRelTol = 0.05;
constexpr std::size_t kMinOracleClose = 8;
constexpr double kScaleRatio = 2.0;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.methods = {"dmtg"};
  c.seeds.resize(kSeeds);
  std::iota(c.seeds.begin(), c.seeds.end(), std::uint64_t{0});
  return c;
}

// ---------------------------------------------------------------- 1

Outcome golden_metrics() {
  // Taskonomy K=3 per-task losses: depth, normal, segmentation, keypoint, edge.
  const std::vector<double> naive = {8.67e-3, 1.07e-1, 8.28e-2, 1.19e-2, 1.31e-2};
  const std::vector<double> ours = {1.19e-7, 1.07e-1, 6.65e-2, 4.30e-5, 3.58e-7};
  const std::vector<double> hoa = {5.85e-3, 1.11e-1, 7.33e-2, 2.00e-6, 8.60e-5};
  const std::vector<double> tag = {5.15e-3, 1.21e-1, 8.43e-2, 2.00e-6, 8.60e-5};
  const std::vector<double> mtg = {2.04e-4, 1.07e-1, 8.28e-2, 6.39e-4, 4.08e-4};
  // The per-task gain columns printed next to those losses.
  const std::vector<double> ours_gain = {100.00, -0.05, 19.64, 99.63, 100.00};
  const std::vector<double> hoa_gain = {32.47, -4.37, 11.49, 99.98, 99.34};

  const double g_ours = norm_gain_loss(ours, naive).mean_pct;
  const double g_tag = norm_gain_loss(tag, naive).mean_pct;
  const double g_mtg = norm_gain_loss(mtg, naive).mean_pct;
  const double g_hoa_losses = norm_gain_loss(hoa, naive).mean_pct;
  const double c_ours = mean_of(ours_gain), c_hoa = mean_of(hoa_gain);
  const double celeb = norm_gain_error(std::vector<double>{7.60}, std::vector<double>{6.74}).mean_pct;

  const bool ok = std::abs(g_ours - 63.85) <= kGoldenTol && std::abs(g_tag - 45.02) <= kGoldenTol &&
                  std::abs(g_mtg - 57.83) <= kGoldenTol && std::abs(c_ours - 63.85) <= kGoldenTol &&
                  std::abs(c_hoa - 47.78) <= kGoldenTol && std::abs(celeb - (-12.78)) <= kGoldenTol;
  return {ok, fmt("from losses: ours %.3f tag %.3f mtg-net %.3f; from gain columns: ours %.3f hoa %.3f; "
                  "celeba %.3f; (hoa from rounded losses %.3f, informational)",
                  g_ours, g_tag, g_mtg, c_ours, c_hoa, celeb, g_hoa_losses)};
}

// ---------------------------------------------------------------- 2

Outcome gradient_check() {
  PlantedSpec spec = PlantedSpec::default_spec();
  spec.true_partition = Partition::parse("0|0|1");
  spec.samples = {48, 8, 8};
  spec.seed = 13;
  const TaskSuite suite = generate(spec);
  GroupModel model(suite.input_dim(), suite.loss_kinds(), 2, {.depth = 2, .width = 4, .shared_layers = 1}, 21);
  AssignmentMatrix a{Tensor::from(3, 2, {0.5, 0.5, 0.9, -0.2, 0.1, 0.6}, true)};
  Rng rng(77);
  const Tensor g = sample_gumbel(3, 2, rng);
  const Batch batch = full_batch(suite.train);
  const double tau = 1.5;
  auto objective = [&] {
    Tape t;
    const double v = masked_loss(t, model.forward_loss_matrix(t, batch), gumbel_softmax(t, a.s, g, tau)).item();
    t.clear();
    return v;
  };
  Tape tape;
  tape.backward(masked_loss(tape, model.forward_loss_matrix(tape, batch), gumbel_softmax(tape, a.s, g, tau)));

  double worst = 0.0;
  std::size_t s_checked = 0, theta_checked = 0;
  const std::vector<double> s_grad(a.s.grad().begin(), a.s.grad().end());
  const auto s_num = ad::numeric_gradient(a.s, objective);
  for (std::size_t i = 0; i < s_grad.size(); ++i, ++s_checked) {
    worst = std::max(worst, ad::relative_error(s_grad[i], s_num[i], kGradFloor));
  }
  // Every other weight of every tensor.
  for (Tensor p : model.parameters()) {
    const std::vector<double> grad(p.grad().begin(), p.grad().end());
    for (std::size_t i = 0; i < grad.size(); i += 2) {
      auto v = p.mutable_values();
      const double x0 = v[i], h = 1e-5;
      v[i] = x0 + h;
      const double up = objective();
      v[i] = x0 - h;
      const double down = objective();
      v[i] = x0;
      worst = std::max(worst, ad::relative_error(grad[i], (up - down) / (2 * h), kGradFloor));
      ++theta_checked;
    }
  }
  const bool ok = s_checked == 6 && theta_checked >= kMinThetaEntries && worst < kGradTol;
  return {ok, fmt("%zu S entries and %zu weights, max relative error %.2e", s_checked, theta_checked, worst)};
}

// ---------------------------------------------------------------- 3

double dyadic(double x) { return std::ldexp(std::round(std::ldexp(x, 20)), -20); }

Outcome relaxation_invariants() {
  Rng rng(2024);
  Tape t;
  double worst_sum = 0.0, worst_shift = 0.0;
  std::size_t exact_shift_failures = 0, onehot_rows = 0, onehot_failures = 0;
  for (std::size_t trial = 0; trial < kRelaxTriples; ++trial) {
    const std::size_t n = 1 + rng.below(6), k = 2 + rng.below(5);
    std::vector<double> s(n * k), g(n * k);
    for (auto& v : s) v = 5.0 * rng.normal();
    for (auto& v : g) v = gumbel_from_uniform(rng.uniform());
    const double tau = std::exp(std::log(0.01) + (std::log(10.0) - std::log(0.01)) * rng.uniform());
    const double shift = 20.0 * rng.normal();

    const Tensor z = gumbel_softmax(t, Tensor::from(n, k, s), Tensor::from(n, k, g), tau);
    std::vector<double> s_shift = s;
    const std::size_t row = rng.below(n);
    for (std::size_t c = 0; c < k; ++c) s_shift[row * k + c] += shift;
    const Tensor zs = gumbel_softmax(t, Tensor::from(n, k, s_shift), Tensor::from(n, k, g), tau);
    for (std::size_t i = 0; i < n; ++i) {
      double sum = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        sum += z.at(i, c);
        worst_shift = std::max(worst_shift, std::abs(z.at(i, c) - zs.at(i, c)));
      }
      worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
    }

    // Exactness: with dyadic scores, noise, shift and temperature every
    // intermediate sum is representable, so the shifted row must match bit for bit.
    std::vector<double> sd(n * k), gd(n * k);
    for (std::size_t i = 0; i < n * k; ++i) {
      sd[i] = dyadic(s[i]);
      gd[i] = dyadic(g[i]);
    }
    const double tau_d = std::ldexp(1.0, static_cast<int>(std::round(std::log2(tau))));
    const double shift_d = std::round(shift);
    std::vector<double> sd_shift = sd;
    for (std::size_t c = 0; c < k; ++c) sd_shift[row * k + c] += shift_d;
    const Tensor zd = gumbel_softmax(t, Tensor::from(n, k, sd), Tensor::from(n, k, gd), tau_d);
    const Tensor zds = gumbel_softmax(t, Tensor::from(n, k, sd_shift), Tensor::from(n, k, gd), tau_d);
    for (std::size_t c = 0; c < k; ++c) exact_shift_failures += zd.at(row, c) != zds.at(row, c);

    // One-hot limit for rows whose top-two logit gap is at least 1.
    const Tensor cold = gumbel_softmax(t, Tensor::from(n, k, s), Tensor::from(n, k, g), 0.01);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> logits(k);
      for (std::size_t c = 0; c < k; ++c) logits[c] = s[i * k + c] + g[i * k + c];
      std::sort(logits.begin(), logits.end(), std::greater<>());
      if (logits[0] - logits[1] < 1.0) continue;
      ++onehot_rows;
      double top = 0.0;
      for (std::size_t c = 0; c < k; ++c) top = std::max(top, cold.at(i, c));
      onehot_failures += !(top > kOneHotMin);
    }
    t.clear();
  }
  const bool ok = worst_sum <= kSimplexTol && exact_shift_failures == 0 && onehot_failures == 0 && onehot_rows > 0;
  return {ok, fmt("%zu triples: max |row sum - 1| %.1e, shifted rows differ by %.1e (dyadic inputs: %zu mismatches), "
                  "%zu/%zu gapped rows one-hot at tau 0.01",
                  kRelaxTriples, worst_sum, worst_shift, exact_shift_failures, onehot_rows - onehot_failures,
                  onehot_rows)};
}

// ---------------------------------------------------------------- 4 and 6

struct SeedRun {
  TaskSuite suite;
  DmtgResult dmtg;
  std::vector<double> naive;
};

std::vector<SeedRun>& default_runs(double* seconds) {
  static std::vector<SeedRun> runs;
  static double elapsed = 0.0;
  if (runs.empty()) {
    const ExperimentConfig c = default_config();
    const auto t0 = Clock::now();
    for (std::uint64_t seed : c.seeds) {
      TaskSuite suite = generate(c.suite_for(seed));
      const TrainingSetup setup = c.setup_for(seed);
      DmtgResult d = run_dmtg(suite, c.k_groups, setup);
      std::vector<double> naive = train_naive_mtl(suite, setup).score.per_task_val_loss;
      runs.push_back({std::move(suite), std::move(d), std::move(naive)});
    }
    elapsed = seconds_since(t0);
  }
  if (seconds) *seconds = elapsed;
  return runs;
}

Outcome planted_recovery() {
  double secs = 0.0;
  const auto& runs = default_runs(&secs);
  std::size_t exact = 0;
  double rand = 0.0;
  std::string parts;
  for (const SeedRun& r : runs) {
    const Recovery rec = partition_recovery(r.dmtg.partition, r.suite.spec.true_partition);
    exact += rec.exact_match;
    rand += rec.rand_index;
    parts += (parts.empty() ? "" : " ") + r.dmtg.partition.canonical().to_string();
  }
  rand /= static_cast<double>(runs.size());
  const bool ok = exact >= kMinExact && rand >= kMinRand && secs <= 600.0;
  return {ok, fmt("exact %zu/%zu, mean rand %.3f, %.1f s (with naive MTL); partitions %s", exact, runs.size(), rand,
                  secs, parts.c_str())};
}

Outcome one_shot_vs_two_shot() {
  const ExperimentConfig c = default_config();
  const auto& runs = default_runs(nullptr);
  std::size_t wins = 0;
  std::string gains;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const SeedRun& r = runs[i];
    const TrainingSetup setup = c.setup_for(c.seeds[i]);
    const double one = norm_gain_loss(r.dmtg.val_losses, r.naive).mean_pct;
    const FixedResult re = train_fixed_partition(r.dmtg.partition, r.suite, setup, FixedInit::Scratch);
    const double two = norm_gain_loss(re.score.per_task_val_loss, r.naive).mean_pct;
    wins += one >= two;
    gains += fmt("%s%.1f/%.1f", gains.empty() ? "" : " ", one, two);
  }
  const bool ok = 2 * wins > runs.size();
  return {ok, fmt("one-shot >= retrain in %zu/%zu seeds (one/two NormGain %%: %s)", wins, runs.size(), gains.c_str())};
}

// ---------------------------------------------------------------- 5

Outcome oracle_proximity() {
  ExperimentConfig c = default_config();
  c.suite.true_partition = Partition::parse("0|0|1|1");
  c.k_groups = 2;
  const std::size_t expected = 1 + 7;  // S(4,1) + S(4,2)
  const auto t0 = Clock::now();
  std::size_t close = 0, count_ok = 0;
  std::string detail;
  for (std::uint64_t seed : c.seeds) {
    const TaskSuite suite = generate(c.suite_for(seed));
    const TrainingSetup setup = c.setup_for(seed);
    const OracleResult oracle = brute_force_oracle(suite, c.k_groups, setup);
    count_ok += oracle.all.size() == expected && enumerate_partitions(4, 2).size() == expected;
    const DmtgResult d = run_dmtg(suite, c.k_groups, setup);
    const auto idx = oracle.find(d.partition);
    const double best = *oracle.best_score().aggregate;
    const double mine = idx ? *oracle.all[*idx].aggregate : -1e300;
    const bool near = idx && mine >= best - kOracleRelTol * std::abs(best);
    close += near;
    detail += fmt("%s%.1f/%.1f", detail.empty() ? "" : " ", mine, best);
  }
  const bool ok = count_ok == c.seeds.size() && close >= kMinOracleClose;
  return {ok, fmt("%zu partitions per oracle; DMTG within 5%% of oracle best in %zu/%zu seeds, %.1f s "
                  "(dmtg/best NormGain %%: %s)",
                  expected, close, c.seeds.size(), seconds_since(t0), detail.c_str())};
}

// ---------------------------------------------------------------- 7

double time_training(std::size_t n_tasks, std::size_t k, const Architecture& arch) {
  PlantedSpec spec = PlantedSpec::default_spec();
  spec.true_partition.assignment.resize(n_tasks);
  for (std::size_t i = 0; i < n_tasks; ++i) spec.true_partition.assignment[i] = i % 5;
  spec.seed = 3;
  const TaskSuite suite = generate(spec);
  TrainingSetup setup;
  setup.arch = arch;
  setup.seed = 3;
  setup.train.epochs = 10;
  const auto t0 = Clock::now();
  const DmtgResult r = run_dmtg(suite, k, setup);
  (void)r;
  return seconds_since(t0);
}

Outcome complexity_claims() {
  const ExperimentConfig c = default_config();
  bool exact = true;
  for (std::size_t shared = 0; shared < 2; ++shared) {
    const Architecture arch{.depth = 2, .width = c.arch.width, .shared_layers = shared};
    const std::uint64_t head_unit = count_complexity(16, arch, 1, 1).head_flops_per_sample;
    for (std::size_t k = 1; k <= 5; ++k) {
      const std::uint64_t enc = count_complexity(16, arch, 1, k).encoder_flops_per_sample;
      for (std::size_t n = 1; n <= 40; ++n) {
        const Complexity x = count_complexity(16, arch, n, k);
        exact = exact && x.encoder_flops_per_sample == enc && x.head_flops_per_sample == k * n * head_unit;
      }
    }
  }
  {
    const TaskSuite suite = generate(PlantedSpec::default_spec());
    const GroupModel m(suite.input_dim(), suite.loss_kinds(), 3, c.arch, 1);
    exact = exact && count_complexity(m) == count_complexity(16, c.arch, 6, 3);
  }
  // Five planted groups of three latent dimensions fill 15 of the 16 inputs.
  // Timed at the wider reference width, where the encoder dominates the cost as
  // in large vision backbones; at width 3 the heads alone rival the encoder.
  const Architecture smoke{.depth = 2, .width = 32, .shared_layers = 0};
  const double t6 = time_training(6, 5, smoke), t40 = time_training(40, 5, smoke);
  const bool ok = exact && t40 <= kScaleRatio * t6;
  return {ok, fmt("encoder counts independent of N, head counts = K*N*unit: %s; N=40/K=5 %.2f s vs N=6/K=5 %.2f s "
                  "(ratio %.2f, width 32)",
                  exact ? "exact" : "MISMATCH", t40, t6, t40 / t6)};
}

// ---------------------------------------------------------------- 8

std::size_t stirling2(std::size_t n, std::size_t k) {
  if (n == 0 && k == 0) return 1;
  if (n == 0 || k == 0) return 0;
  return k * stirling2(n - 1, k) + stirling2(n - 1, k - 1);
}

std::size_t dedup_count(std::size_t n, std::size_t k) {
  std::set<std::vector<std::size_t>> seen;
  std::vector<std::size_t> labels(n, 0);
  while (true) {
    // Relabel by first occurrence.
    std::vector<std::size_t> rename(k, k), canon(n);
    std::size_t next = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (rename[labels[i]] == k) rename[labels[i]] = next++;
      canon[i] = rename[labels[i]];
    }
    seen.insert(canon);
    std::size_t i = 0;
    while (i < n && ++labels[i] == k) labels[i++] = 0;
    if (i == n) break;
  }
  return seen.size();
}

Outcome enumeration_counts() {
  std::size_t cases = 0, bad = 0;
  for (std::size_t n = 1; n <= 8; ++n) {
    for (std::size_t k = 1; k <= n; ++k) {
      std::size_t expect = 0;
      for (std::size_t j = 1; j <= k; ++j) expect += stirling2(n, j);
      const auto all = enumerate_partitions(n, k);
      std::set<std::vector<std::size_t>> unique;
      for (const auto& p : all) unique.insert(p.assignment);
      ++cases;
      bad += !(all.size() == expect && dedup_count(n, k) == expect && unique.size() == all.size());
    }
  }
  const std::size_t n53 = enumerate_partitions(5, 3).size();
  return {bad == 0 && n53 == 41, fmt("%zu (N, K) cases, %zu mismatches; N=5 K=3 gives %zu", cases, bad, n53)};
}

// ---------------------------------------------------------------- 9

Outcome degenerate_equivalences() {
  ExperimentConfig c = default_config();
  c.pretrain_epochs = 0;
  const TaskSuite suite = generate(c.suite_for(5));
  const TrainingSetup setup = c.setup_for(5);
  const DmtgResult k1 = run_dmtg(suite, 1, setup);
  const FixedResult naive = train_naive_mtl(suite, setup);
  const bool mtl_same = k1.state.history == naive.groups.at(0).history && k1.val_losses == naive.score.per_task_val_loss;

  const FixedResult stl = train_stl(suite, setup);
  const FixedResult apart = train_fixed_partition(Partition::singletons(suite.n_tasks()), suite, setup);
  bool stl_same = stl.score.per_task_val_loss == apart.score.per_task_val_loss && stl.groups.size() == apart.groups.size();
  for (std::size_t g = 0; stl_same && g < stl.groups.size(); ++g) stl_same = stl.groups[g].history == apart.groups[g].history;
  return {mtl_same && stl_same, fmt("K=1 DMTG trace %s naive MTL over %zu epochs; singleton partition %s STL",
                                    mtl_same ? "equals" : "DIFFERS FROM", k1.state.history.epochs.size(),
                                    stl_same ? "equals" : "DIFFERS FROM")};
}

// ---------------------------------------------------------------- 10

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Outcome determinism() {
  namespace fs = std::filesystem;
  const fs::path root = fs::temp_directory_path() / "dmtg_acceptance_determinism";
  fs::remove_all(root);
  ExperimentConfig c;
  c.suite.true_partition = Partition::parse("0|0|1|1");
  c.suite.samples = {500, 200, 200};
  c.k_groups = 2;
  c.main_epochs = 5;
  c.methods = {"naive_mtl", "stl", "dmtg", "random", "hoa", "oracle", "two_shot"};
  c.seeds = {1, 2};
  c.record_wallclock = false;
  c.output_dir = root / "a";
  run(c);
  c.output_dir = root / "b";
  run(c, {.workers = 2, .on_record = nullptr});
  bool files_same = true;
  std::size_t compared = 0;
  for (const char* f : {"records.csv", "records.jsonl", "oracle_table.csv", "oracle_table.jsonl", "manifest.json"}) {
    const std::string a = slurp(root / "a" / f), b = slurp(root / "b" / f);
    files_same = files_same && !a.empty() && a == b;
    ++compared;
  }

  const TaskSuite suite = generate(c.suite_for(1));
  TrainingSetup setup = c.setup_for(1);
  GroupModel base(suite.input_dim(), suite.loss_kinds(), 1, setup.arch, 4);
  TrainConfig half = setup.main_config(), full = half;
  half.epochs = 2;
  TrainState first = train_one_shot(GroupModel::cloned(base, 2), suite, half);
  save_checkpoint(first, root / "a.ckpt");
  TrainState loaded = load_checkpoint(root / "a.ckpt");
  save_checkpoint(loaded, root / "b.ckpt");
  const bool round_trip = bit_identical(first, loaded) && slurp(root / "a.ckpt") == slurp(root / "b.ckpt");
  train(loaded, suite, full);
  const TrainState straight = train_one_shot(GroupModel::cloned(base, 2), suite, full);
  const bool resumed = bit_identical(loaded, straight);
  fs::remove_all(root);
  return {files_same && round_trip && resumed,
          fmt("%zu result files %s across reruns (1 vs 2 workers); checkpoint round trip %s; resumed run %s",
              compared, files_same ? "byte-identical" : "DIFFER", round_trip ? "bit-exact" : "NOT EXACT",
              resumed ? "bit-identical to uninterrupted" : "DIVERGES")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"metric golden values", golden_metrics},
      {"gradient correctness", gradient_check},
      {"relaxation invariants", relaxation_invariants},
      {"planted-group recovery", planted_recovery},
      {"oracle proximity", oracle_proximity},
      {"one-shot vs two-shot", one_shot_vs_two_shot},
      {"complexity claims", complexity_claims},
      {"enumeration oracle", enumeration_counts},
      {"degenerate equivalences", degenerate_equivalences},
      {"determinism and persistence", determinism},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(static_cast<std::size_t>(std::atoi(argv[i])));

  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s [%zu] %s (%.2f s): %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                seconds_since(t0), o.detail.c_str());
    std::fflush(stdout);
    all = all && o.pass;
  }
  return all ? 0 : 1;
}
