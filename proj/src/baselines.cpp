#include "dmtg/baselines.hpp"

#include <atomic>
#include <exception>
#include <map>
#include <mutex>
#include <thread>

#include "dmtg/metrics.hpp"

namespace dmtg {

namespace {

enum Stream : std::uint64_t {
  kBatchStream = 0xba7c4,
  kPretrainBatchStream = 0x9e7a1,
  kNoiseSeedStream = 0x6a55e1,
  kGroupInitStream = 0x1417,
};

PartitionScore assemble(const Partition& p, const std::vector<GroupResult>& groups) {
  PartitionScore s;
  s.partition = p;
  s.per_task_val_loss.assign(p.n_tasks(), 0.0);
  s.per_task_test_loss.assign(p.n_tasks(), 0.0);
  for (const GroupResult& g : groups) {
    for (std::size_t j = 0; j < g.members.size(); ++j) {
      s.per_task_val_loss[g.members[j]] = g.val_losses[j];
      s.per_task_test_loss[g.members[j]] = g.test_losses[j];
    }
  }
  return s;
}

// Runs fn(i) for i in [0, n) on up to `workers` threads; rethrows the first failure.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

TrainConfig TrainingSetup::main_config() const {
  TrainConfig cfg = train;
  cfg.batch_seed = mix_seed(seed, kBatchStream);
  cfg.noise_seed = mix_seed(seed, kNoiseSeedStream);
  return cfg;
}

TrainConfig TrainingSetup::pretrain_config() const {
  TrainConfig cfg = main_config();
  cfg.epochs = pretrain_epochs;
  cfg.batch_seed = mix_seed(seed, kPretrainBatchStream);
  return cfg;
}

std::uint64_t group_init_seed(std::uint64_t seed, std::span<const std::size_t> members) {
  std::uint64_t h = mix_seed(seed, kGroupInitStream, members.size());
  for (std::size_t t : members) h = mix_seed(h, kGroupInitStream, t + 1);
  return h;
}

GroupResult train_group(const TaskSuite& suite, std::span<const std::size_t> members, const TrainingSetup& setup,
                        const GroupModel* init) {
  const TaskSuite sub = select_tasks(suite, members);
  GroupModel model = init ? init->clone()
                          : GroupModel(sub.input_dim(), sub.loss_kinds(), 1, setup.arch, group_init_seed(setup.seed, members));
  if (model.n_tasks() != members.size() || model.k_groups() != 1) {
    throw ad::DimensionError("train_group: initial model does not match the group");
  }
  const TrainConfig cfg = setup.main_config();
  TrainState state = TrainState::fixed(std::move(model), Partition::all_in_one(members.size()), cfg);
  train(state, sub, cfg);
  GroupResult out{std::vector<std::size_t>(members.begin(), members.end()), state.model, std::move(state.history),
                  evaluate(state, sub.val), evaluate(state, sub.test)};
  return out;
}

FixedResult train_fixed_partition(const Partition& partition, const TaskSuite& suite, const TrainingSetup& setup,
                                  FixedInit init, const GroupModel* naive) {
  if (partition.n_tasks() != suite.n_tasks()) throw std::invalid_argument("train_fixed_partition: partition size != N");
  if (init == FixedInit::NaiveMtl && (naive == nullptr || naive->n_tasks() != suite.n_tasks())) {
    throw std::invalid_argument("train_fixed_partition: naive-MTL init needs the trained all-in-one model");
  }
  const Partition p = partition.canonical();
  FixedResult out;
  for (const auto& members : p.groups()) {
    if (init == FixedInit::NaiveMtl) {
      const GroupModel start = naive->restricted(0, members);
      out.groups.push_back(train_group(suite, members, setup, &start));
    } else {
      out.groups.push_back(train_group(suite, members, setup));
    }
  }
  out.score = assemble(p, out.groups);
  return out;
}

FixedResult train_naive_mtl(const TaskSuite& suite, const TrainingSetup& setup) {
  return train_fixed_partition(Partition::all_in_one(suite.n_tasks()), suite, setup);
}

FixedResult train_stl(const TaskSuite& suite, const TrainingSetup& setup) {
  FixedResult out;
  for (std::size_t t = 0; t < suite.n_tasks(); ++t) {
    const std::size_t members[] = {t};
    out.groups.push_back(train_group(suite, members, setup));
  }
  out.score = assemble(Partition::singletons(suite.n_tasks()), out.groups);
  return out;
}

void score_against(PartitionScore& score, std::span<const double> naive_mtl_losses) {
  score.aggregate = norm_gain_loss(score.per_task_val_loss, naive_mtl_losses).mean_pct;
}

// ---------------------------------------------------------------------------

std::vector<Partition> enumerate_partitions(std::size_t n, std::size_t k) {
  if (n == 0) throw std::invalid_argument("enumerate_partitions: N must be >= 1");
  if (k == 0) throw std::invalid_argument("enumerate_partitions: K must be >= 1");
  if (n > kEnumerationLimit) {
    throw std::invalid_argument("enumerate_partitions: N=" + std::to_string(n) + " exceeds the limit of " +
                                std::to_string(kEnumerationLimit));
  }
  // Restricted-growth strings a[0]=0, a[i] <= 1 + max(a[0..i-1]), with labels < k.
  std::vector<Partition> out;
  std::vector<std::size_t> a(n, 0), top(n, 0);  // top[i] = max(a[0..i])
  for (;;) {
    out.push_back({a});
    std::size_t i = n - 1;
    while (i > 0 && (a[i] > top[i - 1] || a[i] + 1 >= k)) --i;
    if (i == 0) break;
    ++a[i];
    top[i] = std::max(top[i - 1], a[i]);
    for (std::size_t j = i + 1; j < n; ++j) {
      a[j] = 0;
      top[j] = top[i];
    }
  }
  return out;
}

std::optional<std::size_t> OracleResult::find(const Partition& p) const {
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (same_grouping(all[i].partition, p)) return i;
  }
  return std::nullopt;
}

OracleResult brute_force_oracle(const TaskSuite& suite, std::size_t k, const TrainingSetup& setup,
                                std::size_t workers) {
  const std::vector<Partition> parts = enumerate_partitions(suite.n_tasks(), k);

  std::map<std::vector<std::size_t>, std::size_t> index;
  std::vector<std::vector<std::size_t>> distinct;
  for (const Partition& p : parts) {
    for (auto& g : p.groups()) {
      if (index.emplace(g, distinct.size()).second) distinct.push_back(g);
    }
  }
  std::vector<std::optional<GroupResult>> trained(distinct.size());
  parallel_for(distinct.size(), workers, [&](std::size_t i) { trained[i] = train_group(suite, distinct[i], setup); });

  OracleResult out;
  for (const Partition& p : parts) {
    std::vector<GroupResult> groups;
    for (auto& g : p.groups()) groups.push_back(*trained[index.at(g)]);
    out.all.push_back(assemble(p, groups));
  }
  const std::vector<double> naive = out.all.front().per_task_val_loss;  // all-in-one comes first
  for (std::size_t i = 0; i < out.all.size(); ++i) {
    score_against(out.all[i], naive);
    if (*out.all[i].aggregate > *out.all[out.best].aggregate) out.best = i;
  }
  for (const auto& s : out.all) {
    if (*s.aggregate > *out.best_score().aggregate) throw std::logic_error("brute_force_oracle: best is not maximal");
  }
  return out;
}

PairwiseAffinityTable build_affinity_table(const TaskSuite& suite, const TrainingSetup& setup) {
  const std::size_t n = suite.n_tasks();
  if (n < 2) throw std::invalid_argument("hoa_pairwise: needs at least two tasks");
  PairwiseAffinityTable t;
  t.singleton_loss.resize(n);
  t.pair_loss.assign(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t m[] = {i};
    t.singleton_loss[i] = train_group(suite, m, setup).val_losses[0];
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const std::size_t m[] = {i, j};
      const GroupResult r = train_group(suite, m, setup);
      t.pair_loss[i][j] = r.val_losses[0];
      t.pair_loss[j][i] = r.val_losses[1];
    }
  }
  return t;
}

std::vector<double> approximate_losses(const PairwiseAffinityTable& table, const Partition& p) {
  const std::size_t n = p.n_tasks();
  if (table.singleton_loss.size() != n) throw std::invalid_argument("approximate_losses: table size != N");
  std::vector<double> out(n);
  for (const auto& g : p.groups()) {
    for (std::size_t i : g) {
      if (g.size() == 1) {
        out[i] = table.singleton_loss[i];
        continue;
      }
      double s = 0.0;
      for (std::size_t j : g) {
        if (j != i) s += table.pair_loss[i][j];
      }
      out[i] = s / static_cast<double>(g.size() - 1);
    }
  }
  return out;
}

HoaResult hoa_select(const PairwiseAffinityTable& table, std::size_t k, std::span<const double> naive_mtl_losses) {
  HoaResult best;
  bool first = true;
  for (const Partition& p : enumerate_partitions(table.singleton_loss.size(), k)) {
    const double gain = norm_gain_loss(approximate_losses(table, p), naive_mtl_losses).mean_pct;
    if (first || gain > best.predicted_gain) {
      best.partition = p;
      best.predicted_gain = gain;
      first = false;
    }
  }
  best.table = table;
  return best;
}

HoaResult hoa_pairwise(const TaskSuite& suite, std::size_t k, const TrainingSetup& setup,
                       std::span<const double> naive_mtl_losses) {
  return hoa_select(build_affinity_table(suite, setup), k, naive_mtl_losses);
}

Partition random_group(std::size_t n, std::size_t k, Rng& rng) {
  if (k == 0) throw std::invalid_argument("random_group: K must be >= 1");
  Partition p;
  p.assignment.resize(n);
  for (auto& a : p.assignment) a = rng.below(k);
  return p;
}

}  // namespace dmtg
