#include "dmtg/runner.hpp"

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <thread>

namespace dmtg {

using nlohmann::json;

namespace {

enum Stream : std::uint64_t { kRandomGroupStream = 0x2a4d0 };

std::string fmt_double(double v, const char* spec = "%.9g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  [[nodiscard]] double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

Complexity sum_complexity(const FixedResult& r) {
  Complexity c;
  for (const GroupResult& g : r.groups) {
    const Complexity x = count_complexity(g.model);
    c.encoder_flops_per_sample += x.encoder_flops_per_sample;
    c.head_flops_per_sample += x.head_flops_per_sample;
    c.encoder_params += x.encoder_params;
    c.head_params += x.head_params;
  }
  return c;
}

std::vector<std::size_t> all_tasks(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

// Lazily computed per-seed inputs shared by that seed's jobs.
struct SeedContext {
  std::uint64_t seed = 0;
  const ExperimentConfig* config = nullptr;
  TrainingSetup setup;

  std::once_flag suite_once, naive_once, dmtg_once;
  std::optional<TaskSuite> suite;
  std::optional<FixedResult> naive;
  double naive_seconds = 0.0;
  std::optional<DmtgResult> dmtg;
  double dmtg_seconds = 0.0;

  const TaskSuite& get_suite() {
    std::call_once(suite_once, [&] { suite = generate(config->suite_for(seed)); });
    return *suite;
  }
  const FixedResult& get_naive() {
    const TaskSuite& s = get_suite();
    std::call_once(naive_once, [&] {
      Stopwatch w;
      naive = train_naive_mtl(s, setup);
      naive_seconds = w.seconds();
    });
    return *naive;
  }
  const DmtgResult& get_dmtg() {
    const TaskSuite& s = get_suite();
    std::call_once(dmtg_once, [&] {
      Stopwatch w;
      dmtg = run_dmtg(s, config->k_groups, setup);
      dmtg_seconds = w.seconds();
    });
    return *dmtg;
  }
};

struct JobResult {
  RunRecord record;
  std::vector<RunRecord> table;
};

RunRecord make_record(const ExperimentConfig& cfg, const std::string& hash, const std::string& method,
                      SeedContext& ctx, const Partition& partition, const std::vector<double>& val,
                      const std::vector<double>& test, const Complexity& complexity, double seconds) {
  const TaskSuite& suite = ctx.get_suite();
  const FixedResult& naive = ctx.get_naive();
  const MetricsReport m = make_report(val, naive.score.per_task_val_loss, partition, suite.spec.true_partition);
  RunRecord r;
  r.config_hash = hash;
  r.method = method;
  r.seed = ctx.seed;
  r.k = cfg.k_groups;
  r.n = suite.n_tasks();
  r.partition = partition.canonical();
  r.val_losses = val;
  r.test_losses = test;
  r.gain_pct = m.per_task_gain_pct;
  r.total_loss = m.total_loss;
  r.mean_normgain_pct = m.mean_norm_gain_pct;
  r.exact_match = m.recovery.exact_match;
  r.rand_index = m.recovery.rand_index;
  r.wallclock_s = cfg.record_wallclock ? seconds : 0.0;
  r.complexity = complexity;
  r.epochs = ctx.setup.train.epochs;
  r.batch_seed = ctx.setup.main_config().batch_seed;
  return r;
}

JobResult run_job(const ExperimentConfig& cfg, const std::string& hash, const std::string& method, SeedContext& ctx) {
  const TaskSuite& suite = ctx.get_suite();
  const std::size_t k = cfg.k_groups;
  JobResult out;
  auto fixed_record = [&](const std::string& name, const FixedResult& r, double seconds) {
    return make_record(cfg, hash, name, ctx, r.score.partition, r.score.per_task_val_loss, r.score.per_task_test_loss,
                       sum_complexity(r), seconds);
  };

  if (method == "naive_mtl") {
    const FixedResult& r = ctx.get_naive();
    out.record = fixed_record(method, r, ctx.naive_seconds);
  } else if (method == "dmtg") {
    const DmtgResult& r = ctx.get_dmtg();
    out.record = make_record(cfg, hash, method, ctx, r.partition, r.val_losses, r.test_losses,
                             count_complexity(r.state.model), ctx.dmtg_seconds);
  } else if (method == "two_shot") {
    const Partition p = ctx.get_dmtg().partition;
    Stopwatch w;
    const FixedResult r = train_fixed_partition(p, suite, ctx.setup);
    out.record = fixed_record(method, r, w.seconds());
  } else if (method == "stl") {
    Stopwatch w;
    const FixedResult r = train_stl(suite, ctx.setup);
    out.record = fixed_record(method, r, w.seconds());
  } else if (method == "random") {
    Stopwatch w;
    Rng rng(mix_seed(ctx.seed, kRandomGroupStream));
    const FixedResult r = train_fixed_partition(random_group(suite.n_tasks(), k, rng), suite, ctx.setup);
    out.record = fixed_record(method, r, w.seconds());
  } else if (method == "hoa") {
    Stopwatch w;
    const HoaResult h = hoa_pairwise(suite, k, ctx.setup, ctx.get_naive().score.per_task_val_loss);
    const FixedResult r = train_fixed_partition(h.partition, suite, ctx.setup);
    out.record = fixed_record(method, r, w.seconds());
  } else if (method == "oracle") {
    Stopwatch w;
    const OracleResult o = brute_force_oracle(suite, k, ctx.setup);
    const double seconds = w.seconds();
    for (const PartitionScore& s : o.all) {
      out.table.push_back(make_record(cfg, hash, method, ctx, s.partition, s.per_task_val_loss, s.per_task_test_loss,
                                      count_complexity(suite.input_dim(), cfg.arch, suite.n_tasks(),
                                                       s.partition.group_count()),
                                      0.0));
    }
    const PartitionScore& best = o.best_score();
    out.record = make_record(cfg, hash, method, ctx, best.partition, best.per_task_val_loss, best.per_task_test_loss,
                             count_complexity(suite.input_dim(), cfg.arch, suite.n_tasks(), best.partition.group_count()),
                             seconds);
  } else {
    throw std::invalid_argument("unknown method '" + method + "'");
  }
  return out;
}

class ResultFiles {
 public:
  ResultFiles(const std::filesystem::path& dir, const ExperimentConfig& cfg, const std::string& hash, bool oracle)
      : dir_(dir) {
    std::filesystem::create_directories(dir);
    json config = config_to_json(cfg);
    config.erase("output_dir");
    json manifest = {{"csv_schema_version", kCsvSchemaVersion},
                     {"jsonl_schema_version", kJsonlSchemaVersion},
                     {"config_hash", hash},
                     {"csv_columns", kCsvColumns},
                     {"config", config}};
    std::ofstream(dir / "manifest.json", std::ios::trunc) << manifest.dump(2) << '\n';
    open(csv_, dir / "records.csv");
    open(jsonl_, dir / "records.jsonl");
    csv_ << kCsvColumns << '\n' << std::flush;
    if (oracle) {
      open(table_csv_, dir / "oracle_table.csv");
      open(table_jsonl_, dir / "oracle_table.jsonl");
      table_csv_ << kCsvColumns << '\n' << std::flush;
    }
  }

  void write(const JobResult& r) {
    csv_ << r.record.csv_row() << '\n' << std::flush;
    jsonl_ << r.record.to_json().dump() << '\n' << std::flush;
    for (const RunRecord& t : r.table) {
      table_csv_ << t.csv_row() << '\n';
      table_jsonl_ << t.to_json().dump() << '\n';
    }
    if (!r.table.empty()) {
      table_csv_.flush();
      table_jsonl_.flush();
    }
    if (!csv_ || !jsonl_) throw std::runtime_error("failed writing results to " + dir_.string());
  }

 private:
  static void open(std::ofstream& os, const std::filesystem::path& p) {
    os.open(p, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + p.string() + " for writing");
  }

  std::filesystem::path dir_;
  std::ofstream csv_, jsonl_, table_csv_, table_jsonl_;
};

std::vector<double> json_doubles(const json& j, const char* key) {
  return j.contains(key) ? j.at(key).get<std::vector<double>>() : std::vector<double>{};
}

}  // namespace

DmtgResult run_dmtg(const TaskSuite& suite, std::size_t k_groups, const TrainingSetup& setup) {
  const auto tasks = all_tasks(suite.n_tasks());
  GroupModel base(suite.input_dim(), suite.loss_kinds(), 1, setup.arch, group_init_seed(setup.seed, tasks));
  TrainHistory pretrain;
  if (setup.pretrain_epochs > 0) {
    const TrainConfig cfg = setup.pretrain_config();
    TrainState state = TrainState::fixed(std::move(base), Partition::all_in_one(suite.n_tasks()), cfg);
    train(state, suite, cfg);
    base = state.model;
    pretrain = std::move(state.history);
  }
  TrainState state = train_one_shot(GroupModel::cloned(base, k_groups), suite, setup.main_config());
  Partition p = state.partition();
  std::vector<double> val = evaluate(state, suite.val);
  std::vector<double> test = evaluate(state, suite.test);
  return DmtgResult{std::move(state), std::move(pretrain), std::move(p), std::move(val), std::move(test)};
}

std::string RunRecord::csv_row() const {
  std::string row = config_hash + "," + method + "," + std::to_string(seed) + "," + std::to_string(k) + "," +
                    std::to_string(n) + ",";
  if (failed) return row + ",,,,,";
  row += partition.to_string() + "," + fmt_double(total_loss) + "," + fmt_double(mean_normgain_pct) + "," +
         (exact_match ? "true" : "false") + "," + fmt_double(rand_index) + "," + fmt_double(wallclock_s, "%.3f");
  return row;
}

json RunRecord::to_json() const {
  json j = {{"schema_version", kJsonlSchemaVersion},
            {"config_hash", config_hash},
            {"method", method},
            {"seed", seed},
            {"K", k},
            {"N", n},
            {"failed", failed}};
  if (failed) {
    j["error"] = error;
    return j;
  }
  j["partition"] = partition.to_string();
  j["val_losses"] = val_losses;
  j["test_losses"] = test_losses;
  j["gain_pct"] = gain_pct;
  j["total_loss"] = total_loss;
  j["mean_normgain_pct"] = mean_normgain_pct;
  j["exact_match"] = exact_match;
  j["rand_index"] = rand_index;
  j["wallclock_s"] = wallclock_s;
  j["complexity"] = {{"encoder_flops_per_sample", complexity.encoder_flops_per_sample},
                     {"head_flops_per_sample", complexity.head_flops_per_sample},
                     {"encoder_params", complexity.encoder_params},
                     {"head_params", complexity.head_params}};
  j["epochs"] = epochs;
  j["batch_seed"] = batch_seed;
  return j;
}

RunRecord RunRecord::from_json(const json& j) {
  if (j.value("schema_version", 0) != kJsonlSchemaVersion) throw std::runtime_error("record: unsupported schema version");
  RunRecord r;
  r.config_hash = j.value("config_hash", "");
  r.method = j.at("method").get<std::string>();
  r.seed = j.value("seed", std::uint64_t{0});
  r.k = j.value("K", std::size_t{0});
  r.n = j.value("N", std::size_t{0});
  r.failed = j.value("failed", false);
  if (r.failed) {
    r.error = j.value("error", "");
    return r;
  }
  r.partition = Partition::parse(j.at("partition").get<std::string>());
  r.val_losses = json_doubles(j, "val_losses");
  r.test_losses = json_doubles(j, "test_losses");
  r.gain_pct = json_doubles(j, "gain_pct");
  r.total_loss = j.value("total_loss", 0.0);
  r.mean_normgain_pct = j.value("mean_normgain_pct", 0.0);
  r.exact_match = j.value("exact_match", false);
  r.rand_index = j.value("rand_index", 0.0);
  r.wallclock_s = j.value("wallclock_s", 0.0);
  if (j.contains("complexity")) {
    const json& c = j.at("complexity");
    r.complexity.encoder_flops_per_sample = c.value("encoder_flops_per_sample", std::uint64_t{0});
    r.complexity.head_flops_per_sample = c.value("head_flops_per_sample", std::uint64_t{0});
    r.complexity.encoder_params = c.value("encoder_params", std::uint64_t{0});
    r.complexity.head_params = c.value("head_params", std::uint64_t{0});
  }
  r.epochs = j.value("epochs", std::size_t{0});
  r.batch_seed = j.value("batch_seed", std::uint64_t{0});
  return r;
}

RunOutput run(const ExperimentConfig& config, const RunOptions& options) {
  config.validate();
  const std::string hash = config_hash(config);

  std::vector<std::unique_ptr<SeedContext>> contexts;
  for (std::uint64_t seed : config.seeds) {
    auto ctx = std::make_unique<SeedContext>();
    ctx->seed = seed;
    ctx->config = &config;
    ctx->setup = config.setup_for(seed);
    contexts.push_back(std::move(ctx));
  }
  struct Job {
    std::string method;
    SeedContext* ctx;
  };
  std::vector<Job> jobs;
  for (auto& ctx : contexts) {
    for (const auto& m : config.methods) jobs.push_back({m, ctx.get()});
  }

  ResultFiles files(config.output_dir, config, hash, config.has_method("oracle"));
  std::vector<std::optional<JobResult>> results(jobs.size());
  std::mutex mu;
  std::condition_variable ready;

  auto execute = [&](std::size_t i) {
    JobResult r;
    try {
      r = run_job(config, hash, jobs[i].method, *jobs[i].ctx);
    } catch (const std::exception& e) {
      r = JobResult{};
      r.record.config_hash = hash;
      r.record.method = jobs[i].method;
      r.record.seed = jobs[i].ctx->seed;
      r.record.k = config.k_groups;
      r.record.n = config.suite.n_tasks();
      r.record.failed = true;
      r.record.error = e.what();
    }
    std::lock_guard lock(mu);
    results[i] = std::move(r);
    ready.notify_all();
  };

  RunOutput out;
  auto emit = [&](std::size_t i) {
    JobResult r;
    {
      std::unique_lock lock(mu);
      ready.wait(lock, [&] { return results[i].has_value(); });
      r = std::move(*results[i]);
    }
    files.write(r);
    out.any_failed = out.any_failed || r.record.failed;
    if (options.on_record) options.on_record(r.record);
    for (auto& t : r.table) out.oracle_table.push_back(std::move(t));
    out.records.push_back(std::move(r.record));
  };

  if (options.workers <= 1) {
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      execute(i);
      emit(i);
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(options.workers, jobs.size()); ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) execute(i);
      });
    }
    for (std::size_t i = 0; i < jobs.size(); ++i) emit(i);
    for (auto& t : pool) t.join();
  }

  // Comparative methods of one seed must have seen the same epochs and batches.
  std::map<std::uint64_t, std::pair<std::size_t, std::uint64_t>> budget;
  for (const RunRecord& r : out.records) {
    if (r.failed) continue;
    auto [it, inserted] = budget.emplace(r.seed, std::make_pair(r.epochs, r.batch_seed));
    if (!inserted && it->second != std::make_pair(r.epochs, r.batch_seed)) {
      throw std::logic_error("budget parity violated for seed " + std::to_string(r.seed));
    }
  }
  return out;
}

RunOutput run_oracle(const ExperimentConfig& config, const RunOptions& options) {
  ExperimentConfig c = config;
  c.methods = {"oracle"};
  return run(c, options);
}

std::vector<RunRecord> read_records(const std::filesystem::path& jsonl) {
  std::ifstream is(jsonl);
  if (!is) throw std::runtime_error("cannot open " + jsonl.string());
  std::vector<RunRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(RunRecord::from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error(jsonl.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace dmtg
