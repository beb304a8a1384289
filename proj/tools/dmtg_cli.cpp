// dmtg: generate suites, run grouping experiments, and summarise results.
//
//   dmtg gen    --config cfg.json --out DIR        write one suite file per seed
//   dmtg run    --config cfg.json [--out DIR] [--workers W] [--seed-override S] [--methods a,b]
//   dmtg oracle --config cfg.json [--out DIR] [--workers W] [--seed-override S]
//   dmtg report DIR
//   dmtg check
//
// Exit status: 0 success, 1 bad configuration or arguments, 2 runtime failure.

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "dmtg/checks.hpp"
#include "dmtg/config.hpp"
#include "dmtg/report.hpp"
#include "dmtg/runner.hpp"
#include "dmtg/tasksuite.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;

struct CommonArgs {
  std::string config;
  std::string out;
  std::size_t workers = 1;
  std::optional<std::uint64_t> seed_override;
  std::string methods;
};

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

dmtg::ExperimentConfig load(const CommonArgs& a) {
  dmtg::ExperimentConfig c = dmtg::load_config(a.config);
  if (!a.out.empty()) c.output_dir = a.out;
  if (a.seed_override) c.seeds = {*a.seed_override};
  if (!a.methods.empty()) c.methods = split_list(a.methods);
  c.validate();
  return c;
}

void print_record(const dmtg::RunRecord& r) {
  if (r.failed) {
    std::cerr << "seed " << r.seed << " " << r.method << ": FAILED: " << r.error << "\n";
    return;
  }
  std::cerr << "seed " << r.seed << " " << r.method << ": partition " << r.partition.to_string() << ", normgain "
            << r.mean_normgain_pct << "%, rand " << r.rand_index << "\n";
}

int cmd_gen(const CommonArgs& a) {
  const dmtg::ExperimentConfig c = load(a);
  const std::filesystem::path dir = a.out.empty() ? c.output_dir : std::filesystem::path(a.out);
  std::filesystem::create_directories(dir);
  for (std::uint64_t seed : c.seeds) {
    const auto path = dir / ("suite_" + std::to_string(seed) + ".bin");
    dmtg::save_suite(dmtg::generate(c.suite_for(seed)), path);
    std::cout << path.string() << "\n";
  }
  return kOk;
}

int cmd_run(const CommonArgs& a, bool oracle_only) {
  const dmtg::ExperimentConfig c = load(a);
  dmtg::RunOptions opt;
  opt.workers = a.workers;
  opt.on_record = print_record;
  const dmtg::RunOutput out = oracle_only ? dmtg::run_oracle(c, opt) : dmtg::run(c, opt);
  if (!out.oracle_table.empty()) {
    std::cout << "oracle table (" << out.oracle_table.size() << " partitions) in "
              << (c.output_dir / "oracle_table.csv").string() << "\n";
  }
  std::cout << dmtg::format_report(dmtg::build_report(out.records));
  return out.any_failed ? kRuntimeError : kOk;
}

int cmd_report(const std::string& dir) {
  const dmtg::Report r = dmtg::report_directory(dir);
  std::cout << dmtg::format_report(r);
  std::ofstream(std::filesystem::path(dir) / "report.csv", std::ios::trunc) << dmtg::report_csv(r);
  return kOk;
}

int cmd_check() {
  bool ok = true;
  for (const auto& r : dmtg::quick_checks()) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name;
    if (!r.detail.empty()) std::cout << " (" << r.detail << ")";
    std::cout << "\n";
    ok = ok && r.passed;
  }
  return ok ? kOk : kRuntimeError;
}

void add_common(CLI::App* cmd, CommonArgs& a, bool with_methods) {
  cmd->add_option("--config", a.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", a.out, "output directory (overrides output_dir)");
  cmd->add_option("--workers", a.workers, "parallel jobs")->check(CLI::PositiveNumber);
  cmd->add_option("--seed-override", a.seed_override, "run this single seed instead of the config's list");
  if (with_methods) cmd->add_option("--methods", a.methods, "comma-separated subset of methods");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentiable multi-task grouping experiments"};
  app.require_subcommand(1);

  CommonArgs gen_args, run_args, oracle_args;
  std::string report_dir;
  auto* gen = app.add_subcommand("gen", "materialise the suite of every seed");
  add_common(gen, gen_args, false);
  auto* run = app.add_subcommand("run", "run the configured methods for every seed");
  add_common(run, run_args, true);
  auto* oracle = app.add_subcommand("oracle", "train every partition and write the oracle table");
  add_common(oracle, oracle_args, false);
  auto* report = app.add_subcommand("report", "aggregate records into comparison tables");
  report->add_option("dir", report_dir, "results directory")->required();
  auto* check = app.add_subcommand("check", "run the quick invariant checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*gen) return cmd_gen(gen_args);
    if (*run) return cmd_run(run_args, false);
    if (*oracle) return cmd_run(oracle_args, true);
    if (*report) return cmd_report(report_dir);
    if (*check) return cmd_check();
  } catch (const dmtg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kOk;
}
