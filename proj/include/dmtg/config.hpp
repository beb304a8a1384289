#pragma once

// Experiment configuration, read from a JSON file. Unknown keys are errors.
//
// {
//   "suite": {"partition": "0|0|1|1|2|2", "input_dim": 16, "latent_dim": 3,
//             "noise_std": 0.1, "weight_spread": 0.1,
//             "samples": {"train": 2000, "val": 500, "test": 500},
//             "kinds": ["regression", ...], "seed": 7},
//   "k_groups": 3,
//   "epochs": {"pretrain": 0, "main": 150},
//   "batch_size": 8,
//   "optimizer": {"lr": 0.03, "assignment_lr": 0.03, "beta1": 0.9, "beta2": 0.999,
//                 "eps": 1e-8, "plateau_patience": 5, "plateau_factor": 0.5},
//   "temperature": {"kind": "fixed", "tau": 1.5}
//               or {"kind": "anneal", "start": 100, "end": 4, "factor": 0.5, "epochs_per_decay": 1},
//   "architecture": {"depth": 2, "width": 3, "shared_layers": 0},
//   "methods": ["dmtg", "naive_mtl", "stl", "random", "hoa", "oracle", "two_shot"],
//   "seeds": [0, 1, 2],
//   "output_dir": "results",
//   "record_wallclock": true
// }
//
// Every key is optional except "methods" and "seeds". Without "suite.seed"
// each run seed also seeds its own suite.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmtg/baselines.hpp"
#include "dmtg/json_io.hpp"
#include "dmtg/tasksuite.hpp"

namespace dmtg {

inline const std::vector<std::string> kMethods = {"dmtg", "naive_mtl", "stl", "random", "hoa", "oracle", "two_shot"};

struct ExperimentConfig {
  PlantedSpec suite = PlantedSpec::default_spec();
  std::optional<std::uint64_t> suite_seed;
  std::size_t k_groups = 3;
  std::size_t pretrain_epochs = 0;
  std::size_t main_epochs = 150;
  std::size_t batch_size = 8;
  ad::AdamConfig adam{.lr = 0.03};
  /// Learning rate of S; unset means adam.lr.
  std::optional<double> assignment_lr;
  std::size_t plateau_patience = 5;
  double plateau_factor = 0.5;
  TemperatureSchedule temperature = TemperatureSchedule::fixed(1.5);
  Architecture arch;
  std::vector<std::string> methods;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path output_dir = "results";
  bool record_wallclock = true;

  /// Throws ConfigError naming the offending field.
  void validate() const;

  [[nodiscard]] PlantedSpec suite_for(std::uint64_t seed) const;
  [[nodiscard]] TrainingSetup setup_for(std::uint64_t seed) const;
  [[nodiscard]] bool has_method(const std::string& m) const;
};

ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& c);
ExperimentConfig load_config(const std::filesystem::path& path);

/// FNV-1a 64 over the canonical JSON form, output_dir excluded; 16 hex digits.
std::string config_hash(const ExperimentConfig& c);

}  // namespace dmtg
