#pragma once

// JSON forms of the value types that appear in config files, suite headers
// and result records.

#include <string>

#include <json.hpp>

#include "dmtg/tasksuite.hpp"

namespace dmtg {

/// Thrown for malformed or unknown config fields; `field` is a dotted path.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::invalid_argument(field + ": " + message), field_(std::move(field)) {}
  [[nodiscard]] const std::string& field() const { return field_; }

 private:
  std::string field_;
};

nlohmann::json planted_spec_to_json(const PlantedSpec& spec);
/// `path` prefixes field names in error messages.
PlantedSpec planted_spec_from_json(const nlohmann::json& j, const std::string& path);

}  // namespace dmtg
