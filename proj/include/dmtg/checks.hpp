#pragma once

// Fast self-checks behind `dmtg check`: small versions of the gradient,
// relaxation, enumeration, metric and determinism properties.

#include <string>
#include <vector>

namespace dmtg {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

std::vector<CheckResult> quick_checks();

}  // namespace dmtg
