#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace dmtg {

/// Hard assignment of each task to exactly one group label. Labels need not
/// be contiguous; groups may be empty.
struct Partition {
  std::vector<std::size_t> assignment;

  static Partition all_in_one(std::size_t n_tasks);
  static Partition singletons(std::size_t n_tasks);
  /// Parses the "0|0|1|2" form.
  static Partition parse(const std::string& text);

  [[nodiscard]] std::size_t n_tasks() const { return assignment.size(); }
  /// Number of non-empty groups.
  [[nodiscard]] std::size_t group_count() const;
  /// Largest label + 1 (0 for an empty partition).
  [[nodiscard]] std::size_t label_bound() const;
  /// Relabelled by first occurrence, so [2,2,0] becomes [0,0,1].
  [[nodiscard]] Partition canonical() const;
  /// Members of each non-empty group, in canonical label order.
  [[nodiscard]] std::vector<std::vector<std::size_t>> groups() const;
  [[nodiscard]] std::string to_string() const;
  /// Throws std::invalid_argument if any label is >= max_groups.
  void validate(std::size_t max_groups) const;

  friend bool operator==(const Partition&, const Partition&) = default;
};

/// Equality up to group relabelling.
bool same_grouping(const Partition& a, const Partition& b);

}  // namespace dmtg
