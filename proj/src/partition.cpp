#include "dmtg/partition.hpp"

#include <algorithm>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace dmtg {

Partition Partition::all_in_one(std::size_t n_tasks) { return {std::vector<std::size_t>(n_tasks, 0)}; }

Partition Partition::singletons(std::size_t n_tasks) {
  Partition p;
  p.assignment.resize(n_tasks);
  for (std::size_t i = 0; i < n_tasks; ++i) p.assignment[i] = i;
  return p;
}

Partition Partition::parse(const std::string& text) {
  Partition p;
  if (text.empty()) return p;
  std::istringstream is(text);
  std::string field;
  while (std::getline(is, field, '|')) {
    if (field.empty() || !std::all_of(field.begin(), field.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      throw std::invalid_argument("Partition::parse: bad label '" + field + "' in '" + text + "'");
    }
    p.assignment.push_back(std::stoul(field));
  }
  return p;
}

std::size_t Partition::group_count() const { return canonical().label_bound(); }

std::size_t Partition::label_bound() const {
  if (assignment.empty()) return 0;
  return *std::max_element(assignment.begin(), assignment.end()) + 1;
}

Partition Partition::canonical() const {
  constexpr std::size_t unset = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> relabel(label_bound(), unset);
  Partition out;
  out.assignment.reserve(assignment.size());
  std::size_t next = 0;
  for (std::size_t label : assignment) {
    if (relabel[label] == unset) relabel[label] = next++;
    out.assignment.push_back(relabel[label]);
  }
  return out;
}

std::vector<std::vector<std::size_t>> Partition::groups() const {
  const Partition c = canonical();
  std::vector<std::vector<std::size_t>> out(c.label_bound());
  for (std::size_t i = 0; i < c.assignment.size(); ++i) out[c.assignment[i]].push_back(i);
  return out;
}

std::string Partition::to_string() const {
  std::string out;
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (i) out += '|';
    out += std::to_string(assignment[i]);
  }
  return out;
}

void Partition::validate(std::size_t max_groups) const {
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (assignment[i] >= max_groups) {
      throw std::invalid_argument("Partition: task " + std::to_string(i) + " has label " +
                                  std::to_string(assignment[i]) + " but only " + std::to_string(max_groups) +
                                  " groups are allowed");
    }
  }
}

bool same_grouping(const Partition& a, const Partition& b) { return a.canonical() == b.canonical(); }

}  // namespace dmtg
