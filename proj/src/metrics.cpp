#include "dmtg/metrics.hpp"

#include <cmath>
#include <string>

namespace dmtg {

namespace {

NormGain normalized_gain(std::span<const double> method, std::span<const double> base, const char* what) {
  if (method.size() != base.size()) throw std::invalid_argument(std::string(what) + ": length mismatch");
  NormGain out;
  out.per_task_pct.reserve(method.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < method.size(); ++i) {
    if (!(base[i] > 0.0)) {
      throw std::domain_error(std::string(what) + ": baseline value of task " + std::to_string(i) + " is not positive");
    }
    if (!std::isfinite(method[i])) throw std::domain_error(std::string(what) + ": non-finite method value");
    const double g = 100.0 * (base[i] - method[i]) / base[i];
    out.per_task_pct.push_back(g);
    sum += g;
  }
  out.mean_pct = method.empty() ? 0.0 : sum / static_cast<double>(method.size());
  return out;
}

}  // namespace

NormGain norm_gain_loss(std::span<const double> method_losses, std::span<const double> naive_mtl_losses) {
  return normalized_gain(method_losses, naive_mtl_losses, "norm_gain_loss");
}

NormGain norm_gain_error(std::span<const double> method_errors, std::span<const double> naive_mtl_errors) {
  return normalized_gain(method_errors, naive_mtl_errors, "norm_gain_error");
}

Recovery partition_recovery(const Partition& found, const Partition& planted) {
  if (found.n_tasks() != planted.n_tasks()) throw std::invalid_argument("partition_recovery: length mismatch");
  const std::size_t n = found.n_tasks();
  std::size_t agree = 0, pairs = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const bool a = found.assignment[i] == found.assignment[j];
      const bool b = planted.assignment[i] == planted.assignment[j];
      agree += a == b;
      ++pairs;
    }
  }
  return {same_grouping(found, planted), pairs == 0 ? 1.0 : static_cast<double>(agree) / static_cast<double>(pairs)};
}

double total_loss(std::span<const double> per_task_loss) {
  double s = 0.0;
  for (double v : per_task_loss) {
    if (!std::isfinite(v)) throw std::domain_error("total_loss: non-finite entry");
    s += v;
  }
  return s;
}

MetricsReport make_report(std::span<const double> losses, std::span<const double> naive_mtl_losses,
                          const Partition& partition, const Partition& planted) {
  MetricsReport r;
  r.per_task_loss.assign(losses.begin(), losses.end());
  NormGain g = norm_gain_loss(losses, naive_mtl_losses);
  r.per_task_gain_pct = std::move(g.per_task_pct);
  r.mean_norm_gain_pct = g.mean_pct;
  r.total_loss = total_loss(losses);
  r.partition = partition;
  r.recovery = partition_recovery(partition, planted);
  return r;
}

}  // namespace dmtg
