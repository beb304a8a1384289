#include "dmtg/report.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "dmtg/metrics.hpp"

namespace dmtg {

namespace {

std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%+.2f", v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

std::string plain(double v, const char* spec) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace

Summary summarize(const std::vector<double>& values) {
  Summary s;
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.spread = std::sqrt(var / static_cast<double>(values.size()));
  return s;
}

Report build_report(const std::vector<RunRecord>& records) {
  if (records.empty()) throw std::invalid_argument("report: no records");
  std::map<std::pair<std::string, std::uint64_t>, const RunRecord*> naive;
  for (const RunRecord& r : records) {
    if (r.method == "naive_mtl" && !r.failed) naive[{r.config_hash, r.seed}] = &r;
  }

  std::vector<std::string> order;
  std::map<std::string, std::vector<const RunRecord*>> by_method;
  for (const RunRecord& r : records) {
    if (!by_method.count(r.method)) order.push_back(r.method);
    by_method[r.method].push_back(&r);
  }

  Report out;
  for (const std::string& m : order) {
    ReportRow row;
    row.method = m;
    std::vector<double> totals, gains, rands, rel;
    std::size_t exact = 0;
    bool have_truth = true;
    for (const RunRecord* r : by_method[m]) {
      ++row.runs;
      if (r->failed) {
        ++row.failed;
        continue;
      }
      totals.push_back(r->total_loss);
      auto it = naive.find({r->config_hash, r->seed});
      if (it != naive.end() && it->second->val_losses.size() == r->val_losses.size() && !r->val_losses.empty()) {
        gains.push_back(norm_gain_loss(r->val_losses, it->second->val_losses).mean_pct);
        const double base = static_cast<double>(it->second->complexity.encoder_flops_per_sample);
        if (base > 0) rel.push_back(static_cast<double>(r->complexity.encoder_flops_per_sample) / base);
      } else {
        gains.push_back(r->mean_normgain_pct);
      }
      rands.push_back(r->rand_index);
      exact += r->exact_match;
      have_truth = have_truth && r->n > 0;
    }
    row.total_loss = summarize(totals);
    row.normgain_pct = summarize(gains);
    if (!rands.empty() && have_truth) {
      row.exact_match_rate = static_cast<double>(exact) / static_cast<double>(rands.size());
      row.rand_index = summarize(rands);
    }
    if (!rel.empty()) row.relative_encoder = summarize(rel).mean;
    out.rows.push_back(std::move(row));
  }
  return out;
}

Report report_directory(const std::filesystem::path& dir) {
  const auto path = dir / "records.jsonl";
  if (!std::filesystem::exists(path)) throw std::runtime_error("report: no records.jsonl in " + dir.string());
  return build_report(read_records(path));
}

std::string format_report(const Report& r) {
  const std::vector<std::string> header = {"method", "runs", "total_loss", "+-", "normgain_%", "+-",
                                           "exact", "rand_index", "+-", "rel_encoder"};
  std::vector<std::vector<std::string>> cells = {header};
  for (const ReportRow& row : r.rows) {
    std::string runs = std::to_string(row.runs);
    if (row.failed) runs += " (" + std::to_string(row.failed) + " failed)";
    cells.push_back({row.method, runs, sci(row.total_loss.mean), sci(row.total_loss.spread), fixed2(row.normgain_pct.mean),
                     plain(row.normgain_pct.spread, "%.2f"),
                     row.exact_match_rate ? plain(*row.exact_match_rate, "%.2f") : "-",
                     row.rand_index ? plain(row.rand_index->mean, "%.3f") : "-",
                     row.rand_index ? plain(row.rand_index->spread, "%.3f") : "-",
                     row.relative_encoder ? plain(*row.relative_encoder, "%.2fx") : "-"});
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : cells) {
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
  }
  std::ostringstream os;
  for (const auto& line : cells) {
    for (std::size_t c = 0; c < line.size(); ++c) {
      const std::string pad(width[c] - line[c].size(), ' ');
      os << (c == 0 ? line[c] + pad : pad + line[c]) << (c + 1 < line.size() ? "  " : "\n");
    }
  }
  return os.str();
}

std::string report_csv(const Report& r) {
  std::ostringstream os;
  os << "method,runs,failed,total_loss_mean,total_loss_spread,normgain_pct_mean,normgain_pct_spread,"
        "exact_match_rate,rand_index_mean,rand_index_spread,relative_encoder\n";
  for (const ReportRow& row : r.rows) {
    os << row.method << ',' << row.runs << ',' << row.failed << ',' << plain(row.total_loss.mean, "%.9g") << ','
       << plain(row.total_loss.spread, "%.9g") << ',' << plain(row.normgain_pct.mean, "%.9g") << ','
       << plain(row.normgain_pct.spread, "%.9g") << ','
       << (row.exact_match_rate ? plain(*row.exact_match_rate, "%.9g") : "") << ','
       << (row.rand_index ? plain(row.rand_index->mean, "%.9g") : "") << ','
       << (row.rand_index ? plain(row.rand_index->spread, "%.9g") : "") << ','
       << (row.relative_encoder ? plain(*row.relative_encoder, "%.9g") : "") << '\n';
  }
  return os.str();
}

}  // namespace dmtg
