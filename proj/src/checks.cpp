#include "dmtg/checks.hpp"

#include <cmath>
#include <functional>
#include <sstream>

#include "dmtg/baselines.hpp"
#include "dmtg/grouping.hpp"
#include "dmtg/metrics.hpp"

namespace dmtg {

namespace {

CheckResult check(const std::string& name, const std::function<std::string()>& body) {
  try {
    const std::string failure = body();
    return {name, failure.empty(), failure};
  } catch (const std::exception& e) {
    return {name, false, std::string("threw: ") + e.what()};
  }
}

std::string masked_loss_gradient() {
  PlantedSpec spec;
  spec.true_partition = Partition{{0, 0, 1}};
  spec.input_dim = 4;
  spec.latent_dim = 2;
  spec.samples = {16, 8, 8};
  spec.seed = 3;
  const TaskSuite suite = generate(spec);
  Architecture arch;
  arch.depth = 1;
  arch.width = 2;
  GroupModel model(4, suite.loss_kinds(), 2, arch, 11);
  AssignmentMatrix s = AssignmentMatrix::uniform(3, 2);
  s.s.mutable_values()[1] = 0.4;
  Rng rng(5);
  const ad::Tensor g = sample_gumbel(3, 2, rng);
  const Batch batch = full_batch(suite.train);
  ad::Tape tape;
  auto loss = [&] {
    ad::Tape t;
    const double v = masked_loss(t, model.forward_loss_matrix(t, batch), gumbel_softmax(t, s.s, g, 0.7)).item();
    t.clear();
    return v;
  };
  tape.backward(masked_loss(tape, model.forward_loss_matrix(tape, batch), gumbel_softmax(tape, s.s, g, 0.7)));
  std::vector<ad::Tensor> all = model.parameters();
  all.push_back(s.s);
  double worst = 0.0;
  for (ad::Tensor& p : all) {
    const std::vector<double> num = ad::numeric_gradient(p, loss);
    for (std::size_t i = 0; i < num.size(); ++i) worst = std::max(worst, ad::relative_error(p.grad()[i], num[i], 1e-6));
  }
  if (worst < 1e-4) return "";
  std::ostringstream os;
  os << "max relative error " << worst;
  return os.str();
}

std::string relaxation() {
  Rng rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(4), k = 2 + rng.below(4);
    std::vector<double> sv(n * k);
    for (auto& v : sv) v = 4.0 * rng.normal();
    const ad::Tensor s = ad::Tensor::from(n, k, sv);
    const ad::Tensor g = sample_gumbel(n, k, rng);
    const double tau = std::exp(rng.normal());
    ad::Tape tape;
    const ad::Tensor z = gumbel_softmax(tape, s, g, tau);
    for (std::size_t i = 0; i < n; ++i) {
      double sum = 0.0;
      for (std::size_t c = 0; c < k; ++c) sum += z.at(i, c);
      if (std::abs(sum - 1.0) > 1e-9) return "row does not sum to 1";
    }
    tape.clear();
  }
  return "";
}

std::string enumeration() {
  // Stirling numbers of the second kind by the usual recurrence.
  for (std::size_t n = 1; n <= 8; ++n) {
    std::vector<std::vector<std::uint64_t>> st(n + 1, std::vector<std::uint64_t>(n + 1, 0));
    st[0][0] = 1;
    for (std::size_t a = 1; a <= n; ++a) {
      for (std::size_t b = 1; b <= a; ++b) st[a][b] = b * st[a - 1][b] + st[a - 1][b - 1];
    }
    std::uint64_t expect = 0;
    for (std::size_t k = 1; k <= n; ++k) {
      expect += st[n][k];
      if (enumerate_partitions(n, k).size() != expect) {
        return "count mismatch at N=" + std::to_string(n) + ", K=" + std::to_string(k);
      }
    }
  }
  return "";
}

std::string metrics() {
  const double ours[] = {100.00, -0.05, 19.64, 99.63, 100.00};
  double mean = 0.0;
  for (double v : ours) mean += v / 5.0;
  if (std::abs(mean - 63.85) > 0.05) return "mean of per-task gains off";
  const double mtl[] = {6.74}, stl[] = {7.60};
  if (std::abs(norm_gain_error(stl, mtl).mean_pct - (-12.78)) > 0.05) return "error gain off";
  return "";
}

std::string determinism() {
  PlantedSpec spec = PlantedSpec::default_spec();
  spec.samples = {200, 50, 50};
  spec.seed = 9;
  const TaskSuite a = generate(spec), b = generate(spec);
  if (!(a.train == b.train) || !(a.val == b.val) || !(a.task_weights == b.task_weights)) return "suite differs";
  return "";
}

}  // namespace

std::vector<CheckResult> quick_checks() {
  return {check("masked-loss gradient vs finite differences", masked_loss_gradient),
          check("relaxed rows on the simplex", relaxation),
          check("partition counts vs Stirling sums", enumeration),
          check("normalized gain golden values", metrics),
          check("suite regeneration determinism", determinism)};
}

}  // namespace dmtg
