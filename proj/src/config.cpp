#include "dmtg/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace dmtg {

using nlohmann::json;

namespace {

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

// Reads the members of one JSON object and rejects any key nobody asked for.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  [[nodiscard]] bool has(const std::string& key) const { return j_.contains(key); }

  const json* raw(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void count(const std::string& key, std::size_t& out) {
    if (const json* v = raw(key)) {
      if (!v->is_number_integer() || v->get<std::int64_t>() < 0) throw ConfigError(field(key), "expected a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void u64(const std::string& key, std::uint64_t& out) {
    if (const json* v = raw(key)) out = as_u64(*v, field(key));
  }
  void real(const std::string& key, double& out) {
    if (const json* v = raw(key)) {
      if (!v->is_number()) throw ConfigError(field(key), "expected a number");
      out = v->get<double>();
    }
  }
  void boolean(const std::string& key, bool& out) {
    if (const json* v = raw(key)) {
      if (!v->is_boolean()) throw ConfigError(field(key), "expected true or false");
      out = v->get<bool>();
    }
  }
  void text(const std::string& key, std::string& out) {
    if (const json* v = raw(key)) {
      if (!v->is_string()) throw ConfigError(field(key), "expected a string");
      out = v->get<std::string>();
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()), "unknown key");
    }
  }

  [[nodiscard]] std::string field(const std::string& key) const { return join(path_, key); }

  static std::uint64_t as_u64(const json& v, const std::string& where) {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      throw ConfigError(where, "expected a non-negative integer");
    }
    return v.get<std::uint64_t>();
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename F>
auto wrap(const std::string& field, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(field, e.what());
  }
}

}  // namespace

json planted_spec_to_json(const PlantedSpec& spec) {
  json kinds = json::array();
  for (std::size_t t = 0; t < spec.n_tasks(); ++t) kinds.push_back(to_string(spec.kind(t)));
  return json{{"partition", spec.true_partition.to_string()},
              {"input_dim", spec.input_dim},
              {"latent_dim", spec.latent_dim},
              {"noise_std", spec.noise_std},
              {"weight_spread", spec.weight_spread},
              {"samples", {{"train", spec.samples.train}, {"val", spec.samples.val}, {"test", spec.samples.test}}},
              {"kinds", kinds},
              {"seed", spec.seed}};
}

PlantedSpec planted_spec_from_json(const json& j, const std::string& path) {
  PlantedSpec spec = PlantedSpec::default_spec();
  Fields f(j, path);
  std::string partition;
  f.text("partition", partition);
  if (!partition.empty()) {
    spec.true_partition = wrap(f.field("partition"), [&] { return Partition::parse(partition); });
  }
  f.count("input_dim", spec.input_dim);
  f.count("latent_dim", spec.latent_dim);
  f.real("noise_std", spec.noise_std);
  f.real("weight_spread", spec.weight_spread);
  if (const json* s = f.raw("samples")) {
    Fields fs(*s, f.field("samples"));
    fs.count("train", spec.samples.train);
    fs.count("val", spec.samples.val);
    fs.count("test", spec.samples.test);
    fs.finish();
  }
  if (const json* k = f.raw("kinds")) {
    if (!k->is_array()) throw ConfigError(f.field("kinds"), "expected an array of task kinds");
    spec.kinds.clear();
    for (const auto& v : *k) {
      if (!v.is_string()) throw ConfigError(f.field("kinds"), "expected strings");
      spec.kinds.push_back(wrap(f.field("kinds"), [&] { return task_kind_from_string(v.get<std::string>()); }));
    }
    if (spec.kinds.size() != spec.n_tasks()) throw ConfigError(f.field("kinds"), "need one kind per task");
    bool all_regression = true;
    for (auto kd : spec.kinds) all_regression = all_regression && kd == TaskKind::Regression;
    if (all_regression) spec.kinds.clear();
  }
  f.u64("seed", spec.seed);
  f.finish();
  spec.true_partition = spec.true_partition.canonical();
  wrap(path, [&] {
    spec.validate();
    return 0;
  });
  return spec;
}

// ---------------------------------------------------------------------------

void ExperimentConfig::validate() const {
  wrap("suite", [&] {
    suite.validate();
    return 0;
  });
  if (k_groups == 0) throw ConfigError("k_groups", "must be >= 1");
  if (main_epochs == 0) throw ConfigError("epochs.main", "must be >= 1");
  if (batch_size == 0) throw ConfigError("batch_size", "must be >= 1");
  if (!(adam.lr > 0.0)) throw ConfigError("optimizer.lr", "must be > 0");
  if (assignment_lr && !(*assignment_lr > 0.0)) throw ConfigError("optimizer.assignment_lr", "must be > 0");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) throw ConfigError("optimizer.beta1", "must lie in [0, 1)");
  if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) throw ConfigError("optimizer.beta2", "must lie in [0, 1)");
  if (!(adam.eps > 0.0)) throw ConfigError("optimizer.eps", "must be > 0");
  if (!(plateau_factor > 0.0 && plateau_factor <= 1.0)) throw ConfigError("optimizer.plateau_factor", "must lie in (0, 1]");
  wrap("temperature", [&] {
    temperature.validate();
    return 0;
  });
  if (arch.depth == 0) throw ConfigError("architecture.depth", "must be >= 1");
  if (arch.width == 0) throw ConfigError("architecture.width", "must be >= 1");
  if (arch.shared_layers >= arch.depth) throw ConfigError("architecture.shared_layers", "must be < depth");
  if (methods.empty()) throw ConfigError("methods", "at least one method is required");
  for (const auto& m : methods) {
    if (std::find(kMethods.begin(), kMethods.end(), m) == kMethods.end()) {
      throw ConfigError("methods", "unknown method '" + m + "'");
    }
  }
  if (seeds.empty()) throw ConfigError("seeds", "at least one seed is required");
  if ((has_method("oracle") || has_method("hoa")) && suite.n_tasks() > kEnumerationLimit) {
    throw ConfigError("methods", "oracle and hoa need at most " + std::to_string(kEnumerationLimit) + " tasks");
  }
}

PlantedSpec ExperimentConfig::suite_for(std::uint64_t seed) const {
  PlantedSpec s = suite;
  s.seed = suite_seed.value_or(seed);
  return s;
}

TrainingSetup ExperimentConfig::setup_for(std::uint64_t seed) const {
  TrainingSetup s;
  s.arch = arch;
  s.train.epochs = main_epochs;
  s.train.batch_size = batch_size;
  s.train.adam = adam;
  s.train.assignment_lr_scale = assignment_lr ? *assignment_lr / adam.lr : 1.0;
  s.train.plateau_patience = plateau_patience;
  s.train.plateau_factor = plateau_factor;
  s.train.temperature = temperature;
  s.pretrain_epochs = pretrain_epochs;
  s.seed = seed;
  return s;
}

bool ExperimentConfig::has_method(const std::string& m) const {
  return std::find(methods.begin(), methods.end(), m) != methods.end();
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  Fields f(j, "");
  if (const json* s = f.raw("suite")) {
    c.suite = planted_spec_from_json(*s, "suite");
    if (s->contains("seed")) c.suite_seed = c.suite.seed;
  }
  f.count("k_groups", c.k_groups);
  if (const json* e = f.raw("epochs")) {
    Fields fe(*e, "epochs");
    fe.count("pretrain", c.pretrain_epochs);
    fe.count("main", c.main_epochs);
    fe.finish();
  }
  f.count("batch_size", c.batch_size);
  if (const json* o = f.raw("optimizer")) {
    Fields fo(*o, "optimizer");
    fo.real("lr", c.adam.lr);
    if (fo.has("assignment_lr")) {
      double v = 0.0;
      fo.real("assignment_lr", v);
      c.assignment_lr = v;
    }
    fo.real("beta1", c.adam.beta1);
    fo.real("beta2", c.adam.beta2);
    fo.real("eps", c.adam.eps);
    fo.count("plateau_patience", c.plateau_patience);
    fo.real("plateau_factor", c.plateau_factor);
    fo.finish();
  }
  if (const json* t = f.raw("temperature")) {
    Fields ft(*t, "temperature");
    std::string kind = "fixed";
    ft.text("kind", kind);
    TemperatureSchedule s;
    if (kind == "fixed") {
      s.kind = TemperatureSchedule::Kind::Fixed;
      ft.real("tau", s.tau);
    } else if (kind == "anneal") {
      s.kind = TemperatureSchedule::Kind::Anneal;
      ft.real("start", s.tau_start);
      ft.real("end", s.tau_end);
      ft.real("factor", s.decay_factor);
      ft.count("epochs_per_decay", s.epochs_per_decay);
    } else {
      throw ConfigError("temperature.kind", "expected 'fixed' or 'anneal'");
    }
    ft.finish();
    c.temperature = s;
  }
  if (const json* a = f.raw("architecture")) {
    Fields fa(*a, "architecture");
    fa.count("depth", c.arch.depth);
    fa.count("width", c.arch.width);
    fa.count("shared_layers", c.arch.shared_layers);
    fa.finish();
  }
  if (const json* m = f.raw("methods")) {
    if (!m->is_array()) throw ConfigError("methods", "expected an array of method names");
    for (const auto& v : *m) {
      if (!v.is_string()) throw ConfigError("methods", "expected strings");
      c.methods.push_back(v.get<std::string>());
    }
  }
  if (const json* s = f.raw("seeds")) {
    if (!s->is_array()) throw ConfigError("seeds", "expected an array of integers");
    for (const auto& v : *s) c.seeds.push_back(Fields::as_u64(v, "seeds"));
  }
  std::string out;
  f.text("output_dir", out);
  if (!out.empty()) c.output_dir = out;
  f.boolean("record_wallclock", c.record_wallclock);
  f.finish();
  c.validate();
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  json suite = planted_spec_to_json(c.suite);
  if (c.suite_seed) {
    suite["seed"] = *c.suite_seed;
  } else {
    suite.erase("seed");
  }
  json temp;
  if (c.temperature.kind == TemperatureSchedule::Kind::Fixed) {
    temp = {{"kind", "fixed"}, {"tau", c.temperature.tau}};
  } else {
    temp = {{"kind", "anneal"},
            {"start", c.temperature.tau_start},
            {"end", c.temperature.tau_end},
            {"factor", c.temperature.decay_factor},
            {"epochs_per_decay", c.temperature.epochs_per_decay}};
  }
  return json{{"suite", suite},
              {"k_groups", c.k_groups},
              {"epochs", {{"pretrain", c.pretrain_epochs}, {"main", c.main_epochs}}},
              {"batch_size", c.batch_size},
              {"optimizer",
               {{"lr", c.adam.lr},
                {"assignment_lr", c.assignment_lr.value_or(c.adam.lr)},
                {"beta1", c.adam.beta1},
                {"beta2", c.adam.beta2},
                {"eps", c.adam.eps},
                {"plateau_patience", c.plateau_patience},
                {"plateau_factor", c.plateau_factor}}},
              {"temperature", temp},
              {"architecture",
               {{"depth", c.arch.depth}, {"width", c.arch.width}, {"shared_layers", c.arch.shared_layers}}},
              {"methods", c.methods},
              {"seeds", c.seeds},
              {"output_dir", c.output_dir.string()},
              {"record_wallclock", c.record_wallclock}};
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("<file>", "cannot open " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError("<file>", std::string("invalid JSON: ") + e.what());
  }
  return config_from_json(j);
}

std::string config_hash(const ExperimentConfig& c) {
  json j = config_to_json(c);
  j.erase("output_dir");
  const std::string text = j.dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace dmtg
