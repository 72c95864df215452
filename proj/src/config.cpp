#include "shadowalign/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "shadowalign/error.hpp"
#include "shadowalign/io.hpp"

namespace shadowalign {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

KeyValueConfig KeyValueConfig::parse(const std::string& text, const std::string& origin) {
  KeyValueConfig kv;
  kv.origin_ = origin;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    kv.values_[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  return parse(text, path.string());
}

void KeyValueConfig::set(const std::string& key, const std::string& value) { values_[key] = value; }

bool KeyValueConfig::has(const std::string& key) const { return values_.count(key) > 0; }

std::optional<std::string> KeyValueConfig::get(const std::string& key) const {
  read_.insert(key);
  auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

std::string KeyValueConfig::str(const std::string& key, const std::string& fallback) const {
  return get(key).value_or(fallback);
}

std::size_t KeyValueConfig::size(const std::string& key, std::size_t fallback) const {
  return static_cast<std::size_t>(u64(key, fallback));
}

std::uint64_t KeyValueConfig::u64(const std::string& key, std::uint64_t fallback) const {
  auto v = get(key);
  if (!v) return fallback;
  std::size_t used = 0;
  std::uint64_t out = 0;
  try {
    if (!v->empty() && (*v)[0] == '-') throw std::invalid_argument("negative");
    out = std::stoull(*v, &used, 0);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v->size() || v->empty()) throw ConfigError(origin_ + ": " + key + " must be a non-negative integer, got '" + *v + "'");
  return out;
}

double KeyValueConfig::real(const std::string& key, double fallback) const {
  auto v = get(key);
  if (!v) return fallback;
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(*v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v->size() || v->empty()) throw ConfigError(origin_ + ": " + key + " must be a number, got '" + *v + "'");
  return out;
}

bool KeyValueConfig::flag(const std::string& key, bool fallback) const {
  auto v = get(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") return true;
  if (*v == "false" || *v == "0" || *v == "no" || *v == "off") return false;
  throw ConfigError(origin_ + ": " + key + " must be true or false, got '" + *v + "'");
}

std::vector<std::string> KeyValueConfig::list(const std::string& key, const std::vector<std::string>& fallback) const {
  auto v = get(key);
  if (!v) return fallback;
  std::vector<std::string> out;
  std::stringstream ss(*v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<std::string> KeyValueConfig::unused_keys() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_)
    if (!read_.count(k)) out.push_back(k);
  return out;
}

std::string to_string(Scenario s) { return "S" + std::to_string(static_cast<int>(s) + 1); }

Scenario parse_scenario(const std::string& s) {
  if (s.size() == 2 && (s[0] == 'S' || s[0] == 's') && s[1] >= '1' && s[1] <= '9') {
    return static_cast<Scenario>(s[1] - '1');
  }
  throw ConfigError("unknown scenario '" + s + "' (S1..S9)");
}

std::string scenario_description(Scenario s) {
  switch (s) {
    case Scenario::S1: return "target model features";
    case Scenario::S2: return "shadows sharing the target weight init";
    case Scenario::S3: return "shadows, all seeds different";
    case Scenario::S4: return "shadows + weight sorting";
    case Scenario::S5: return "shadows + bottom-up weight re-alignment";
    case Scenario::S6: return "shadows + top-down weight re-alignment";
    case Scenario::S7: return "shadows + activation re-alignment";
    case Scenario::S8: return "shadows + correlation re-alignment";
    case Scenario::S9: return "shadows re-aligned after init";
  }
  return "";
}

ExperimentConfig ExperimentConfig::from(const KeyValueConfig& kv) {
  ExperimentConfig c;
  c.arch = kv.str("arch", c.arch);

  const std::string source = kv.str("data.source", "synthetic");
  if (source == "synthetic") c.data_source = DataSource::Synthetic;
  else if (source == "csv") c.data_source = DataSource::Csv;
  else if (source == "tensor") c.data_source = DataSource::Tensor;
  else throw ConfigError("data.source must be synthetic, csv or tensor");
  c.data_path = kv.str("data.path", "");
  c.synthetic.kind = parse_synthetic_kind(kv.str("data.kind", to_string(c.synthetic.kind)));
  c.synthetic.classes = kv.size("data.classes", c.synthetic.classes);
  c.synthetic.dim = kv.size("data.dim", c.synthetic.dim);
  c.synthetic.image_size = kv.size("data.image_size", c.synthetic.image_size);
  c.synthetic.per_class = kv.size("data.per_class", c.synthetic.per_class);
  c.synthetic.separation = kv.real("data.separation", c.synthetic.separation);
  c.synthetic.label_noise = kv.real("data.label_noise", c.synthetic.label_noise);

  c.partition.n_val = kv.size("partition.n_val", c.partition.n_val);
  c.partition.adversary_size = kv.size("partition.adversary_size", c.partition.adversary_size);
  c.partition.target_size = kv.size("partition.target_size", c.partition.target_size);
  const std::string overlap = kv.str("partition.overlap", "disjoint");
  if (overlap == "disjoint") c.partition.overlap = Overlap::Disjoint;
  else if (overlap == "identical") c.partition.overlap = Overlap::Identical;
  else throw ConfigError("partition.overlap must be disjoint or identical");
  c.partition.train_size = kv.size("partition.train_size", c.partition.train_size);
  c.partition.num_shadows = kv.size("partition.num_shadows", c.partition.num_shadows);

  c.attack_train = kv.size("attack.n_train", c.attack_train);
  c.attack_val = kv.size("attack.n_val", c.attack_val);
  c.attack_test = kv.size("attack.n_test", c.attack_test);
  const std::string vs = kv.str("attack.validation_shadow", "first");
  if (vs == "first") c.validation_shadow = ValidationShadow::First;
  else if (vs == "median") c.validation_shadow = ValidationShadow::Median;
  else throw ConfigError("attack.validation_shadow must be first or median");

  c.train.batch_size = kv.size("train.batch_size", c.train.batch_size);
  c.train.lr = static_cast<float>(kv.real("train.lr", c.train.lr));
  c.train.lr_divisor = static_cast<float>(kv.real("train.lr_divisor", c.train.lr_divisor));
  c.train.patience = kv.size("train.patience", c.train.patience);
  c.train.min_lr = static_cast<float>(kv.real("train.min_lr", c.train.min_lr));
  c.train.max_epochs = kv.size("train.max_epochs", c.train.max_epochs);

  c.features = kv.str("features", c.features);
  c.mc.batch_size = kv.size("mc.batch_size", c.mc.batch_size);
  c.mc.lr = static_cast<float>(kv.real("mc.lr", c.mc.lr));
  c.mc.min_lr = static_cast<float>(kv.real("mc.min_lr", c.mc.min_lr));
  c.mc.max_epochs = kv.size("mc.max_epochs", c.mc.max_epochs);
  c.mc.grad_kernel = kv.size("mc.grad_kernel", c.mc.grad_kernel);
  c.mc.grad_stride = kv.size("mc.grad_stride", c.mc.grad_stride);
  c.mc.grad_channels = kv.size("mc.grad_channels", c.mc.grad_channels);
  c.mc.normalize_inputs = kv.flag("mc.normalize", c.mc.normalize_inputs);

  std::vector<std::string> scen = kv.list("scenarios", {});
  if (scen.empty()) scen = kv.list("scenario", {"S3"});
  c.scenarios.clear();
  for (const auto& s : scen) c.scenarios.push_back(parse_scenario(s));
  try {
    c.realign_method = parse_realign_method(kv.str("realign.method", to_string(c.realign_method)));
    c.realign_direction = parse_realign_direction(kv.str("realign.direction", to_string(c.realign_direction)));
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }

  c.probe_records = kv.size("metrics.probe_records", c.probe_records);
  c.pixels = kv.size("metrics.pixels", c.pixels);
  c.baseline_trials = kv.size("metrics.baseline_trials", c.baseline_trials);
  c.cause_conditions = kv.list("cause.conditions", {});

  c.seed = kv.u64("seed", c.seed);
  c.repetitions = kv.size("repetitions", c.repetitions);
  c.jobs = kv.size("jobs", c.jobs);
  c.cache_dir = kv.str("cache_dir", "");

  if (auto unused = kv.unused_keys(); !unused.empty()) throw ConfigError("unknown config key '" + unused.front() + "'");
  c.validate();
  return c;
}

void ExperimentConfig::validate() const {
  Model m;
  try {
    m = build_model(arch);
  } catch (const Error& e) {
    throw ConfigError(std::string("arch: ") + e.what());
  }
  try {
    train.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }
  if (data_source == DataSource::Synthetic) {
    synthetic.validate();
    if (synthetic.classes != m.num_classes()) {
      throw ConfigError("data.classes (" + std::to_string(synthetic.classes) + ") differs from the model's output width (" +
                        std::to_string(m.num_classes()) + ")");
    }
  } else if (data_path.empty()) {
    throw ConfigError("data.path is required for csv and tensor sources");
  }
  if (repetitions == 0) throw ConfigError("repetitions must be at least 1");
  if (jobs == 0) throw ConfigError("jobs must be at least 1");
  if (scenarios.empty()) throw ConfigError("no scenario selected");
  if (partition.num_shadows == 0) throw ConfigError("partition.num_shadows must be at least 1");
  if (attack_test < 2 || attack_val < 2 || attack_train < 2) throw ConfigError("attack set sizes must be at least 2");
  if (probe_records < 2) throw ConfigError("metrics.probe_records must be at least 2");
  if (probe_records > partition.n_val) throw ConfigError("metrics.probe_records exceeds partition.n_val (probes come from V2)");
  try {
    FeatureSpec::parse(features, m.num_param_layers()).validate(m);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(std::string("features: ") + e.what());
  }
  for (auto s : scenarios)
    if (s != Scenario::S1 && partition.num_shadows < 2) {
      throw ConfigError(to_string(s) + " needs at least two shadow models (one is held out for validation)");
    }
}

std::string ExperimentConfig::to_text() const {
  std::ostringstream os;
  os << "arch = " << arch << '\n';
  os << "data.source = " << (data_source == DataSource::Synthetic ? "synthetic" : data_source == DataSource::Csv ? "csv" : "tensor")
     << '\n';
  if (!data_path.empty()) os << "data.path = " << data_path.string() << '\n';
  os << "data.kind = " << to_string(synthetic.kind) << '\n';
  os << "data.classes = " << synthetic.classes << '\n';
  os << "data.dim = " << synthetic.dim << '\n';
  os << "data.image_size = " << synthetic.image_size << '\n';
  os << "data.per_class = " << synthetic.per_class << '\n';
  os << "data.separation = " << fmt(synthetic.separation) << '\n';
  os << "data.label_noise = " << fmt(synthetic.label_noise) << '\n';
  os << "partition.n_val = " << partition.n_val << '\n';
  os << "partition.adversary_size = " << partition.adversary_size << '\n';
  os << "partition.target_size = " << partition.target_size << '\n';
  os << "partition.overlap = " << (partition.overlap == Overlap::Disjoint ? "disjoint" : "identical") << '\n';
  os << "partition.train_size = " << partition.train_size << '\n';
  os << "partition.num_shadows = " << partition.num_shadows << '\n';
  os << "attack.n_train = " << attack_train << '\n';
  os << "attack.n_val = " << attack_val << '\n';
  os << "attack.n_test = " << attack_test << '\n';
  os << "attack.validation_shadow = " << (validation_shadow == ValidationShadow::First ? "first" : "median") << '\n';
  os << "train.batch_size = " << train.batch_size << '\n';
  os << "train.lr = " << fmt(train.lr) << '\n';
  os << "train.lr_divisor = " << fmt(train.lr_divisor) << '\n';
  os << "train.patience = " << train.patience << '\n';
  os << "train.min_lr = " << fmt(train.min_lr) << '\n';
  os << "train.max_epochs = " << train.max_epochs << '\n';
  os << "features = " << features << '\n';
  os << "mc.batch_size = " << mc.batch_size << '\n';
  os << "mc.lr = " << fmt(mc.lr) << '\n';
  os << "mc.min_lr = " << fmt(mc.min_lr) << '\n';
  os << "mc.max_epochs = " << mc.max_epochs << '\n';
  os << "mc.grad_kernel = " << mc.grad_kernel << '\n';
  os << "mc.grad_stride = " << mc.grad_stride << '\n';
  os << "mc.grad_channels = " << mc.grad_channels << '\n';
  os << "mc.normalize = " << (mc.normalize_inputs ? "true" : "false") << '\n';
  os << "scenarios = ";
  for (std::size_t i = 0; i < scenarios.size(); ++i) os << (i ? "," : "") << to_string(scenarios[i]);
  os << '\n';
  os << "realign.method = " << to_string(realign_method) << '\n';
  os << "realign.direction = " << to_string(realign_direction) << '\n';
  os << "metrics.probe_records = " << probe_records << '\n';
  os << "metrics.pixels = " << pixels << '\n';
  os << "metrics.baseline_trials = " << baseline_trials << '\n';
  if (!cause_conditions.empty()) {
    os << "cause.conditions = ";
    for (std::size_t i = 0; i < cause_conditions.size(); ++i) os << (i ? "," : "") << cause_conditions[i];
    os << '\n';
  }
  os << "seed = " << seed << '\n';
  os << "repetitions = " << repetitions << '\n';
  os << "jobs = " << jobs << '\n';
  if (!cache_dir.empty()) os << "cache_dir = " << cache_dir.string() << '\n';
  return os.str();
}

}  // namespace shadowalign
