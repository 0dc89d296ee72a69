#include "cbd/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "cbd/errors.hpp"

namespace cbd {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

long to_int(const std::string& key, const std::string& v) {
  long out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("config: '" + key + "' expects an integer, got '" + v + "'");
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
  }
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void ExperimentConfig::validate() const {
  if (dataset.classes < 2) throw ConfigError("config: dataset.classes must be at least 2");
  if (dataset.n_train < 2 || dataset.n_test < 1)
    throw ConfigError("config: dataset splits too small");
  if (attack.kind != "patch" && attack.kind != "blended" && attack.kind != "sig")
    throw ConfigError("config: attack.kind must be patch, blended or sig");
  if (attack.rate < 0.0 || attack.rate > 1.0)
    throw ConfigError("config: attack.rate must be in [0,1]");
  if (attack.target < 0 || attack.target >= dataset.classes)
    throw ConfigError("config: attack.target out of class range");
  if (attack.position != "fixed" && attack.position != "random")
    throw ConfigError("config: attack.position must be fixed or random");
  if (attack.size != "fixed" && attack.size != "random")
    throw ConfigError("config: attack.size must be fixed or random");
  if (attack.count < 1 || attack.count > 3)
    throw ConfigError("config: attack.count must be 1, 2 or 3");
  if (network.conv1 < 1 || network.conv2 < 1) throw ConfigError("config: bad channel counts");
  if (train.epochs < 0 || train.batch_size < 2 || !(train.lr > 0.0))
    throw ConfigError("config: bad training hyperparameters");
  if (!(detect.threshold >= 0.0 && detect.threshold < 1.0))
    throw ConfigError("config: detect.threshold must be in [0,1)");
  if (!(detect.cam_threshold > 0.0 && detect.cam_threshold < 1.0))
    throw ConfigError("config: detect.cam_threshold must be in (0,1)");
  if (detect.dilation < 0.0) throw ConfigError("config: detect.dilation must be non-negative");
  if (detect.n_poisoned < 1 || detect.n_clean < 1 || detect.n_sweep < 1)
    throw ConfigError("config: detection batch sizes must be positive");
  if (repair.per_class < 1 || repair.epochs < 0 || repair.passes < 1 || !(repair.lr_scale > 0.0))
    throw ConfigError("config: bad repair parameters");
  detect_params().de.validate();
  repair_method_from_string(repair.method);
}

TriggerSpec ExperimentConfig::trigger_spec() const {
  TriggerSpec spec;
  if (attack.kind == "patch") {
    spec = TriggerSpec::checker3x3();
    spec.position_policy =
        attack.position == "fixed" ? PositionPolicy::fixed : PositionPolicy::random;
    spec.fixed_row = attack.row;
    spec.fixed_col = attack.col;
    spec.size_policy = attack.size == "fixed" ? SizePolicy::fixed : SizePolicy::random;
    spec.min_size = attack.min_size;
    spec.max_size = attack.max_size;
    spec.count = attack.count;
  } else if (attack.kind == "blended") {
    spec = TriggerSpec::blended_noise(static_cast<float>(attack.blend_weight));
  } else {
    spec = TriggerSpec::sinusoid(static_cast<float>(attack.sig_amplitude),
                                 static_cast<float>(attack.sig_frequency));
  }
  return spec;
}

PoisonPolicy ExperimentConfig::poison_policy() const {
  return PoisonPolicy{attack.rate, attack.target, 0};
}

DetectParams ExperimentConfig::detect_params() const {
  DetectParams p;
  p.de.population_size = detect.population;
  p.de.alpha = detect.alpha;
  p.de.crossover_p = detect.crossover;
  p.de.max_generations = detect.max_generations;
  p.de.stagnation_limit = detect.stagnation;
  p.de.aux_count = detect.aux_count;
  p.cam_threshold = detect.cam_threshold;
  p.dilation_frac = detect.dilation;
  p.verdict_threshold = detect.threshold;
  return p;
}

RepairMethod ExperimentConfig::repair_method() const {
  return repair_method_from_string(repair.method);
}

std::string ExperimentConfig::to_text() const {
  std::ostringstream os;
  os << "seed = " << seed << "\n";
  os << "threads = " << threads << "\n";
  os << "\n[dataset]\n";
  os << "classes = " << dataset.classes << "\n";
  os << "n_train = " << dataset.n_train << "\n";
  os << "n_test = " << dataset.n_test << "\n";
  os << "\n[attack]\n";
  os << "kind = " << attack.kind << "\n";
  os << "rate = " << fmt(attack.rate) << "\n";
  os << "target = " << attack.target << "\n";
  os << "position = " << attack.position << "\n";
  os << "row = " << attack.row << "\n";
  os << "col = " << attack.col << "\n";
  os << "size = " << attack.size << "\n";
  os << "min_size = " << attack.min_size << "\n";
  os << "max_size = " << attack.max_size << "\n";
  os << "count = " << attack.count << "\n";
  os << "blend_weight = " << fmt(attack.blend_weight) << "\n";
  os << "sig_amplitude = " << fmt(attack.sig_amplitude) << "\n";
  os << "sig_frequency = " << fmt(attack.sig_frequency) << "\n";
  os << "\n[network]\n";
  os << "conv1 = " << network.conv1 << "\n";
  os << "conv2 = " << network.conv2 << "\n";
  os << "bn_momentum = " << fmt(network.bn_momentum) << "\n";
  os << "bn_epsilon = " << fmt(network.bn_epsilon) << "\n";
  os << "\n[train]\n";
  os << "epochs = " << train.epochs << "\n";
  os << "lr = " << fmt(train.lr) << "\n";
  os << "batch_size = " << train.batch_size << "\n";
  os << "\n[detect]\n";
  os << "population = " << detect.population << "\n";
  os << "alpha = " << fmt(detect.alpha) << "\n";
  os << "crossover = " << fmt(detect.crossover) << "\n";
  os << "max_generations = " << detect.max_generations << "\n";
  os << "stagnation = " << detect.stagnation << "\n";
  os << "aux_count = " << detect.aux_count << "\n";
  os << "threshold = " << fmt(detect.threshold) << "\n";
  os << "cam_threshold = " << fmt(detect.cam_threshold) << "\n";
  os << "dilation = " << fmt(detect.dilation) << "\n";
  os << "n_poisoned = " << detect.n_poisoned << "\n";
  os << "n_clean = " << detect.n_clean << "\n";
  os << "n_sweep = " << detect.n_sweep << "\n";
  os << "\n[repair]\n";
  os << "method = " << repair.method << "\n";
  os << "per_class = " << repair.per_class << "\n";
  os << "epochs = " << repair.epochs << "\n";
  os << "lr_scale = " << fmt(repair.lr_scale) << "\n";
  os << "passes = " << repair.passes << "\n";
  return os.str();
}

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream is(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw ConfigError("config: bad section header at line " + std::to_string(line_no));
      section = t.substr(1, t.size() - 2);
      if (section != "dataset" && section != "attack" && section != "network" &&
          section != "train" && section != "detect" && section != "repair")
        throw ConfigError("config: unknown section '" + section + "'");
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: expected key = value at line " + std::to_string(line_no));
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    const std::string qual = section.empty() ? key : section + "." + key;

    if (qual == "seed") cfg.seed = static_cast<std::uint64_t>(to_int(qual, value));
    else if (qual == "threads") cfg.threads = static_cast<int>(to_int(qual, value));
    else if (qual == "dataset.classes") cfg.dataset.classes = static_cast<int>(to_int(qual, value));
    else if (qual == "dataset.n_train") cfg.dataset.n_train = static_cast<int>(to_int(qual, value));
    else if (qual == "dataset.n_test") cfg.dataset.n_test = static_cast<int>(to_int(qual, value));
    else if (qual == "attack.kind") cfg.attack.kind = value;
    else if (qual == "attack.rate") cfg.attack.rate = to_double(qual, value);
    else if (qual == "attack.target") cfg.attack.target = static_cast<int>(to_int(qual, value));
    else if (qual == "attack.position") cfg.attack.position = value;
    else if (qual == "attack.row") cfg.attack.row = static_cast<int>(to_int(qual, value));
    else if (qual == "attack.col") cfg.attack.col = static_cast<int>(to_int(qual, value));
    else if (qual == "attack.size") cfg.attack.size = value;
    else if (qual == "attack.min_size") cfg.attack.min_size = static_cast<int>(to_int(qual, value));
    else if (qual == "attack.max_size") cfg.attack.max_size = static_cast<int>(to_int(qual, value));
    else if (qual == "attack.count") cfg.attack.count = static_cast<int>(to_int(qual, value));
    else if (qual == "attack.blend_weight") cfg.attack.blend_weight = to_double(qual, value);
    else if (qual == "attack.sig_amplitude") cfg.attack.sig_amplitude = to_double(qual, value);
    else if (qual == "attack.sig_frequency") cfg.attack.sig_frequency = to_double(qual, value);
    else if (qual == "network.conv1") cfg.network.conv1 = static_cast<int>(to_int(qual, value));
    else if (qual == "network.conv2") cfg.network.conv2 = static_cast<int>(to_int(qual, value));
    else if (qual == "network.bn_momentum") cfg.network.bn_momentum = to_double(qual, value);
    else if (qual == "network.bn_epsilon") cfg.network.bn_epsilon = to_double(qual, value);
    else if (qual == "train.epochs") cfg.train.epochs = static_cast<int>(to_int(qual, value));
    else if (qual == "train.lr") cfg.train.lr = to_double(qual, value);
    else if (qual == "train.batch_size") cfg.train.batch_size = static_cast<int>(to_int(qual, value));
    else if (qual == "detect.population") cfg.detect.population = static_cast<int>(to_int(qual, value));
    else if (qual == "detect.alpha") cfg.detect.alpha = to_double(qual, value);
    else if (qual == "detect.crossover") cfg.detect.crossover = to_double(qual, value);
    else if (qual == "detect.max_generations") cfg.detect.max_generations = static_cast<int>(to_int(qual, value));
    else if (qual == "detect.stagnation") cfg.detect.stagnation = static_cast<int>(to_int(qual, value));
    else if (qual == "detect.aux_count") cfg.detect.aux_count = static_cast<int>(to_int(qual, value));
    else if (qual == "detect.threshold") cfg.detect.threshold = to_double(qual, value);
    else if (qual == "detect.cam_threshold") cfg.detect.cam_threshold = to_double(qual, value);
    else if (qual == "detect.dilation") cfg.detect.dilation = to_double(qual, value);
    else if (qual == "detect.n_poisoned") cfg.detect.n_poisoned = static_cast<int>(to_int(qual, value));
    else if (qual == "detect.n_clean") cfg.detect.n_clean = static_cast<int>(to_int(qual, value));
    else if (qual == "detect.n_sweep") cfg.detect.n_sweep = static_cast<int>(to_int(qual, value));
    else if (qual == "repair.method") cfg.repair.method = value;
    else if (qual == "repair.per_class") cfg.repair.per_class = static_cast<int>(to_int(qual, value));
    else if (qual == "repair.epochs") cfg.repair.epochs = static_cast<int>(to_int(qual, value));
    else if (qual == "repair.lr_scale") cfg.repair.lr_scale = to_double(qual, value);
    else if (qual == "repair.passes") cfg.repair.passes = static_cast<int>(to_int(qual, value));
    else throw ConfigError("config: unknown key '" + qual + "'");
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse(text);
}

}  // namespace cbd
