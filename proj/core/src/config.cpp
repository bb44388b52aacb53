#include "tras/config.hpp"

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

namespace tras {

namespace {

using SectionMap = std::map<std::string, std::map<std::string, std::string>>;

std::string trim(const std::string& s) {
  std::size_t begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  std::size_t end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

SectionMap parse_ini(const std::string& text) {
  SectionMap sections;
  std::istringstream in(text);
  std::string line;
  std::string current;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#' || stripped[0] == ';') continue;
    if (stripped.front() == '[') {
      if (stripped.back() != ']') {
        throw ConfigError("config line " + std::to_string(line_number) + ": malformed section");
      }
      current = trim(stripped.substr(1, stripped.size() - 2));
      sections[current];
      continue;
    }
    std::size_t eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_number) + ": expected key = value");
    }
    std::string key = trim(stripped.substr(0, eq));
    std::string value = trim(stripped.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("config line " + std::to_string(line_number) + ": empty key");
    }
    if (current.empty()) {
      throw ConfigError("config line " + std::to_string(line_number) + ": key '" + key +
                        "' outside any section");
    }
    sections[current][key] = value;
  }
  return sections;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const std::string& expected) {
  throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as " + expected);
}

double to_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    double v = std::stod(value, &used);
    if (used != value.size()) bad_value(key, value, "a number");
    return v;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    bad_value(key, value, "a number");
  }
}

std::int64_t to_int64(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    long long v = std::stoll(value, &used);
    if (used != value.size()) bad_value(key, value, "an integer");
    return v;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    bad_value(key, value, "an integer");
  }
}

int to_int(const std::string& key, const std::string& value) {
  return static_cast<int>(to_int64(key, value));
}

std::uint64_t to_uint64(const std::string& key, const std::string& value) {
  std::int64_t v = to_int64(key, value);
  if (v < 0) bad_value(key, value, "a nonnegative integer");
  return static_cast<std::uint64_t>(v);
}

bool to_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  bad_value(key, value, "a boolean (true/false)");
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> parts;
  std::string token;
  std::istringstream in(value);
  while (std::getline(in, token, ',')) {
    token = trim(token);
    if (!token.empty()) parts.push_back(token);
  }
  return parts;
}

template <typename T, typename F>
std::vector<T> to_list(const std::string& key, const std::string& value, F convert) {
  std::vector<T> out;
  for (const std::string& part : split_list(value)) out.push_back(convert(key, part));
  return out;
}

void apply_dataset_key(DatasetConfig& ds, const std::string& key, const std::string& value) {
  if (key == "type") {
    if (value != "synthetic" && value != "csv") {
      throw ConfigError("config key 'dataset.type': expected synthetic or csv, got '" + value +
                        "'");
    }
    ds.type = value;
  } else if (key == "n1") {
    ds.n1 = to_int64("dataset.n1", value);
  } else if (key == "gamma") {
    ds.gamma = to_double("dataset.gamma", value);
  } else if (key == "beta") {
    ds.beta = to_double("dataset.beta", value);
  } else if (key == "num_classes") {
    ds.num_classes = to_int("dataset.num_classes", value);
  } else if (key == "feature_dim") {
    ds.feature_dim = to_int("dataset.feature_dim", value);
  } else if (key == "radius") {
    ds.radius = to_double("dataset.radius", value);
  } else if (key == "sigma") {
    ds.sigma = to_double("dataset.sigma", value);
  } else if (key == "seed") {
    ds.seed = to_uint64("dataset.seed", value);
  } else if (key == "labeled_path") {
    ds.labeled_path = value;
  } else if (key == "unlabeled_path") {
    ds.unlabeled_path = value;
  } else if (key == "test_path") {
    ds.test_path = value;
  } else {
    throw ConfigError("unknown config key 'dataset." + key + "'");
  }
}

void apply_train_key(TrainConfig& tc, std::vector<std::uint64_t>& seeds, const std::string& key,
                     const std::string& value) {
  if (key == "A") {
    tc.A = to_double("train.A", value);
  } else if (key == "B") {
    tc.B = to_double("train.B", value);
  } else if (key == "tau_labeled") {
    tc.tau_labeled = to_double("train.tau_labeled", value);
  } else if (key == "threshold") {
    tc.threshold = to_double("train.threshold", value);
  } else if (key == "warmup_epochs") {
    tc.warmup_epochs = to_int("train.warmup_epochs", value);
  } else if (key == "epochs") {
    tc.epochs = to_int("train.epochs", value);
  } else if (key == "batches_per_epoch") {
    tc.batches_per_epoch = to_int("train.batches_per_epoch", value);
  } else if (key == "batch_size") {
    tc.batch_size = to_int("train.batch_size", value);
  } else if (key == "learning_rate") {
    tc.learning_rate = to_double("train.learning_rate", value);
  } else if (key == "lr_decay") {
    tc.lr_decay = to_double("train.lr_decay", value);
  } else if (key == "ema_decay") {
    tc.ema_decay = to_double("train.ema_decay", value);
  } else if (key == "eval_with_ema") {
    tc.eval_with_ema = to_bool("train.eval_with_ema", value);
  } else if (key == "mode") {
    try {
      tc.mode = parse_train_mode(value);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("config key 'train.mode': ") + e.what());
    }
  } else if (key == "hidden_dims") {
    tc.hidden_dims = to_list<int>("train.hidden_dims", value, to_int);
  } else if (key == "disable_teacher_transform") {
    tc.disable_teacher_transform = to_bool("train.disable_teacher_transform", value);
  } else if (key == "use_plain_ce_labeled") {
    tc.use_plain_ce_labeled = to_bool("train.use_plain_ce_labeled", value);
  } else if (key == "disable_student_mask") {
    tc.disable_student_mask = to_bool("train.disable_student_mask", value);
  } else if (key == "mean_normalize") {
    tc.mean_normalize = to_bool("train.mean_normalize", value);
  } else if (key == "prior_counts") {
    tc.prior_counts = to_list<std::int64_t>("train.prior_counts", value, to_int64);
  } else if (key == "prior_smoothing") {
    tc.prior_smoothing = to_double("train.prior_smoothing", value);
  } else if (key == "seed") {
    tc.seed = to_uint64("train.seed", value);
  } else if (key == "seeds") {
    seeds = to_list<std::uint64_t>("train.seeds", value, to_uint64);
  } else {
    throw ConfigError("unknown config key 'train." + key + "'");
  }
}

void apply_eval_key(EvalConfig& ec, const std::string& key, const std::string& value) {
  if (key == "head") {
    ec.head = to_list<int>("eval.head", value, to_int);
  } else if (key == "torso") {
    ec.torso = to_list<int>("eval.torso", value, to_int);
  } else if (key == "tail") {
    ec.tail = to_list<int>("eval.tail", value, to_int);
  } else if (key == "minority") {
    ec.minority = to_list<int>("eval.minority", value, to_int);
  } else if (key == "gm_floor") {
    ec.gm_floor = to_double("eval.gm_floor", value);
  } else if (key == "test_per_class") {
    ec.test_per_class = to_int("eval.test_per_class", value);
  } else {
    throw ConfigError("unknown config key 'eval." + key + "'");
  }
}

ExperimentConfig from_sections(const SectionMap& sections) {
  ExperimentConfig config;
  for (const auto& [section, entries] : sections) {
    if (section == "dataset") {
      for (const auto& [key, value] : entries) apply_dataset_key(config.dataset, key, value);
    } else if (section == "train") {
      for (const auto& [key, value] : entries) {
        apply_train_key(config.train, config.seeds, key, value);
      }
    } else if (section == "eval") {
      for (const auto& [key, value] : entries) apply_eval_key(config.eval, key, value);
    } else if (section == "output") {
      for (const auto& [key, value] : entries) {
        if (key == "dir") {
          config.out_dir = value;
        } else {
          throw ConfigError("unknown config key 'output." + key + "'");
        }
      }
    } else {
      throw ConfigError("unknown config section '" + section + "'");
    }
  }
  return config;
}

std::string json_scalar_to_string(const nlohmann::json& v, const std::string& key) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number_unsigned()) return std::to_string(v.get<unsigned long long>());
  if (v.is_number_float()) {
    std::ostringstream out;
    out.precision(17);
    out << v.get<double>();
    return out.str();
  }
  throw ConfigError("config key '" + key + "': unsupported JSON value type");
}

// JSON configs carry the same sections/keys; arrays map to comma lists.
SectionMap sections_from_json(const nlohmann::json& j) {
  SectionMap sections;
  for (const auto& [section, body] : j.items()) {
    if (!body.is_object()) throw ConfigError("config section '" + section + "' must be an object");
    for (const auto& [key, value] : body.items()) {
      if (value.is_array()) {
        std::string joined;
        for (const auto& item : value) {
          if (!joined.empty()) joined += ",";
          joined += json_scalar_to_string(item, section + "." + key);
        }
        sections[section][key] = joined;
      } else {
        sections[section][key] = json_scalar_to_string(value, section + "." + key);
      }
    }
  }
  return sections;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (dataset.type == "synthetic") {
    if (dataset.num_classes < 2) throw ConfigError("dataset.num_classes must be >= 2");
    if (dataset.n1 < dataset.num_classes) throw ConfigError("dataset.n1 must be >= num_classes");
    if (dataset.gamma < 1.0) throw ConfigError("dataset.gamma must be >= 1");
    if (!(dataset.beta > 0.0 && dataset.beta < 1.0)) {
      throw ConfigError("dataset.beta must lie in (0,1)");
    }
    if (dataset.feature_dim < 2) throw ConfigError("dataset.feature_dim must be >= 2");
    if (dataset.radius <= 0.0) throw ConfigError("dataset.radius must be > 0");
    if (dataset.sigma < 0.0) throw ConfigError("dataset.sigma must be >= 0");
  } else {
    if (dataset.labeled_path.empty() || dataset.unlabeled_path.empty()) {
      throw ConfigError("dataset.labeled_path and dataset.unlabeled_path are required for csv");
    }
  }
  try {
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  const bool any_group = !eval.head.empty() || !eval.torso.empty() || !eval.tail.empty();
  const bool all_groups = !eval.head.empty() && !eval.tail.empty();
  if (any_group && !all_groups) {
    throw ConfigError("eval.head/eval.torso/eval.tail must be given together (torso may be empty)");
  }
  if (eval.gm_floor <= 0.0 || eval.gm_floor > 1.0) {
    throw ConfigError("eval.gm_floor must lie in (0,1]");
  }
  if (eval.test_per_class < 1) throw ConfigError("eval.test_per_class must be >= 1");
}

std::string ExperimentConfig::resolved_out_dir() const {
  if (!out_dir.empty()) return out_dir;
  if (const char* root = std::getenv("TRAS_OUT_ROOT")) return root;
  return "out";
}

ExperimentConfig parse_config_text(const std::string& text) {
  return from_sections(parse_ini(text));
}

ExperimentConfig parse_config_file(const std::string& path) {
  if (path.empty()) return ExperimentConfig{};
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  if (path.size() > 5 && path.substr(path.size() - 5) == ".json") {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(buffer.str());
    } catch (const std::exception& e) {
      throw ConfigError(path + ": " + e.what());
    }
    return from_sections(sections_from_json(j));
  }
  return parse_config_text(buffer.str());
}

}  // namespace tras
