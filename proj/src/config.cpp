#include "evln/config.hpp"

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "evln/errors.hpp"

namespace evln {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("key '" + key + "': expected true/false, got '" + v + "'");
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string fmt_bool(bool v) { return v ? "true" : "false"; }

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  const std::string& v = value;
  auto positive = [&](double x) {
    if (!(x > 0.0)) throw ConfigError("key '" + key + "' must be > 0");
    return x;
  };
  auto non_negative = [&](double x) {
    if (!(x >= 0.0)) throw ConfigError("key '" + key + "' must be >= 0");
    return x;
  };
  auto at_least_one = [&](std::uint64_t x) {
    if (x < 1) throw ConfigError("key '" + key + "' must be >= 1");
    return static_cast<std::size_t>(x);
  };

  if (key == "seed") {
    seed = parse_u64(key, v);
  } else if (key == "shuffle_seed") {
    shuffle_seed = parse_u64(key, v);
  } else if (key == "dataset") {
    if (v == "synthetic") {
      source = DataSource::synthetic;
    } else if (v == "idx") {
      source = DataSource::idx;
    } else {
      throw ConfigError("key 'dataset': expected synthetic or idx, got '" + v + "'");
    }
  } else if (key == "synthetic_classes") {
    synthetic.classes = parse_u64(key, v);
    if (synthetic.classes < 2) throw ConfigError("key 'synthetic_classes' must be >= 2");
  } else if (key == "synthetic_samples_per_class") {
    synthetic.samples_per_class = parse_u64(key, v);
    if (synthetic.samples_per_class < 2) {
      throw ConfigError("key 'synthetic_samples_per_class' must be >= 2");
    }
  } else if (key == "synthetic_image_size") {
    synthetic.image_size = parse_u64(key, v);
    if (synthetic.image_size < 8 || synthetic.image_size % 8 != 0) {
      throw ConfigError("key 'synthetic_image_size' must be a multiple of 8 and >= 8");
    }
  } else if (key == "synthetic_noise") {
    synthetic.noise = non_negative(parse_double(key, v));
  } else if (key == "synthetic_seed") {
    synthetic.seed = parse_u64(key, v);
  } else if (key == "idx_train_images") {
    idx_train_images = v;
  } else if (key == "idx_train_labels") {
    idx_train_labels = v;
  } else if (key == "idx_test_images") {
    idx_test_images = v;
  } else if (key == "idx_test_labels") {
    idx_test_labels = v;
  } else if (key == "normalize") {
    normalize = parse_bool(key, v);
  } else if (key == "classes_per_task") {
    classes_per_task = at_least_one(parse_u64(key, v));
  } else if (key == "buffer_capacity") {
    buffer_capacity = parse_u64(key, v);
  } else if (key == "tau") {
    tau = positive(parse_double(key, v));
  } else if (key == "lambda") {
    lambda = non_negative(parse_double(key, v));
  } else if (key == "t_a") {
    t_a = at_least_one(parse_u64(key, v));
  } else if (key == "aleatoric_form") {
    if (v == "likelihood") {
      aleatoric_form = AleatoricForm::likelihood;
    } else if (v == "literal") {
      aleatoric_form = AleatoricForm::literal;
    } else {
      throw ConfigError("key 'aleatoric_form': expected likelihood or literal, got '" + v + "'");
    }
  } else if (key == "ce_scope") {
    if (v == "unified") {
      ce_scope = CeScope::unified;
    } else if (v == "new") {
      ce_scope = CeScope::new_classes;
    } else {
      throw ConfigError("key 'ce_scope': expected unified or new, got '" + v + "'");
    }
  } else if (key == "dropout_rate") {
    dropout_rate = parse_double(key, v);
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
      throw ConfigError("key 'dropout_rate' must lie in [0, 1)");
    }
  } else if (key == "widths") {
    std::stringstream ss(v);
    std::string part;
    std::size_t k = 0;
    std::array<std::size_t, 3> w{};
    while (std::getline(ss, part, ',')) {
      if (k == 3) throw ConfigError("key 'widths' needs exactly 3 values");
      w[k++] = at_least_one(parse_u64(key, trim(part)));
    }
    if (k != 3) throw ConfigError("key 'widths' needs exactly 3 values");
    widths = w;
  } else if (key == "attn_key_divisor") {
    attn_key_divisor = at_least_one(parse_u64(key, v));
  } else if (key == "learning_rate") {
    learning_rate = positive(parse_double(key, v));
  } else if (key == "momentum") {
    momentum = parse_double(key, v);
    if (!(momentum >= 0.0 && momentum < 1.0)) {
      throw ConfigError("key 'momentum' must lie in [0, 1)");
    }
  } else if (key == "epochs") {
    epochs = parse_u64(key, v);
  } else if (key == "batch_size") {
    batch_size = at_least_one(parse_u64(key, v));
  } else if (key == "weight_decay") {
    weight_decay = non_negative(parse_double(key, v));
  } else if (key == "use_distillation") {
    use.distillation = parse_bool(key, v);
  } else if (key == "use_aleatoric") {
    use.aleatoric = parse_bool(key, v);
  } else if (key == "use_uncertainty_distill") {
    use.uncertainty_distill = parse_bool(key, v);
  } else if (key == "use_attention_distill") {
    use.attention_distill = parse_bool(key, v);
  } else if (key == "save_attention") {
    save_attention = parse_bool(key, v);
  } else if (key == "save_checkpoint") {
    save_checkpoint = parse_bool(key, v);
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

void RunConfig::validate() const {
  if (source == DataSource::idx && (idx_train_images.empty() || idx_train_labels.empty())) {
    throw ConfigError("dataset = idx needs idx_train_images and idx_train_labels");
  }
  if (idx_test_images.empty() != idx_test_labels.empty()) {
    throw ConfigError("idx_test_images and idx_test_labels must be given together");
  }
  if (source == DataSource::synthetic && classes_per_task > synthetic.classes) {
    throw ConfigError("key 'classes_per_task' exceeds synthetic_classes");
  }
}

std::vector<std::pair<std::string, std::string>> RunConfig::entries() const {
  std::vector<std::pair<std::string, std::string>> e;
  e.emplace_back("seed", std::to_string(seed));
  e.emplace_back("shuffle_seed", std::to_string(effective_shuffle_seed()));
  e.emplace_back("dataset", source == DataSource::synthetic ? "synthetic" : "idx");
  e.emplace_back("synthetic_classes", std::to_string(synthetic.classes));
  e.emplace_back("synthetic_samples_per_class", std::to_string(synthetic.samples_per_class));
  e.emplace_back("synthetic_image_size", std::to_string(synthetic.image_size));
  e.emplace_back("synthetic_noise", fmt_double(synthetic.noise));
  e.emplace_back("synthetic_seed", std::to_string(synthetic.seed));
  e.emplace_back("idx_train_images", idx_train_images);
  e.emplace_back("idx_train_labels", idx_train_labels);
  e.emplace_back("idx_test_images", idx_test_images);
  e.emplace_back("idx_test_labels", idx_test_labels);
  e.emplace_back("normalize", fmt_bool(normalize));
  e.emplace_back("classes_per_task", std::to_string(classes_per_task));
  e.emplace_back("buffer_capacity", std::to_string(buffer_capacity));
  e.emplace_back("tau", fmt_double(tau));
  e.emplace_back("lambda", fmt_double(lambda));
  e.emplace_back("t_a", std::to_string(t_a));
  e.emplace_back("aleatoric_form",
                 aleatoric_form == AleatoricForm::likelihood ? "likelihood" : "literal");
  e.emplace_back("ce_scope", ce_scope == CeScope::unified ? "unified" : "new");
  e.emplace_back("dropout_rate", fmt_double(dropout_rate));
  e.emplace_back("widths", std::to_string(widths[0]) + "," + std::to_string(widths[1]) +
                               "," + std::to_string(widths[2]));
  e.emplace_back("attn_key_divisor", std::to_string(attn_key_divisor));
  e.emplace_back("learning_rate", fmt_double(learning_rate));
  e.emplace_back("momentum", fmt_double(momentum));
  e.emplace_back("epochs", std::to_string(epochs));
  e.emplace_back("batch_size", std::to_string(batch_size));
  e.emplace_back("weight_decay", fmt_double(weight_decay));
  e.emplace_back("use_distillation", fmt_bool(use.distillation));
  e.emplace_back("use_aleatoric", fmt_bool(use.aleatoric));
  e.emplace_back("use_uncertainty_distill", fmt_bool(use.uncertainty_distill));
  e.emplace_back("use_attention_distill", fmt_bool(use.attention_distill));
  e.emplace_back("save_attention", fmt_bool(save_attention));
  e.emplace_back("save_checkpoint", fmt_bool(save_checkpoint));
  return e;
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [k, v] : entries()) out += k + " = " + v + "\n";
  return out;
}

EngineConfig RunConfig::engine_config(const Dataset& ds) const {
  validate();
  if (ds.height() != ds.width()) {
    throw ConfigError("images must be square, got " + shape_str(ds.inputs.shape()));
  }
  EngineConfig e;
  e.model.in_channels = ds.channels();
  e.model.image_size = ds.height();
  e.model.widths = widths;
  e.model.dropout_rate = dropout_rate;
  e.model.attn_key_divisor = attn_key_divisor;
  e.loss = LossConfig(tau, lambda, t_a, aleatoric_form);
  e.use = use;
  e.optimizer = {learning_rate, momentum, epochs, batch_size, weight_decay};
  e.buffer_capacity = buffer_capacity;
  e.ce_scope = ce_scope;
  e.seed = seed;
  return e;
}

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError("duplicate config key '" + key + "'");
    cfg.set(key, value);
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

Dataset build_dataset(const RunConfig& cfg) {
  cfg.validate();
  Dataset ds;
  if (cfg.source == DataSource::synthetic) {
    ds = generate_synthetic(cfg.synthetic);
  } else {
    Dataset train = load_idx(cfg.idx_train_images, cfg.idx_train_labels);
    if (!cfg.idx_test_images.empty()) {
      ds = combine_train_test(train, load_idx(cfg.idx_test_images, cfg.idx_test_labels));
    } else {
      ds = split_per_class(train, 0.8);
    }
    ds = pad_to_multiple(ds, 8);
  }
  ds.validate();
  if (cfg.normalize) ds = normalize(ds).first;
  return ds;
}

}  // namespace evln
