#include "kd/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "kd/errors.hpp"
#include "kd/rng.hpp"

namespace kd::cli {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const Setting& s, const std::string& what) {
  throw ConfigError("line " + std::to_string(s.line) + ": " + s.key + ": " + what + " (got '" + s.value + "')");
}

std::size_t as_size(const Setting& s) {
  std::size_t v = 0;
  const char* end = s.value.data() + s.value.size();
  auto [p, ec] = std::from_chars(s.value.data(), end, v);
  if (ec != std::errc() || p != end) bad_value(s, "expected a non-negative integer");
  return v;
}

std::uint64_t as_u64(const Setting& s) {
  std::uint64_t v = 0;
  const char* end = s.value.data() + s.value.size();
  auto [p, ec] = std::from_chars(s.value.data(), end, v);
  if (ec != std::errc() || p != end) bad_value(s, "expected a non-negative integer");
  return v;
}

double as_double(const Setting& s) {
  double v = 0.0;
  const char* end = s.value.data() + s.value.size();
  auto [p, ec] = std::from_chars(s.value.data(), end, v);
  if (ec != std::errc() || p != end || !std::isfinite(v)) bad_value(s, "expected a finite number");
  return v;
}

bool as_bool(const Setting& s) {
  if (s.value == "true") return true;
  if (s.value == "false") return false;
  bad_value(s, "expected true or false");
}

std::string as_string(const Setting& s) {
  if (s.value.size() >= 2 && s.value.front() == '"' && s.value.back() == '"') {
    return s.value.substr(1, s.value.size() - 2);
  }
  return s.value;
}

template <typename Parse>
auto wrap(const Setting& s, Parse parse) {
  try {
    return parse(as_string(s));
  } catch (const std::invalid_argument& e) {
    bad_value(s, e.what());
  }
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

bool apply_model(model::ModelConfig& m, const std::string& key, const Setting& s) {
  if (key == "vocab_size") m.vocab_size = as_size(s);
  else if (key == "max_seq_len") m.max_seq_len = as_size(s);
  else if (key == "d_model") m.d_model = as_size(s);
  else if (key == "n_heads") m.n_heads = as_size(s);
  else if (key == "n_layers") m.n_layers = as_size(s);
  else if (key == "ffn_multiplier") m.ffn_multiplier = as_size(s);
  else if (key == "norm_eps") m.norm_eps = as_double(s);
  else return false;
  return true;
}

bool apply_train(train::TrainConfig& t, const std::string& key, const Setting& s) {
  if (key == "batch_size") t.batch_size = as_size(s);
  else if (key == "seq_len") t.seq_len = as_size(s);
  else if (key == "epochs") t.epochs = as_size(s);
  else if (key == "grad_accum") t.grad_accum = as_size(s);
  else if (key == "checkpoint_every") t.checkpoint_every = as_size(s);
  else return false;
  return true;
}

bool apply_optim(train::OptimizerConfig& o, const std::string& key, const Setting& s) {
  if (key == "lr") o.lr = as_double(s);
  else if (key == "beta1") o.beta1 = as_double(s);
  else if (key == "beta2") o.beta2 = as_double(s);
  else if (key == "eps") o.eps = as_double(s);
  else if (key == "weight_decay") o.weight_decay = as_double(s);
  else if (key == "t_max") o.t_max = as_size(s);
  else if (key == "lr_min") o.lr_min = as_double(s);
  else return false;
  return true;
}

bool apply_distill(distill::DistillConfig& d, const std::string& key, const Setting& s) {
  if (key == "objective") d.objective = wrap(s, distill::parse_objective);
  else if (key == "temperature") d.temperature = as_double(s);
  else if (key == "alpha") d.alpha = as_double(s);
  else if (key == "beta_start") d.beta_start = as_double(s);
  else if (key == "beta_floor") d.beta_floor = as_double(s);
  else if (key == "chunk_size") d.chunk_size = as_size(s);
  else if (key == "teacher_count") d.teacher_count = as_size(s);
  else if (key == "combination") d.combination = wrap(s, distill::parse_combination);
  else if (key == "reduction") d.reduction = wrap(s, distill::parse_reduction);
  else return false;
  return true;
}

std::string read_text(const std::filesystem::path& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(std::string("cannot read ") + what + " " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::vector<Setting> parse_settings(const std::string& text, const std::string& source) {
  std::vector<Setting> out;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    std::string body = raw;
    if (const auto hash = body.find('#'); hash != std::string::npos) body.resize(hash);
    body = trim(body);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(line) + ": expected 'section.key = value'");
    }
    Setting s{trim(std::string_view(body).substr(0, eq)), trim(std::string_view(body).substr(eq + 1)), line};
    if (s.key.empty() || s.key.find('.') == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(line) + ": key '" + s.key + "' is not of the form section.key");
    }
    if (s.value.empty()) throw ConfigError(source + ":" + std::to_string(line) + ": " + s.key + ": empty value");
    if (!seen.insert(s.key).second) {
      throw ConfigError(source + ":" + std::to_string(line) + ": duplicate key " + s.key);
    }
    out.push_back(std::move(s));
  }
  return out;
}

ExperimentConfig build_config(const std::vector<Setting>& settings, const std::filesystem::path& base_dir) {
  ExperimentConfig cfg;
  cfg.teacher.model.vocab_size = 0;
  cfg.student.vocab_size = 0;

  // teacher_train / teacher_optim start from train / optim, so they are applied last.
  std::vector<const Setting*> deferred;
  bool teacher2_enabled = false;
  std::vector<const Setting*> teacher2_keys;

  for (const Setting& s : settings) {
    cfg.settings[s.key] = s.value;
    const auto dot = s.key.find('.');
    const std::string section = s.key.substr(0, dot), key = s.key.substr(dot + 1);
    bool known = false;
    if (section == "run") {
      known = true;
      if (key == "id") cfg.run_id = as_string(s);
      else if (key == "out_dir") cfg.out_dir = resolve(base_dir, as_string(s));
      else if (key == "seed") cfg.seed = as_u64(s);
      else known = false;
    } else if (section == "data") {
      known = true;
      if (key == "grammar") cfg.data.grammar = resolve(base_dir, as_string(s));
      else if (key == "train_tokens") cfg.data.train_tokens = as_size(s);
      else if (key == "heldout_tokens") cfg.data.heldout_tokens = as_size(s);
      else if (key == "minimal_pairs") cfg.data.minimal_pairs = as_size(s);
      else if (key == "mode_mass_contexts") cfg.data.mode_mass_contexts = as_size(s);
      else known = false;
    } else if (section == "teacher") {
      if (key == "checkpoint") {
        cfg.teacher.checkpoint = resolve(base_dir, as_string(s));
        known = true;
      } else {
        known = apply_model(cfg.teacher.model, key, s);
      }
    } else if (section == "teacher2") {
      model::ModelConfig scratch;
      known = key == "enabled" || key == "checkpoint" || apply_model(scratch, key, s);
      if (key == "enabled") teacher2_enabled = as_bool(s);
      else teacher2_keys.push_back(&s);
    } else if (section == "student") {
      known = apply_model(cfg.student, key, s);
    } else if (section == "distill") {
      known = apply_distill(cfg.distill, key, s);
    } else if (section == "train") {
      known = apply_train(cfg.train, key, s);
    } else if (section == "optim") {
      known = apply_optim(cfg.optim, key, s);
    } else if (section == "teacher_train") {
      train::TrainConfig scratch;
      known = apply_train(scratch, key, s);
      deferred.push_back(&s);
    } else if (section == "teacher_optim") {
      train::OptimizerConfig scratch;
      known = apply_optim(scratch, key, s);
      deferred.push_back(&s);
    }
    if (!known) throw ConfigError("line " + std::to_string(s.line) + ": unknown key " + s.key);
  }

  cfg.teacher_train = cfg.train;
  cfg.teacher_optim = cfg.optim;
  for (const Setting* s : deferred) {
    const auto dot = s->key.find('.');
    const std::string section = s->key.substr(0, dot), key = s->key.substr(dot + 1);
    if (section == "teacher_train") apply_train(cfg.teacher_train, key, *s);
    else apply_optim(cfg.teacher_optim, key, *s);
  }

  if (!teacher2_keys.empty() && !teacher2_enabled) {
    throw ConfigError("line " + std::to_string(teacher2_keys.front()->line) + ": " + teacher2_keys.front()->key +
                      " given but teacher2.enabled is not true");
  }
  if (teacher2_enabled) {
    TeacherSection t2{cfg.teacher.model, std::nullopt};
    for (const Setting* s : teacher2_keys) {
      const std::string key = s->key.substr(s->key.find('.') + 1);
      if (key == "checkpoint") t2.checkpoint = resolve(base_dir, as_string(*s));
      else apply_model(t2.model, key, *s);
    }
    cfg.teacher2 = t2;
  }

  apply_seed(cfg);
  return cfg;
}

void apply_seed(ExperimentConfig& cfg) {
  cfg.teacher.model.seed = derive_seed(cfg.seed, "init/teacher");
  if (cfg.teacher2) cfg.teacher2->model.seed = derive_seed(cfg.seed, "init/teacher2");
  cfg.student.seed = derive_seed(cfg.seed, "init/student");
  cfg.train.seed = derive_seed(cfg.seed, "order/student");
  cfg.teacher_train.seed = derive_seed(cfg.seed, "order/teacher");
}

void ExperimentConfig::validate() const {
  auto check = [](const std::string& section, const std::function<void()>& fn) {
    try {
      fn();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(section + ": " + e.what());
    }
  };
  if (run_id.empty()) throw ConfigError("run.id: must not be empty");
  if (run_id.find_first_of(",\"\n") != std::string::npos) {
    throw ConfigError("run.id: must not contain commas, quotes or newlines");
  }
  if (data.grammar.empty()) throw ConfigError("data.grammar: required");
  if (!std::filesystem::exists(data.grammar)) {
    throw ConfigError("data.grammar: file not found: " + data.grammar.string());
  }
  if (data.train_tokens == 0) throw ConfigError("data.train_tokens: must be positive");
  if (data.heldout_tokens < 2) throw ConfigError("data.heldout_tokens: must be at least 2");
  if (data.minimal_pairs == 0) throw ConfigError("data.minimal_pairs: must be positive");
  if (data.mode_mass_contexts == 0) throw ConfigError("data.mode_mass_contexts: must be positive");

  auto check_model = [&](const std::string& section, model::ModelConfig m, std::size_t seq_len) {
    if (m.vocab_size == 0) m.vocab_size = 1;  // resolved from the grammar later
    check(section, [&] { m.validate(); });
    if (seq_len > m.max_seq_len) {
      throw ConfigError(section + ".max_seq_len: " + std::to_string(m.max_seq_len) +
                        " is shorter than the training sequence length " + std::to_string(seq_len));
    }
  };
  check_model("teacher", teacher.model, teacher_train.seq_len);
  if (teacher2) check_model("teacher2", teacher2->model, teacher_train.seq_len);
  check_model("student", student, train.seq_len);
  const std::size_t needed = std::max(train.seq_len, teacher_train.seq_len);
  if (needed > teacher.model.max_seq_len) {
    throw ConfigError("teacher.max_seq_len: shorter than train.seq_len");
  }
  check("distill", [&] { distill.validate(); });
  check("train", [&] { train.validate(); });
  check("teacher_train", [&] { teacher_train.validate(); });
  check("optim", [&] { optim.validate(); });
  check("teacher_optim", [&] { teacher_optim.validate(); });
  const std::size_t available = teacher2 ? 2 : 1;
  if (distill.teacher_count > available) {
    throw ConfigError("distill.teacher_count: " + std::to_string(distill.teacher_count) + " teachers requested but " +
                      std::to_string(available) + " configured (set teacher2.enabled = true)");
  }
  if (teacher.checkpoint && !std::filesystem::exists(*teacher.checkpoint)) {
    throw ConfigError("teacher.checkpoint: file not found: " + teacher.checkpoint->string());
  }
  if (teacher2 && teacher2->checkpoint && !std::filesystem::exists(*teacher2->checkpoint)) {
    throw ConfigError("teacher2.checkpoint: file not found: " + teacher2->checkpoint->string());
  }
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  const std::string text = read_text(path, "config file");
  return build_config(parse_settings(text, path.string()), path.parent_path());
}

ExperimentConfig GridConfig::base_config() const { return build_config(base, base_dir); }

ExperimentConfig GridConfig::variant(const std::string& name) const {
  auto it = overrides.find(name);
  if (it == overrides.end()) throw ConfigError("grid: unknown variant " + name);
  std::vector<Setting> merged = base;
  for (const Setting& o : it->second) {
    bool replaced = false;
    for (Setting& s : merged) {
      if (s.key == o.key) {
        s.value = o.value;
        replaced = true;
      }
    }
    if (!replaced) merged.push_back(o);
  }
  ExperimentConfig cfg = build_config(merged, base_dir);
  cfg.run_id = name;
  return cfg;
}

GridConfig load_grid(const std::filesystem::path& path) {
  const auto settings = parse_settings(read_text(path, "grid file"), path.string());
  GridConfig grid;
  std::optional<std::filesystem::path> base_path;
  for (const Setting& s : settings) {
    if (s.key == "grid.base") {
      base_path = resolve(path.parent_path(), as_string(s));
    } else if (s.key == "grid.out_dir") {
      grid.out_dir = resolve(path.parent_path(), as_string(s));
    } else if (s.key == "grid.variants") {
      std::stringstream ss(as_string(s));
      std::string name;
      while (std::getline(ss, name, ',')) {
        name = trim(name);
        if (name.empty() || name.find_first_of("./\\\"") != std::string::npos) {
          throw ConfigError("grid.variants: bad variant name '" + name + "'");
        }
        if (grid.overrides.count(name)) throw ConfigError("grid.variants: duplicate variant " + name);
        grid.variants.push_back(name);
        grid.overrides[name];
      }
    } else if (s.key.rfind("variant.", 0) == 0) {
      const std::string rest = s.key.substr(8);
      const auto dot = rest.find('.');
      if (dot == std::string::npos || rest.find('.', dot + 1) == std::string::npos) {
        throw ConfigError("line " + std::to_string(s.line) + ": key " + s.key +
                          " is not of the form variant.NAME.section.key");
      }
      const std::string name = rest.substr(0, dot);
      auto it = grid.overrides.find(name);
      if (it == grid.overrides.end()) {
        throw ConfigError("line " + std::to_string(s.line) + ": " + s.key + ": variant " + name +
                          " is not listed in grid.variants");
      }
      it->second.push_back({rest.substr(dot + 1), s.value, s.line});
    } else {
      throw ConfigError("line " + std::to_string(s.line) + ": unknown key " + s.key);
    }
  }
  if (!base_path) throw ConfigError("grid.base: required");
  if (grid.variants.empty()) throw ConfigError("grid.variants: at least one variant required");
  grid.base = parse_settings(read_text(*base_path, "base config"), base_path->string());
  grid.base_dir = base_path->parent_path();
  if (grid.out_dir.empty()) grid.out_dir = build_config(grid.base, grid.base_dir).out_dir;
  // Every variant must build on its own so errors surface before any training.
  for (const auto& name : grid.variants) grid.variant(name);
  return grid;
}

}  // namespace kd::cli
