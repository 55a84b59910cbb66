#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kd/distill.hpp"
#include "kd/model.hpp"
#include "kd/trainer.hpp"

namespace kd::cli {

struct DataConfig {
  std::filesystem::path grammar;
  std::size_t train_tokens = 100000;
  std::size_t heldout_tokens = 10000;
  std::size_t minimal_pairs = 500;
  std::size_t mode_mass_contexts = 256;
};

struct TeacherSection {
  model::ModelConfig model;
  std::optional<std::filesystem::path> checkpoint;
};

/// One experiment. Model seeds, batch-order seeds and data seeds are all
/// derived from run.seed; `vocab_size` is taken from the grammar when unset.
struct ExperimentConfig {
  std::string run_id = "run";
  std::filesystem::path out_dir = "out";
  std::uint64_t seed = 0;

  DataConfig data;
  TeacherSection teacher;
  std::optional<TeacherSection> teacher2;
  model::ModelConfig student;
  distill::DistillConfig distill;
  train::TrainConfig train;
  train::OptimizerConfig optim;
  train::TrainConfig teacher_train;
  train::OptimizerConfig teacher_optim;

  /// Keys as written, for the run summary.
  std::map<std::string, std::string> settings;

  /// Cross-field checks; throws ConfigError.
  void validate() const;
};

/// One `section.key = value` line.
struct Setting {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

/// Splits a config file into settings. Blank lines and `#` comments are
/// skipped; a repeated key is an error.
std::vector<Setting> parse_settings(const std::string& text, const std::string& source);

/// Builds a config from settings; relative paths resolve against base_dir.
/// Unknown keys and malformed values throw ConfigError naming the key.
ExperimentConfig build_config(const std::vector<Setting>& settings, const std::filesystem::path& base_dir);

/// Reads and builds a config file. A missing file throws IoError naming the path.
ExperimentConfig load_config(const std::filesystem::path& path);

/// Applies run.seed to every derived seed. Call after overriding `seed`.
void apply_seed(ExperimentConfig& cfg);

struct GridConfig {
  std::vector<Setting> base;
  std::filesystem::path base_dir;
  std::filesystem::path out_dir;
  std::vector<std::string> variants;
  std::map<std::string, std::vector<Setting>> overrides;

  /// Base settings plus the variant's overrides.
  ExperimentConfig variant(const std::string& name) const;
  ExperimentConfig base_config() const;
};

/// Grid file keys: grid.base (path to a config), grid.out_dir,
/// grid.variants (comma-separated), variant.NAME.section.key.
GridConfig load_grid(const std::filesystem::path& path);

}  // namespace kd::cli
