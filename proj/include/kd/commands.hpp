#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>

namespace kd::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;
inline constexpr int kExitIo = 4;

struct CommandOptions {
  std::filesystem::path config;
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> checkpoint;  // eval only
  bool quiet = false;
};

// Each command reports errors on `err` and returns an exit code; progress
// goes to `err` as well unless quiet. Only eval writes to `out`.

/// Writes teacher.ckpt (and teacher2.ckpt when enabled) with per-step
/// metrics and a summary for each.
int cmd_train_teacher(const CommandOptions& opts, std::ostream& out, std::ostream& err);
/// Writes student.ckpt, metrics.csv and summary.json.
int cmd_distill(const CommandOptions& opts, std::ostream& out, std::ostream& err);
/// Writes eval.csv and eval.json for one checkpoint and echoes the CSV.
int cmd_eval(const CommandOptions& opts, std::ostream& out, std::ostream& err);
/// Trains teachers once, distills every grid variant into its own
/// directory and writes comparison.csv.
int cmd_compare(const CommandOptions& opts, std::ostream& out, std::ostream& err);

/// Full command line: `kdistill <train-teacher|distill|eval|compare> ...`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace kd::cli
