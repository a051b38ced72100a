#pragma once

// Command-line front end: train, eval, generate, bench, verify.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>

#include "agglo/bench.hpp"
#include "agglo/data.hpp"
#include "agglo/model.hpp"
#include "agglo/training.hpp"

namespace agglo::cli {

enum ExitCode : int {
  kOk = 0,
  kVerifyFailed = 1,
  kConfigError = 2,
  kIoError = 3,
  kCheckpointError = 4,
  kInterrupted = 130,
};

/// Everything a subcommand can be configured with. Keys in config files
/// mirror these field names.
struct RunConfig {
  ModelConfig model;

  std::string corpus = "text8";
  std::optional<std::size_t> limit_chars;
  SplitFractions split;

  Index batch_size = 32;
  int max_epochs = 100;
  int patience = 10;
  double clip_norm = 5.0;
  std::optional<double> target_valid_bits;
  Index max_batches_per_epoch = 0;

  BenchConfig bench;

  std::uint64_t seed = 0;
  std::string dtype = "float32";

  /// key=value lines; `#` starts a comment. Unknown keys are a ConfigError.
  void apply_text(const std::string& text);
  void apply(const std::string& key, const std::string& value);
  /// Resolved configuration, one key=value per line, loadable by apply_text.
  std::string to_text() const;
  void validate() const;
};

/// Built-in configs for the four character-level model variants.
std::optional<std::string> preset_text(const std::string& name);

/// Parses argv and runs one subcommand. Output goes to `out`, diagnostics
/// to `err`. Returns a process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace agglo::cli
