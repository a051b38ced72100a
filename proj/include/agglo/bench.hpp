#pragma once

// Single-core runtime scaling of isolated attention layers.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "agglo/model.hpp"
#include "agglo/tensor.hpp"

namespace agglo {

struct BenchConfig {
  Index batch = 32;
  Index d_model = 512;
  Index heads_or_classes = 8;
  std::vector<Index> seq_lengths{64, 128, 256, 512, 1024, 2048};
  int replicas = 5;
  int warmup = 1;
  bool masked = true;
  std::uint64_t seed = 0;
  bool pin = true;
  /// Also time a backward pass (reported under separate records).
  bool time_backward = false;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

struct BenchRecord {
  AttentionKind kind = AttentionKind::Full;
  bool masked = true;
  Index seq_len = 0;
  int replica = 0;
  double seconds = 0;
  bool backward = false;
  int iterations = 1;
  /// Largest single tensor allocated during the timed forward pass.
  Index peak_elements = 0;
};

struct BenchRun {
  std::vector<BenchRecord> records;
  std::vector<std::string> skipped;
  bool pinned = false;
  std::string pin_note;
  DType dtype = DType::Float32;
};

/// Loops replica -> length -> kind. Inputs for a (length, replica) pair are
/// drawn from the same seed for both kinds.
template <typename T>
BenchRun run_bench(const BenchConfig& config);

/// Restricts the calling thread to one logical core. Returns false with a
/// reason in `note` when the platform refuses.
bool pin_to_single_core(std::string& note);

struct ScalingFit {
  double slope = 0;
  double stderr_slope = 0;
  std::vector<Index> lengths;  // lengths used in the fit
};

/// OLS of log(mean seconds) on log(seq_len) over the largest half of the
/// distinct lengths (at least three) for each kind. Forward records only.
/// Throws ContractError when a kind has fewer than three distinct lengths.
std::map<AttentionKind, ScalingFit> fit_scaling(const std::vector<BenchRecord>& records);

/// Smallest length where the mean agglomerative time does not exceed the
/// mean full time; nullopt if there is none.
std::optional<Index> crossover(const std::vector<BenchRecord>& records);

/// Mean forward seconds per (kind, length).
std::map<AttentionKind, std::map<Index, double>> mean_seconds(const std::vector<BenchRecord>& records);

inline constexpr const char* kBenchHeader = "kind,masked,seq_len,replica,seconds";

void write_bench_csv(const std::string& path, const std::vector<BenchRecord>& records);
std::vector<BenchRecord> read_bench_csv(const std::string& path);
std::string machine_description();
void write_bench_meta(const std::string& path, const BenchConfig& config, const BenchRun& run);

/// Human-readable summary: per-kind slopes and the crossover length.
std::string bench_summary(const std::vector<BenchRecord>& records);

}  // namespace agglo
