#pragma once

// Adadelta training with early stopping, metrics logging and checkpoints.

#include <atomic>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "agglo/data.hpp"
#include "agglo/model.hpp"

namespace agglo {

/// Per-parameter running averages E[g^2] and E[dx^2].
template <typename T>
struct AdadeltaState {
  double rho = 0.95;
  double eps = 1e-6;
  std::vector<std::vector<T>> sq_grad;
  std::vector<std::vector<T>> sq_update;

  /// Zeroed accumulators mirroring `params`.
  static AdadeltaState for_params(const std::vector<ParamRef<T>>& params, double rho = 0.95, double eps = 1e-6);
};

/// One Adadelta update of every parameter from its current gradient:
///   E[g^2]  <- rho E[g^2] + (1 - rho) g^2
///   dx      <- -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
///   E[dx^2] <- rho E[dx^2] + (1 - rho) dx^2
///   x       <- x + dx
/// Throws NumericError naming the parameter if a gradient is not finite.
template <typename T>
void adadelta_step(std::vector<ParamRef<T>>& params, AdadeltaState<T>& state);

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::vector<ParamRef<T>>& params, double max_norm);

/// Patience-based stopping on a validation metric (lower is better).
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {}

  /// Feeds one epoch's validation loss; returns true when training should stop.
  bool update(double valid_loss);
  bool improved() const { return improved_; }
  double best() const { return best_; }
  int best_epoch() const { return best_epoch_; }
  int stale_epochs() const { return stale_; }
  int epochs_seen() const { return seen_; }

 private:
  int patience_;
  double best_ = 0;
  int best_epoch_ = 0;
  int stale_ = 0;
  int seen_ = 0;
  bool improved_ = false;
};

struct EpochRecord {
  int epoch = 0;
  double train_bits = 0;
  double valid_bits = 0;
  double seconds = 0;
};

struct TrainOptions {
  Index batch_size = 32;
  int max_epochs = 100;
  int patience = 10;
  double clip_norm = 5.0;  // <= 0 disables clipping
  std::uint64_t seed = 0;
  /// Stop as soon as validation loss drops below this many bits.
  std::optional<double> target_valid_bits;
  /// Caps batches per epoch (desk-scale smoke runs); 0 means no cap.
  Index max_batches_per_epoch = 0;
  /// When set, best.ckpt, last.ckpt and metrics.csv are written here.
  std::optional<std::string> out_dir;
  /// Polled between batches; a set flag ends training after the current batch.
  const std::atomic<bool>* interrupt = nullptr;
  std::function<void(const EpochRecord&)> on_epoch;
};

enum class StopReason { Patience, MaxEpochs, Target, Interrupted };
std::string to_string(StopReason reason);

template <typename T>
struct TrainRun {
  ModelConfig config;
  std::vector<EpochRecord> history;
  double best_valid_bits = 0;
  int best_epoch = 0;
  int stale_epochs = 0;
  StopReason stop_reason = StopReason::MaxEpochs;
  DecoderModel<T> best_model;
};

/// Trains a freshly initialized model (parameters seeded from options.seed).
template <typename T>
TrainRun<T> train(const ModelConfig& config, const CorpusSplit& corpus, const TrainOptions& options);

/// Mean next-token loss in bits over all non-overlapping windows of `stream`.
template <typename T>
double evaluate(const DecoderModel<T>& model, const TokenStream& stream, Index seq_len, Index batch_size);

inline constexpr const char* kMetricsHeader = "epoch,train_loss_bits,valid_loss_bits,epoch_seconds";
std::string format_metrics_row(const EpochRecord& record);

}  // namespace agglo
