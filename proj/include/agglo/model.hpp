#pragma once

// Weight-shared transformer decoder for next-token prediction.
//
// One block (pre-layer-norm attention + feed-forward, both residual) is
// applied n_blocks times with the same parameters. The sequence is encoded
// either with a learned absolute position embedding or with a causal
// convolution over token embeddings.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "agglo/attention.hpp"
#include "agglo/tensor.hpp"

namespace agglo {

enum class AttentionKind { Full, Agglomerative };
enum class EncodingKind { Embedding, Convolution };

std::string to_string(AttentionKind kind);
std::string to_string(EncodingKind kind);
AttentionKind parse_attention_kind(const std::string& text);
EncodingKind parse_encoding_kind(const std::string& text);

struct ModelConfig {
  AttentionKind attention = AttentionKind::Agglomerative;
  EncodingKind encoding = EncodingKind::Convolution;
  Index n_blocks = 5;
  Index seq_len = 128;
  Index d_model = 64;
  Index heads_or_classes = 8;
  Index vocab_size = 27;
  Index ffn_multiplier = 4;
  Index conv_width = 8;

  /// Throws ConfigError naming the first invalid field.
  void validate() const;
  /// key=value lines, one per field, in declaration order.
  std::string to_text() const;
  /// Parses the output of to_text(); unknown keys are a ConfigError.
  static ModelConfig from_text(const std::string& text);

  bool operator==(const ModelConfig&) const = default;
};

/// Exact number of trainable scalars of a model built from `config`.
Index count_params(const ModelConfig& config);

template <typename T>
struct DecoderBlock {
  AttentionKind kind = AttentionKind::Agglomerative;
  FullAttentionParams<T> full;
  AggloAttentionParams<T> agglo;
  Tensor<T> ln1_gain, ln1_bias;
  Tensor<T> ln2_gain, ln2_bias;
  Tensor<T> ffn_in_w, ffn_in_b;    // [d, f], [f]
  Tensor<T> ffn_out_w, ffn_out_b;  // [f, d], [d]

  std::vector<ParamRef<T>> params(const std::string& prefix) const;
};

template <typename T>
class DecoderModel {
 public:
  static DecoderModel init(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  /// Every trainable tensor in checkpoint order: token embedding, position
  /// embedding or convolution filter, block parameters, output projection.
  std::vector<ParamRef<T>> parameters() const;
  Index parameter_count() const;

  /// Deep copy of all parameter values (no shared storage).
  DecoderModel clone() const;
  /// Copies values from `other`, which must have the same config.
  void assign_from(const DecoderModel& other);

  Tensor<T> token_embedding;     // [V, d]
  Tensor<T> position_embedding;  // [seq_len, d], embedding mode only
  Tensor<T> conv_filter;         // [k, d, d], convolution mode only
  DecoderBlock<T> block;
  Tensor<T> out_w;  // [d, V]
  Tensor<T> out_b;  // [V]

 private:
  ModelConfig config_;
};

/// Records which parameter tensors each depth step used.
struct ForwardTrace {
  std::vector<std::vector<const void*>> block_params_per_step;
};

template <typename T>
Tensor<T> encode_sequence(const IntTensor& tokens, const DecoderModel<T>& model);

/// Logits [batch, time, vocab]; position i depends on tokens 0..i only.
template <typename T>
Tensor<T> decoder_forward(const IntTensor& tokens, const DecoderModel<T>& model, ForwardTrace* trace = nullptr);

/// Mean next-token cross-entropy in bits. targets: [batch, time].
template <typename T>
Tensor<T> lm_loss(const Tensor<T>& logits, const IntTensor& targets);

/// Autoregressive sampling from softmax(logits / temperature). The context is
/// truncated to the last seq_len tokens. Returns prompt + generated tokens.
template <typename T>
std::vector<std::int32_t> generate(const DecoderModel<T>& model, const std::vector<std::int32_t>& prompt,
                                   Index n_tokens, double temperature, std::uint64_t seed);

// Checkpoint file: "AGGL", u32 version, u32-length-prefixed config text,
// u32 tensor count, then per tensor: u32 name length, name, u32 rank,
// u64 extents, float32 payload. All integers and floats little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const DecoderModel<T>& model, const std::string& path);

/// Throws CheckpointError on bad magic/version or a layout that does not
/// match the stored config, IoError if the file cannot be read.
template <typename T>
DecoderModel<T> load_checkpoint(const std::string& path);

/// Reads only the config block of a checkpoint.
ModelConfig read_checkpoint_config(const std::string& path);

}  // namespace agglo
