#pragma once

// Attention layers: agglomerative (class-based, linear in sequence length)
// and multi-head scaled dot-product attention (quadratic reference).
//
// All layers take [batch, time, width] inputs and are pure functions of their
// inputs and parameters.

#include <random>
#include <string>
#include <vector>

#include "agglo/tensor.hpp"

namespace agglo {

template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T> tensor;
};

/// Glorot-uniform matrix [fan_in, fan_out]: U(-s, s), s = sqrt(6 / (fan_in + fan_out)).
template <typename T>
Tensor<T> glorot_uniform(Index fan_in, Index fan_out, std::mt19937_64& rng);

/// Learned weights of one agglomerative attention layer.
///
/// Reference and query classifiers are stored separately so information
/// flows from reference elements to query elements. Each class k owns a
/// projection [d, d/m]; `recombine` maps the concatenated class summaries
/// back to width d.
template <typename T>
struct AggloAttentionParams {
  Index d_model = 0;
  Index classes = 0;
  Tensor<T> w_ref;    // [d, m]
  Tensor<T> b_ref;    // [m]
  Tensor<T> w_query;  // [d, m]
  Tensor<T> b_query;  // [m]
  std::vector<Tensor<T>> proj;  // m x [d, d/m]
  Tensor<T> recombine;          // [d, d]

  static AggloAttentionParams init(Index d_model, Index classes, std::mt19937_64& rng);
  Index class_width() const { return d_model / classes; }
  std::vector<ParamRef<T>> params(const std::string& prefix) const;
};

/// Projections of one multi-head dot-product attention layer; each d x d
/// matrix is split column-wise into `heads` groups of width d/h.
template <typename T>
struct FullAttentionParams {
  Index d_model = 0;
  Index heads = 0;
  Tensor<T> w_query;
  Tensor<T> w_key;
  Tensor<T> w_value;
  Tensor<T> w_out;

  static FullAttentionParams init(Index d_model, Index heads, std::mt19937_64& rng);
  Index head_width() const { return d_model / heads; }
  std::vector<ParamRef<T>> params(const std::string& prefix) const;
};

/// Soft class probabilities, [batch, time, classes]; rows sum to one.
template <typename T>
struct ClassAssignment {
  Tensor<T> probs;
};

template <typename T>
ClassAssignment<T> assign_classes(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// Per-class running averages of the projected reference sequence:
/// a[b, i, k, :] = sum_{tau<=i} c_ref[tau,k] x[tau] P_k / n[i,k], with
/// n[i,k] = sum_{tau<=i} c_ref[tau,k]. Shape [batch, time, m, d/m].
template <typename T>
Tensor<T> class_averages_masked(const Tensor<T>& x_ref, const AggloAttentionParams<T>& params);

/// Whole-sequence per-class averages, shape [batch, 1, m, d/m].
template <typename T>
Tensor<T> class_averages_full(const Tensor<T>& x_ref, const AggloAttentionParams<T>& params);

/// Causal agglomerative self-attention: position i only sees reference
/// positions 1..i. x_ref and x_query must have identical shapes.
template <typename T>
Tensor<T> agglo_masked(const Tensor<T>& x_ref, const Tensor<T>& x_query, const AggloAttentionParams<T>& params);

/// Agglomerative attention over the whole reference sequence; every query
/// position mixes the same class summaries. Reference and query lengths may
/// differ.
template <typename T>
Tensor<T> agglo_full(const Tensor<T>& x_ref, const Tensor<T>& x_query, const AggloAttentionParams<T>& params);

/// Multi-head softmax(q k^T / sqrt(d/h)) v attention followed by the output
/// projection. With `causal`, logits for future reference positions get
/// kMaskedLogit added before the softmax; requires equal lengths.
template <typename T>
Tensor<T> full_attention(const Tensor<T>& x_ref, const Tensor<T>& x_query, const FullAttentionParams<T>& params,
                         bool causal);

inline constexpr double kMaskedLogit = -1e9;

/// Upper bound on logits elements materialized at once by full_attention;
/// larger batches are processed in batch chunks.
inline constexpr Index kLogitChunkElements = Index{1} << 24;

namespace testing {
/// Fault injection for negative controls: when set, masked layers ignore
/// the causal restriction.
void set_break_masking(bool broken);
bool break_masking();
}  // namespace testing

}  // namespace agglo
