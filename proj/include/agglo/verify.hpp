#pragma once

// Independent reference computations and the verification suite behind
// `agglo verify`. The oracles here use plain loops over raw values and never
// call the tensor operations they check.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "agglo/attention.hpp"
#include "agglo/model.hpp"

namespace agglo::verify {

/// Row-major [n, k] x [k, m] triple loop.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, Index n, Index k,
                                 Index m);

/// Recomputes every position's class averages from scratch (sums over
/// tau <= i for each i separately), then mixes and recombines. [b, t, d].
std::vector<double> agglo_masked_oracle(const Tensor<double>& x_ref, const Tensor<double>& x_query,
                                        const AggloAttentionParams<double>& p);

/// Whole-sequence class averages per class, mixed per query position.
std::vector<double> agglo_full_oracle(const Tensor<double>& x_ref, const Tensor<double>& x_query,
                                      const AggloAttentionParams<double>& p);

/// Per-pair dot products and an explicit softmax. Causal attention sums over
/// j <= i only instead of adding a mask.
std::vector<double> full_attention_oracle(const Tensor<double>& x_ref, const Tensor<double>& x_query,
                                          const FullAttentionParams<double>& p, bool causal);

/// Single class: running mean of x, times the lone projection, times Q.
std::vector<double> single_class_oracle(const Tensor<double>& x, const AggloAttentionParams<double>& p);

/// max |a - b| over equally sized buffers.
double max_abs_diff(std::span<const double> a, std::span<const double> b);
template <typename T>
double max_abs_diff(std::span<const T> a, std::span<const double> b);

template <typename T>
Tensor<T> random_tensor(const Shape& shape, std::uint64_t seed, double scale = 1.0);

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0;
};

/// Prefix-sum kernel against per-position recomputation over `lengths`
/// and `seeds` random problems each (float64).
CheckResult check_prefix_sum_oracle(const std::vector<Index>& lengths, int seeds, double tol, std::uint64_t seed = 0);
CheckResult check_agglo_full_oracle(double tol, std::uint64_t seed = 0);
CheckResult check_full_attention_oracle(double tol, std::uint64_t seed = 0);
/// float32 agglo_masked against the float64 oracle.
CheckResult check_prefix_sum_float32(double tol, std::uint64_t seed = 0);

/// Perturbs one input position and checks earlier outputs are unchanged.
CheckResult check_layer_causality(AttentionKind kind, int trials, double tol, std::uint64_t seed = 0);
/// Same at the token level through the whole decoder.
CheckResult check_decoder_causality(AttentionKind kind, EncodingKind encoding, int trials, double tol,
                                    std::uint64_t seed = 0);

/// Central differences for every attention parameter and the layer input.
CheckResult check_agglo_gradients(double tol, std::uint64_t seed = 0);
CheckResult check_full_gradients(double tol, std::uint64_t seed = 0);
/// Every parameter of a small decoder.
CheckResult check_decoder_gradients(AttentionKind kind, EncodingKind encoding, double tol, std::uint64_t seed = 0);

CheckResult check_single_class_collapse(double tol, std::uint64_t seed = 0);

struct VerifyOptions {
  std::uint64_t seed = 0;
  bool float32_checks = false;
};

/// All checks in a fixed order.
std::vector<CheckResult> run_verification(const VerifyOptions& options = {});

/// Aligned pass/fail table.
std::string format_results(const std::vector<CheckResult>& results);

}  // namespace agglo::verify
