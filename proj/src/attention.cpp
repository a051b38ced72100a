#include "agglo/attention.hpp"

#include <atomic>
#include <cmath>

#include "agglo/errors.hpp"
#include "agglo/ops.hpp"

namespace agglo {

namespace {

std::atomic<bool> g_break_masking{false};

void require_rank3(const Shape& s, const char* what) {
  if (s.size() != 3) throw DimensionError(std::string(what) + " must be [batch, time, width], got " + shape_str(s));
}

template <typename T>
void check_agglo_inputs(const Tensor<T>& x_ref, const Tensor<T>& x_query, const AggloAttentionParams<T>& p,
                        bool same_time) {
  require_rank3(x_ref.shape(), "reference input");
  require_rank3(x_query.shape(), "query input");
  const bool ok = x_ref.dim(0) == x_query.dim(0) && x_ref.dim(2) == p.d_model && x_query.dim(2) == p.d_model &&
                  (!same_time || x_ref.dim(1) == x_query.dim(1));
  if (!ok) {
    throw DimensionError("agglomerative attention: reference " + shape_str(x_ref.shape()) + " and query " +
                         shape_str(x_query.shape()) + " incompatible with width " + std::to_string(p.d_model));
  }
}

// Projects the reference sequence once through all class projections
// ([d, d] formed by concatenating P_1..P_m) and weights each class slot by
// the reference class probability. Returns (weighted [b,t,m,w], mass [b,t,m,1]).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> weighted_projection(const Tensor<T>& x_ref, const Tensor<T>& c_ref,
                                                    const AggloAttentionParams<T>& p) {
  const Index b = x_ref.dim(0);
  const Index t = x_ref.dim(1);
  const Index m = p.classes;
  const Tensor<T> proj = m == 1 ? p.proj[0] : concat(p.proj, 1);
  Tensor<T> xp = reshape(matmul(x_ref, proj), {b, t, m, p.class_width()});
  Tensor<T> mass = reshape(c_ref, {b, t, m, 1});
  return {mul(xp, mass), mass};
}

template <typename T>
Tensor<T> averages(const Tensor<T>& x_ref, const Tensor<T>& c_ref, const AggloAttentionParams<T>& p, bool masked) {
  auto [weighted, mass] = weighted_projection(x_ref, c_ref, p);
  if (masked) return div(cumsum(weighted, 1), cumsum(mass, 1));
  return div(sum(weighted, 1, true), sum(mass, 1, true));
}

// Scales class summaries by the query assignment, concatenates the classes
// and applies the recombination matrix.
template <typename T>
Tensor<T> recombine(const Tensor<T>& avg, const Tensor<T>& c_query, const AggloAttentionParams<T>& p) {
  const Index b = c_query.dim(0);
  const Index t = c_query.dim(1);
  Tensor<T> scaled = mul(avg, reshape(c_query, {b, t, p.classes, 1}));
  return matmul(reshape(scaled, {b, t, p.d_model}), p.recombine);
}

// [b, t, d] -> [b, h, t, d/h]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, Index heads) {
  const Index b = x.dim(0);
  const Index t = x.dim(1);
  return transpose(reshape(x, {b, t, heads, x.dim(2) / heads}), 1, 2);
}

}  // namespace

namespace testing {
void set_break_masking(bool broken) { g_break_masking = broken; }
bool break_masking() { return g_break_masking; }
}  // namespace testing

template <typename T>
Tensor<T> glorot_uniform(Index fan_in, Index fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor<T> w({fan_in, fan_out});
  for (auto& v : w.mutable_values()) v = static_cast<T>(dist(rng));
  return w;
}

template <typename T>
AggloAttentionParams<T> AggloAttentionParams<T>::init(Index d_model, Index classes, std::mt19937_64& rng) {
  if (classes <= 0 || d_model <= 0 || d_model % classes != 0) {
    throw ContractError("agglomerative attention needs width divisible by class count, got d=" +
                        std::to_string(d_model) + ", m=" + std::to_string(classes));
  }
  AggloAttentionParams p;
  p.d_model = d_model;
  p.classes = classes;
  p.w_ref = glorot_uniform<T>(d_model, classes, rng);
  p.b_ref = Tensor<T>({classes});
  p.w_query = glorot_uniform<T>(d_model, classes, rng);
  p.b_query = Tensor<T>({classes});
  for (Index k = 0; k < classes; ++k) p.proj.push_back(glorot_uniform<T>(d_model, d_model / classes, rng));
  p.recombine = glorot_uniform<T>(d_model, d_model, rng);
  return p;
}

template <typename T>
std::vector<ParamRef<T>> AggloAttentionParams<T>::params(const std::string& prefix) const {
  std::vector<ParamRef<T>> out{{prefix + "w_ref", w_ref},
                               {prefix + "b_ref", b_ref},
                               {prefix + "w_query", w_query},
                               {prefix + "b_query", b_query}};
  for (std::size_t k = 0; k < proj.size(); ++k) out.push_back({prefix + "proj." + std::to_string(k), proj[k]});
  out.push_back({prefix + "recombine", recombine});
  return out;
}

template <typename T>
FullAttentionParams<T> FullAttentionParams<T>::init(Index d_model, Index heads, std::mt19937_64& rng) {
  if (heads <= 0 || d_model <= 0 || d_model % heads != 0) {
    throw ContractError("full attention needs width divisible by head count, got d=" + std::to_string(d_model) +
                        ", h=" + std::to_string(heads));
  }
  FullAttentionParams p;
  p.d_model = d_model;
  p.heads = heads;
  p.w_query = glorot_uniform<T>(d_model, d_model, rng);
  p.w_key = glorot_uniform<T>(d_model, d_model, rng);
  p.w_value = glorot_uniform<T>(d_model, d_model, rng);
  p.w_out = glorot_uniform<T>(d_model, d_model, rng);
  return p;
}

template <typename T>
std::vector<ParamRef<T>> FullAttentionParams<T>::params(const std::string& prefix) const {
  return {{prefix + "w_query", w_query}, {prefix + "w_key", w_key}, {prefix + "w_value", w_value},
          {prefix + "w_out", w_out}};
}

template <typename T>
ClassAssignment<T> assign_classes(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2 || bias.rank() != 1 || x.dim(-1) != weight.dim(0) || weight.dim(1) != bias.dim(0)) {
    throw DimensionError("assign_classes: input " + shape_str(x.shape()) + ", weight " + shape_str(weight.shape()) +
                         ", bias " + shape_str(bias.shape()));
  }
  return {softmax(add(matmul(x, weight), bias), -1)};
}

template <typename T>
Tensor<T> class_averages_masked(const Tensor<T>& x_ref, const AggloAttentionParams<T>& params) {
  check_agglo_inputs(x_ref, x_ref, params, true);
  const auto c_ref = assign_classes(x_ref, params.w_ref, params.b_ref);
  return averages(x_ref, c_ref.probs, params, true);
}

template <typename T>
Tensor<T> class_averages_full(const Tensor<T>& x_ref, const AggloAttentionParams<T>& params) {
  check_agglo_inputs(x_ref, x_ref, params, true);
  const auto c_ref = assign_classes(x_ref, params.w_ref, params.b_ref);
  return averages(x_ref, c_ref.probs, params, false);
}

template <typename T>
Tensor<T> agglo_masked(const Tensor<T>& x_ref, const Tensor<T>& x_query, const AggloAttentionParams<T>& params) {
  check_agglo_inputs(x_ref, x_query, params, true);
  const auto c_ref = assign_classes(x_ref, params.w_ref, params.b_ref);
  const auto c_query = assign_classes(x_query, params.w_query, params.b_query);
  const bool masked = !testing::break_masking();
  return recombine(averages(x_ref, c_ref.probs, params, masked), c_query.probs, params);
}

template <typename T>
Tensor<T> agglo_full(const Tensor<T>& x_ref, const Tensor<T>& x_query, const AggloAttentionParams<T>& params) {
  check_agglo_inputs(x_ref, x_query, params, false);
  const auto c_ref = assign_classes(x_ref, params.w_ref, params.b_ref);
  const auto c_query = assign_classes(x_query, params.w_query, params.b_query);
  return recombine(averages(x_ref, c_ref.probs, params, false), c_query.probs, params);
}

template <typename T>
Tensor<T> full_attention(const Tensor<T>& x_ref, const Tensor<T>& x_query, const FullAttentionParams<T>& params,
                         bool causal) {
  require_rank3(x_ref.shape(), "reference input");
  require_rank3(x_query.shape(), "query input");
  const Index b = x_query.dim(0);
  const Index tq = x_query.dim(1);
  const Index tr = x_ref.dim(1);
  const Index d = params.d_model;
  const Index h = params.heads;
  if (x_ref.dim(0) != b || x_ref.dim(2) != d || x_query.dim(2) != d) {
    throw DimensionError("full attention: reference " + shape_str(x_ref.shape()) + " and query " +
                         shape_str(x_query.shape()) + " incompatible with width " + std::to_string(d));
  }
  if (causal && tq != tr) {
    throw ContractError("causal attention needs equal reference and query lengths, got " + std::to_string(tr) +
                        " and " + std::to_string(tq));
  }

  const Tensor<T> q = split_heads(matmul(x_query, params.w_query), h);
  const Tensor<T> k = split_heads(matmul(x_ref, params.w_key), h);
  const Tensor<T> v = split_heads(matmul(x_ref, params.w_value), h);
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(params.head_width()));

  Tensor<T> mask;
  if (causal && !testing::break_masking()) {
    mask = Tensor<T>({tq, tr});
    auto mv = mask.mutable_values();
    for (Index i = 0; i < tq; ++i) {
      for (Index j = i + 1; j < tr; ++j) mv[i * tr + j] = static_cast<T>(kMaskedLogit);
    }
  }

  const Index per_sample = h * tq * tr;
  const Index chunk = std::max<Index>(1, kLogitChunkElements / per_sample);
  std::vector<Tensor<T>> parts;
  for (Index start = 0; start < b; start += chunk) {
    const Index stop = std::min(b, start + chunk);
    const bool whole = start == 0 && stop == b;
    const Tensor<T> qc = whole ? q : slice(q, 0, start, stop);
    const Tensor<T> kc = whole ? k : slice(k, 0, start, stop);
    const Tensor<T> vc = whole ? v : slice(v, 0, start, stop);
    Tensor<T> logits = scale(matmul(qc, kc, true), inv_sqrt);
    if (mask.defined()) logits = add(logits, mask);
    parts.push_back(matmul(softmax(logits, -1), vc));
  }
  const Tensor<T> heads = parts.size() == 1 ? parts[0] : concat(parts, 0);
  return matmul(reshape(transpose(heads, 1, 2), {b, tq, d}), params.w_out);
}

#define AGGLO_INSTANTIATE(T)                                                                                   \
  template Tensor<T> glorot_uniform<T>(Index, Index, std::mt19937_64&);                                        \
  template struct AggloAttentionParams<T>;                                                                     \
  template struct FullAttentionParams<T>;                                                                      \
  template ClassAssignment<T> assign_classes(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> class_averages_masked(const Tensor<T>&, const AggloAttentionParams<T>&);                  \
  template Tensor<T> class_averages_full(const Tensor<T>&, const AggloAttentionParams<T>&);                    \
  template Tensor<T> agglo_masked(const Tensor<T>&, const Tensor<T>&, const AggloAttentionParams<T>&);         \
  template Tensor<T> agglo_full(const Tensor<T>&, const Tensor<T>&, const AggloAttentionParams<T>&);           \
  template Tensor<T> full_attention(const Tensor<T>&, const Tensor<T>&, const FullAttentionParams<T>&, bool);

AGGLO_INSTANTIATE(float)
AGGLO_INSTANTIATE(double)

#undef AGGLO_INSTANTIATE

}  // namespace agglo
