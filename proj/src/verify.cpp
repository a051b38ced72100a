#include "agglo/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>

#include "agglo/gradcheck.hpp"
#include "agglo/ops.hpp"

namespace agglo::verify {

namespace {

using Clock = std::chrono::steady_clock;

constexpr double kEps = 1e-9;  // same guard as the kernel's division

std::vector<double> softmax_row(std::vector<double> z) {
  const double mx = *std::max_element(z.begin(), z.end());
  double s = 0;
  for (auto& v : z) {
    v = std::exp(v - mx);
    s += v;
  }
  for (auto& v : z) v /= s;
  return z;
}

// [b*t, m] class probabilities.
std::vector<double> class_probs(std::span<const double> x, Index rows, Index d, std::span<const double> w,
                                std::span<const double> bias, Index m) {
  std::vector<double> out(static_cast<std::size_t>(rows * m));
  for (Index r = 0; r < rows; ++r) {
    std::vector<double> z(static_cast<std::size_t>(m));
    for (Index k = 0; k < m; ++k) {
      double s = bias[k];
      for (Index j = 0; j < d; ++j) s += x[r * d + j] * w[j * m + k];
      z[k] = s;
    }
    z = softmax_row(std::move(z));
    std::copy(z.begin(), z.end(), out.begin() + r * m);
  }
  return out;
}

// (x_row . P^k)_l
double project(std::span<const double> x, Index row, Index d, std::span<const double> proj, Index w, Index l) {
  double s = 0;
  for (Index j = 0; j < d; ++j) s += x[row * d + j] * proj[j * w + l];
  return s;
}

// Concatenated class mixture p_i times Q.
void recombine_row(const std::vector<double>& mixed, std::span<const double> q, Index d, double* out) {
  for (Index o = 0; o < d; ++o) {
    double s = 0;
    for (Index j = 0; j < d; ++j) s += mixed[j] * q[j * d + o];
    out[o] = s;
  }
}

std::vector<double> agglo_oracle(const Tensor<double>& x_ref, const Tensor<double>& x_query,
                                 const AggloAttentionParams<double>& p, bool masked) {
  const Index b = x_query.dim(0);
  const Index tq = x_query.dim(1);
  const Index tr = x_ref.dim(1);
  const Index d = p.d_model;
  const Index m = p.classes;
  const Index w = d / m;
  const auto xr = x_ref.values();
  const auto xq = x_query.values();
  const auto cr = class_probs(xr, b * tr, d, p.w_ref.values(), p.b_ref.values(), m);
  const auto cq = class_probs(xq, b * tq, d, p.w_query.values(), p.b_query.values(), m);
  std::vector<double> out(static_cast<std::size_t>(b * tq * d));
  for (Index bi = 0; bi < b; ++bi) {
    for (Index i = 0; i < tq; ++i) {
      const Index upto = masked ? i + 1 : tr;
      std::vector<double> mixed(static_cast<std::size_t>(d));
      for (Index k = 0; k < m; ++k) {
        const auto proj = p.proj[static_cast<std::size_t>(k)].values();
        double n = 0;
        for (Index tau = 0; tau < upto; ++tau) n += cr[(bi * tr + tau) * m + k];
        for (Index l = 0; l < w; ++l) {
          double num = 0;
          for (Index tau = 0; tau < upto; ++tau) {
            num += cr[(bi * tr + tau) * m + k] * project(xr, bi * tr + tau, d, proj, w, l);
          }
          mixed[k * w + l] = cq[(bi * tq + i) * m + k] * (num / (n + kEps));
        }
      }
      recombine_row(mixed, p.recombine.values(), d, &out[(bi * tq + i) * d]);
    }
  }
  return out;
}

CheckResult finish(std::string name, bool passed, std::string detail, Clock::time_point start) {
  return {std::move(name), passed, std::move(detail), std::chrono::duration<double>(Clock::now() - start).count()};
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

template <typename T>
void fill_normal(Tensor<T>& t, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> normal(0.0, scale);
  for (auto& v : t.mutable_values()) v = static_cast<T>(normal(rng));
}

// Glorot weights plus non-zero biases so the bias paths are exercised.
template <typename T>
AggloAttentionParams<T> random_agglo(Index d, Index m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto p = AggloAttentionParams<T>::init(d, m, rng);
  fill_normal(p.b_ref, rng, 0.5);
  fill_normal(p.b_query, rng, 0.5);
  return p;
}

template <typename T>
FullAttentionParams<T> random_full(Index d, Index h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return FullAttentionParams<T>::init(d, h, rng);
}

template <typename From>
Tensor<double> to_double(const Tensor<From>& t) {
  return Tensor<double>(t.shape(), std::vector<double>(t.values().begin(), t.values().end()));
}

AggloAttentionParams<double> to_double(const AggloAttentionParams<float>& p) {
  AggloAttentionParams<double> out;
  out.d_model = p.d_model;
  out.classes = p.classes;
  out.w_ref = to_double(p.w_ref);
  out.b_ref = to_double(p.b_ref);
  out.w_query = to_double(p.w_query);
  out.b_query = to_double(p.b_query);
  for (const auto& pr : p.proj) out.proj.push_back(to_double(pr));
  out.recombine = to_double(p.recombine);
  return out;
}

std::vector<NamedParam> named(const std::vector<ParamRef<double>>& refs) {
  std::vector<NamedParam> out;
  for (const auto& r : refs) {
    auto t = r.tensor;
    t.set_requires_grad(true);
    out.push_back({r.name, t});
  }
  return out;
}

// Worst relative error across a gradient check, and whether all are below tol.
std::pair<bool, std::string> summarize(const std::vector<GradCheckResult>& results, double tol) {
  double worst = 0;
  std::string worst_name;
  bool ok = true;
  std::string failures;
  for (const auto& r : results) {
    if (!(r.rel_error < tol)) {
      ok = false;
      failures += " " + r.name + "=" + fmt("%.2e", r.rel_error);
    }
    if (r.rel_error > worst || worst_name.empty()) {
      worst = r.rel_error;
      worst_name = r.name;
    }
  }
  std::string detail = std::to_string(results.size()) + " tensors, worst " + worst_name + " " + fmt("%.2e", worst);
  if (!ok) detail += "; failing:" + failures;
  return {ok, detail};
}

ModelConfig micro_config(AttentionKind kind, EncodingKind encoding, Index seq_len, Index d, Index m) {
  ModelConfig c;
  c.attention = kind;
  c.encoding = encoding;
  c.n_blocks = 2;
  c.seq_len = seq_len;
  c.d_model = d;
  c.heads_or_classes = m;
  c.vocab_size = 27;
  c.ffn_multiplier = 2;
  c.conv_width = 3;
  return c;
}

IntTensor random_tokens(Index b, Index t, Index vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::int32_t> dist(0, static_cast<std::int32_t>(vocab - 1));
  std::vector<std::int32_t> v(static_cast<std::size_t>(b * t));
  for (auto& x : v) x = dist(rng);
  return IntTensor({b, t}, std::move(v));
}

std::string kind_label(AttentionKind a) { return a == AttentionKind::Full ? "full" : "agglo"; }
std::string enc_label(EncodingKind e) { return e == EncodingKind::Embedding ? "embedding" : "conv"; }

}  // namespace

std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, Index n, Index k,
                                 Index m) {
  std::vector<double> out(static_cast<std::size_t>(n * m));
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < m; ++j) {
      double s = 0;
      for (Index l = 0; l < k; ++l) s += a[i * k + l] * b[l * m + j];
      out[i * m + j] = s;
    }
  }
  return out;
}

std::vector<double> agglo_masked_oracle(const Tensor<double>& x_ref, const Tensor<double>& x_query,
                                        const AggloAttentionParams<double>& p) {
  return agglo_oracle(x_ref, x_query, p, true);
}

std::vector<double> agglo_full_oracle(const Tensor<double>& x_ref, const Tensor<double>& x_query,
                                      const AggloAttentionParams<double>& p) {
  return agglo_oracle(x_ref, x_query, p, false);
}

std::vector<double> full_attention_oracle(const Tensor<double>& x_ref, const Tensor<double>& x_query,
                                          const FullAttentionParams<double>& p, bool causal) {
  const Index b = x_query.dim(0);
  const Index tq = x_query.dim(1);
  const Index tr = x_ref.dim(1);
  const Index d = p.d_model;
  const Index h = p.heads;
  const Index w = d / h;
  const auto xr = x_ref.values();
  const auto xq = x_query.values();
  auto proj = [d](std::span<const double> x, Index row, std::span<const double> wm, Index col) {
    double s = 0;
    for (Index j = 0; j < d; ++j) s += x[row * d + j] * wm[j * d + col];
    return s;
  };
  std::vector<double> out(static_cast<std::size_t>(b * tq * d));
  for (Index bi = 0; bi < b; ++bi) {
    for (Index i = 0; i < tq; ++i) {
      std::vector<double> heads(static_cast<std::size_t>(d));
      for (Index hh = 0; hh < h; ++hh) {
        const Index visible = causal ? i + 1 : tr;
        std::vector<double> logits(static_cast<std::size_t>(visible));
        for (Index j = 0; j < visible; ++j) {
          double dot = 0;
          for (Index l = 0; l < w; ++l) {
            dot += proj(xq, bi * tq + i, p.w_query.values(), hh * w + l) *
                   proj(xr, bi * tr + j, p.w_key.values(), hh * w + l);
          }
          logits[j] = dot / std::sqrt(static_cast<double>(w));
        }
        const auto a = softmax_row(std::move(logits));
        for (Index l = 0; l < w; ++l) {
          double s = 0;
          for (Index j = 0; j < visible; ++j) s += a[j] * proj(xr, bi * tr + j, p.w_value.values(), hh * w + l);
          heads[hh * w + l] = s;
        }
      }
      recombine_row(heads, p.w_out.values(), d, &out[(bi * tq + i) * d]);
    }
  }
  return out;
}

std::vector<double> single_class_oracle(const Tensor<double>& x, const AggloAttentionParams<double>& p) {
  const Index b = x.dim(0);
  const Index t = x.dim(1);
  const Index d = x.dim(2);
  const auto xv = x.values();
  const auto pv = p.proj[0].values();
  std::vector<double> out(static_cast<std::size_t>(b * t * d));
  for (Index bi = 0; bi < b; ++bi) {
    std::vector<double> running(static_cast<std::size_t>(d));
    for (Index i = 0; i < t; ++i) {
      for (Index j = 0; j < d; ++j) running[j] += xv[(bi * t + i) * d + j];
      std::vector<double> mean_proj(static_cast<std::size_t>(d));
      for (Index l = 0; l < d; ++l) {
        double s = 0;
        for (Index j = 0; j < d; ++j) s += running[j] / static_cast<double>(i + 1) * pv[j * d + l];
        mean_proj[l] = s;
      }
      recombine_row(mean_proj, p.recombine.values(), d, &out[(bi * t + i) * d]);
    }
  }
  return out;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  return max_abs_diff<double>(a, b);
}

template <typename T>
double max_abs_diff(std::span<const T> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = std::abs(static_cast<double>(a[i]) - b[i]);
    if (!(diff <= worst)) worst = diff;  // propagates NaN as a failure
  }
  return worst;
}

template double max_abs_diff<float>(std::span<const float>, std::span<const double>);
template double max_abs_diff<double>(std::span<const double>, std::span<const double>);

template <typename T>
Tensor<T> random_tensor(const Shape& shape, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  Tensor<T> t(shape);
  fill_normal(t, rng, scale);
  return t;
}

template Tensor<float> random_tensor<float>(const Shape&, std::uint64_t, double);
template Tensor<double> random_tensor<double>(const Shape&, std::uint64_t, double);

CheckResult check_prefix_sum_oracle(const std::vector<Index>& lengths, int seeds, double tol, std::uint64_t seed) {
  const auto start = Clock::now();
  double worst = 0;
  Index worst_t = 0;
  for (Index t : lengths) {
    for (int s = 0; s < seeds; ++s) {
      const std::uint64_t base = seed * 1000003 + static_cast<std::uint64_t>(t) * 101 + static_cast<std::uint64_t>(s);
      const auto p = random_agglo<double>(16, 4, base);
      const auto x = random_tensor<double>({2, t, 16}, base + 7);
      const double diff = max_abs_diff(agglo_masked(x, x, p).values(), std::span<const double>(agglo_masked_oracle(x, x, p)));
      if (!(diff <= worst)) {
        worst = diff;
        worst_t = t;
      }
    }
  }
  return finish("prefix_sum_vs_naive", worst < tol,
                "max abs diff " + fmt("%.3e", worst) + " (t=" + std::to_string(worst_t) + "), tol " + fmt("%.0e", tol),
                start);
}

CheckResult check_prefix_sum_float32(double tol, std::uint64_t seed) {
  const auto start = Clock::now();
  const auto pf = random_agglo<float>(64, 8, seed + 11);
  const auto xf = random_tensor<float>({2, 64, 64}, seed + 12);
  const auto expected = agglo_masked_oracle(to_double(xf), to_double(xf), to_double(pf));
  const double diff = max_abs_diff<float>(agglo_masked(xf, xf, pf).values(), expected);
  return finish("prefix_sum_vs_naive_float32", diff < tol, "max abs diff " + fmt("%.3e", diff), start);
}

CheckResult check_agglo_full_oracle(double tol, std::uint64_t seed) {
  const auto start = Clock::now();
  double worst = 0;
  for (int s = 0; s < 5; ++s) {
    const auto p = random_agglo<double>(16, 4, seed + 200 + s);
    const auto xr = random_tensor<double>({2, 9, 16}, seed + 300 + s);
    const auto xq = random_tensor<double>({2, 5, 16}, seed + 400 + s);
    worst = std::max(worst, max_abs_diff(agglo_full(xr, xq, p).values(), std::span<const double>(agglo_full_oracle(xr, xq, p))));
  }
  return finish("agglo_full_vs_direct_sum", worst < tol, "max abs diff " + fmt("%.3e", worst), start);
}

CheckResult check_full_attention_oracle(double tol, std::uint64_t seed) {
  const auto start = Clock::now();
  double worst = 0;
  for (int s = 0; s < 5; ++s) {
    const auto p = random_full<double>(16, 4, seed + 500 + s);
    const auto x = random_tensor<double>({2, 11, 16}, seed + 600 + s);
    const auto xq = random_tensor<double>({2, 4, 16}, seed + 700 + s);
    worst = std::max(worst, max_abs_diff(full_attention(x, x, p, true).values(),
                                         std::span<const double>(full_attention_oracle(x, x, p, true))));
    worst = std::max(worst, max_abs_diff(full_attention(x, xq, p, false).values(),
                                         std::span<const double>(full_attention_oracle(x, xq, p, false))));
  }
  return finish("full_attention_vs_pairwise", worst < tol, "max abs diff " + fmt("%.3e", worst), start);
}

CheckResult check_layer_causality(AttentionKind kind, int trials, double tol, std::uint64_t seed) {
  const auto start = Clock::now();
  const Index t = 16;
  const Index d = 16;
  std::mt19937_64 rng(seed + 900 + static_cast<std::uint64_t>(kind));
  std::uniform_int_distribution<Index> pos(1, t - 1);
  const auto agglo = random_agglo<double>(d, 4, seed + 901);
  const auto full = random_full<double>(d, 4, seed + 902);
  auto run = [&](const Tensor<double>& x) {
    return kind == AttentionKind::Full ? full_attention(x, x, full, true) : agglo_masked(x, x, agglo);
  };
  double worst = 0;
  int failures = 0;
  for (int trial = 0; trial < trials; ++trial) {
    const auto x = random_tensor<double>({2, t, d}, seed + 1000 + trial);
    const auto base = run(x);
    const Index p = pos(rng);
    Tensor<double> x2(x.shape(), std::vector<double>(x.values().begin(), x.values().end()));
    std::normal_distribution<double> normal(0.0, 3.0);
    auto v = x2.mutable_values();
    for (Index bi = 0; bi < 2; ++bi) {
      for (Index j = 0; j < d; ++j) v[(bi * t + p) * d + j] += normal(rng);
    }
    const auto moved = run(x2);
    double diff = 0;
    for (Index bi = 0; bi < 2; ++bi) {
      for (Index i = 0; i < p * d; ++i) {
        diff = std::max(diff, std::abs(base.values()[bi * t * d + i] - moved.values()[bi * t * d + i]));
      }
    }
    worst = std::max(worst, diff);
    if (!(diff < tol)) ++failures;
  }
  return finish("layer_causality_" + kind_label(kind), failures == 0,
                std::to_string(trials - failures) + "/" + std::to_string(trials) + " trials, max leak " +
                    fmt("%.3e", worst),
                start);
}

CheckResult check_decoder_causality(AttentionKind kind, EncodingKind encoding, int trials, double tol,
                                    std::uint64_t seed) {
  const auto start = Clock::now();
  const Index t = 24;
  const auto config = micro_config(kind, encoding, t, 16, 4);
  const auto model = DecoderModel<double>::init(config, seed + 1200);
  std::mt19937_64 rng(seed + 1300 + static_cast<std::uint64_t>(kind) * 2 + static_cast<std::uint64_t>(encoding));
  std::uniform_int_distribution<Index> pos(1, t - 1);
  std::uniform_int_distribution<std::int32_t> shift(1, 26);
  const Index v = config.vocab_size;
  double worst = 0;
  int failures = 0;
  for (int trial = 0; trial < trials; ++trial) {
    const auto tokens = random_tokens(2, t, v, rng);
    const auto base = decoder_forward(tokens, model);
    const Index p = pos(rng);
    IntTensor changed = tokens;
    for (Index bi = 0; bi < 2; ++bi) {
      auto& tok = changed.values[static_cast<std::size_t>(bi * t + p)];
      tok = (tok + shift(rng)) % static_cast<std::int32_t>(v);
    }
    const auto moved = decoder_forward(changed, model);
    double diff = 0;
    for (Index bi = 0; bi < 2; ++bi) {
      for (Index i = 0; i < p * v; ++i) {
        diff = std::max(diff, std::abs(base.values()[bi * t * v + i] - moved.values()[bi * t * v + i]));
      }
    }
    worst = std::max(worst, diff);
    if (!(diff < tol)) ++failures;
  }
  return finish("decoder_causality_" + kind_label(kind) + "_" + enc_label(encoding), failures == 0,
                std::to_string(trials - failures) + "/" + std::to_string(trials) + " trials, max leak " +
                    fmt("%.3e", worst),
                start);
}

CheckResult check_agglo_gradients(double tol, std::uint64_t seed) {
  const auto start = Clock::now();
  std::vector<GradCheckResult> all;
  for (bool masked : {true, false}) {
    const auto p = random_agglo<double>(8, 2, seed + 1500);
    auto x = random_tensor<double>({2, 5, 8}, seed + 1501);
    auto xq = random_tensor<double>({2, masked ? 5 : 3, 8}, seed + 1502);
    const auto r = random_tensor<double>({2, masked ? 5 : 3, 8}, seed + 1503);
    x.set_requires_grad(true);
    xq.set_requires_grad(true);
    auto params = named(p.params(masked ? "masked." : "full."));
    params.push_back({masked ? "masked.x_ref" : "full.x_ref", x});
    params.push_back({masked ? "masked.x_query" : "full.x_query", xq});
    auto loss = [&]() {
      return sum_all(mul(masked ? agglo_masked(x, xq, p) : agglo_full(x, xq, p), r));
    };
    for (auto& res : check_gradients(loss, params)) all.push_back(res);
  }
  auto [ok, detail] = summarize(all, tol);
  return finish("gradients_agglomerative", ok, detail, start);
}

CheckResult check_full_gradients(double tol, std::uint64_t seed) {
  const auto start = Clock::now();
  std::vector<GradCheckResult> all;
  for (bool causal : {true, false}) {
    const auto p = random_full<double>(8, 2, seed + 1600);
    auto x = random_tensor<double>({2, 5, 8}, seed + 1601);
    auto xq = random_tensor<double>({2, causal ? 5 : 3, 8}, seed + 1602);
    const auto r = random_tensor<double>({2, causal ? 5 : 3, 8}, seed + 1603);
    x.set_requires_grad(true);
    xq.set_requires_grad(true);
    auto params = named(p.params(causal ? "causal." : "open."));
    params.push_back({causal ? "causal.x" : "open.x_ref", x});
    if (!causal) params.push_back({"open.x_query", xq});
    auto loss = [&]() { return sum_all(mul(full_attention(x, causal ? x : xq, p, causal), r)); };
    for (auto& res : check_gradients(loss, params)) all.push_back(res);
  }
  auto [ok, detail] = summarize(all, tol);
  return finish("gradients_full", ok, detail, start);
}

CheckResult check_decoder_gradients(AttentionKind kind, EncodingKind encoding, double tol, std::uint64_t seed) {
  const auto start = Clock::now();
  const auto config = micro_config(kind, encoding, 6, 8, 2);
  const auto model = DecoderModel<double>::init(config, seed + 1700);
  // Random non-trivial norms and biases.
  std::mt19937_64 rng(seed + 1701);
  for (auto& p : model.parameters()) {
    if (p.name.find(".b") != std::string::npos || p.name.find("gain") != std::string::npos) {
      std::normal_distribution<double> normal(p.name.find("gain") != std::string::npos ? 1.0 : 0.0, 0.2);
      for (auto& v : p.tensor.mutable_values()) v = normal(rng);
    }
  }
  const auto tokens = random_tokens(2, 6, config.vocab_size, rng);
  const auto targets = random_tokens(2, 6, config.vocab_size, rng);
  auto loss = [&]() { return lm_loss(decoder_forward(tokens, model), targets); };
  auto [ok, detail] = summarize(check_gradients(loss, named(model.parameters())), tol);
  return finish("gradients_decoder_" + kind_label(kind) + "_" + enc_label(encoding), ok, detail, start);
}

CheckResult check_single_class_collapse(double tol, std::uint64_t seed) {
  const auto start = Clock::now();
  double worst = 0;
  for (int s = 0; s < 5; ++s) {
    const auto p = random_agglo<double>(8, 1, seed + 1800 + s);
    const auto x = random_tensor<double>({2, 20, 8}, seed + 1900 + s);
    worst = std::max(worst, max_abs_diff(agglo_masked(x, x, p).values(), std::span<const double>(single_class_oracle(x, p))));
  }
  return finish("single_class_running_mean", worst < tol, "max abs diff " + fmt("%.3e", worst), start);
}

std::vector<CheckResult> run_verification(const VerifyOptions& options) {
  const std::uint64_t s = options.seed;
  std::vector<CheckResult> out;
  out.push_back(check_prefix_sum_oracle({1, 2, 3, 17, 128, 256}, 20, 1e-10, s));
  out.push_back(check_agglo_full_oracle(1e-10, s));
  out.push_back(check_full_attention_oracle(1e-10, s));
  if (options.float32_checks) out.push_back(check_prefix_sum_float32(1e-5, s));
  for (auto kind : {AttentionKind::Full, AttentionKind::Agglomerative}) {
    out.push_back(check_layer_causality(kind, 50, 1e-6, s));
  }
  for (auto kind : {AttentionKind::Full, AttentionKind::Agglomerative}) {
    for (auto enc : {EncodingKind::Embedding, EncodingKind::Convolution}) {
      out.push_back(check_decoder_causality(kind, enc, 50, 1e-6, s));
    }
  }
  out.push_back(check_agglo_gradients(1e-5, s));
  out.push_back(check_full_gradients(1e-5, s));
  for (auto kind : {AttentionKind::Full, AttentionKind::Agglomerative}) {
    for (auto enc : {EncodingKind::Embedding, EncodingKind::Convolution}) {
      out.push_back(check_decoder_gradients(kind, enc, 1e-4, s));
    }
  }
  out.push_back(check_single_class_collapse(1e-6, s));
  return out;
}

std::string format_results(const std::vector<CheckResult>& results) {
  std::size_t width = 5;
  for (const auto& r : results) width = std::max(width, r.name.size());
  std::ostringstream out;
  for (const auto& r : results) {
    out << (r.passed ? "PASS  " : "FAIL  ") << r.name << std::string(width - r.name.size() + 2, ' ') << r.detail
        << fmt("  (%.2fs)", r.seconds) << '\n';
  }
  return out.str();
}

}  // namespace agglo::verify
