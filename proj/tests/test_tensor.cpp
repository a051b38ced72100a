#include <cmath>
#include <random>

#include "agglo/errors.hpp"
#include "agglo/gradcheck.hpp"
#include "agglo/ops.hpp"
#include "agglo/verify.hpp"
#include "doctest.h"

using namespace agglo;

namespace {

Tensor<double> T2(Shape s, std::vector<double> v) { return Tensor<double>(std::move(s), std::move(v)); }

std::vector<double> vals(const Tensor<double>& t) { return {t.values().begin(), t.values().end()}; }

Tensor<double> rnd(Shape s, std::uint64_t seed) { return verify::random_tensor<double>(s, seed); }

// Analytic-vs-numeric check of one op over its inputs.
double op_grad_error(const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& op,
                     std::vector<Tensor<double>> inputs, std::uint64_t seed) {
  for (auto& x : inputs) x.set_requires_grad(true);
  auto probe = op(inputs);
  auto w = rnd(probe.shape(), seed + 99);
  auto loss = [&]() { return sum_all(mul(op(inputs), w)); };
  std::vector<NamedParam> params;
  for (std::size_t i = 0; i < inputs.size(); ++i) params.push_back({"in" + std::to_string(i), inputs[i]});
  double worst = 0;
  for (const auto& r : check_gradients(loss, params)) worst = std::max(worst, r.rel_error);
  return worst;
}

}  // namespace

TEST_CASE("tensor construction enforces shape and buffer agreement") {
  CHECK_THROWS_AS(Tensor<double>({2, 3}, std::vector<double>(5)), DimensionError);
  CHECK_THROWS_AS(Tensor<double>(Shape{2, 0}), DimensionError);
  Tensor<float> z({2, 3});
  CHECK(z.numel() == 6);
  CHECK(z.dtype() == DType::Float32);
  CHECK(z.dim(-1) == 3);
  CHECK_FALSE(z.has_grad());
  CHECK(z.grad().size() == 6);
}

TEST_CASE("matmul") {
  SUBCASE("identity") {
    auto out = matmul(T2({2, 2}, {1, 0, 0, 1}), T2({2, 2}, {1, 2, 3, 4}));
    CHECK(vals(out) == std::vector<double>{1, 2, 3, 4});
  }
  SUBCASE("dot product") {
    CHECK(matmul(T2({1, 2}, {1, 2}), T2({2, 1}, {3, 4})).item() == 11);
  }
  SUBCASE("random against triple loop") {
    auto a = rnd({3, 4}, 1);
    auto b = rnd({4, 5}, 2);
    auto expected = verify::naive_matmul(vals(a), vals(b), 3, 4, 5);
    CHECK(verify::max_abs_diff(matmul(a, b).values(), std::span<const double>(expected)) < 1e-12);
    auto af = verify::random_tensor<float>({3, 4}, 1);
    auto bf = verify::random_tensor<float>({4, 5}, 2);
    CHECK(verify::max_abs_diff<float>(matmul(af, bf).values(), expected) < 1e-6);
  }
  SUBCASE("batched and transposed") {
    auto a = rnd({2, 3, 4}, 3);
    auto b = rnd({2, 5, 4}, 4);
    auto out = matmul(a, b, true);
    REQUIRE(out.shape() == Shape{2, 3, 5});
    for (Index n = 0; n < 2; ++n) {
      for (Index i = 0; i < 3; ++i) {
        for (Index j = 0; j < 5; ++j) {
          double s = 0;
          for (Index l = 0; l < 4; ++l) s += a.values()[n * 12 + i * 4 + l] * b.values()[n * 20 + j * 4 + l];
          CHECK(out.values()[n * 15 + i * 5 + j] == doctest::Approx(s).epsilon(1e-12));
        }
      }
    }
  }
  SUBCASE("mismatch names both shapes") {
    try {
      matmul(rnd({2, 3}, 1), rnd({4, 2}, 2));
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      const std::string what = e.what();
      CHECK(what.find("[2, 3]") != std::string::npos);
      CHECK(what.find("[4, 2]") != std::string::npos);
    }
  }
}

TEST_CASE("softmax") {
  CHECK(vals(softmax(T2({2}, {0, 0}), 0)) == std::vector<double>{0.5, 0.5});
  auto big = softmax(T2({3}, {1000, 1000, 1000}), 0);
  for (double v : big.values()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));
  // exp(k) / (e + e^2 + e^3), evaluated in extended precision
  const double expected[] = {0.0900305731703804579980, 0.244728471054797652473, 0.665240955774821889529};
  auto s = softmax(T2({3}, {1, 2, 3}), 0);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(s.values()[i] - expected[i]) < 1e-7);

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> wide(-1e6, 1e6);
  Tensor<double> x({4, 7});
  for (auto& v : x.mutable_values()) v = wide(rng);
  auto p = softmax(x, 1);
  for (Index r = 0; r < 4; ++r) {
    double total = 0;
    for (Index c = 0; c < 7; ++c) {
      const double v = p.values()[r * 7 + c];
      CHECK(v >= 0);
      CHECK(std::isfinite(v));
      total += v;
    }
    CHECK(std::abs(total - 1) < 1e-6);
  }
}

TEST_CASE("cumsum") {
  CHECK(vals(cumsum(T2({3}, {1, 2, 3}), 0)) == std::vector<double>{1, 3, 6});
  CHECK(vals(cumsum(Tensor<double>({4}), 0)) == std::vector<double>(4, 0.0));
  for (Index n : {128, 4096}) {
    auto x = rnd({n}, 7);
    auto c = cumsum(x, 0);
    double acc = 0;
    bool exact = true;
    for (Index i = 0; i < n; ++i) {
      acc += x.values()[i];
      exact = exact && c.values()[i] == acc;
    }
    CHECK(exact);
  }
  auto x = rnd({2, 5, 3}, 8);
  auto c = cumsum(x, 1);
  for (Index b = 0; b < 2; ++b) {
    for (Index j = 0; j < 3; ++j) {
      double acc = 0;
      for (Index t = 0; t < 5; ++t) {
        acc += x.values()[b * 15 + t * 3 + j];
        CHECK(c.values()[b * 15 + t * 3 + j] == acc);
      }
    }
  }
}

TEST_CASE("elementwise ops and broadcasting") {
  CHECK(vals(add(T2({2}, {1, 2}), T2({2}, {3, 4}))) == std::vector<double>{4, 6});
  auto x = rnd({3, 4}, 9);
  CHECK(vals(mul(x, Tensor<double>::full({3, 4}, 1.0))) == vals(x));
  auto q = div(T2({1}, {1.0}), T2({1}, {0.0}));
  CHECK(std::isfinite(q.item()));
  CHECK(q.item() == doctest::Approx(1.0 / kDivEpsilon));
  auto row = T2({4}, {1, 2, 3, 4});
  auto b = add(x, row);
  for (Index i = 0; i < 3; ++i) {
    for (Index j = 0; j < 4; ++j) CHECK(b.values()[i * 4 + j] == x.values()[i * 4 + j] + row.values()[j]);
  }
  auto col = T2({3, 1}, {10, 20, 30});
  auto bc = sub(x, col);
  CHECK(bc.values()[5] == x.values()[5] - 20);
  CHECK_THROWS_AS(add(rnd({3, 4}, 1), rnd({3}, 2)), DimensionError);
}

TEST_CASE("concat, split, slice, reshape, transpose") {
  auto c = concat(std::vector<Tensor<double>>{T2({1, 1}, {1}), T2({1, 1}, {2})}, 1);
  CHECK(c.shape() == Shape{1, 2});
  CHECK(vals(c) == std::vector<double>{1, 2});
  std::vector<Tensor<double>> parts(8, rnd({2, 3, 4}, 10));
  CHECK(concat(parts, 2).dim(2) == 32);
  auto x = rnd({2, 3, 8}, 11);
  CHECK(vals(concat(split(x, 2, 4), 2)) == vals(x));
  CHECK(vals(concat(split(x, 1, 3), 1)) == vals(x));
  CHECK_THROWS_AS(concat(std::vector<Tensor<double>>{rnd({2, 3}, 1), rnd({3, 3}, 2)}, 1), DimensionError);
  auto s = slice(x, 1, 1, 3);
  CHECK(s.shape() == Shape{2, 2, 8});
  CHECK(s.values()[0] == x.values()[8]);
  auto t = transpose(x, 0, 2);
  CHECK(t.shape() == Shape{8, 3, 2});
  CHECK(t.values()[(5 * 3 + 2) * 2 + 1] == x.values()[(1 * 3 + 2) * 8 + 5]);
  CHECK_THROWS_AS(reshape(x, {5, 5}), DimensionError);
}

TEST_CASE("embedding, layer norm, causal convolution, cross entropy") {
  auto table = rnd({5, 3}, 12);
  auto e = embedding(table, IntTensor({1, 2}, {4, 0}));
  CHECK(e.shape() == Shape{1, 2, 3});
  CHECK(e.values()[0] == table.values()[12]);
  CHECK_THROWS_AS(embedding(table, IntTensor({1, 1}, {5})), DataError);

  auto x = rnd({2, 3, 6}, 13);
  auto ln = layer_norm(x, Tensor<double>::full({6}, 1.0), Tensor<double>({6}));
  for (Index r = 0; r < 6; ++r) {
    double mean = 0;
    double var = 0;
    for (Index j = 0; j < 6; ++j) mean += ln.values()[r * 6 + j] / 6;
    for (Index j = 0; j < 6; ++j) var += std::pow(ln.values()[r * 6 + j] - mean, 2) / 6;
    CHECK(std::abs(mean) < 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }

  // Output i reads inputs i-k+1..i; tap k-1 multiplies the current input.
  const Index k = 3;
  auto seq = rnd({2, 7, 4}, 14);
  auto filter = rnd({k, 4, 5}, 15);
  auto y = causal_conv1d(seq, filter);
  REQUIRE(y.shape() == Shape{2, 7, 5});
  for (Index b = 0; b < 2; ++b) {
    for (Index i = 0; i < 7; ++i) {
      for (Index o = 0; o < 5; ++o) {
        double s = 0;
        for (Index j = 0; j < k; ++j) {
          const Index src = i - (k - 1) + j;
          if (src < 0) continue;
          for (Index c = 0; c < 4; ++c) s += seq.values()[(b * 7 + src) * 4 + c] * filter.values()[(j * 4 + c) * 5 + o];
        }
        CHECK(y.values()[(b * 7 + i) * 5 + o] == doctest::Approx(s).epsilon(1e-12));
      }
    }
  }

  auto logits = rnd({2, 3, 4}, 16);
  IntTensor targets({2, 3}, {0, 1, 2, 3, 0, 1});
  double expected = 0;
  for (Index r = 0; r < 6; ++r) {
    double z = 0;
    for (Index c = 0; c < 4; ++c) z += std::exp(logits.values()[r * 4 + c]);
    expected += std::log(z) - logits.values()[r * 4 + targets.values[r]];
  }
  CHECK(cross_entropy(logits, targets).item() == doctest::Approx(expected / 6).epsilon(1e-12));
}

TEST_CASE("backward basics") {
  auto x = T2({1}, {3}).set_requires_grad(true);
  auto w = T2({1}, {2}).set_requires_grad(true);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    auto loss = sum_all(mul(x, x));
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), ContractError);
  }
  CHECK(x.grad()[0] == 6);
  CHECK(w.grad()[0] == 0);

  Tape<double> t2;
  TapeScope<double> scope(t2);
  auto y = mul(x, w);
  CHECK_THROWS_AS(t2.backward(add(y, T2({2}, {1, 1}))), ContractError);
}

TEST_CASE("no recording without a tape or under NoGradScope") {
  auto x = rnd({3}, 1).set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  {
    NoGradScope<double> off;
    sum_all(mul(x, x));
  }
  CHECK(tape.size() == 0);
  sum_all(mul(x, x));
  CHECK(tape.size() == 2);
}

TEST_CASE("finite differences") {
  auto x = rnd({4}, 2);
  auto g = finite_diff_grad([](const Tensor<double>& t) { return sum_all(t).item(); }, x, 1e-5);
  for (double v : g.values()) CHECK(v == doctest::Approx(1.0).epsilon(1e-9));
  auto g2 = finite_diff_grad([](const Tensor<double>& t) { return t.item() * t.item(); }, T2({1}, {3}), 1e-5);
  CHECK(std::abs(g2.item() - 6.0) < 1e-8);

  // x^T A y: d/dx = A y, d/dy = A^T x
  auto a = rnd({4, 3}, 20);
  auto xv = rnd({1, 4}, 21).set_requires_grad(true);
  auto yv = rnd({3, 1}, 22).set_requires_grad(true);
  auto results = check_gradients([&]() { return sum_all(matmul(matmul(xv, a), yv)); },
                                 {{"x", xv}, {"y", yv}});
  for (const auto& r : results) CHECK(r.rel_error < 1e-6);
  const auto ay = verify::naive_matmul(vals(a), vals(yv), 4, 3, 1);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    xv.zero_grad();
    tape.backward(sum_all(matmul(matmul(xv, a), yv)));
  }
  for (int i = 0; i < 4; ++i) CHECK(xv.grad()[i] == doctest::Approx(ay[i]).epsilon(1e-12));
}

TEST_CASE("every differentiable op matches finite differences over 20 seeds") {
  using V = std::vector<Tensor<double>>;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    CAPTURE(seed);
    const std::uint64_t s = seed * 31;
    CHECK(op_grad_error([](const V& v) { return matmul(v[0], v[1]); }, {rnd({3, 4}, s), rnd({4, 2}, s + 1)}, s) < 1e-5);
    CHECK(op_grad_error([](const V& v) { return matmul(v[0], v[1], true); }, {rnd({2, 3, 4}, s), rnd({2, 5, 4}, s + 1)}, s) < 1e-5);
    CHECK(op_grad_error([](const V& v) { return add(v[0], v[1]); }, {rnd({2, 3}, s), rnd({3}, s + 1)}, s) < 1e-5);
    CHECK(op_grad_error([](const V& v) { return sub(v[0], v[1]); }, {rnd({2, 3}, s), rnd({2, 1}, s + 1)}, s) < 1e-5);
    CHECK(op_grad_error([](const V& v) { return mul(v[0], v[1]); }, {rnd({2, 3, 2}, s), rnd({3, 1}, s + 1)}, s) < 1e-5);
    CHECK(op_grad_error([](const V& v) { return div(v[0], add(mul(v[1], v[1]), Tensor<double>::full({1}, 0.5))); },
                        {rnd({2, 3}, s), rnd({2, 3}, s + 1)}, s) < 1e-5);
    CHECK(op_grad_error([](const V& v) { return scale(v[0], 0.7); }, {rnd({5}, s)}, s) < 1e-5);
    CHECK(op_grad_error([](const V& v) { return relu(v[0]); }, {rnd({6}, s)}, s) < 1e-5);
    CHECK(op_grad_error([](const V& v) { return softmax(v[0], 1); }, {rnd({2, 5, 3}, s)}, s) < 1e-5);
    CHECK(op_grad_error([](const V& v) { return cumsum(v[0], 1); }, {rnd({2, 6, 3}, s)}, s) < 1e-5);
    CHECK(op_grad_error([](const V& v) { return sum(v[0], 1, true); }, {rnd({2, 4, 3}, s)}, s) < 1e-5);
    CHECK(op_grad_error([](const V& v) { return mean_all(v[0]); }, {rnd({2, 4}, s)}, s) < 1e-5);
    CHECK(op_grad_error([](const V& v) { return concat(v, 1); }, {rnd({2, 2}, s), rnd({2, 3}, s + 1)}, s) < 1e-5);
    CHECK(op_grad_error([](const V& v) { return slice(v[0], 1, 1, 3); }, {rnd({2, 4}, s)}, s) < 1e-5);
    CHECK(op_grad_error([](const V& v) { return transpose(reshape(v[0], {2, 3, 4}), 0, 1); }, {rnd({6, 4}, s)}, s) < 1e-5);
    CHECK(op_grad_error([](const V& v) { return layer_norm(v[0], v[1], v[2]); },
                        {rnd({2, 3, 5}, s), rnd({5}, s + 1), rnd({5}, s + 2)}, s) < 1e-5);
    CHECK(op_grad_error([](const V& v) { return causal_conv1d(v[0], v[1]); }, {rnd({2, 5, 3}, s), rnd({3, 3, 2}, s + 1)}, s) < 1e-5);
    IntTensor ids({2, 3}, {0, 2, 4, 1, 1, 3});
    CHECK(op_grad_error([&](const V& v) { return embedding(v[0], ids); }, {rnd({5, 3}, s)}, s) < 1e-5);
    IntTensor targets({2, 3}, {0, 2, 3, 1, 1, 0});
    CHECK(op_grad_error([&](const V& v) { return cross_entropy(v[0], targets); }, {rnd({2, 3, 4}, s)}, s) < 1e-5);
  }
}

TEST_CASE("forward results are bit-identical across runs") {
  auto x = rnd({2, 5, 8}, 3);
  auto f = rnd({3, 8, 8}, 4);
  auto once = vals(softmax(causal_conv1d(x, f), -1));
  auto twice = vals(softmax(causal_conv1d(x, f), -1));
  CHECK(once == twice);
}

TEST_CASE("allocation stats track the largest tensor") {
  reset_allocation_stats();
  Tensor<float> a({10, 10});
  Tensor<float> b({3});
  CHECK(allocation_stats().peak_elements == 100);
  CHECK(allocation_stats().tensors >= 2);
}
