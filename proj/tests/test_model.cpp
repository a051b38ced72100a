#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "agglo/errors.hpp"
#include "agglo/gradcheck.hpp"
#include "agglo/model.hpp"
#include "agglo/ops.hpp"
#include "agglo/verify.hpp"
#include "doctest.h"

using namespace agglo;

namespace {

ModelConfig table1(AttentionKind a, EncodingKind e) {
  ModelConfig c;
  c.attention = a;
  c.encoding = e;
  return c;
}

ModelConfig tiny(AttentionKind a, EncodingKind e) {
  ModelConfig c;
  c.attention = a;
  c.encoding = e;
  c.n_blocks = 2;
  c.seq_len = 16;
  c.d_model = 8;
  c.heads_or_classes = 2;
  c.vocab_size = 27;
  c.ffn_multiplier = 2;
  c.conv_width = 3;
  return c;
}

IntTensor tokens_of(std::vector<std::int32_t> v) {
  const auto n = static_cast<Index>(v.size());
  return IntTensor({1, n}, std::move(v));
}

IntTensor random_tokens(Index b, Index t, Index vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> dist(0, static_cast<std::int32_t>(vocab - 1));
  std::vector<std::int32_t> v(static_cast<std::size_t>(b * t));
  for (auto& x : v) x = dist(rng);
  return IntTensor({b, t}, std::move(v));
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "agglo_test_model";
  std::filesystem::create_directories(dir);
  return dir / name;
}

const AttentionKind kKinds[] = {AttentionKind::Full, AttentionKind::Agglomerative};
const EncodingKind kEncodings[] = {EncodingKind::Embedding, EncodingKind::Convolution};

}  // namespace

TEST_CASE("config validation names the field") {
  ModelConfig c;
  c.heads_or_classes = 7;
  try {
    c.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "heads_or_classes");
  }
  c = ModelConfig{};
  c.vocab_size = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.seq_len = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(parse_attention_kind("sparse"), ConfigError);
  CHECK(parse_encoding_kind("conv") == EncodingKind::Convolution);
}

TEST_CASE("config text round trip") {
  auto c = tiny(AttentionKind::Full, EncodingKind::Convolution);
  CHECK(ModelConfig::from_text(c.to_text()) == c);
  CHECK_THROWS_AS(ModelConfig::from_text("colour=blue\n"), ConfigError);
}

TEST_CASE("parameter counts") {
  SUBCASE("hand enumeration, d = 4") {
    ModelConfig c;
    c.d_model = 4;
    c.heads_or_classes = 2;
    c.vocab_size = 5;
    c.ffn_multiplier = 2;
    c.seq_len = 3;
    c.conv_width = 2;
    c.n_blocks = 3;
    // token 20, position 12, attention 52, norms 16, ffn 76, head 25
    c.attention = AttentionKind::Agglomerative;
    c.encoding = EncodingKind::Embedding;
    CHECK(count_params(c) == 201);
    c.attention = AttentionKind::Full;  // attention 64
    CHECK(count_params(c) == 213);
    c.encoding = EncodingKind::Convolution;  // encoding 32 instead of 12
    CHECK(count_params(c) == 233);
  }
  SUBCASE("count matches instantiated tensors") {
    for (auto a : kKinds) {
      for (auto e : kEncodings) {
        auto c = table1(a, e);
        CHECK(DecoderModel<float>::init(c, 0).parameter_count() == count_params(c));
      }
    }
  }
  SUBCASE("close to the published sizes") {
    struct Row {
      AttentionKind a;
      EncodingKind e;
      double published;
    };
    const Row rows[] = {{AttentionKind::Full, EncodingKind::Embedding, 64200},
                        {AttentionKind::Full, EncodingKind::Convolution, 88500},
                        {AttentionKind::Agglomerative, EncodingKind::Embedding, 57000},
                        {AttentionKind::Agglomerative, EncodingKind::Convolution, 81400}};
    for (const auto& r : rows) {
      const double n = static_cast<double>(count_params(table1(r.a, r.e)));
      CHECK(std::abs(n - r.published) / r.published <= 0.15);
    }
  }
  SUBCASE("doubling width roughly quadruples block weights") {
    auto c = table1(AttentionKind::Full, EncodingKind::Embedding);
    c.vocab_size = 2;
    c.seq_len = 1;
    auto c2 = c;
    c2.d_model *= 2;
    const double ratio = static_cast<double>(count_params(c2)) / static_cast<double>(count_params(c));
    CHECK(ratio > 3.8);
    CHECK(ratio < 4.0);
  }
}

TEST_CASE("encodings") {
  SUBCASE("convolution receptive field") {
    auto c = tiny(AttentionKind::Agglomerative, EncodingKind::Convolution);
    auto m = DecoderModel<double>::init(c, 1);
    for (auto& v : m.token_embedding.mutable_values()) v = 0;
    for (Index j = 0; j < c.d_model; ++j) m.token_embedding.mutable_values()[5 * c.d_model + j] = 1;
    const Index p = 6;
    std::vector<std::int32_t> ids(10, 0);
    ids[p] = 5;
    auto enc = encode_sequence(tokens_of(ids), m);
    for (Index i = 0; i < 10; ++i) {
      double mag = 0;
      for (Index j = 0; j < c.d_model; ++j) mag += std::abs(enc.values()[i * c.d_model + j]);
      if (i >= p && i < p + c.conv_width) CHECK(mag > 0);
      else CHECK(mag == 0);
    }
  }
  SUBCASE("zero token table leaves position embeddings") {
    auto c = tiny(AttentionKind::Full, EncodingKind::Embedding);
    auto m = DecoderModel<double>::init(c, 2);
    for (auto& v : m.token_embedding.mutable_values()) v = 0;
    auto enc = encode_sequence(tokens_of({3, 1, 4, 1}), m);
    for (Index i = 0; i < 4 * c.d_model; ++i) CHECK(enc.values()[i] == m.position_embedding.values()[i]);
  }
  SUBCASE("convolution encoding is causal at every position") {
    auto c = tiny(AttentionKind::Full, EncodingKind::Convolution);
    auto m = DecoderModel<double>::init(c, 3);
    auto base = random_tokens(1, 16, 27, 4);
    auto ref = encode_sequence(base, m);
    for (Index p = 0; p < 16; ++p) {
      auto changed = base;
      changed.values[p] = (changed.values[p] + 1) % 27;
      auto enc = encode_sequence(changed, m);
      for (Index i = 0; i < p * c.d_model; ++i) CHECK(enc.values()[i] == ref.values()[i]);
    }
  }
  SUBCASE("errors") {
    auto m = DecoderModel<double>::init(tiny(AttentionKind::Full, EncodingKind::Embedding), 1);
    CHECK_THROWS_AS(encode_sequence(tokens_of({27}), m), DataError);
    CHECK_THROWS_AS(encode_sequence(random_tokens(1, 17, 27, 1), m), ContractError);
  }
}

TEST_CASE("decoder forward") {
  SUBCASE("end-to-end causality, all positions") {
    for (auto a : kKinds) {
      for (auto e : kEncodings) {
        auto c = tiny(a, e);
        c.seq_len = 32;
        auto m = DecoderModel<double>::init(c, 5);
        auto base = random_tokens(1, 32, 27, 6);
        auto ref = decoder_forward(base, m);
        double worst = 0;
        for (Index p = 1; p < 32; ++p) {
          auto changed = base;
          changed.values[p] = (changed.values[p] + 7) % 27;
          auto out = decoder_forward(changed, m);
          for (Index i = 0; i < p * 27; ++i) worst = std::max(worst, std::abs(out.values()[i] - ref.values()[i]));
        }
        CHECK(worst <= 1e-5);
      }
    }
  }
  SUBCASE("single token depends only on itself") {
    auto m = DecoderModel<double>::init(tiny(AttentionKind::Agglomerative, EncodingKind::Convolution), 7);
    auto a = decoder_forward(tokens_of({4}), m);
    auto b = decoder_forward(tokens_of({4}), m);
    CHECK(verify::max_abs_diff(a.values(), b.values()) == 0);
    CHECK(verify::max_abs_diff(a.values(), decoder_forward(tokens_of({5}), m).values()) > 0);
  }
  SUBCASE("empty stack projects the encoding") {
    auto c = tiny(AttentionKind::Full, EncodingKind::Embedding);
    c.n_blocks = 0;
    auto m = DecoderModel<double>::init(c, 8);
    auto tokens = random_tokens(2, 5, 27, 9);
    auto expect = add(matmul(encode_sequence(tokens, m), m.out_w), m.out_b);
    CHECK(verify::max_abs_diff(decoder_forward(tokens, m).values(), expect.values()) < 1e-12);
  }
  SUBCASE("every depth step uses the same block tensors") {
    auto c = tiny(AttentionKind::Agglomerative, EncodingKind::Embedding);
    c.n_blocks = 5;
    auto m = DecoderModel<double>::init(c, 10);
    ForwardTrace trace;
    decoder_forward(random_tokens(1, 4, 27, 11), m, &trace);
    REQUIRE(trace.block_params_per_step.size() == 5);
    std::vector<const void*> ids;
    for (const auto& p : m.block.params("")) ids.push_back(p.tensor.id());
    for (const auto& step : trace.block_params_per_step) CHECK(step == ids);
  }
}

TEST_CASE("language-model loss") {
  IntTensor targets({1, 4}, {0, 5, 9, 26});
  CHECK(lm_loss(Tensor<double>({1, 4, 27}), targets).item() == doctest::Approx(std::log2(27.0)).epsilon(1e-12));

  Tensor<double> sharp({1, 4, 27});
  for (Index i = 0; i < 4; ++i) sharp.mutable_values()[i * 27 + targets.values[i]] = 60;
  CHECK(lm_loss(sharp, targets).item() < 1e-20);

  auto logits = verify::random_tensor<double>({2, 3, 27}, 12, 2.0);
  auto tg = random_tokens(2, 3, 27, 13);
  double bits = 0;
  for (Index r = 0; r < 6; ++r) {
    double z = 0;
    for (Index k = 0; k < 27; ++k) z += std::exp(logits.values()[r * 27 + k]);
    bits += -std::log2(std::exp(logits.values()[r * 27 + tg.values[r]]) / z);
  }
  CHECK(std::abs(lm_loss(logits, tg).item() - bits / 6) < 1e-7);
  CHECK_THROWS_AS(lm_loss(logits, random_tokens(2, 4, 27, 1)), DimensionError);

  auto m = DecoderModel<double>::init(table1(AttentionKind::Agglomerative, EncodingKind::Convolution), 14);
  auto tokens = random_tokens(4, 64, 27, 15);
  CHECK(std::abs(lm_loss(decoder_forward(tokens, m), random_tokens(4, 64, 27, 16)).item() - std::log2(27.0)) < 0.1);
}

TEST_CASE("micro decoder gradients") {
  for (auto a : kKinds) {
    for (auto e : kEncodings) {
      auto c = tiny(a, e);
      c.vocab_size = 5;
      c.seq_len = 6;
      auto m = DecoderModel<double>::init(c, 17);
      auto tokens = random_tokens(2, 6, 5, 18);
      auto targets = random_tokens(2, 6, 5, 19);
      std::vector<NamedParam> params;
      for (const auto& p : m.parameters()) params.push_back({p.name, p.tensor});
      // A step of 1e-5 straddles a ReLU kink for one embedding entry at this seed.
      auto results = check_gradients([&]() { return lm_loss(decoder_forward(tokens, m), targets); }, params, 1e-6);
      CHECK(results.size() == params.size());
      for (const auto& r : results) {
        CAPTURE(r.name);
        CHECK(r.rel_error < 1e-4);
      }
    }
  }
}

TEST_CASE("generation") {
  auto m = DecoderModel<float>::init(tiny(AttentionKind::Agglomerative, EncodingKind::Convolution), 20);
  std::vector<std::int32_t> prompt{1, 2, 3};
  CHECK(generate(m, prompt, 0, 1.0, 1) == prompt);
  auto a = generate(m, prompt, 20, 1.0, 42);
  CHECK(a.size() == 23);
  CHECK(a == generate(m, prompt, 20, 1.0, 42));
  for (auto t : a) CHECK((t >= 0 && t < 27));

  auto greedy = generate(m, prompt, 1, 1e-6, 3);
  auto logits = decoder_forward(IntTensor({1, 3}, prompt), m);
  std::int32_t best = 0;
  for (std::int32_t k = 1; k < 27; ++k) {
    if (logits.values()[2 * 27 + k] > logits.values()[2 * 27 + best]) best = k;
  }
  CHECK(greedy.back() == best);

  std::vector<std::int32_t> long_prompt(40, 4);
  CHECK(generate(m, long_prompt, 3, 1.0, 1).size() == 43);
  CHECK_THROWS_AS(generate(m, prompt, 3, 0.0, 1), ContractError);
}

TEST_CASE("checkpoints") {
  auto c = tiny(AttentionKind::Full, EncodingKind::Convolution);
  auto m = DecoderModel<float>::init(c, 21);
  const auto path = temp_path("model.ckpt").string();
  save_checkpoint(m, path);
  auto loaded = load_checkpoint<float>(path);
  CHECK(loaded.config() == c);
  const auto a = m.parameters();
  const auto b = loaded.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(std::equal(a[i].tensor.values().begin(), a[i].tensor.values().end(), b[i].tensor.values().begin()));
  }
  CHECK(read_checkpoint_config(path) == c);

  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(bytes.substr(0, 4) == "AGGL");
  auto write = [](const std::string& p, const std::string& data) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << data;
  };

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  write(temp_path("magic.ckpt").string(), bad_magic);
  CHECK_THROWS_AS(load_checkpoint<float>(temp_path("magic.ckpt").string()), CheckpointError);

  std::string bad_version = bytes;
  bad_version[4] = 9;
  write(temp_path("version.ckpt").string(), bad_version);
  CHECK_THROWS_AS(load_checkpoint<float>(temp_path("version.ckpt").string()), CheckpointError);

  write(temp_path("short.ckpt").string(), bytes.substr(0, bytes.size() - 7));
  CHECK_THROWS_AS(load_checkpoint<float>(temp_path("short.ckpt").string()), CheckpointError);

  write(temp_path("long.ckpt").string(), bytes + "x");
  CHECK_THROWS_AS(load_checkpoint<float>(temp_path("long.ckpt").string()), CheckpointError);

  CHECK_THROWS_AS(load_checkpoint<float>(temp_path("absent.ckpt").string()), IoError);
}
