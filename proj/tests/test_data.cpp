#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "agglo/data.hpp"
#include "agglo/errors.hpp"
#include "doctest.h"

using namespace agglo;

namespace {

TokenStream iota_stream(std::int32_t first, std::int32_t last) {
  TokenStream s(static_cast<std::size_t>(last - first + 1));
  std::iota(s.begin(), s.end(), first);
  return s;
}

std::string write_temp(const std::string& name, const std::string& text) {
  auto dir = std::filesystem::temp_directory_path() / "agglo_test_data";
  std::filesystem::create_directories(dir);
  auto p = dir / name;
  std::ofstream(p, std::ios::binary | std::ios::trunc) << text;
  return p.string();
}

}  // namespace

TEST_CASE("vocabulary") {
  CHECK(CharVocab::encode("abc") == TokenStream{1, 2, 3});
  CHECK(CharVocab::encode("A9b") == TokenStream{1, 0, 2});
  CHECK(CharVocab::id(' ') == 0);
  CHECK(CharVocab::id('z') == 26);
  CHECK(CharVocab::symbol(26) == 'z');
  CHECK_THROWS_AS(CharVocab::symbol(27), DataError);
  for (std::int32_t i = 0; i < 27; ++i) CHECK(CharVocab::id(CharVocab::symbol(i)) == i);

  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> byte(0, 127);
  for (int trial = 0; trial < 50; ++trial) {
    std::string s(64, ' ');
    for (auto& c : s) c = static_cast<char>(byte(rng));
    const auto ids = CharVocab::encode(s);
    for (auto id : ids) CHECK((id >= 0 && id < 27));
    CHECK(CharVocab::decode(ids) == CharVocab::normalized(s));
    CHECK(CharVocab::encode(CharVocab::decode(ids)) == ids);
  }
}

TEST_CASE("ingestion") {
  const auto path = write_temp("tiny.txt", "Hello, World!");
  auto corpus = ingest_text8(path);
  CHECK(CharVocab::decode(corpus.tokens) == "hello  world ");
  CHECK(ingest_text8(path, 5).tokens.size() == 5);
  CHECK_THROWS_AS(ingest_text8(write_temp("empty.txt", "")), DataError);
  CHECK_THROWS_AS(ingest_text8("/nonexistent/text8"), IoError);
}

TEST_CASE("splits") {
  auto sizes = [](std::size_t n, SplitFractions f) {
    auto s = split(TokenStream(n, 1), f);
    return std::tuple{s.train.size(), s.valid.size(), s.test.size()};
  };
  CHECK(sizes(100, {}) == std::tuple<std::size_t, std::size_t, std::size_t>{90, 5, 5});
  CHECK(sizes(10, {0.8, 0.1, 0.1}) == std::tuple<std::size_t, std::size_t, std::size_t>{8, 1, 1});
  CHECK(sizes(103, {}) == std::tuple<std::size_t, std::size_t, std::size_t>{92, 5, 6});

  auto stream = iota_stream(0, 999);
  auto s = split(stream, {});
  TokenStream joined = s.train;
  joined.insert(joined.end(), s.valid.begin(), s.valid.end());
  joined.insert(joined.end(), s.test.begin(), s.test.end());
  CHECK(joined == stream);

  CHECK_THROWS_AS(split(TokenStream(10, 1), {0.5, 0.5, 0.0}), DataError);
  CHECK_THROWS_AS(split(TokenStream(10, 1), {0.5, 0.3, 0.3}), DataError);
  CHECK_THROWS_AS(split(TokenStream(5, 1), {}), DataError);
}

TEST_CASE("batch windows") {
  SUBCASE("stream 1..9, seq_len 3") {
    auto stream = iota_stream(1, 9);
    BatchIterator it(stream, 3, 2, 0, false);
    auto b = it.next();
    REQUIRE(b);
    CHECK(b->inputs.values == std::vector<std::int32_t>{1, 2, 3, 5, 6, 7});
    CHECK(b->targets.values == std::vector<std::int32_t>{2, 3, 4, 6, 7, 8});
    CHECK_FALSE(it.next());
  }
  SUBCASE("seeded order") {
    auto stream = iota_stream(0, 999);
    BatchIterator a(stream, 9, 4, 7);
    BatchIterator b(stream, 9, 4, 7);
    a.start_epoch(3);
    b.start_epoch(3);
    CHECK(a.window_order() == b.window_order());
    auto first = a.window_order();
    a.start_epoch(4);
    CHECK(a.window_order() != first);
  }
  SUBCASE("target coverage") {
    auto stream = iota_stream(0, 999);
    const Index seq_len = 12;
    BatchIterator it(stream, seq_len, 5, 3);
    std::set<std::int32_t> seen;
    Index tokens = 0;
    while (auto b = it.next()) {
      for (Index i = 0; i < b->inputs.numel(); ++i) CHECK(b->targets.values[i] == b->inputs.values[i] + 1);
      seen.insert(b->targets.values.begin(), b->targets.values.end());
      tokens += b->inputs.numel();
    }
    const Index windows = 1000 / (seq_len + 1);
    CHECK(tokens == windows * seq_len);
    std::set<std::int32_t> expected;
    for (Index w = 0; w < windows; ++w) {
      for (Index j = 1; j <= seq_len; ++j) expected.insert(static_cast<std::int32_t>(w * (seq_len + 1) + j));
    }
    CHECK(seen == expected);
  }
  SUBCASE("remainder handling") {
    auto stream = iota_stream(0, 99);  // 10 windows of 10
    BatchIterator keep(stream, 9, 4, 0, false, false);
    BatchIterator drop(stream, 9, 4, 0, false, true);
    CHECK(keep.batches_per_epoch() == 3);
    CHECK(drop.batches_per_epoch() == 2);
    int n = 0;
    while (drop.next()) ++n;
    CHECK(n == 2);
  }
  SUBCASE("errors") {
    auto stream = iota_stream(0, 4);
    CHECK_THROWS_AS(BatchIterator(stream, 5, 2, 0), DataError);
    CHECK_THROWS_AS(BatchIterator(stream, 0, 2, 0), ContractError);
  }
}
