#include "agglo/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

#include "agglo/errors.hpp"

namespace agglo {

std::int32_t CharVocab::id(char c) {
  const char n = normalize(c);
  return n == ' ' ? 0 : static_cast<std::int32_t>(n - 'a' + 1);
}

char CharVocab::symbol(std::int32_t id) {
  if (id < 0 || id >= static_cast<std::int32_t>(kSize)) {
    throw DataError("token id " + std::to_string(id) + " outside the character vocabulary");
  }
  return id == 0 ? ' ' : static_cast<char>('a' + id - 1);
}

char CharVocab::normalize(char c) {
  if (c >= 'A' && c <= 'Z') return static_cast<char>(c - 'A' + 'a');
  if (c >= 'a' && c <= 'z') return c;
  return ' ';
}

TokenStream CharVocab::encode(std::string_view text) {
  TokenStream out;
  out.reserve(text.size());
  for (char c : text) out.push_back(id(c));
  return out;
}

std::string CharVocab::decode(const TokenStream& tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (auto t : tokens) out.push_back(symbol(t));
  return out;
}

std::string CharVocab::normalized(std::string_view text) {
  std::string out(text);
  for (auto& c : out) c = normalize(c);
  return out;
}

Corpus ingest_text8(const std::string& path, std::optional<std::size_t> limit) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read corpus '" + path + "'");
  std::string text;
  if (limit) {
    text.resize(*limit);
    in.read(text.data(), static_cast<std::streamsize>(*limit));
    text.resize(static_cast<std::size_t>(in.gcount()));
  } else {
    text.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  if (in.bad()) throw IoError("error while reading corpus '" + path + "'");
  if (text.empty()) throw DataError("corpus '" + path + "' is empty");
  return Corpus{CharVocab::encode(text), CharVocab{}};
}

CorpusSplit split(const TokenStream& stream, SplitFractions f) {
  if (!(f.train > 0 && f.valid > 0 && f.test > 0)) throw DataError("split fractions must all be positive");
  if (std::abs(f.train + f.valid + f.test - 1.0) > 1e-9) throw DataError("split fractions must sum to 1");
  const auto n = static_cast<double>(stream.size());
  const auto n_train = static_cast<std::size_t>(std::floor(n * f.train + 1e-9));
  const auto n_valid = static_cast<std::size_t>(std::floor(n * f.valid + 1e-9));
  if (n_train == 0 || n_valid == 0 || n_train + n_valid >= stream.size()) {
    throw DataError("stream of " + std::to_string(stream.size()) + " tokens leaves an empty split");
  }
  CorpusSplit s;
  s.fractions = f;
  s.train.assign(stream.begin(), stream.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.valid.assign(stream.begin() + static_cast<std::ptrdiff_t>(n_train),
                 stream.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
  s.test.assign(stream.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), stream.end());
  return s;
}

BatchIterator::BatchIterator(const TokenStream& stream, Index seq_len, Index batch_size, std::uint64_t seed,
                             bool shuffle, bool drop_remainder)
    : stream_(&stream),
      seq_len_(seq_len),
      batch_size_(batch_size),
      seed_(seed),
      shuffle_(shuffle),
      drop_remainder_(drop_remainder) {
  if (seq_len <= 0 || batch_size <= 0) throw ContractError("seq_len and batch_size must be positive");
  if (static_cast<Index>(stream.size()) <= seq_len) {
    throw DataError("stream of " + std::to_string(stream.size()) + " tokens is too short for seq_len " +
                    std::to_string(seq_len));
  }
  start_epoch(0);
}

void BatchIterator::start_epoch(std::uint64_t epoch) {
  const Index window = seq_len_ + 1;
  const Index windows = static_cast<Index>(stream_->size()) / window;
  order_.resize(static_cast<std::size_t>(windows));
  for (Index w = 0; w < windows; ++w) order_[w] = w * window;
  if (shuffle_) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                      static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
    std::mt19937_64 rng(seq);
    std::shuffle(order_.begin(), order_.end(), rng);
  }
  cursor_ = 0;
}

Index BatchIterator::batches_per_epoch() const {
  const Index w = window_count();
  return drop_remainder_ ? w / batch_size_ : (w + batch_size_ - 1) / batch_size_;
}

std::optional<Batch> BatchIterator::next() {
  const std::size_t remaining = order_.size() - cursor_;
  if (remaining == 0) return std::nullopt;
  const auto take = static_cast<Index>(std::min<std::size_t>(remaining, static_cast<std::size_t>(batch_size_)));
  if (take < batch_size_ && drop_remainder_) return std::nullopt;
  std::vector<std::int32_t> inputs;
  std::vector<std::int32_t> targets;
  inputs.reserve(static_cast<std::size_t>(take * seq_len_));
  targets.reserve(static_cast<std::size_t>(take * seq_len_));
  for (Index i = 0; i < take; ++i) {
    const auto start = stream_->begin() + order_[cursor_ + static_cast<std::size_t>(i)];
    inputs.insert(inputs.end(), start, start + seq_len_);
    targets.insert(targets.end(), start + 1, start + seq_len_ + 1);
  }
  cursor_ += static_cast<std::size_t>(take);
  return Batch{IntTensor({take, seq_len_}, std::move(inputs)), IntTensor({take, seq_len_}, std::move(targets))};
}

}  // namespace agglo
