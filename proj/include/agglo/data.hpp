#pragma once

// Character-level corpus handling: text8-style normalization, contiguous
// train/valid/test splits and non-overlapping next-token windows.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "agglo/tensor.hpp"

namespace agglo {

using TokenStream = std::vector<std::int32_t>;

/// Space plus 'a'..'z'. Space is id 0, letters follow in order.
class CharVocab {
 public:
  static constexpr std::size_t kSize = 27;

  static std::int32_t id(char c);
  static char symbol(std::int32_t id);
  /// Lowercases ASCII letters; every other byte becomes a space.
  static char normalize(char c);

  static TokenStream encode(std::string_view text);
  static std::string decode(const TokenStream& tokens);
  static std::string normalized(std::string_view text);
};

struct Corpus {
  TokenStream tokens;
  CharVocab vocab;
};

/// Reads at most `limit` bytes of `path` and tokenizes them.
/// Throws IoError if unreadable, DataError if nothing was read.
Corpus ingest_text8(const std::string& path, std::optional<std::size_t> limit = std::nullopt);

struct SplitFractions {
  double train = 0.9;
  double valid = 0.05;
  double test = 0.05;
};

struct CorpusSplit {
  TokenStream train;
  TokenStream valid;
  TokenStream test;
  SplitFractions fractions;
};

/// Contiguous split: floor(n*train), floor(n*valid), remainder.
CorpusSplit split(const TokenStream& stream, SplitFractions fractions = {});

struct Batch {
  IntTensor inputs;   // [b, seq_len]
  IntTensor targets;  // [b, seq_len], inputs shifted by one
};

/// Non-overlapping windows of seq_len + 1 tokens over one stream. The final
/// partial window is dropped. Window order is shuffled per epoch from
/// (seed, epoch) unless shuffling is disabled.
class BatchIterator {
 public:
  BatchIterator(const TokenStream& stream, Index seq_len, Index batch_size, std::uint64_t seed,
                bool shuffle = true, bool drop_remainder = false);

  /// Resets to the beginning of `epoch` and fixes its window order.
  void start_epoch(std::uint64_t epoch);
  /// Next batch of the current epoch, or nullopt when it is exhausted.
  std::optional<Batch> next();

  Index window_count() const { return static_cast<Index>(order_.size()); }
  Index batches_per_epoch() const;
  const std::vector<Index>& window_order() const { return order_; }
  Index seq_len() const { return seq_len_; }

 private:
  const TokenStream* stream_;
  Index seq_len_;
  Index batch_size_;
  std::uint64_t seed_;
  bool shuffle_;
  bool drop_remainder_;
  std::vector<Index> order_;  // window start offsets in emission order
  std::size_t cursor_ = 0;
};

}  // namespace agglo
