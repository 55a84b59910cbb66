#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kd/batch.hpp"
#include "kd/grammar.hpp"

namespace kd::data {

struct Provenance {
  std::uint64_t grammar_hash = 0;
  std::uint64_t seed = 0;
  std::size_t n_tokens = 0;
  bool operator==(const Provenance&) const = default;
};

struct Corpus {
  std::vector<std::int32_t> tokens;
  /// id -> text, including "<pad>" and "<sep>".
  std::vector<std::string> vocabulary;
  Provenance provenance;

  std::size_t vocab_size() const { return vocabulary.size(); }
};

/// Independent derivations, each followed by the separator, truncated to
/// n_tokens. Deterministic in (grammar, seed, n_tokens).
Corpus generate_corpus(const Grammar& grammar, std::uint64_t seed, std::size_t n_tokens);

/// Rebuild a corpus from its provenance; throws if the grammar hash differs.
Corpus regenerate_corpus(const Grammar& grammar, const Provenance& provenance);

/// Number of non-overlapping (L+1)-token windows.
std::size_t window_count(const Corpus& corpus, std::size_t seq_len);

/// Tokens of window w: [w*(L+1), (w+1)*(L+1)).
std::span<const std::int32_t> window(const Corpus& corpus, std::size_t seq_len, std::size_t w);

/// Shuffled non-overlapping windows grouped into [N, L] batches; an
/// incomplete final group is dropped.
std::vector<Batch> make_batches(const Corpus& corpus, std::size_t batch_size, std::size_t seq_len,
                                std::uint64_t seed);

struct MinimalPair {
  std::vector<std::int32_t> grammatical;
  std::vector<std::int32_t> ungrammatical;
  std::string rule;
};

/// Derive a sentence, then swap one agreement-bearing token for its
/// counterpart. Pairs whose corrupted member still parses are redrawn.
std::vector<MinimalPair> generate_minimal_pairs(const Grammar& grammar, std::uint64_t seed,
                                                std::size_t n_pairs);

}  // namespace kd::data
