#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kd/rng.hpp"

namespace kd::data {

struct Symbol {
  bool terminal = false;
  std::uint32_t index = 0;
  bool operator==(const Symbol&) const = default;
};

struct Production {
  std::uint32_t lhs = 0;
  std::vector<Symbol> rhs;
  double probability = 0.0;
  std::size_t line = 0;
};

/// Two preterminals whose i-th productions are number-flipped counterparts
/// of each other (e.g. "runs" <-> "run").
struct AgreementRule {
  std::string feature;
  std::uint32_t first = 0;
  std::uint32_t second = 0;
};

/// Weighted context-free grammar loaded from text:
///
///   # comment
///   S -> NP_SG VP_SG . @ 0.5
///   agree: number V_SG V_PL
///
/// Symbols that appear on a left-hand side are nonterminals, all others are
/// terminals. The first left-hand side is the start symbol. Token ids: 0 is
/// padding, 1 the sentence separator, terminal i is id i + 2.
class Grammar {
 public:
  /// Throws std::invalid_argument naming the offending line/production.
  static Grammar parse(std::string_view text, std::string_view source = "<grammar>");
  /// Throws IoError if the file cannot be read.
  static Grammar load(const std::filesystem::path& path);

  const std::vector<std::string>& nonterminals() const { return nonterminals_; }
  const std::vector<std::string>& terminals() const { return terminals_; }
  const std::vector<Production>& productions() const { return productions_; }
  std::span<const std::size_t> productions_of(std::uint32_t nonterminal) const {
    return by_lhs_[nonterminal];
  }
  const std::vector<AgreementRule>& agreement_rules() const { return rules_; }
  std::uint32_t start() const { return 0; }

  std::size_t vocab_size() const { return terminals_.size() + 2; }
  static std::int32_t token_id(std::uint32_t terminal) { return static_cast<std::int32_t>(terminal) + 2; }
  std::string token_text(std::int32_t id) const;
  std::optional<std::int32_t> find_token(std::string_view text) const;
  std::optional<std::uint32_t> find_nonterminal(std::string_view name) const;

  /// FNV-1a over a canonical rendering (normalized probabilities included).
  std::uint64_t hash() const { return hash_; }

  struct Derivation {
    std::vector<std::int32_t> tokens;
    /// Nonterminal whose production emitted each token.
    std::vector<std::uint32_t> emitter;
    /// Index (within productions_of(emitter)) of that production.
    std::vector<std::uint32_t> emitter_choice;
  };
  Derivation sample(Rng& rng) const;

  /// Earley recognition of a token-id sentence from the start symbol.
  bool derives(std::span<const std::int32_t> tokens) const;

 private:
  void validate();
  void compute_hash();

  std::vector<std::string> nonterminals_;
  std::vector<std::string> terminals_;
  std::vector<Production> productions_;
  std::vector<std::vector<std::size_t>> by_lhs_;
  std::vector<AgreementRule> rules_;
  std::string source_;
  std::uint64_t hash_ = 0;
};

}  // namespace kd::data
