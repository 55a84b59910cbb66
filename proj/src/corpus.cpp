#include "kd/corpus.hpp"

#include <numeric>
#include <stdexcept>

namespace kd::data {

Corpus generate_corpus(const Grammar& grammar, std::uint64_t seed, std::size_t n_tokens) {
  if (n_tokens == 0) throw std::invalid_argument("generate_corpus: n_tokens must be positive");
  Corpus c;
  c.vocabulary.reserve(grammar.vocab_size());
  for (std::size_t id = 0; id < grammar.vocab_size(); ++id) {
    c.vocabulary.push_back(grammar.token_text(static_cast<std::int32_t>(id)));
  }
  c.provenance = {grammar.hash(), seed, n_tokens};
  c.tokens.reserve(n_tokens + 64);
  Rng rng(seed);
  while (c.tokens.size() < n_tokens) {
    const auto d = grammar.sample(rng);
    c.tokens.insert(c.tokens.end(), d.tokens.begin(), d.tokens.end());
    c.tokens.push_back(kSeparatorId);
  }
  c.tokens.resize(n_tokens);
  return c;
}

Corpus regenerate_corpus(const Grammar& grammar, const Provenance& provenance) {
  if (grammar.hash() != provenance.grammar_hash) {
    throw std::invalid_argument("regenerate_corpus: grammar hash does not match provenance");
  }
  return generate_corpus(grammar, provenance.seed, provenance.n_tokens);
}

std::size_t window_count(const Corpus& corpus, std::size_t seq_len) {
  return corpus.tokens.size() / (seq_len + 1);
}

std::span<const std::int32_t> window(const Corpus& corpus, std::size_t seq_len, std::size_t w) {
  return std::span<const std::int32_t>(corpus.tokens).subspan(w * (seq_len + 1), seq_len + 1);
}

std::vector<Batch> make_batches(const Corpus& corpus, std::size_t batch_size, std::size_t seq_len,
                                std::uint64_t seed) {
  if (batch_size == 0 || seq_len == 0) throw std::invalid_argument("make_batches: N and L must be positive");
  const std::size_t windows = window_count(corpus, seq_len);
  if (windows < batch_size) {
    throw std::invalid_argument("make_batches: corpus of " + std::to_string(corpus.tokens.size()) +
                                " tokens holds " + std::to_string(windows) + " windows of " +
                                std::to_string(seq_len + 1) + " tokens, need at least " +
                                std::to_string(batch_size));
  }
  std::vector<std::size_t> order(windows);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (std::size_t i = windows - 1; i > 0; --i) {
    std::swap(order[i], order[rng.below(i + 1)]);
  }
  std::vector<Batch> batches;
  for (std::size_t b = 0; b + batch_size <= windows; b += batch_size) {
    std::vector<std::int32_t> x(batch_size * seq_len), y(batch_size * seq_len);
    Batch batch;
    for (std::size_t i = 0; i < batch_size; ++i) {
      const auto win = window(corpus, seq_len, order[b + i]);
      std::copy(win.begin(), win.end() - 1, x.begin() + static_cast<std::ptrdiff_t>(i * seq_len));
      std::copy(win.begin() + 1, win.end(), y.begin() + static_cast<std::ptrdiff_t>(i * seq_len));
      batch.windows.push_back(order[b + i]);
    }
    batch.inputs = IntTensor({batch_size, seq_len}, std::move(x));
    batch.targets = IntTensor({batch_size, seq_len}, std::move(y));
    batches.push_back(std::move(batch));
  }
  return batches;
}

std::vector<MinimalPair> generate_minimal_pairs(const Grammar& grammar, std::uint64_t seed,
                                                std::size_t n_pairs) {
  const auto& rules = grammar.agreement_rules();
  if (rules.empty()) throw std::invalid_argument("generate_minimal_pairs: grammar declares no agreement rules");
  Rng rng(seed);
  std::vector<MinimalPair> pairs;
  std::size_t attempts = 0;
  const std::size_t max_attempts = 1000 * (n_pairs + 1);
  while (pairs.size() < n_pairs) {
    if (++attempts > max_attempts) {
      throw std::runtime_error("generate_minimal_pairs: could not build " + std::to_string(n_pairs) +
                               " pairs; agreement rules rarely apply or corruptions stay grammatical");
    }
    const auto d = grammar.sample(rng);
    // Candidate positions: tokens emitted by either side of any rule.
    struct Site {
      std::size_t position;
      const AgreementRule* rule;
      std::uint32_t counterpart;
    };
    std::vector<Site> sites;
    for (std::size_t i = 0; i < d.tokens.size(); ++i) {
      for (const AgreementRule& r : rules) {
        if (d.emitter[i] == r.first) sites.push_back({i, &r, r.second});
        else if (d.emitter[i] == r.second) sites.push_back({i, &r, r.first});
      }
    }
    if (sites.empty()) continue;
    const Site& site = sites[rng.below(sites.size())];
    const std::size_t prod = grammar.productions_of(site.counterpart)[d.emitter_choice[site.position]];
    const std::int32_t replacement = Grammar::token_id(grammar.productions()[prod].rhs[0].index);
    MinimalPair pair;
    pair.grammatical = d.tokens;
    pair.ungrammatical = d.tokens;
    pair.ungrammatical[site.position] = replacement;
    pair.rule = site.rule->feature + ":" + grammar.nonterminals()[site.rule->first] + "/" +
                grammar.nonterminals()[site.rule->second];
    if (pair.ungrammatical == pair.grammatical || grammar.derives(pair.ungrammatical)) continue;
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

}  // namespace kd::data
