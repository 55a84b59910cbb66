#include "kd/grammar.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <tuple>

#include "kd/errors.hpp"

namespace kd::data {

namespace {

std::vector<std::string> split_ws(std::string_view line) {
  std::vector<std::string> out;
  std::istringstream in{std::string(line)};
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

struct RawProduction {
  std::string lhs;
  std::vector<std::string> rhs;
  double weight;
  std::size_t line;
};

struct RawRule {
  std::string feature, first, second;
  std::size_t line;
};

std::string where(std::string_view source, std::size_t line) {
  return std::string(source) + ":" + std::to_string(line) + ": ";
}

}  // namespace

Grammar Grammar::parse(std::string_view text, std::string_view source) {
  std::vector<RawProduction> raw;
  std::vector<RawRule> raw_rules;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? text.size() - pos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    auto toks = split_ws(line);
    if (toks.empty()) continue;
    if (toks[0] == "agree:") {
      if (toks.size() != 4) {
        throw std::invalid_argument(where(source, line_no) + "expected 'agree: FEATURE NONTERM NONTERM'");
      }
      raw_rules.push_back({toks[1], toks[2], toks[3], line_no});
      continue;
    }
    if (toks.size() < 5 || toks[1] != "->" || toks[toks.size() - 2] != "@") {
      throw std::invalid_argument(where(source, line_no) + "expected 'LHS -> RHS... @ weight'");
    }
    double weight = 0.0;
    try {
      std::size_t used = 0;
      weight = std::stod(toks.back(), &used);
      if (used != toks.back().size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw std::invalid_argument(where(source, line_no) + "bad weight '" + toks.back() + "'");
    }
    if (!(weight > 0.0) || !std::isfinite(weight)) {
      throw std::invalid_argument(where(source, line_no) + "weight must be positive and finite");
    }
    raw.push_back({toks[0], std::vector<std::string>(toks.begin() + 2, toks.end() - 2), weight, line_no});
  }
  if (raw.empty()) throw std::invalid_argument(std::string(source) + ": grammar has no productions");

  Grammar g;
  g.source_ = source;
  auto nt_index = [&](const std::string& name) -> std::optional<std::uint32_t> {
    auto it = std::find(g.nonterminals_.begin(), g.nonterminals_.end(), name);
    if (it == g.nonterminals_.end()) return std::nullopt;
    return static_cast<std::uint32_t>(it - g.nonterminals_.begin());
  };
  for (const auto& p : raw) {
    if (!nt_index(p.lhs)) g.nonterminals_.push_back(p.lhs);
  }
  g.by_lhs_.resize(g.nonterminals_.size());
  for (const auto& p : raw) {
    Production prod;
    prod.lhs = *nt_index(p.lhs);
    prod.probability = p.weight;
    prod.line = p.line;
    for (const auto& s : p.rhs) {
      if (auto nt = nt_index(s)) {
        prod.rhs.push_back({false, *nt});
      } else {
        auto it = std::find(g.terminals_.begin(), g.terminals_.end(), s);
        if (it == g.terminals_.end()) {
          g.terminals_.push_back(s);
          it = g.terminals_.end() - 1;
        }
        prod.rhs.push_back({true, static_cast<std::uint32_t>(it - g.terminals_.begin())});
      }
    }
    g.by_lhs_[prod.lhs].push_back(g.productions_.size());
    g.productions_.push_back(std::move(prod));
  }
  for (const auto& r : raw_rules) {
    auto a = nt_index(r.first);
    auto b = nt_index(r.second);
    if (!a || !b) {
      throw std::invalid_argument(where(source, r.line) + "agreement rule names unknown nonterminal '" +
                                  (a ? r.second : r.first) + "'");
    }
    g.rules_.push_back({r.feature, *a, *b});
  }
  g.validate();
  g.compute_hash();
  return g;
}

Grammar Grammar::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read grammar file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str(), path.string());
}

void Grammar::validate() {
  auto describe = [&](const Production& p) {
    std::string s = source_ + ":" + std::to_string(p.line) + ": " + nonterminals_[p.lhs] + " ->";
    for (const Symbol& sym : p.rhs) s += " " + (sym.terminal ? terminals_[sym.index] : nonterminals_[sym.index]);
    return s;
  };

  // Per-nonterminal normalization.
  for (std::uint32_t a = 0; a < nonterminals_.size(); ++a) {
    double total = 0.0;
    for (std::size_t pi : by_lhs_[a]) total += productions_[pi].probability;
    if (std::abs(total - 1.0) > 1e-9) {
      throw std::invalid_argument(describe(productions_[by_lhs_[a].front()]) +
                                  ": probabilities of '" + nonterminals_[a] + "' sum to " +
                                  std::to_string(total) + ", expected 1");
    }
    for (std::size_t pi : by_lhs_[a]) productions_[pi].probability /= total;
  }

  // Every nonterminal must derive some terminal string.
  std::vector<bool> productive(nonterminals_.size(), false);
  for (bool changed = true; changed;) {
    changed = false;
    for (const Production& p : productions_) {
      if (productive[p.lhs]) continue;
      const bool ok = std::all_of(p.rhs.begin(), p.rhs.end(),
                                  [&](const Symbol& s) { return s.terminal || productive[s.index]; });
      if (ok) productive[p.lhs] = true, changed = true;
    }
  }
  for (std::uint32_t a = 0; a < nonterminals_.size(); ++a) {
    if (!productive[a]) {
      throw std::invalid_argument(describe(productions_[by_lhs_[a].front()]) + ": nonterminal '" +
                                  nonterminals_[a] + "' never derives a terminal string");
    }
  }

  // Expected yield must be finite, otherwise derivations need not terminate.
  std::vector<double> expected(nonterminals_.size(), 0.0);
  bool converged = false;
  for (int iter = 0; iter < 100000 && !converged; ++iter) {
    double change = 0.0;
    std::vector<double> next(nonterminals_.size(), 0.0);
    for (const Production& p : productions_) {
      double len = 0.0;
      for (const Symbol& s : p.rhs) len += s.terminal ? 1.0 : expected[s.index];
      next[p.lhs] += p.probability * len;
    }
    for (std::size_t a = 0; a < next.size(); ++a) {
      change = std::max(change, std::abs(next[a] - expected[a]));
      if (next[a] > 1e9) {
        throw std::invalid_argument(describe(productions_[by_lhs_[a].front()]) +
                                    ": expected derivation length of '" + nonterminals_[a] +
                                    "' is unbounded");
      }
    }
    expected = std::move(next);
    converged = change < 1e-9;
  }
  if (!converged) throw std::invalid_argument(source_ + ": expected derivation length does not converge");

  for (const AgreementRule& r : rules_) {
    for (std::uint32_t nt : {r.first, r.second}) {
      for (std::size_t pi : by_lhs_[nt]) {
        const Production& p = productions_[pi];
        if (p.rhs.size() != 1 || !p.rhs[0].terminal) {
          throw std::invalid_argument(describe(p) + ": agreement nonterminal '" + nonterminals_[nt] +
                                      "' must only produce single terminals");
        }
      }
    }
    if (by_lhs_[r.first].size() != by_lhs_[r.second].size()) {
      throw std::invalid_argument(source_ + ": agreement rule '" + r.feature + "' pairs '" +
                                  nonterminals_[r.first] + "' and '" + nonterminals_[r.second] +
                                  "' with different production counts");
    }
  }
}

void Grammar::compute_hash() {
  std::string canon;
  char buf[64];
  for (const Production& p : productions_) {
    canon += nonterminals_[p.lhs] + " ->";
    for (const Symbol& s : p.rhs) canon += " " + (s.terminal ? terminals_[s.index] : nonterminals_[s.index]);
    std::snprintf(buf, sizeof buf, " @ %.17g\n", p.probability);
    canon += buf;
  }
  for (const AgreementRule& r : rules_) {
    canon += "agree: " + r.feature + " " + nonterminals_[r.first] + " " + nonterminals_[r.second] + "\n";
  }
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canon) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  hash_ = h;
}

std::string Grammar::token_text(std::int32_t id) const {
  if (id == 0) return "<pad>";
  if (id == 1) return "<sep>";
  if (id >= 2 && static_cast<std::size_t>(id - 2) < terminals_.size()) return terminals_[id - 2];
  return "<unk:" + std::to_string(id) + ">";
}

std::optional<std::int32_t> Grammar::find_token(std::string_view text) const {
  for (std::size_t i = 0; i < terminals_.size(); ++i) {
    if (terminals_[i] == text) return token_id(static_cast<std::uint32_t>(i));
  }
  return std::nullopt;
}

std::optional<std::uint32_t> Grammar::find_nonterminal(std::string_view name) const {
  for (std::size_t i = 0; i < nonterminals_.size(); ++i) {
    if (nonterminals_[i] == name) return static_cast<std::uint32_t>(i);
  }
  return std::nullopt;
}

Grammar::Derivation Grammar::sample(Rng& rng) const {
  struct Pending {
    Symbol symbol;
    std::uint32_t emitter;
    std::uint32_t choice;
  };
  Derivation d;
  std::vector<Pending> stack{{Symbol{false, start()}, start(), 0}};
  while (!stack.empty()) {
    Pending top = stack.back();
    stack.pop_back();
    if (top.symbol.terminal) {
      d.tokens.push_back(token_id(top.symbol.index));
      d.emitter.push_back(top.emitter);
      d.emitter_choice.push_back(top.choice);
      if (d.tokens.size() > 100000) throw std::runtime_error("derivation exceeded 100000 tokens");
      continue;
    }
    const auto& options = by_lhs_[top.symbol.index];
    double u = rng.uniform();
    std::size_t pick = options.size() - 1;
    for (std::size_t i = 0; i < options.size(); ++i) {
      u -= productions_[options[i]].probability;
      if (u < 0.0) {
        pick = i;
        break;
      }
    }
    const Production& p = productions_[options[pick]];
    for (auto it = p.rhs.rbegin(); it != p.rhs.rend(); ++it) {
      stack.push_back({*it, top.symbol.index, static_cast<std::uint32_t>(pick)});
    }
  }
  return d;
}

bool Grammar::derives(std::span<const std::int32_t> tokens) const {
  std::vector<std::uint32_t> terms;
  for (std::int32_t id : tokens) {
    if (id < 2 || static_cast<std::size_t>(id - 2) >= terminals_.size()) return false;
    terms.push_back(static_cast<std::uint32_t>(id - 2));
  }
  using Item = std::tuple<std::size_t, std::size_t, std::size_t>;  // production, dot, origin
  const std::size_t n = terms.size();
  std::vector<std::set<Item>> chart(n + 1);
  std::vector<std::vector<Item>> agenda(n + 1);
  auto add = [&](std::size_t i, Item item) {
    if (chart[i].insert(item).second) agenda[i].push_back(item);
  };
  for (std::size_t pi : by_lhs_[start()]) add(0, {pi, 0, 0});
  for (std::size_t i = 0; i <= n; ++i) {
    for (std::size_t cursor = 0; cursor < agenda[i].size(); ++cursor) {
      const auto [pi, dot, origin] = agenda[i][cursor];
      const Production& p = productions_[pi];
      if (dot == p.rhs.size()) {
        // Complete: advance items in the origin set waiting for p.lhs.
        const std::vector<Item> waiting(agenda[origin].begin(), agenda[origin].end());
        for (const auto& [qi, qdot, qorigin] : waiting) {
          const Production& q = productions_[qi];
          if (qdot < q.rhs.size() && !q.rhs[qdot].terminal && q.rhs[qdot].index == p.lhs) {
            add(i, {qi, qdot + 1, qorigin});
          }
        }
        continue;
      }
      const Symbol next = p.rhs[dot];
      if (next.terminal) {
        if (i < n && terms[i] == next.index) add(i + 1, {pi, dot + 1, origin});
      } else {
        for (std::size_t qi : by_lhs_[next.index]) add(i, {qi, 0, i});
        // Nullable nonterminals do not exist (every production is non-empty),
        // so completed items in this set always have origin < i.
      }
    }
  }
  for (const auto& [pi, dot, origin] : chart[n]) {
    if (origin == 0 && productions_[pi].lhs == start() && dot == productions_[pi].rhs.size()) return true;
  }
  return false;
}

}  // namespace kd::data
