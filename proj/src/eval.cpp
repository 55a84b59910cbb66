#include "kd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "kd/autodiff.hpp"
#include "kd/batch.hpp"

namespace kd::eval {

namespace {

constexpr std::size_t kEvalBatch = 64;

void check_ids(const model::Weights& w, std::span<const std::int32_t> tokens) {
  for (std::int32_t t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= w.config().vocab_size) {
      throw std::invalid_argument("token id " + std::to_string(t) + " outside vocabulary of size " +
                                  std::to_string(w.config().vocab_size));
    }
  }
}

}  // namespace

std::vector<double> sequence_logprobs(const model::Weights& weights, std::span<const Sequence> sequences) {
  const std::size_t vocab = weights.config().vocab_size;
  std::vector<double> out(sequences.size(), 0.0);
  for (const Sequence& s : sequences) {
    if (s.empty()) throw std::invalid_argument("sequence_logprob: empty sequence");
    if (s.size() > weights.config().max_seq_len) {
      throw std::invalid_argument("sequence_logprob: sequence of " + std::to_string(s.size()) +
                                  " tokens exceeds max_seq_len");
    }
    check_ids(weights, s);
  }
  for (std::size_t b0 = 0; b0 < sequences.size(); b0 += kEvalBatch) {
    const std::size_t count = std::min(kEvalBatch, sequences.size() - b0);
    std::size_t len = 0;
    for (std::size_t i = 0; i < count; ++i) len = std::max(len, sequences[b0 + i].size());
    std::vector<std::int32_t> ids(count * len, data::kPadId);
    for (std::size_t i = 0; i < count; ++i) {
      const Sequence& s = sequences[b0 + i];
      ids[i * len] = data::kSeparatorId;
      std::copy(s.begin(), s.end() - 1, ids.begin() + static_cast<std::ptrdiff_t>(i * len + 1));
    }
    const Tensor lp = ad::log_softmax_with_temperature(
        model::logits(weights, IntTensor({count, len}, std::move(ids))), 1.0);
    for (std::size_t i = 0; i < count; ++i) {
      const Sequence& s = sequences[b0 + i];
      double total = 0.0;
      for (std::size_t t = 0; t < s.size(); ++t) total += lp.data[(i * len + t) * vocab + static_cast<std::size_t>(s[t])];
      out[b0 + i] = total;
    }
  }
  return out;
}

double sequence_logprob(const model::Weights& weights, std::span<const std::int32_t> tokens) {
  const Sequence s(tokens.begin(), tokens.end());
  return sequence_logprobs(weights, std::span<const Sequence>(&s, 1)).front();
}

double perplexity(const model::Weights& weights, std::span<const std::int32_t> tokens, std::size_t seq_len) {
  if (tokens.size() < 2) throw std::invalid_argument("perplexity: need at least two tokens");
  if (seq_len == 0 || seq_len > weights.config().max_seq_len) {
    throw std::invalid_argument("perplexity: bad sequence length");
  }
  check_ids(weights, tokens);
  const std::size_t vocab = weights.config().vocab_size;
  struct Window {
    std::size_t begin, len;  // len = number of input positions
  };
  std::vector<Window> windows;
  for (std::size_t b = 0; b + 1 < tokens.size(); b += seq_len + 1) {
    windows.push_back({b, std::min(seq_len, tokens.size() - b - 1)});
  }
  double nll = 0.0;
  std::size_t count = 0;
  for (std::size_t w0 = 0; w0 < windows.size(); w0 += kEvalBatch) {
    const std::size_t n = std::min(kEvalBatch, windows.size() - w0);
    std::size_t len = 0;
    for (std::size_t i = 0; i < n; ++i) len = std::max(len, windows[w0 + i].len);
    std::vector<std::int32_t> ids(n * len, data::kPadId);
    for (std::size_t i = 0; i < n; ++i) {
      const Window& w = windows[w0 + i];
      std::copy_n(tokens.begin() + static_cast<std::ptrdiff_t>(w.begin), w.len,
                  ids.begin() + static_cast<std::ptrdiff_t>(i * len));
    }
    const Tensor lp = ad::log_softmax_with_temperature(
        model::logits(weights, IntTensor({n, len}, std::move(ids))), 1.0);
    for (std::size_t i = 0; i < n; ++i) {
      const Window& w = windows[w0 + i];
      for (std::size_t t = 0; t < w.len; ++t) {
        const std::int32_t target = tokens[w.begin + t + 1];
        if (target == data::kPadId) continue;
        nll -= lp.data[(i * len + t) * vocab + static_cast<std::size_t>(target)];
        ++count;
      }
    }
  }
  if (count == 0) throw std::invalid_argument("perplexity: no non-padding targets");
  return std::exp(nll / static_cast<double>(count));
}

double minimal_pair_accuracy(const model::Weights& weights, std::span<const data::MinimalPair> pairs) {
  if (pairs.empty()) throw std::invalid_argument("minimal_pair_accuracy: no pairs");
  std::vector<Sequence> seqs;
  seqs.reserve(2 * pairs.size());
  for (const auto& p : pairs) {
    seqs.push_back(p.grammatical);
    seqs.push_back(p.ungrammatical);
  }
  const auto scores = sequence_logprobs(weights, seqs);
  double correct = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const double good = scores[2 * i], bad = scores[2 * i + 1];
    if (good > bad) correct += 1.0;
    else if (good == bad) correct += 0.5;
  }
  return correct / static_cast<double>(pairs.size());
}

Tensor next_token_distributions(const model::Weights& weights, std::span<const Sequence> contexts) {
  if (contexts.empty()) throw std::invalid_argument("next_token_distributions: no contexts");
  const std::size_t vocab = weights.config().vocab_size;
  Tensor out({contexts.size(), vocab});
  for (std::size_t c0 = 0; c0 < contexts.size(); c0 += kEvalBatch) {
    const std::size_t n = std::min(kEvalBatch, contexts.size() - c0);
    std::size_t len = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (contexts[c0 + i].empty()) throw std::invalid_argument("next_token_distributions: empty context");
      check_ids(weights, contexts[c0 + i]);
      len = std::max(len, contexts[c0 + i].size());
    }
    std::vector<std::int32_t> ids(n * len, data::kPadId);
    for (std::size_t i = 0; i < n; ++i) {
      std::copy(contexts[c0 + i].begin(), contexts[c0 + i].end(), ids.begin() + static_cast<std::ptrdiff_t>(i * len));
    }
    const Tensor p = ad::softmax_with_temperature(model::logits(weights, IntTensor({n, len}, std::move(ids))), 1.0);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t last = contexts[c0 + i].size() - 1;
      std::copy_n(p.data.begin() + static_cast<std::ptrdiff_t>((i * len + last) * vocab), vocab,
                  out.data.begin() + static_cast<std::ptrdiff_t>((c0 + i) * vocab));
    }
  }
  return out;
}

double mode_mass(const Tensor& student_probs, const Tensor& teacher_probs, std::size_t m) {
  if (student_probs.shape != teacher_probs.shape || student_probs.rank() != 2) {
    throw std::invalid_argument("mode_mass: expected matching [C, V] distributions");
  }
  const std::size_t vocab = teacher_probs.last_dim();
  if (m == 0 || m > vocab) {
    throw std::invalid_argument("mode_mass: m must be in [1, " + std::to_string(vocab) + "]");
  }
  std::vector<std::size_t> idx(vocab);
  double total = 0.0;
  for (std::size_t r = 0; r < teacher_probs.rows(); ++r) {
    const auto t = teacher_probs.row(r);
    std::iota(idx.begin(), idx.end(), 0);
    // Ties broken by lower token id.
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(m), idx.end(),
                      [&](std::size_t a, std::size_t b) { return t[a] > t[b] || (t[a] == t[b] && a < b); });
    const auto s = student_probs.row(r);
    double mass = 0.0;
    for (std::size_t j = 0; j < m; ++j) mass += s[idx[j]];
    total += mass;
  }
  return total / static_cast<double>(teacher_probs.rows());
}

double mode_mass(const model::Weights& student, const model::Weights& teacher,
                 std::span<const Sequence> contexts, std::size_t m) {
  if (student.config().vocab_size != teacher.config().vocab_size) {
    throw std::invalid_argument("mode_mass: student and teacher vocabularies differ");
  }
  if (m == 0 || m > teacher.config().vocab_size) {
    throw std::invalid_argument("mode_mass: m must be in [1, V]");
  }
  return mode_mass(next_token_distributions(student, contexts), next_token_distributions(teacher, contexts), m);
}

std::vector<Sequence> sample_contexts(const data::Corpus& heldout, std::size_t count, std::size_t length) {
  if (count == 0 || length == 0) throw std::invalid_argument("sample_contexts: count and length must be positive");
  if (heldout.tokens.size() < length) throw std::invalid_argument("sample_contexts: held-out corpus too short");
  const std::size_t span = heldout.tokens.size() - length;
  std::vector<Sequence> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t start = count == 1 ? 0 : (span * i) / (count - 1);
    out.emplace_back(heldout.tokens.begin() + static_cast<std::ptrdiff_t>(start),
                     heldout.tokens.begin() + static_cast<std::ptrdiff_t>(start + length));
  }
  return out;
}

std::vector<double> enumerate_sequence_logprobs(const model::Weights& weights, std::size_t length) {
  const std::size_t vocab = weights.config().vocab_size;
  if (length == 0) throw std::invalid_argument("enumeration: length must be positive");
  std::size_t total = 1;
  for (std::size_t i = 0; i < length; ++i) {
    total *= vocab;
    if (total > 65536) throw std::invalid_argument("enumeration: V^L exceeds 65536");
  }
  std::vector<Sequence> seqs(total, Sequence(length));
  for (std::size_t s = 0; s < total; ++s) {
    std::size_t code = s;
    for (std::size_t t = length; t-- > 0;) {
      seqs[s][t] = static_cast<std::int32_t>(code % vocab);
      code /= vocab;
    }
  }
  return sequence_logprobs(weights, seqs);
}

double exact_sequence_kl(const model::Weights& a, const model::Weights& b, std::size_t vocab, std::size_t length) {
  if (a.config().vocab_size != vocab || b.config().vocab_size != vocab) {
    throw std::invalid_argument("exact_sequence_kl: models must both have vocabulary size " + std::to_string(vocab));
  }
  const auto la = enumerate_sequence_logprobs(a, length);
  const auto lb = enumerate_sequence_logprobs(b, length);
  double kl = 0.0;
  for (std::size_t i = 0; i < la.size(); ++i) kl += std::exp(la[i]) * (la[i] - lb[i]);
  return kl;
}

std::string format_number(double value) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

std::string csv_header() {
  return "run_id,epoch,step,loss_total,loss_ce,loss_distill,beta,lr,perplexity,mp_accuracy,"
         "mode_mass_m1,mode_mass_m5";
}

std::string to_csv(const MetricsRow& row) {
  auto opt = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string(); };
  return row.run_id + "," + std::to_string(row.epoch) + "," + std::to_string(row.step) + "," +
         opt(row.loss_total) + "," + opt(row.loss_ce) + "," + opt(row.loss_distill) + "," + opt(row.beta) +
         "," + opt(row.lr) + "," + opt(row.perplexity) + "," + opt(row.mp_accuracy) + "," +
         opt(row.mode_mass_m1) + "," + opt(row.mode_mass_m5);
}

}  // namespace kd::eval
