#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kd/corpus.hpp"
#include "kd/model.hpp"
#include "kd/tensor.hpp"

namespace kd::eval {

using Sequence = std::vector<std::int32_t>;

/// Sum over all tokens of ln p(token | separator, earlier tokens). The
/// separator acts as beginning-of-sentence context and is not scored.
double sequence_logprob(const model::Weights& weights, std::span<const std::int32_t> tokens);

/// Batched sequence_logprob.
std::vector<double> sequence_logprobs(const model::Weights& weights, std::span<const Sequence> sequences);

/// exp(mean NLL) over non-overlapping (L+1)-token windows of `tokens`;
/// positions whose target is padding are skipped.
double perplexity(const model::Weights& weights, std::span<const std::int32_t> tokens, std::size_t seq_len);

/// Fraction of pairs whose grammatical member scores higher; ties count 0.5.
double minimal_pair_accuracy(const model::Weights& weights, std::span<const data::MinimalPair> pairs);

/// Next-token distribution after each context, [C, V].
Tensor next_token_distributions(const model::Weights& weights, std::span<const Sequence> contexts);

/// Mean over rows of the student's probability mass on the teacher's top-m tokens.
double mode_mass(const Tensor& student_probs, const Tensor& teacher_probs, std::size_t m);
double mode_mass(const model::Weights& student, const model::Weights& teacher,
                 std::span<const Sequence> contexts, std::size_t m);

/// `count` evenly spaced windows of `length` tokens from a held-out corpus.
std::vector<Sequence> sample_contexts(const data::Corpus& heldout, std::size_t count, std::size_t length);

/// ln p(s) for every sequence of length L over the model vocabulary, in
/// lexicographic order. Requires V^L <= 65536.
std::vector<double> enumerate_sequence_logprobs(const model::Weights& weights, std::size_t length);

/// sum_s q_a(s) ln(q_a(s) / q_b(s)) over all V^L sequences.
double exact_sequence_kl(const model::Weights& a, const model::Weights& b, std::size_t vocab,
                         std::size_t length);

struct MetricsRow {
  std::string run_id;
  std::size_t epoch = 0;
  std::size_t step = 0;
  std::optional<double> loss_total;
  std::optional<double> loss_ce;
  std::optional<double> loss_distill;
  std::optional<double> beta;
  std::optional<double> lr;
  std::optional<double> perplexity;
  std::optional<double> mp_accuracy;
  std::optional<double> mode_mass_m1;
  std::optional<double> mode_mass_m5;
};

std::string csv_header();
std::string to_csv(const MetricsRow& row);
/// 17 significant digits (round-trips exactly); used by every emitted metric file.
std::string format_number(double value);

}  // namespace kd::eval
