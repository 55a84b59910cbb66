#include "kd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace kd::distill {

std::string_view to_string(Objective o) { return o == Objective::reverse ? "reverse" : "forward"; }

std::string_view to_string(TeacherCombination c) {
  return c == TeacherCombination::mean_loss ? "mean-loss" : "mean-prob";
}

std::string_view to_string(Reduction r) { return r == Reduction::mean ? "mean" : "sum"; }

Objective parse_objective(std::string_view s) {
  if (s == "reverse" || s == "rv") return Objective::reverse;
  if (s == "forward" || s == "fw") return Objective::forward;
  throw std::invalid_argument("unknown objective '" + std::string(s) + "' (expected reverse|forward)");
}

TeacherCombination parse_combination(std::string_view s) {
  if (s == "mean-loss") return TeacherCombination::mean_loss;
  if (s == "mean-prob") return TeacherCombination::mean_prob;
  throw std::invalid_argument("unknown teacher combination '" + std::string(s) +
                              "' (expected mean-loss|mean-prob)");
}

Reduction parse_reduction(std::string_view s) {
  if (s == "mean") return Reduction::mean;
  if (s == "sum") return Reduction::sum;
  throw std::invalid_argument("unknown reduction '" + std::string(s) + "' (expected mean|sum)");
}

void DistillConfig::validate() const {
  if (!(temperature > 0.0)) throw std::invalid_argument("distill: temperature must be positive");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("distill: alpha must be in [0, 1]");
  if (!(beta_start >= 0.0 && beta_start <= 1.0)) {
    throw std::invalid_argument("distill: beta_start must be in [0, 1]");
  }
  if (!(beta_floor >= 0.0) || beta_floor > beta_start) {
    throw std::invalid_argument("distill: beta_floor must satisfy 0 <= beta_floor <= beta_start");
  }
  if (chunk_size == 0) throw std::invalid_argument("distill: chunk_size must be >= 1");
  if (teacher_count != 1 && teacher_count != 2) {
    throw std::invalid_argument("distill: teacher_count must be 1 or 2");
  }
}

TeacherCombination DistillConfig::effective_combination() const {
  if (combination) return *combination;
  return objective == Objective::reverse ? TeacherCombination::mean_prob
                                         : TeacherCombination::mean_loss;
}

double beta_at_epoch(std::size_t epoch, std::size_t total_epochs, double beta_start, double beta_floor) {
  if (total_epochs == 0) throw std::invalid_argument("beta_at_epoch: total_epochs must be >= 1");
  const double progress = static_cast<double>(epoch) / static_cast<double>(total_epochs);
  return std::max(beta_floor, beta_start * (1.0 - progress));
}

Tensor mix_logits(const Tensor& z_teacher, const Tensor& z_student, double beta) {
  if (z_teacher.shape != z_student.shape) {
    throw std::invalid_argument("mix_logits: shape mismatch " + shape_str(z_teacher.shape) + " vs " +
                                shape_str(z_student.shape));
  }
  if (!(beta >= 0.0 && beta <= 1.0)) {
    throw std::invalid_argument("mix_logits: beta must be in [0, 1], got " + std::to_string(beta));
  }
  // Endpoints copied so beta = 0/1 reproduce the inputs bit-exactly.
  if (beta == 1.0) return z_teacher;
  if (beta == 0.0) return z_student;
  Tensor out(z_teacher.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out.data[i] = beta * z_teacher.data[i] + (1.0 - beta) * z_student.data[i];
  }
  return out;
}

namespace {

const double kLogFloor = std::log(kProbabilityFloor);

void check_loss_args(ad::Var z_student, const Tensor& z_mixed, double temperature) {
  if (z_student.shape() != z_mixed.shape) {
    throw std::invalid_argument("KL loss: shape mismatch " + shape_str(z_student.shape()) + " vs " +
                                shape_str(z_mixed.shape));
  }
  if (!(temperature > 0.0)) throw std::invalid_argument("KL loss: temperature must be positive");
  if (z_mixed.rank() < 1) throw std::invalid_argument("KL loss: missing vocabulary axis");
}

Tensor clamped_log_probs(const Tensor& logits, double temperature) {
  Tensor lp = ad::log_softmax_with_temperature(logits, temperature);
  for (double& x : lp.data) x = std::max(x, kLogFloor);
  return lp;
}

// Per-position KL as a graph node, shape = logits shape minus vocab axis.
ad::Var kl_rows(Objective objective, ad::Var z_student, const Tensor& z_mixed, double temperature) {
  ad::Graph& g = z_student.graph();
  ad::Var log_q_raw = ad::log_softmax_with_temperature(z_student, temperature);
  ad::Var log_q = ad::clamp_min(log_q_raw, kLogFloor);
  Tensor log_p = clamped_log_probs(z_mixed, temperature);
  if (objective == Objective::reverse) {
    ad::Var q = ad::exp(log_q_raw);
    return ad::sum_last(ad::mul(q, ad::sub(log_q, g.constant(std::move(log_p)))));
  }
  Tensor p = ad::softmax_with_temperature(z_mixed, temperature);
  ad::Var log_p_var = g.constant(std::move(log_p));
  return ad::sum_last(ad::mul(g.constant(std::move(p)), ad::sub(log_p_var, log_q)));
}

ad::Var reduce(ad::Var summed, std::size_t positions, double temperature, Reduction reduction) {
  const double t2 = temperature * temperature;
  const double factor = reduction == Reduction::mean ? t2 / static_cast<double>(positions) : t2;
  return ad::scale(summed, factor);
}

std::size_t position_count(const Tensor& z) { return z.rows(); }

Tensor slice_time(const Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t n = x.shape[0], len = x.shape[1];
  const std::size_t inner = x.numel() / (n * len);
  const std::size_t width = end - begin;
  Shape shape = x.shape;
  shape[1] = width;
  Tensor out(std::move(shape));
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(x.data.data() + (i * len + begin) * inner, width * inner,
                out.data.data() + i * width * inner);
  }
  return out;
}

}  // namespace

ad::Var kl_loss(Objective objective, ad::Var z_student, const Tensor& z_mixed, double temperature,
                Reduction reduction) {
  check_loss_args(z_student, z_mixed, temperature);
  ad::Var rows = kl_rows(objective, z_student, z_mixed, temperature);
  return reduce(ad::sum(rows), position_count(z_mixed), temperature, reduction);
}

ad::Var reverse_kl_loss(ad::Var z_student, const Tensor& z_mixed, double temperature, Reduction reduction) {
  return kl_loss(Objective::reverse, z_student, z_mixed, temperature, reduction);
}

ad::Var forward_kl_loss(ad::Var z_student, const Tensor& z_mixed, double temperature, Reduction reduction) {
  return kl_loss(Objective::forward, z_student, z_mixed, temperature, reduction);
}

Tensor per_position_kl(Objective objective, const Tensor& z_student, const Tensor& z_mixed,
                       double temperature) {
  ad::Graph g(false);
  ad::Var zs = g.constant(z_student);
  check_loss_args(zs, z_mixed, temperature);
  return kl_rows(objective, zs, z_mixed, temperature).value();
}

TeacherTarget combine_teachers(std::vector<Tensor> teacher_logits, TeacherCombination mode) {
  if (teacher_logits.empty()) throw std::invalid_argument("combine_teachers: no teachers given");
  for (const Tensor& t : teacher_logits) {
    if (t.shape != teacher_logits.front().shape) {
      throw std::invalid_argument("combine_teachers: teacher logits differ in shape");
    }
  }
  if (teacher_logits.size() == 1 || mode == TeacherCombination::mean_loss) {
    return {std::move(teacher_logits)};
  }
  Tensor mean(teacher_logits.front().shape);
  for (const Tensor& t : teacher_logits) {
    Tensor p = ad::softmax_with_temperature(t, 1.0);
    for (std::size_t i = 0; i < p.numel(); ++i) mean.data[i] += p.data[i];
  }
  const double inv = 1.0 / static_cast<double>(teacher_logits.size());
  for (double& x : mean.data) x = std::log(std::max(x * inv, kProbabilityFloor));
  TeacherTarget out;
  out.logits.push_back(std::move(mean));
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> segment_bounds(std::size_t len, std::size_t k) {
  if (k == 0) throw std::invalid_argument("segment_bounds: chunk size must be >= 1");
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t begin = 0; begin < len; begin += k) out.emplace_back(begin, std::min(len, begin + k));
  return out;
}

ad::Var stepwise_loss(ad::Var z_student, const Tensor& z_mixed, double temperature, std::size_t k,
                      Reduction reduction, Objective objective) {
  if (k == 0) throw std::invalid_argument("stepwise_loss: chunk size must be >= 1");
  check_loss_args(z_student, z_mixed, temperature);
  if (z_mixed.rank() < 3) throw std::invalid_argument("stepwise_loss expects [N, L, V] logits");
  const std::size_t len = z_mixed.shape[1];
  if (k >= len) return kl_loss(objective, z_student, z_mixed, temperature, reduction);

  std::optional<ad::Var> total;
  for (const auto& [begin, end] : segment_bounds(len, k)) {
    ad::Var seg = ad::slice_time(z_student, begin, end);
    Tensor target = slice_time(z_mixed, begin, end);
    ad::Var seg_sum = ad::sum(kl_rows(objective, seg, target, temperature));
    total = total ? ad::add(*total, seg_sum) : seg_sum;
  }
  return reduce(*total, position_count(z_mixed), temperature, reduction);
}

ad::Var total_loss(ad::Var student_ce, ad::Var distillation, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("total_loss: alpha must be in [0, 1], got " + std::to_string(alpha));
  }
  return ad::add(ad::scale(student_ce, alpha), ad::scale(distillation, 1.0 - alpha));
}

std::vector<Tensor> mixed_targets(const Tensor& student_logits, const TeacherTarget& teacher, double beta) {
  std::vector<Tensor> out;
  out.reserve(teacher.logits.size());
  for (const Tensor& t : teacher.logits) out.push_back(mix_logits(t, student_logits, beta));
  return out;
}

StepResult distillation_loss(ad::Var student_logits, std::span<const Tensor> mixed,
                             const IntTensor& targets, const DistillConfig& cfg, double beta) {
  if (mixed.empty()) throw std::invalid_argument("distillation_loss: no targets");
  ad::Var log_probs = ad::log_softmax_with_temperature(student_logits, 1.0);
  ad::Var ce = ad::cross_entropy(log_probs, targets, data::kPadId);

  std::optional<ad::Var> distill;
  for (const Tensor& target : mixed) {
    ad::Var l = stepwise_loss(student_logits, target, cfg.temperature, cfg.chunk_size,
                              cfg.reduction, cfg.objective);
    distill = distill ? ad::add(*distill, l) : l;
  }
  ad::Var d = mixed.size() == 1 ? *distill : ad::scale(*distill, 1.0 / static_cast<double>(mixed.size()));
  ad::Var total = total_loss(ce, d, cfg.alpha);
  return {total, {ce.value().item(), d.value().item(), total.value().item(), beta, cfg.temperature}};
}

StepResult distillation_step(ad::Graph& graph, model::Weights& student,
                             std::span<const Tensor> teacher_logits, const data::Batch& batch,
                             const DistillConfig& cfg, const EpochState& state) {
  cfg.validate();
  if (teacher_logits.size() != cfg.teacher_count) {
    throw std::invalid_argument("distillation_step: expected " + std::to_string(cfg.teacher_count) +
                                " teacher(s), got " + std::to_string(teacher_logits.size()));
  }
  ad::Var z_student = model::forward(graph, student, batch.inputs);
  TeacherTarget teacher = combine_teachers(
      std::vector<Tensor>(teacher_logits.begin(), teacher_logits.end()), cfg.effective_combination());
  std::vector<Tensor> mixed = mixed_targets(z_student.value(), teacher, state.beta);
  return distillation_loss(z_student, mixed, batch.targets, cfg, state.beta);
}

StepResult distillation_step(ad::Graph& graph, model::Weights& student,
                             std::span<const model::Weights> teachers, const data::Batch& batch,
                             const DistillConfig& cfg, const EpochState& state) {
  std::vector<Tensor> logits;
  logits.reserve(teachers.size());
  for (const model::Weights& t : teachers) logits.push_back(model::logits(t, batch.inputs));
  return distillation_step(graph, student, logits, batch, cfg, state);
}

}  // namespace kd::distill
