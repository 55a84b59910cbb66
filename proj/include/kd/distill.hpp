#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "kd/autodiff.hpp"
#include "kd/batch.hpp"
#include "kd/model.hpp"
#include "kd/tensor.hpp"

namespace kd::distill {

enum class Objective { reverse, forward };
enum class TeacherCombination { mean_loss, mean_prob };
enum class Reduction { mean, sum };

std::string_view to_string(Objective o);
std::string_view to_string(TeacherCombination c);
std::string_view to_string(Reduction r);
Objective parse_objective(std::string_view s);
TeacherCombination parse_combination(std::string_view s);
Reduction parse_reduction(std::string_view s);

/// Log arguments are clamped here so KL stays finite when one side has no mass.
inline constexpr double kProbabilityFloor = 1e-12;

struct DistillConfig {
  Objective objective = Objective::reverse;
  double temperature = 2.0;
  double alpha = 0.5;
  double beta_start = 0.7;
  double beta_floor = 0.1;
  std::size_t chunk_size = 5;
  std::size_t teacher_count = 1;
  /// Unset: mean-prob for reverse KL, mean-loss for forward KL.
  std::optional<TeacherCombination> combination;
  Reduction reduction = Reduction::mean;

  void validate() const;
  TeacherCombination effective_combination() const;
};

/// max(beta_floor, beta_start * (1 - e / total_epochs))
double beta_at_epoch(std::size_t epoch, std::size_t total_epochs, double beta_start, double beta_floor);

struct EpochState {
  std::size_t epoch = 0;
  std::size_t total_epochs = 6;
  double beta = 0.7;

  static EpochState at(std::size_t epoch, std::size_t total_epochs, const DistillConfig& cfg) {
    return {epoch, total_epochs, beta_at_epoch(epoch, total_epochs, cfg.beta_start, cfg.beta_floor)};
  }
};

struct LossBreakdown {
  double student_ce = 0.0;
  double distillation = 0.0;
  double total = 0.0;
  double beta = 0.0;
  double temperature = 0.0;
};

/// beta * z_teacher + (1 - beta) * z_student. The result is a plain tensor:
/// the mixed target never carries gradient back into the student.
Tensor mix_logits(const Tensor& z_teacher, const Tensor& z_student, double beta);

/// sum_v q_v (ln q_v - ln p_v) per position, q = softmax(z_student/T),
/// p = softmax(z_mixed/T), scaled by T^2 and reduced over positions.
/// Differentiable in z_student only.
ad::Var reverse_kl_loss(ad::Var z_student, const Tensor& z_mixed, double temperature,
                        Reduction reduction = Reduction::mean);
/// sum_v p_v (ln p_v - ln q_v); otherwise as reverse_kl_loss.
ad::Var forward_kl_loss(ad::Var z_student, const Tensor& z_mixed, double temperature,
                        Reduction reduction = Reduction::mean);
ad::Var kl_loss(Objective objective, ad::Var z_student, const Tensor& z_mixed, double temperature,
                Reduction reduction);

/// Per-position KL (no T^2, no reduction): shape = z.shape without the last axis.
Tensor per_position_kl(Objective objective, const Tensor& z_student, const Tensor& z_mixed,
                       double temperature);

/// Teacher signal after combination. One entry means a single target;
/// several entries mean the loss is averaged over per-teacher losses.
struct TeacherTarget {
  std::vector<Tensor> logits;
};

/// One teacher: identity. mean-prob: log of the mean of the teachers'
/// softmax distributions. mean-loss: teachers kept separate.
TeacherTarget combine_teachers(std::vector<Tensor> teacher_logits, TeacherCombination mode);

/// [begin, end) time ranges of the chunks: ceil(len / k) segments, the last
/// one possibly shorter.
std::vector<std::pair<std::size_t, std::size_t>> segment_bounds(std::size_t len, std::size_t k);

/// KL loss computed over contiguous time segments of length k (last one may
/// be shorter), aggregated to equal the unchunked loss.
ad::Var stepwise_loss(ad::Var z_student, const Tensor& z_mixed, double temperature, std::size_t k,
                      Reduction reduction, Objective objective);

/// alpha * ce + (1 - alpha) * distillation
ad::Var total_loss(ad::Var student_ce, ad::Var distillation, double alpha);

struct StepResult {
  ad::Var loss;
  LossBreakdown breakdown;
};

/// Mixed targets for one step, computed from detached student logits.
std::vector<Tensor> mixed_targets(const Tensor& student_logits, const TeacherTarget& teacher,
                                  double beta);

/// Loss assembly once the (constant) mixed targets are known. CE ignores
/// padding positions.
StepResult distillation_loss(ad::Var student_logits, std::span<const Tensor> mixed,
                             const IntTensor& targets, const DistillConfig& cfg, double beta);

/// One training step's forward computation with precomputed teacher logits
/// (one tensor per teacher, each [N, L, V]).
StepResult distillation_step(ad::Graph& graph, model::Weights& student,
                             std::span<const Tensor> teacher_logits, const data::Batch& batch,
                             const DistillConfig& cfg, const EpochState& state);

/// As above, running the teachers' forward passes without gradients.
StepResult distillation_step(ad::Graph& graph, model::Weights& student,
                             std::span<const model::Weights> teachers, const data::Batch& batch,
                             const DistillConfig& cfg, const EpochState& state);

}  // namespace kd::distill
