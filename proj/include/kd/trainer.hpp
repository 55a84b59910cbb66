#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "kd/autodiff.hpp"
#include "kd/corpus.hpp"
#include "kd/distill.hpp"
#include "kd/model.hpp"

namespace kd::train {

struct OptimizerConfig {
  double lr = 2.5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t t_max = 500;
  double lr_min = 0.0;

  void validate() const;
};

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t seq_len = 128;
  std::size_t epochs = 6;
  std::size_t grad_accum = 1;
  std::uint64_t seed = 0;
  /// Optimizer steps between checkpoints; 0 disables.
  std::size_t checkpoint_every = 0;

  void validate() const;
};

/// AdamW moments, one buffer pair per parameter.
struct OptimizerState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t step = 0;

  static OptimizerState for_params(std::span<ad::Parameter* const> params);
  static OptimizerState for_weights(model::Weights& weights);
};

/// One decoupled-weight-decay AdamW update with bias correction, using the
/// gradients currently stored on the parameters.
void adamw_step(std::span<ad::Parameter* const> params, OptimizerState& state,
                const OptimizerConfig& cfg, double lr);
void adamw_step(model::Weights& weights, OptimizerState& state, const OptimizerConfig& cfg, double lr);

/// lr_min + (lr - lr_min) * (1 + cos(pi * min(step, t_max) / t_max)) / 2
double cosine_lr(std::size_t step, const OptimizerConfig& cfg);

struct StepLog {
  std::size_t epoch = 0;  // 0-based epoch index
  std::size_t step = 0;   // optimizer steps taken after this update
  double lr = 0.0;
  distill::LossBreakdown loss;
};

struct TrainReport {
  model::Weights weights;
  std::vector<StepLog> steps;
  std::vector<double> beta_trace;  // beta used in each epoch
  std::size_t optimizer_steps = 0;
  double wall_seconds = 0.0;
};

struct RunHooks {
  /// Called after every optimizer step.
  std::function<void(const StepLog&)> on_step;
  /// Called before training with epoch 0 and after each epoch e with e+1.
  std::function<void(std::size_t epoch, std::size_t step, const model::Weights&)> on_epoch;
  /// Directory for periodic checkpoints (TrainConfig::checkpoint_every).
  std::filesystem::path checkpoint_dir;
  std::string checkpoint_prefix = "step";
};

/// Teacher logits for every (L+1)-token window of a corpus, computed once
/// without gradients. Batches index into it through Batch::windows.
class TeacherLogitCache {
 public:
  TeacherLogitCache(const model::Weights& teacher, const data::Corpus& corpus, std::size_t seq_len);
  Tensor gather(const data::Batch& batch) const;
  std::size_t windows() const { return windows_; }

 private:
  std::size_t windows_ = 0;
  std::size_t seq_len_ = 0;
  std::size_t vocab_ = 0;
  std::vector<double> logits_;
};

/// Student distillation loop: per epoch beta update, shuffled batches,
/// gradient accumulation over grad_accum micro-batches, AdamW with cosine
/// learning rate stepped once per optimizer step. Teachers are given either
/// as weights or as prebuilt caches over `corpus` (one per teacher).
TrainReport run_distillation(const model::ModelConfig& student_config,
                             std::span<const model::Weights> teachers,
                             const distill::DistillConfig& dcfg, const TrainConfig& tcfg,
                             const OptimizerConfig& ocfg, const data::Corpus& corpus,
                             const RunHooks& hooks = {});
TrainReport run_distillation(const model::ModelConfig& student_config,
                             std::span<const TeacherLogitCache> teachers,
                             const distill::DistillConfig& dcfg, const TrainConfig& tcfg,
                             const OptimizerConfig& ocfg, const data::Corpus& corpus,
                             const RunHooks& hooks = {});

/// Plain next-token cross-entropy training (used for teachers).
TrainReport train_teacher(const model::ModelConfig& config, const TrainConfig& tcfg,
                          const OptimizerConfig& ocfg, const data::Corpus& corpus,
                          const RunHooks& hooks = {});

/// Batch shuffle seed for an epoch.
std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch);

}  // namespace kd::train
