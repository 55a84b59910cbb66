#include "kd/trainer.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "kd/checkpoint.hpp"
#include "kd/errors.hpp"
#include "kd/rng.hpp"

namespace kd::train {

void OptimizerConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("optimizer: lr must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0)) throw std::invalid_argument("optimizer: beta1 must be in (0, 1)");
  if (!(beta2 > 0.0 && beta2 < 1.0)) throw std::invalid_argument("optimizer: beta2 must be in (0, 1)");
  if (!(eps > 0.0)) throw std::invalid_argument("optimizer: eps must be positive");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("optimizer: weight_decay must be >= 0");
  if (t_max == 0) throw std::invalid_argument("optimizer: t_max must be positive");
  if (!(lr_min >= 0.0 && lr_min <= lr)) throw std::invalid_argument("optimizer: lr_min must be in [0, lr]");
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
  if (seq_len == 0) throw std::invalid_argument("train: seq_len must be positive");
  if (grad_accum == 0) throw std::invalid_argument("train: grad_accum must be positive");
}

OptimizerState OptimizerState::for_params(std::span<ad::Parameter* const> params) {
  OptimizerState s;
  for (const ad::Parameter* p : params) {
    s.m.emplace_back(p->value.numel(), 0.0);
    s.v.emplace_back(p->value.numel(), 0.0);
  }
  return s;
}

namespace {

std::vector<ad::Parameter*> param_ptrs(model::Weights& weights) {
  std::vector<ad::Parameter*> out;
  for (auto& p : weights.params()) out.push_back(&p.param);
  return out;
}

}  // namespace

OptimizerState OptimizerState::for_weights(model::Weights& weights) {
  return for_params(param_ptrs(weights));
}

void adamw_step(std::span<ad::Parameter* const> params, OptimizerState& state,
                const OptimizerConfig& cfg, double lr) {
  if (!(lr >= 0.0)) throw std::invalid_argument("adamw_step: lr must be non-negative");
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("adamw_step: optimizer state has " + std::to_string(state.m.size()) +
                                " slots for " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::size_t n = params[i]->value.numel();
    if (params[i]->grad.size() != n || state.m[i].size() != n || state.v[i].size() != n) {
      throw std::invalid_argument("adamw_step: shape mismatch for parameter " + std::to_string(i));
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i]->value.data;
    const auto& g = params[i]->grad;
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      w[j] = w[j] - lr * m_hat / (std::sqrt(v_hat) + cfg.eps) - lr * cfg.weight_decay * w[j];
    }
  }
}

void adamw_step(model::Weights& weights, OptimizerState& state, const OptimizerConfig& cfg, double lr) {
  const auto ptrs = param_ptrs(weights);
  adamw_step(ptrs, state, cfg, lr);
}

double cosine_lr(std::size_t step, const OptimizerConfig& cfg) {
  const double progress = static_cast<double>(std::min(step, cfg.t_max)) / static_cast<double>(cfg.t_max);
  return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch) {
  return derive_seed(seed, "batches/" + std::to_string(epoch));
}

TeacherLogitCache::TeacherLogitCache(const model::Weights& teacher, const data::Corpus& corpus,
                                     std::size_t seq_len)
    : windows_(data::window_count(corpus, seq_len)), seq_len_(seq_len),
      vocab_(teacher.config().vocab_size) {
  logits_.resize(windows_ * seq_len_ * vocab_);
  constexpr std::size_t kChunk = 32;
  for (std::size_t w0 = 0; w0 < windows_; w0 += kChunk) {
    const std::size_t count = std::min(kChunk, windows_ - w0);
    std::vector<std::int32_t> ids(count * seq_len_);
    for (std::size_t i = 0; i < count; ++i) {
      const auto win = data::window(corpus, seq_len_, w0 + i);
      std::copy(win.begin(), win.end() - 1, ids.begin() + static_cast<std::ptrdiff_t>(i * seq_len_));
    }
    const Tensor z = model::logits(teacher, IntTensor({count, seq_len_}, std::move(ids)));
    std::copy(z.data.begin(), z.data.end(), logits_.begin() + static_cast<std::ptrdiff_t>(w0 * seq_len_ * vocab_));
  }
}

Tensor TeacherLogitCache::gather(const data::Batch& batch) const {
  if (batch.seq_len() != seq_len_) throw std::invalid_argument("teacher cache: sequence length mismatch");
  Tensor out({batch.size(), seq_len_, vocab_});
  const std::size_t block = seq_len_ * vocab_;
  for (std::size_t i = 0; i < batch.windows.size(); ++i) {
    const std::size_t w = batch.windows[i];
    if (w >= windows_) throw std::invalid_argument("teacher cache: window index out of range");
    std::copy_n(logits_.begin() + static_cast<std::ptrdiff_t>(w * block), block,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * block));
  }
  return out;
}

namespace {

using LossFn = std::function<distill::StepResult(ad::Graph&, model::Weights&, const data::Batch&,
                                                  std::size_t epoch)>;

TrainReport train_loop(model::Weights weights, const TrainConfig& tcfg, const OptimizerConfig& ocfg,
                       const data::Corpus& corpus, const RunHooks& hooks, const LossFn& loss_fn,
                       const std::function<double(std::size_t)>& beta_for_epoch) {
  tcfg.validate();
  ocfg.validate();
  if (corpus.tokens.empty()) throw std::invalid_argument("training corpus is empty");
  const auto start = std::chrono::steady_clock::now();
  TrainReport report{std::move(weights), {}, {}, 0, 0.0};
  model::Weights& w = report.weights;
  OptimizerState state = OptimizerState::for_weights(w);
  w.zero_grad();
  if (hooks.on_epoch) hooks.on_epoch(0, 0, w);

  for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    if (beta_for_epoch) report.beta_trace.push_back(beta_for_epoch(epoch));
    const auto batches = data::make_batches(corpus, tcfg.batch_size, tcfg.seq_len, epoch_seed(tcfg.seed, epoch));
    std::size_t micro = 0;
    distill::LossBreakdown acc;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      ad::Graph graph;
      const distill::StepResult res = loss_fn(graph, w, batches[b], epoch);
      if (!std::isfinite(res.breakdown.total)) {
        throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch) + ", optimizer step " +
                               std::to_string(state.step) + " (ce=" + std::to_string(res.breakdown.student_ce) +
                               ", distill=" + std::to_string(res.breakdown.distillation) + ")");
      }
      graph.backward(res.loss);
      ++micro;
      acc.student_ce += res.breakdown.student_ce;
      acc.distillation += res.breakdown.distillation;
      acc.total += res.breakdown.total;
      acc.beta = res.breakdown.beta;
      acc.temperature = res.breakdown.temperature;

      if (micro == tcfg.grad_accum || b + 1 == batches.size()) {
        if (micro > 1) {
          const double inv = 1.0 / static_cast<double>(micro);
          for (auto& p : w.params()) {
            for (double& g : p.param.grad) g *= inv;
          }
          acc.student_ce *= inv;
          acc.distillation *= inv;
          acc.total *= inv;
        }
        const double lr = cosine_lr(state.step, ocfg);
        adamw_step(w, state, ocfg, lr);
        w.zero_grad();
        StepLog log{epoch, state.step, lr, acc};
        report.steps.push_back(log);
        if (hooks.on_step) hooks.on_step(log);
        if (tcfg.checkpoint_every > 0 && state.step % tcfg.checkpoint_every == 0 &&
            !hooks.checkpoint_dir.empty()) {
          save_checkpoint(w, hooks.checkpoint_dir /
                                 (hooks.checkpoint_prefix + std::to_string(state.step) + ".ckpt"));
        }
        micro = 0;
        acc = {};
      }
    }
    if (hooks.on_epoch) hooks.on_epoch(epoch + 1, state.step, w);
  }
  report.optimizer_steps = state.step;
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace

TrainReport run_distillation(const model::ModelConfig& student_config,
                             std::span<const TeacherLogitCache> teachers,
                             const distill::DistillConfig& dcfg, const TrainConfig& tcfg,
                             const OptimizerConfig& ocfg, const data::Corpus& corpus,
                             const RunHooks& hooks) {
  dcfg.validate();
  if (teachers.size() != dcfg.teacher_count) {
    throw std::invalid_argument("run_distillation: teacher_count is " + std::to_string(dcfg.teacher_count) +
                                " but " + std::to_string(teachers.size()) + " teacher(s) given");
  }
  for (const auto& cache : teachers) {
    if (cache.windows() != data::window_count(corpus, tcfg.seq_len)) {
      throw std::invalid_argument("run_distillation: teacher cache was built for a different corpus or length");
    }
  }
  const std::size_t total_epochs = std::max<std::size_t>(tcfg.epochs, 1);
  auto beta_for = [&](std::size_t epoch) {
    return distill::beta_at_epoch(epoch, total_epochs, dcfg.beta_start, dcfg.beta_floor);
  };
  LossFn loss = [&](ad::Graph& g, model::Weights& w, const data::Batch& batch, std::size_t epoch) {
    std::vector<Tensor> logits;
    for (const auto& cache : teachers) logits.push_back(cache.gather(batch));
    const distill::EpochState state{epoch, total_epochs, beta_for(epoch)};
    return distill::distillation_step(g, w, logits, batch, dcfg, state);
  };
  return train_loop(model::init_weights(student_config), tcfg, ocfg, corpus, hooks, loss, beta_for);
}

TrainReport run_distillation(const model::ModelConfig& student_config,
                             std::span<const model::Weights> teachers,
                             const distill::DistillConfig& dcfg, const TrainConfig& tcfg,
                             const OptimizerConfig& ocfg, const data::Corpus& corpus,
                             const RunHooks& hooks) {
  for (const auto& t : teachers) {
    if (t.config().vocab_size != student_config.vocab_size) {
      throw std::invalid_argument("run_distillation: teacher and student vocabularies differ");
    }
  }
  std::vector<TeacherLogitCache> caches;
  if (tcfg.epochs > 0) {
    for (const auto& t : teachers) caches.emplace_back(t, corpus, tcfg.seq_len);
  } else {
    dcfg.validate();
    TrainReport report{model::init_weights(student_config), {}, {}, 0, 0.0};
    if (hooks.on_epoch) hooks.on_epoch(0, 0, report.weights);
    return report;
  }
  return run_distillation(student_config, std::span<const TeacherLogitCache>(caches), dcfg, tcfg, ocfg,
                          corpus, hooks);
}

TrainReport train_teacher(const model::ModelConfig& config, const TrainConfig& tcfg,
                          const OptimizerConfig& ocfg, const data::Corpus& corpus, const RunHooks& hooks) {
  LossFn loss = [](ad::Graph& g, model::Weights& w, const data::Batch& batch, std::size_t) {
    ad::Var z = model::forward(g, w, batch.inputs);
    ad::Var ce = ad::cross_entropy(ad::log_softmax_with_temperature(z, 1.0), batch.targets, data::kPadId);
    const double v = ce.value().item();
    return distill::StepResult{ce, {v, 0.0, v, 0.0, 1.0}};
  };
  return train_loop(model::init_weights(config), tcfg, ocfg, corpus, hooks, loss, nullptr);
}

}  // namespace kd::train
