#include "kd/commands.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "kd/checkpoint.hpp"
#include "kd/config.hpp"
#include "kd/corpus.hpp"
#include "kd/errors.hpp"
#include "kd/eval.hpp"
#include "kd/grammar.hpp"
#include "kd/rng.hpp"
#include "kd/trainer.hpp"

namespace kd::cli {

namespace {

using nlohmann::ordered_json;
namespace fs = std::filesystem;

struct Logger {
  std::ostream& err;
  bool quiet;
  void operator()(const std::string& line) const {
    if (!quiet) err << line << '\n' << std::flush;
  }
};

struct Workspace {
  ExperimentConfig cfg;
  data::Grammar grammar;
  data::Corpus train;
  data::Corpus heldout;
  std::vector<data::MinimalPair> pairs;
  std::vector<eval::Sequence> contexts;
};

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

void write_file(const fs::path& path, const std::string& text) {
  ensure_dir(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  out.flush();
  if (!out) throw IoError("failed writing " + path.string());
}

ExperimentConfig load_with_overrides(const CommandOptions& opts) {
  ExperimentConfig cfg = load_config(opts.config);
  if (opts.out) cfg.out_dir = *opts.out;
  if (opts.seed) {
    cfg.seed = *opts.seed;
    apply_seed(cfg);
  }
  return cfg;
}

void resolve_vocab(model::ModelConfig& m, std::size_t vocab, const std::string& section) {
  if (m.vocab_size == 0) {
    m.vocab_size = vocab;
  } else if (m.vocab_size != vocab) {
    throw ConfigError(section + ".vocab_size: " + std::to_string(m.vocab_size) + " but the grammar defines " +
                      std::to_string(vocab) + " tokens");
  }
}

/// Validates `cfg` against already generated data and fills in derived fields.
Workspace with_config(const Workspace& base, ExperimentConfig cfg) {
  cfg.validate();
  const std::size_t vocab = base.grammar.vocab_size();
  resolve_vocab(cfg.teacher.model, vocab, "teacher");
  if (cfg.teacher2) resolve_vocab(cfg.teacher2->model, vocab, "teacher2");
  resolve_vocab(cfg.student, vocab, "student");
  auto enough = [&](const train::TrainConfig& t, const char* section) {
    const std::size_t windows = data::window_count(base.train, t.seq_len);
    if (windows < t.batch_size) {
      throw ConfigError(std::string(section) + ".batch_size: corpus of " + std::to_string(base.train.tokens.size()) +
                        " tokens yields " + std::to_string(windows) + " windows of " + std::to_string(t.seq_len + 1) +
                        " tokens, fewer than one batch (raise data.train_tokens)");
    }
  };
  enough(cfg.train, "train");
  enough(cfg.teacher_train, "teacher_train");
  std::size_t longest = 0;
  for (const auto& p : base.pairs) longest = std::max(longest, p.grammatical.size());
  const std::size_t limit =
      std::min({cfg.student.max_seq_len, cfg.teacher.model.max_seq_len,
                cfg.teacher2 ? cfg.teacher2->model.max_seq_len : cfg.teacher.model.max_seq_len});
  if (longest > limit) {
    throw ConfigError("data.minimal_pairs: a sentence of " + std::to_string(longest) +
                      " tokens exceeds the smallest max_seq_len (" + std::to_string(limit) + ")");
  }
  Workspace ws{std::move(cfg), base.grammar, base.train, base.heldout, base.pairs, {}};
  ws.contexts = eval::sample_contexts(ws.heldout, ws.cfg.data.mode_mass_contexts,
                                      std::min(ws.cfg.train.seq_len, ws.heldout.tokens.size()));
  return ws;
}

Workspace prepare(ExperimentConfig cfg) {
  cfg.validate();
  std::optional<data::Grammar> grammar;
  try {
    grammar = data::Grammar::load(cfg.data.grammar);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("data.grammar: ") + e.what());
  }
  Workspace base{cfg, *grammar, {}, {}, {}, {}};
  base.train = data::generate_corpus(*grammar, derive_seed(cfg.seed, "corpus/train"), cfg.data.train_tokens);
  base.heldout = data::generate_corpus(*grammar, derive_seed(cfg.seed, "corpus/heldout"), cfg.data.heldout_tokens);
  try {
    base.pairs = data::generate_minimal_pairs(*grammar, derive_seed(cfg.seed, "pairs"), cfg.data.minimal_pairs);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("data.grammar: ") + e.what());
  }
  return with_config(base, std::move(cfg));
}

ordered_json model_json(const model::ModelConfig& m) {
  return {{"vocab_size", m.vocab_size},   {"max_seq_len", m.max_seq_len},
          {"d_model", m.d_model},         {"n_heads", m.n_heads},
          {"n_layers", m.n_layers},       {"ffn_multiplier", m.ffn_multiplier},
          {"norm_eps", m.norm_eps},       {"seed", m.seed},
          {"parameters", model::count_params(m)}};
}

ordered_json train_json(const train::TrainConfig& t, const train::OptimizerConfig& o) {
  return {{"batch_size", t.batch_size}, {"seq_len", t.seq_len},   {"epochs", t.epochs},
          {"grad_accum", t.grad_accum}, {"order_seed", t.seed},   {"lr", o.lr},
          {"beta1", o.beta1},           {"beta2", o.beta2},       {"eps", o.eps},
          {"weight_decay", o.weight_decay}, {"t_max", o.t_max},   {"lr_min", o.lr_min}};
}

ordered_json distill_json(const distill::DistillConfig& d) {
  return {{"objective", distill::to_string(d.objective)},
          {"temperature", d.temperature},
          {"alpha", d.alpha},
          {"beta_start", d.beta_start},
          {"beta_floor", d.beta_floor},
          {"chunk_size", d.chunk_size},
          {"teacher_count", d.teacher_count},
          {"combination", distill::to_string(d.effective_combination())},
          {"reduction", distill::to_string(d.reduction)}};
}

ordered_json data_json(const Workspace& ws) {
  return {{"grammar", ws.cfg.data.grammar.filename().string()},
          {"grammar_hash", ws.grammar.hash()},
          {"vocab_size", ws.grammar.vocab_size()},
          {"train_tokens", ws.train.tokens.size()},
          {"train_seed", ws.train.provenance.seed},
          {"heldout_tokens", ws.heldout.tokens.size()},
          {"heldout_seed", ws.heldout.provenance.seed},
          {"minimal_pairs", ws.pairs.size()},
          {"mode_mass_contexts", ws.contexts.size()}};
}

ordered_json metrics_json(const eval::MetricsRow& r) {
  auto opt = [](const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); };
  return {{"epoch", r.epoch},
          {"step", r.step},
          {"perplexity", opt(r.perplexity)},
          {"mp_accuracy", opt(r.mp_accuracy)},
          {"mode_mass_m1", opt(r.mode_mass_m1)},
          {"mode_mass_m5", opt(r.mode_mass_m5)}};
}

eval::MetricsRow evaluate(const Workspace& ws, const model::Weights& w, std::size_t seq_len,
                          const Tensor* teacher_probs) {
  eval::MetricsRow r;
  r.perplexity = eval::perplexity(w, ws.heldout.tokens, std::min(seq_len, w.config().max_seq_len));
  r.mp_accuracy = eval::minimal_pair_accuracy(w, ws.pairs);
  if (teacher_probs) {
    const Tensor sp = eval::next_token_distributions(w, ws.contexts);
    r.mode_mass_m1 = eval::mode_mass(sp, *teacher_probs, 1);
    r.mode_mass_m5 = eval::mode_mass(sp, *teacher_probs, std::min<std::size_t>(5, w.config().vocab_size));
  }
  return r;
}

/// Accumulates the per-step and per-epoch rows of one training run.
struct Recorder {
  std::string run_id;
  bool distilling = false;
  std::vector<eval::MetricsRow> rows;
  std::vector<eval::MetricsRow> epochs;

  void step(const train::StepLog& log) {
    eval::MetricsRow r;
    r.run_id = run_id;
    r.epoch = log.epoch;
    r.step = log.step;
    r.loss_total = log.loss.total;
    r.loss_ce = log.loss.student_ce;
    if (distilling) {
      r.loss_distill = log.loss.distillation;
      r.beta = log.loss.beta;
    }
    r.lr = log.lr;
    rows.push_back(r);
  }

  void epoch(std::size_t e, std::size_t step, eval::MetricsRow r) {
    r.run_id = run_id;
    r.epoch = e;
    r.step = step;
    rows.push_back(r);
    epochs.push_back(r);
  }

  std::string csv() const {
    std::string s = eval::csv_header() + "\n";
    for (const auto& r : rows) s += eval::to_csv(r) + "\n";
    return s;
  }

  ordered_json epochs_json() const {
    ordered_json a = ordered_json::array();
    for (const auto& r : epochs) a.push_back(metrics_json(r));
    return a;
  }

  /// Mean total loss over the optimizer steps of the last epoch.
  std::optional<double> final_loss(std::size_t last_epoch) const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows) {
      if (r.loss_total && r.epoch == last_epoch) {
        sum += *r.loss_total;
        ++n;
      }
    }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
  }
};

std::string epoch_line(const std::string& who, std::size_t e, std::size_t epochs, const eval::MetricsRow& r) {
  std::ostringstream s;
  s.precision(4);
  s << "[" << who << "] epoch " << e << "/" << epochs << " step " << r.step << " ppl " << *r.perplexity << " mp_acc "
    << *r.mp_accuracy;
  if (r.mode_mass_m1) s << " mode_mass@1 " << *r.mode_mass_m1;
  return s.str();
}

model::Weights train_one_teacher(const Workspace& ws, const model::ModelConfig& mc, const std::string& name,
                                 std::uint64_t order_seed, const fs::path& dir, const Logger& log) {
  ensure_dir(dir);
  train::TrainConfig tc = ws.cfg.teacher_train;
  tc.seed = order_seed;
  Recorder rec{ws.cfg.run_id + "/" + name, false, {}, {}};
  train::RunHooks hooks;
  hooks.on_step = [&](const train::StepLog& s) { rec.step(s); };
  hooks.on_epoch = [&](std::size_t e, std::size_t step, const model::Weights& w) {
    eval::MetricsRow r = evaluate(ws, w, tc.seq_len, nullptr);
    r.step = step;
    log(epoch_line(name, e, tc.epochs, r));
    rec.epoch(e, step, r);
  };
  hooks.checkpoint_dir = dir;
  hooks.checkpoint_prefix = name + "_step";
  const auto start = std::chrono::steady_clock::now();
  train::TrainReport rep = train::train_teacher(mc, tc, ws.cfg.teacher_optim, ws.train, hooks);
  train::save_checkpoint(rep.weights, dir / (name + ".ckpt"));
  write_file(dir / (name + "_metrics.csv"), rec.csv());
  ordered_json summary = {{"run_id", rec.run_id},
                          {"command", "train-teacher"},
                          {"seed", ws.cfg.seed},
                          {"data", data_json(ws)},
                          {"model", model_json(mc)},
                          {"train", train_json(tc, ws.cfg.teacher_optim)},
                          {"optimizer_steps", rep.optimizer_steps},
                          {"final_loss", rec.final_loss(tc.epochs == 0 ? 0 : tc.epochs - 1).value_or(0.0)},
                          {"epochs", rec.epochs_json()},
                          {"final", metrics_json(rec.epochs.back())}};
  write_file(dir / (name + "_summary.json"), summary.dump(2) + "\n");
  log("[" + name + "] wrote " + (dir / (name + ".ckpt")).string() + " in " +
      std::to_string(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()) + " s");
  return std::move(rep.weights);
}

std::vector<model::Weights> train_teachers(const Workspace& ws, const fs::path& dir, const Logger& log) {
  std::vector<model::Weights> out;
  out.push_back(train_one_teacher(ws, ws.cfg.teacher.model, "teacher", ws.cfg.teacher_train.seed, dir, log));
  if (ws.cfg.teacher2) {
    out.push_back(train_one_teacher(ws, ws.cfg.teacher2->model, "teacher2",
                                    derive_seed(ws.cfg.seed, "order/teacher2"), dir, log));
  }
  return out;
}

model::Weights load_teacher(const Workspace& ws, const fs::path& path, const std::string& section) {
  if (!fs::exists(path)) {
    throw IoError(section + " checkpoint not found: " + path.string() + " (run train-teacher first)");
  }
  model::Weights w = train::load_checkpoint(path);
  if (w.config().vocab_size != ws.grammar.vocab_size()) {
    throw ConfigError(section + " checkpoint " + path.string() + " has vocab_size " +
                      std::to_string(w.config().vocab_size) + " but the grammar defines " +
                      std::to_string(ws.grammar.vocab_size()));
  }
  if (w.config().max_seq_len < ws.cfg.train.seq_len) {
    throw ConfigError(section + " checkpoint " + path.string() + " supports sequences of at most " +
                      std::to_string(w.config().max_seq_len) + " tokens, below train.seq_len");
  }
  return w;
}

/// Teachers named by the config, falling back to `dir`/teacher*.ckpt.
std::vector<model::Weights> load_teachers(const Workspace& ws, const fs::path& dir, std::size_t count) {
  std::vector<model::Weights> out;
  out.push_back(load_teacher(ws, ws.cfg.teacher.checkpoint.value_or(dir / "teacher.ckpt"), "teacher"));
  if (count > 1) {
    out.push_back(load_teacher(ws, ws.cfg.teacher2->checkpoint.value_or(dir / "teacher2.ckpt"), "teacher2"));
  }
  return out;
}

struct DistillResult {
  eval::MetricsRow final_row;
  double mp_epoch0 = 0.0;
  std::optional<double> final_loss;
};

DistillResult distill_run(const Workspace& ws, std::span<const train::TeacherLogitCache> caches,
                          const model::Weights& reference_teacher, const fs::path& dir, const Logger& log) {
  const ExperimentConfig& cfg = ws.cfg;
  const Tensor teacher_probs = eval::next_token_distributions(reference_teacher, ws.contexts);
  Recorder rec{cfg.run_id, true, {}, {}};
  train::RunHooks hooks;
  hooks.on_step = [&](const train::StepLog& s) { rec.step(s); };
  hooks.on_epoch = [&](std::size_t e, std::size_t step, const model::Weights& w) {
    eval::MetricsRow r = evaluate(ws, w, cfg.train.seq_len, &teacher_probs);
    r.step = step;
    log(epoch_line(cfg.run_id, e, cfg.train.epochs, r));
    rec.epoch(e, step, r);
  };
  hooks.checkpoint_dir = dir;
  hooks.checkpoint_prefix = "student_step";
  ensure_dir(dir);
  const auto start = std::chrono::steady_clock::now();
  train::TrainReport rep = train::run_distillation(cfg.student, caches.subspan(0, cfg.distill.teacher_count),
                                                   cfg.distill, cfg.train, cfg.optim, ws.train, hooks);
  train::save_checkpoint(rep.weights, dir / "student.ckpt");
  write_file(dir / "metrics.csv", rec.csv());
  DistillResult res{rec.epochs.back(), *rec.epochs.front().mp_accuracy,
                    rec.final_loss(cfg.train.epochs == 0 ? 0 : cfg.train.epochs - 1)};
  ordered_json summary = {{"run_id", cfg.run_id},
                          {"command", "distill"},
                          {"seed", cfg.seed},
                          {"data", data_json(ws)},
                          {"student", model_json(cfg.student)},
                          {"teachers", ordered_json::array()},
                          {"distill", distill_json(cfg.distill)},
                          {"train", train_json(cfg.train, cfg.optim)},
                          {"optimizer_steps", rep.optimizer_steps},
                          {"beta_trace", rep.beta_trace},
                          {"final_loss", res.final_loss ? ordered_json(*res.final_loss) : ordered_json(nullptr)},
                          {"epochs", rec.epochs_json()},
                          {"final", metrics_json(res.final_row)}};
  summary["teachers"].push_back(model_json(cfg.teacher.model));
  if (cfg.distill.teacher_count > 1) summary["teachers"].push_back(model_json(cfg.teacher2->model));
  write_file(dir / "summary.json", summary.dump(2) + "\n");
  log("[" + cfg.run_id + "] wrote " + (dir / "student.ckpt").string() + " in " +
      std::to_string(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()) + " s");
  return res;
}

std::vector<train::TeacherLogitCache> build_caches(const Workspace& ws, std::span<const model::Weights> teachers) {
  std::vector<train::TeacherLogitCache> caches;
  for (const auto& t : teachers) caches.emplace_back(t, ws.train, ws.cfg.train.seq_len);
  return caches;
}

template <typename Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    err << "error: config: " << e.what() << '\n';
    return kExitConfig;
  } catch (const IoError& e) {
    err << "error: io: " << e.what() << '\n';
    return kExitIo;
  } catch (const FormatError& e) {
    err << "error: format: " << e.what() << '\n';
    return kExitIo;
  } catch (const TrainingDiverged& e) {
    err << "error: training diverged: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace

int cmd_train_teacher(const CommandOptions& opts, std::ostream&, std::ostream& err) {
  return guarded(err, [&] {
    const Workspace ws = prepare(load_with_overrides(opts));
    const Logger log{err, opts.quiet};
    ensure_dir(ws.cfg.out_dir);
    train_teachers(ws, ws.cfg.out_dir, log);
    return kExitOk;
  });
}

int cmd_distill(const CommandOptions& opts, std::ostream&, std::ostream& err) {
  return guarded(err, [&] {
    const Workspace ws = prepare(load_with_overrides(opts));
    const Logger log{err, opts.quiet};
    const auto teachers = load_teachers(ws, ws.cfg.out_dir, ws.cfg.distill.teacher_count);
    const auto caches = build_caches(ws, teachers);
    distill_run(ws, caches, teachers.front(), ws.cfg.out_dir, log);
    return kExitOk;
  });
}

int cmd_eval(const CommandOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const Workspace ws = prepare(load_with_overrides(opts));
    const fs::path path = opts.checkpoint.value_or(ws.cfg.out_dir / "student.ckpt");
    if (!fs::exists(path)) throw IoError("checkpoint not found: " + path.string());
    const model::Weights w = train::load_checkpoint(path);
    if (w.config().vocab_size != ws.grammar.vocab_size()) {
      throw ConfigError("checkpoint " + path.string() + " has vocab_size " + std::to_string(w.config().vocab_size) +
                        " but the grammar defines " + std::to_string(ws.grammar.vocab_size()));
    }
    // Mode mass needs a teacher; it is reported only when one is available.
    std::optional<Tensor> teacher_probs;
    const fs::path teacher_path = ws.cfg.teacher.checkpoint.value_or(ws.cfg.out_dir / "teacher.ckpt");
    if (fs::exists(teacher_path) && fs::absolute(teacher_path) != fs::absolute(path)) {
      teacher_probs = eval::next_token_distributions(load_teacher(ws, teacher_path, "teacher"), ws.contexts);
    }
    eval::MetricsRow r = evaluate(ws, w, ws.cfg.train.seq_len, teacher_probs ? &*teacher_probs : nullptr);
    r.run_id = ws.cfg.run_id;
    const std::string csv = eval::csv_header() + "\n" + eval::to_csv(r) + "\n";
    ordered_json summary = {{"run_id", ws.cfg.run_id},
                            {"command", "eval"},
                            {"checkpoint", path.filename().string()},
                            {"seed", ws.cfg.seed},
                            {"data", data_json(ws)},
                            {"model", model_json(w.config())},
                            {"metrics", metrics_json(r)}};
    write_file(ws.cfg.out_dir / "eval.csv", csv);
    write_file(ws.cfg.out_dir / "eval.json", summary.dump(2) + "\n");
    if (!opts.quiet) out << csv;
    return kExitOk;
  });
}

int cmd_compare(const CommandOptions& opts, std::ostream&, std::ostream& err) {
  return guarded(err, [&] {
    GridConfig grid = load_grid(opts.config);
    if (opts.out) grid.out_dir = *opts.out;
    for (const auto& name : grid.variants) {
      for (const Setting& s : grid.overrides.at(name)) {
        for (const char* shared : {"run.", "data.", "teacher.", "teacher2.", "teacher_train.", "teacher_optim."}) {
          if (s.key.rfind(shared, 0) == 0) {
            throw ConfigError("variant." + name + "." + s.key + ": variants share data, seed and teachers; " +
                              s.key + " may only be set in the base config");
          }
        }
      }
    }
    for (const auto& name : grid.variants) grid.variant(name).validate();
    auto finish = [&](ExperimentConfig cfg, const fs::path& dir) {
      cfg.out_dir = dir;
      if (opts.seed) {
        cfg.seed = *opts.seed;
        apply_seed(cfg);
      }
      return cfg;
    };
    const Logger log{err, opts.quiet};
    const Workspace base = prepare(finish(grid.base_config(), grid.out_dir));
    ensure_dir(grid.out_dir);

    std::vector<model::Weights> teachers;
    const bool have_checkpoints =
        base.cfg.teacher.checkpoint && (!base.cfg.teacher2 || base.cfg.teacher2->checkpoint);
    if (have_checkpoints) {
      teachers = load_teachers(base, {}, base.cfg.teacher2 ? 2 : 1);
    } else {
      teachers = train_teachers(base, grid.out_dir / "teachers", log);
    }

    std::map<std::size_t, std::vector<train::TeacherLogitCache>> caches;  // by train.seq_len
    std::string table =
        "variant,status,objective,teacher_count,combination,seed,epochs,loss_total,perplexity,mp_accuracy,"
        "mp_accuracy_epoch0,mode_mass_m1,mode_mass_m5\n";
    std::vector<std::string> failures;
    for (const auto& name : grid.variants) {
      const fs::path dir = grid.out_dir / name;
      std::string row = name;
      try {
        const Workspace ws = with_config(base, finish(grid.variant(name), dir));
        auto it = caches.find(ws.cfg.train.seq_len);
        if (it == caches.end()) it = caches.emplace(ws.cfg.train.seq_len, build_caches(ws, teachers)).first;
        const DistillResult res = distill_run(ws, it->second, teachers.front(), dir, log);
        const auto& f = res.final_row;
        auto num = [](const std::optional<double>& v) { return v ? eval::format_number(*v) : std::string(); };
        row += ",ok," + std::string(distill::to_string(ws.cfg.distill.objective)) + "," +
               std::to_string(ws.cfg.distill.teacher_count) + "," +
               std::string(distill::to_string(ws.cfg.distill.effective_combination())) + "," +
               std::to_string(ws.cfg.seed) + "," + std::to_string(ws.cfg.train.epochs) + "," + num(res.final_loss) +
               "," + num(f.perplexity) + "," + num(f.mp_accuracy) + "," + eval::format_number(res.mp_epoch0) + "," +
               num(f.mode_mass_m1) + "," + num(f.mode_mass_m5);
      } catch (const std::exception& e) {
        err << "error: variant " << name << ": " << e.what() << '\n';
        failures.push_back(name);
        row += ",failed,,,,,,,,,,,";
      }
      table += row + "\n";
    }
    write_file(grid.out_dir / "comparison.csv", table);
    log("[compare] wrote " + (grid.out_dir / "comparison.csv").string());
    if (!failures.empty()) {
      std::string list;
      for (const auto& f : failures) list += (list.empty() ? "" : ", ") + f;
      err << "error: " << failures.size() << " variant(s) failed: " << list << '\n';
      return kExitRuntime;
    }
    return kExitOk;
  });
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Teacher-student distillation for toy decoder-only transformers", "kdistill"};
  app.require_subcommand(1);
  CommandOptions opts;
  std::uint64_t seed = 0;
  std::string config, out_dir, checkpoint;

  auto common = [&](CLI::App* sub, const char* config_help) {
    sub->add_option("--config", config, config_help)->required();
    sub->add_option("--out", out_dir, "Output directory (overrides the config)");
    sub->add_option("--seed", seed, "Master seed (overrides the config)");
    sub->add_flag("--quiet", opts.quiet, "Suppress progress output");
  };
  CLI::App* teacher = app.add_subcommand("train-teacher", "Train the teacher model(s)");
  common(teacher, "Experiment config");
  CLI::App* distill = app.add_subcommand("distill", "Distill a student from trained teachers");
  common(distill, "Experiment config");
  CLI::App* evaluate_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  common(evaluate_cmd, "Experiment config (data and output settings)");
  evaluate_cmd->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate (default: OUT/student.ckpt)");
  CLI::App* compare = app.add_subcommand("compare", "Run a grid of distillation variants");
  common(compare, "Grid file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << e.what() << '\n';
      return kExitOk;
    }
    err << "error: " << e.what() << '\n';
    CLI::App* active = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << active->help();
    return kExitConfig;
  }
  opts.config = config;
  if (!out_dir.empty()) opts.out = fs::path(out_dir);
  for (CLI::App* sub : app.get_subcommands()) {
    if (sub->count("--seed") > 0) opts.seed = seed;
  }
  if (!checkpoint.empty()) opts.checkpoint = fs::path(checkpoint);

  if (teacher->parsed()) return cmd_train_teacher(opts, out, err);
  if (distill->parsed()) return cmd_distill(opts, out, err);
  if (evaluate_cmd->parsed()) return cmd_eval(opts, out, err);
  return cmd_compare(opts, out, err);
}

}  // namespace kd::cli
