// Acceptance checks 1-9. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails. Arguments, if given, select criteria by number.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include <unistd.h>

#include "fixtures.hpp"
#include "kd/checkpoint.hpp"
#include "kd/corpus.hpp"
#include "kd/distill.hpp"
#include "kd/eval.hpp"
#include "kd/trainer.hpp"

using namespace kd;
using namespace kd::distill;
using kd::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

constexpr double kH = 1e-5;

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok && pass) detail = what;
    pass = pass && ok;
  }
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double loss_value(Objective o, const Tensor& zs, const Tensor& zm, double t, Reduction r = Reduction::mean) {
  ad::Graph g(false);
  return kl_loss(o, g.constant(zs), zm, t, r).value().item();
}

// ---- 1 ---------------------------------------------------------------------

// Analytic gradient of one distillation step against central differences over
// every student parameter; the mixed target stays fixed at its detached value.
double composite_error(std::uint64_t seed) {
  Rng rng(seed);
  auto sc = testing::tiny_config(6, seed);
  sc.max_seq_len = 4;
  auto tc = sc;
  tc.seed = seed + 1000;
  model::Weights student = model::init_weights(sc);
  const model::Weights teacher = model::init_weights(tc);
  const data::Batch batch{testing::random_tokens({2, 4}, 6, rng), testing::random_tokens({2, 4}, 6, rng), {0, 1}};
  DistillConfig cfg;
  cfg.objective = seed % 2 ? Objective::forward : Objective::reverse;
  cfg.chunk_size = 3;
  const EpochState state = EpochState::at(seed % 6, 6, cfg);
  const Tensor tl = model::logits(teacher, batch.inputs);
  const std::vector<Tensor> mixed =
      mixed_targets(model::logits(student, batch.inputs), combine_teachers({tl}, TeacherCombination::mean_prob),
                    state.beta);

  student.zero_grad();
  ad::Graph g;
  const StepResult r = distillation_step(g, student, std::span<const Tensor>(&tl, 1), batch, cfg, state);
  g.backward(r.loss);

  auto loss_at = [&] {
    ad::Graph ng(false);
    return distillation_loss(ng.constant(model::logits(student, batch.inputs)), mixed, batch.targets, cfg, state.beta)
        .breakdown.total;
  };
  double worst = 0.0;
  for (auto& entry : student.params()) {
    ad::Parameter& p = entry.param;
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const double keep = p.value.data[i];
      p.value.data[i] = keep + kH;
      const double up = loss_at();
      p.value.data[i] = keep - kH;
      const double down = loss_at();
      p.value.data[i] = keep;
      const double numeric = (up - down) / (2 * kH);
      const double denom = std::max({std::abs(numeric), std::abs(p.grad[i]), 1e-4});
      worst = std::max(worst, std::abs(numeric - p.grad[i]) / denom);
    }
  }
  return worst;
}

Outcome gradients() {
  Outcome o;
  Rng rng(101);
  double worst[5] = {0, 0, 0, 0, 0};
  for (int trial = 0; trial < 20; ++trial) {
    const Shape shape{2, 3, 5};
    const Tensor zm = random_tensor(shape, rng, 2.0);
    const double t = 1.0 + trial % 3;
    const Reduction red = trial % 2 ? Reduction::sum : Reduction::mean;
    IntTensor targets({2, 3}, std::vector<std::int32_t>(6));
    for (auto& v : targets.data) v = static_cast<std::int32_t>(rng.below(5));
    worst[0] = std::max(worst[0], ad::finite_difference_check(
                                      [&](ad::Graph&, ad::Var x) { return reverse_kl_loss(x, zm, t, red); },
                                      random_tensor(shape, rng, 2.0), kH));
    worst[1] = std::max(worst[1], ad::finite_difference_check(
                                      [&](ad::Graph&, ad::Var x) { return forward_kl_loss(x, zm, t, red); },
                                      random_tensor(shape, rng, 2.0), kH));
    worst[2] = std::max(worst[2], ad::finite_difference_check(
                                      [&](ad::Graph&, ad::Var x) {
                                        return ad::cross_entropy(ad::log_softmax_with_temperature(x, 1.0), targets);
                                      },
                                      random_tensor(shape, rng, 2.0), kH));
    const double alpha = rng.uniform();
    worst[3] = std::max(worst[3], ad::finite_difference_check(
                                      [&](ad::Graph&, ad::Var x) {
                                        ad::Var ce = ad::cross_entropy(ad::log_softmax_with_temperature(x, 1.0), targets);
                                        return total_loss(ce, stepwise_loss(x, zm, t, 2, red, Objective::reverse),
                                                          alpha);
                                      },
                                      random_tensor(shape, rng, 2.0), kH));
    worst[4] = std::max(worst[4], composite_error(static_cast<std::uint64_t>(trial + 1)));
  }
  const char* names[] = {"reverse_kl", "forward_kl", "cross_entropy", "total_loss", "distillation_step"};
  std::string summary;
  for (int i = 0; i < 5; ++i) {
    o.require(worst[i] <= 1e-6, std::string(names[i]) + " rel err " + fmt(worst[i]));
    summary += std::string(i ? ", " : "") + names[i] + " " + fmt(worst[i]);
  }
  if (o.pass) o.detail = "max rel err: " + summary;
  return o;
}

// ---- 2 ---------------------------------------------------------------------

Outcome kl_fidelity() {
  Outcome o;
  Rng rng(202);
  double worst = 0.0, ratio_err = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor zs = random_tensor({2, 4, 9}, rng, 2.0), zm = random_tensor({2, 4, 9}, rng, 2.0);
    const Tensor kl = per_position_kl(Objective::reverse, zs, zm, 1.0);
    double tempered = 0.0;
    for (std::size_t r = 0; r < 8; ++r) {
      const auto q = testing::softmax(zs.row(r)), p = testing::softmax(zm.row(r));
      double expect = 0.0;
      for (std::size_t v = 0; v < 9; ++v) expect += q[v] * (std::log(q[v]) - std::log(p[v]));
      worst = std::max(worst, std::abs(kl.data[r] - expect));

      const auto q2 = testing::softmax(zs.row(r), 2.0), p2 = testing::softmax(zm.row(r), 2.0);
      for (std::size_t v = 0; v < 9; ++v) tempered += q2[v] * (std::log(q2[v]) - std::log(p2[v]));
    }
    const double ratio = loss_value(Objective::reverse, zs, zm, 2.0, Reduction::sum) / tempered;
    ratio_err = std::max(ratio_err, std::abs(ratio - 4.0));
  }
  // Hand evaluation: q = (0.9, 0.1), p = (0.5, 0.5) at T = 1.
  const Tensor q({1, 1, 2}, {std::log(0.9), std::log(0.1)}), p({1, 1, 2}, {std::log(0.5), std::log(0.5)});
  const double hand = 0.9 * std::log(0.9 / 0.5) + 0.1 * std::log(0.1 / 0.5);
  o.require(worst < 1e-10, "per-position KL off by " + fmt(worst));
  o.require(ratio_err < 1e-9, "T^2 ratio off by " + fmt(ratio_err));
  o.require(std::abs(loss_value(Objective::reverse, q, p, 1.0) - hand) < 1e-12, "hand value mismatch");
  if (o.pass) o.detail = "per-position err " + fmt(worst) + ", |ratio - 4| " + fmt(ratio_err);
  return o;
}

// ---- 3 ---------------------------------------------------------------------

Outcome mixing_and_schedule() {
  Outcome o;
  Rng rng(303);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor zt = random_tensor({2, 3, 7}, rng, 3.0), zs = random_tensor({2, 3, 7}, rng, 3.0);
    o.require(mix_logits(zt, zs, 1.0).data == zt.data, "beta=1 is not the teacher");
    o.require(mix_logits(zt, zs, 0.0).data == zs.data, "beta=0 is not the student");
  }
  o.require(beta_at_epoch(0, 6, 0.7, 0.1) == 0.7, "beta(0) != 0.7");
  o.require(beta_at_epoch(6, 6, 0.7, 0.1) == 0.1, "beta(E) != 0.1");
  const double hand[] = {0.7, 0.58333333333333333, 0.46666666666666667, 0.35, 0.23333333333333333,
                         0.11666666666666667};
  double worst = 0.0;
  for (std::size_t e = 0; e < 6; ++e) worst = std::max(worst, std::abs(beta_at_epoch(e, 6, 0.7, 0.1) - hand[e]));
  o.require(worst < 1e-12, "trace off by " + fmt(worst));
  if (o.pass) o.detail = "endpoints exact, trace err " + fmt(worst);
  return o;
}

// ---- 4 ---------------------------------------------------------------------

Outcome stepwise() {
  Outcome o;
  Rng rng(404);
  double worst = 0.0;
  for (std::size_t len : {std::size_t{8}, std::size_t{128}}) {
    for (int trial = 0; trial < 3; ++trial) {
      const Tensor zs = random_tensor({2, len, 11}, rng, 2.0), zm = random_tensor({2, len, 11}, rng, 2.0);
      for (Objective obj : {Objective::reverse, Objective::forward}) {
        for (Reduction red : {Reduction::mean, Reduction::sum}) {
          ad::Graph g0;
          ad::Var x0 = g0.input(zs);
          ad::Var full = kl_loss(obj, x0, zm, 2.0, red);
          g0.backward(full);
          for (std::size_t k : {std::size_t{1}, std::size_t{5}, len}) {
            ad::Graph g;
            ad::Var x = g.input(zs);
            ad::Var chunked = stepwise_loss(x, zm, 2.0, k, red, obj);
            g.backward(chunked);
            worst = std::max(worst, std::abs(chunked.value().item() - full.value().item()));
            for (std::size_t i = 0; i < zs.numel(); ++i) worst = std::max(worst, std::abs(x.grad()[i] - x0.grad()[i]));
          }
        }
      }
    }
  }
  o.require(worst < 1e-9, "chunked differs by " + fmt(worst));
  if (o.pass) o.detail = "max loss/grad diff " + fmt(worst);
  return o;
}

// ---- 5 ---------------------------------------------------------------------

Outcome kl_properties() {
  Outcome o;
  Rng rng(505);
  double min_kl = INFINITY, max_self = 0.0;
  for (Objective obj : {Objective::reverse, Objective::forward}) {
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t v = 2 + rng.below(15);
      const double scale = 0.1 + 5.0 * rng.uniform();
      const Tensor zs = random_tensor({1, 3, v}, rng, scale), zm = random_tensor({1, 3, v}, rng, scale);
      const double t = 0.5 + 3.0 * rng.uniform();
      min_kl = std::min(min_kl, loss_value(obj, zs, zm, t));
      max_self = std::max(max_self, std::abs(loss_value(obj, zs, zs, t)));
      const Tensor kl = per_position_kl(obj, zs, zm, t);
      for (double x : kl.data) min_kl = std::min(min_kl, x);
    }
  }
  o.require(min_kl >= -1e-9, "negative KL " + fmt(min_kl));
  o.require(max_self < 1e-10, "KL(p, p) = " + fmt(max_self));
  if (o.pass) o.detail = "min KL " + fmt(min_kl) + ", max KL(p,p) " + fmt(max_self);
  return o;
}

// ---- 6 ---------------------------------------------------------------------

Outcome mode_seeking() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  double min_gap = INFINITY;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto rev = testing::fit_bimodal(Objective::reverse, seed);
    const auto fwd = testing::fit_bimodal(Objective::forward, seed);
    min_gap = std::min(min_gap, rev.dominant_mass - fwd.dominant_mass);
    o.require(rev.dominant_mass > fwd.dominant_mass, "seed " + std::to_string(seed) + ": reverse mass not larger");
    o.require(rev.argmax == 0, "seed " + std::to_string(seed) + ": reverse argmax " + std::to_string(rev.argmax));
  }
  const double secs = seconds_since(t0);
  o.require(secs < 60.0, "took " + fmt(secs) + " s");
  if (o.pass) o.detail = "min mass gap " + fmt(min_gap) + ", " + fmt(secs) + " s";
  return o;
}

// ---- 7 ---------------------------------------------------------------------

Outcome optimizer() {
  Outcome o;
  const train::OptimizerConfig c;
  ad::Parameter p(Tensor({1}, {1.0}));
  p.grad = {1.0};
  std::vector<ad::Parameter*> ps{&p};
  auto state = train::OptimizerState::for_params(ps);
  train::adamw_step(ps, state, c, train::cosine_lr(0, c));
  o.require(std::abs(p.value.data[0] - 0.9997475) < 1e-9, "AdamW step gave " + std::to_string(p.value.data[0]));
  o.require(train::cosine_lr(0, c) == c.lr, "cosine(0) != lr");
  o.require(train::cosine_lr(c.t_max, c) == c.lr_min, "cosine(T) != lr_min");
  const double mid = train::cosine_lr(c.t_max / 2, c);
  o.require(std::abs(mid - c.lr / 2) < 1e-12, "cosine(T/2) = " + fmt(mid));
  if (o.pass) o.detail = "w1 = " + std::to_string(p.value.data[0]);
  return o;
}

// ---- 8 ---------------------------------------------------------------------

std::vector<std::vector<std::string>> read_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

Outcome grid() {
  Outcome o;
  const fs::path root = fs::temp_directory_path() / ("kd_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  const std::string config = std::string(KD_SOURCE_DIR) + "/configs/grid.cfg";
  std::string tables[2];
  double secs[2];
  for (int run = 0; run < 2; ++run) {
    const fs::path out = root / ("run" + std::to_string(run));
    const std::string cmd = std::string(KD_KDISTILL) + " compare --quiet --config " + config + " --out " + out.string();
    const auto t0 = std::chrono::steady_clock::now();
    const int code = std::system(cmd.c_str());
    secs[run] = seconds_since(t0);
    o.require(code == 0, "compare exited with " + std::to_string(code));
    o.require(secs[run] < 600.0, "run " + std::to_string(run) + " took " + fmt(secs[run]) + " s");
    if (code != 0) break;
    tables[run] = testing::read_file(out / "comparison.csv");
  }
  if (o.pass) {
    o.require(tables[0] == tables[1], "comparison.csv differs between reruns");
    const auto rows = read_csv(tables[0]);
    o.require(rows.size() == 5, "expected 4 variants, got " + std::to_string(rows.size() - 1));
    const auto& h = rows[0];
    auto col = [&](const char* name) { return static_cast<std::size_t>(std::find(h.begin(), h.end(), name) - h.begin()); };
    const std::size_t acc = col("mp_accuracy"), acc0 = col("mp_accuracy_epoch0"), status = col("status");
    std::string accs;
    for (std::size_t r = 1; r < rows.size(); ++r) {
      const auto& row = rows[r];
      o.require(row.size() == h.size() && row[status] == "ok", "variant " + row[0] + " failed");
      if (!o.pass) break;
      const double a = std::stod(row[acc]), a0 = std::stod(row[acc0]);
      o.require(a >= 0.55, row[0] + " accuracy " + fmt(a));
      o.require(a > a0, row[0] + " did not improve on epoch 0 (" + fmt(a0) + ")");
      accs += " " + row[0] + "=" + fmt(a);
    }
    if (o.pass) o.detail = "accuracy" + accs + "; " + fmt(secs[0]) + " s / " + fmt(secs[1]) + " s; tables identical";
  }
  fs::remove_all(root);
  return o;
}

// ---- 9 ---------------------------------------------------------------------

Outcome oracles() {
  Outcome o;
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto c = testing::tiny_config(4, seed);
    const auto lps = eval::enumerate_sequence_logprobs(model::init_weights(c), 3);
    double total = 0.0;
    for (double lp : lps) total += std::exp(lp);
    worst = std::max(worst, std::abs(total - 1.0));
  }
  o.require(worst < 1e-6, "enumerated mass off by " + fmt(worst));

  testing::TempDir dir("acceptance_ckpt");
  auto c = testing::tiny_config(12, 3);
  c.n_layers = 2;
  const model::Weights w = model::init_weights(c);
  train::save_checkpoint(w, dir.path / "w.ckpt");
  const model::Weights r = train::load_checkpoint(dir.path / "w.ckpt");
  bool exact = r.config() == c && r.params().size() == w.params().size();
  for (std::size_t i = 0; exact && i < w.params().size(); ++i) {
    exact = std::memcmp(r.params()[i].param.value.data.data(), w.params()[i].param.value.data.data(),
                        8 * w.params()[i].param.value.numel()) == 0 &&
            r.params()[i].name == w.params()[i].name;
  }
  o.require(exact, "checkpoint round-trip not bit-exact");

  const auto g = data::Grammar::load(fs::path(KD_SOURCE_DIR) / "data/grammars/agreement.pcfg");
  const data::Corpus corpus = data::generate_corpus(g, 77, 20000);
  o.require(data::regenerate_corpus(g, corpus.provenance).tokens == corpus.tokens, "corpus regeneration differs");
  if (o.pass) o.detail = "enumeration err " + fmt(worst) + ", checkpoint and corpus exact";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient correctness", gradients},
      {"per-position KL and T^2 scaling", kl_fidelity},
      {"logit mixing and beta schedule", mixing_and_schedule},
      {"step-wise loss equivalence", stepwise},
      {"KL non-negativity and identity", kl_properties},
      {"mode seeking vs mass covering", mode_seeking},
      {"AdamW and cosine schedule", optimizer},
      {"toy distillation grid", grid},
      {"enumeration, checkpoint and corpus oracles", oracles},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(n)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = criteria[i].second();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    failures += !out.pass;
    std::printf("[%s] %d. %s (%.1f s): %s\n", out.pass ? "PASS" : "FAIL", n, criteria[i].first, seconds_since(t0),
                out.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
