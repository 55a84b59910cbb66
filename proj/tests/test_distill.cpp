#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "kd/distill.hpp"

using namespace kd;
using namespace kd::distill;
using kd::testing::random_tensor;

namespace {

double loss_value(Objective o, const Tensor& zs, const Tensor& zm, double t, Reduction r = Reduction::mean) {
  ad::Graph g(false);
  return kl_loss(o, g.constant(zs), zm, t, r).value().item();
}

Tensor row(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({1, 1, n}, std::move(v));
}

Tensor logits_of(std::vector<double> p) {
  for (double& x : p) x = std::log(x);
  return row(std::move(p));
}

}  // namespace

TEST_CASE("mix_logits endpoints and hand value") {
  Rng rng(1);
  const Tensor zt = random_tensor({2, 3, 4}, rng), zs = random_tensor({2, 3, 4}, rng);
  CHECK(mix_logits(zt, zs, 1.0).data == zt.data);
  CHECK(mix_logits(zt, zs, 0.0).data == zs.data);
  CHECK(mix_logits(row({2.0}), row({0.0}), 0.5).data[0] == 1.0);
  CHECK_THROWS_AS(mix_logits(zt, Tensor({2, 3, 5}), 0.5), std::invalid_argument);
  CHECK_THROWS_AS(mix_logits(zt, zs, 1.5), std::invalid_argument);
  CHECK_THROWS_AS(mix_logits(zt, zs, -0.1), std::invalid_argument);
}

TEST_CASE("beta schedule") {
  CHECK(beta_at_epoch(0, 6, 0.7, 0.1) == 0.7);
  CHECK(beta_at_epoch(6, 6, 0.7, 0.1) == 0.1);
  CHECK(std::abs(beta_at_epoch(3, 6, 0.7, 0.1) - 0.35) < 1e-15);
  const double expected[] = {0.7, 0.7 * 5 / 6, 0.7 * 4 / 6, 0.35, 0.7 * 2 / 6, 0.7 / 6};
  for (std::size_t e = 0; e < 6; ++e) CHECK(std::abs(beta_at_epoch(e, 6, 0.7, 0.1) - expected[e]) < 1e-12);
  double prev = 1.0;
  for (std::size_t e = 0; e <= 20; ++e) {
    const double b = beta_at_epoch(e, 10, 0.9, 0.2);
    CHECK(b <= prev);
    CHECK(b >= 0.2);
    prev = b;
  }
  CHECK(beta_at_epoch(3, 6, 0.0, 0.0) == 0.0);
}

TEST_CASE("config validation") {
  DistillConfig c;
  CHECK_NOTHROW(c.validate());
  c.temperature = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.beta_floor = 0.8;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.chunk_size = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.teacher_count = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  CHECK(c.effective_combination() == TeacherCombination::mean_prob);
  c.objective = Objective::forward;
  CHECK(c.effective_combination() == TeacherCombination::mean_loss);
  c.combination = TeacherCombination::mean_prob;
  CHECK(c.effective_combination() == TeacherCombination::mean_prob);
  CHECK(parse_objective("rv") == Objective::reverse);
  CHECK(parse_objective("forward") == Objective::forward);
  CHECK_THROWS_AS(parse_objective("sideways"), std::invalid_argument);
}

TEST_CASE("KL hand values") {
  Rng rng(2);
  const Tensor z = random_tensor({2, 3, 5}, rng, 3.0);
  for (Objective o : {Objective::reverse, Objective::forward}) {
    CHECK(std::abs(loss_value(o, z, z, 1.0)) < 1e-12);
    CHECK(std::abs(loss_value(o, z, z, 2.0)) < 1e-12);
  }

  // q = [1 - eps, eps] against p = [0.5, 0.5]
  const double eps = 1e-9;
  CHECK(std::abs(loss_value(Objective::reverse, logits_of({1 - eps, eps}), logits_of({0.5, 0.5}), 1.0) -
                 std::log(2.0)) < 1e-7);

  // asymmetry at T = 1
  const Tensor q = logits_of({0.9, 0.1}), p = logits_of({0.5, 0.5});
  const double fwd = loss_value(Objective::forward, q, p, 1.0), rev = loss_value(Objective::reverse, q, p, 1.0);
  CHECK(std::abs(fwd - (0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1))) < 1e-12);
  CHECK(std::abs(rev - (0.9 * std::log(0.9 / 0.5) + 0.1 * std::log(0.1 / 0.5))) < 1e-12);
  CHECK(fwd == doctest::Approx(0.5108).epsilon(1e-4));
  CHECK(rev == doctest::Approx(0.3681).epsilon(1e-4));

  // T = 2: KL of the tempered distributions, times 4
  const auto qs = testing::softmax(q.data, 2.0), ps = testing::softmax(p.data, 2.0);
  const double tempered = qs[0] * std::log(qs[0] / ps[0]) + qs[1] * std::log(qs[1] / ps[1]);
  CHECK(std::abs(loss_value(Objective::reverse, q, p, 2.0) - 4.0 * tempered) < 1e-12);
}

TEST_CASE("forward KL covers modes, reverse KL does not") {
  const Tensor teacher = row({0.0, 0.0, -1e4});  // [0.5, 0.5, 0]
  auto student = [](double e) { return logits_of({1 - 2 * e, e, e}); };
  const double f3 = loss_value(Objective::forward, student(1e-3), teacher, 1.0);
  const double f6 = loss_value(Objective::forward, student(1e-6), teacher, 1.0);
  const double r6 = loss_value(Objective::reverse, student(1e-6), teacher, 1.0);
  CHECK(f6 > f3);
  CHECK(f6 > 5.0);
  CHECK(std::abs(r6 - std::log(2.0)) < 1e-4);
  CHECK(std::isfinite(loss_value(Objective::forward, row({0.0, -1e4, -1e4}), teacher, 1.0)));
}

TEST_CASE("per-position KL matches an explicit vocabulary sum") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor zs = random_tensor({2, 3, 7}, rng, 2.0), zm = random_tensor({2, 3, 7}, rng, 2.0);
    for (Objective o : {Objective::reverse, Objective::forward}) {
      for (double t : {1.0, 2.0}) {
        const Tensor kl = per_position_kl(o, zs, zm, t);
        REQUIRE(kl.shape == Shape{2, 3});
        double total = 0.0;
        for (std::size_t r = 0; r < 6; ++r) {
          const auto q = testing::softmax(zs.row(r), t), p = testing::softmax(zm.row(r), t);
          double expect = 0.0;
          for (std::size_t v = 0; v < 7; ++v) {
            expect += o == Objective::reverse ? q[v] * (std::log(q[v]) - std::log(p[v]))
                                              : p[v] * (std::log(p[v]) - std::log(q[v]));
          }
          CHECK(std::abs(kl.data[r] - expect) < 1e-10);
          total += expect;
        }
        CHECK(std::abs(loss_value(o, zs, zm, t, Reduction::sum) - t * t * total) < 1e-10);
        CHECK(std::abs(loss_value(o, zs, zm, t, Reduction::mean) - t * t * total / 6.0) < 1e-10);
      }
    }
  }
}

TEST_CASE("KL is non-negative and positive for distinct distributions") {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor zs = random_tensor({1, 2, 6}, rng, 4.0), zm = random_tensor({1, 2, 6}, rng, 4.0);
    for (Objective o : {Objective::reverse, Objective::forward}) {
      CHECK(loss_value(o, zs, zm, 1.0) >= -1e-9);
      CHECK(loss_value(o, zs, zs, 1.0) < 1e-10);
    }
  }
  // total variation 0.01 apart
  const Tensor a = logits_of({0.5, 0.5}), b = logits_of({0.51, 0.49});
  CHECK(loss_value(Objective::reverse, a, b, 1.0) > 0.0);
  CHECK(loss_value(Objective::forward, a, b, 1.0) > 0.0);
}

TEST_CASE("loss errors") {
  ad::Graph g;
  ad::Var zs = g.input(Tensor({1, 2, 3}));
  CHECK_THROWS_AS(reverse_kl_loss(zs, Tensor({1, 2, 4}), 1.0), std::invalid_argument);
  CHECK_THROWS_AS(forward_kl_loss(zs, Tensor({1, 2, 3}), 0.0), std::invalid_argument);
  CHECK_THROWS_AS(stepwise_loss(zs, Tensor({1, 2, 3}), 1.0, 0, Reduction::mean, Objective::reverse),
                  std::invalid_argument);
  CHECK_THROWS_AS(combine_teachers({}, TeacherCombination::mean_prob), std::invalid_argument);
  CHECK_THROWS_AS(total_loss(zs, zs, 1.5), std::invalid_argument);
}

TEST_CASE("KL gradients pass finite differences and descend") {
  Rng rng(5);
  for (Objective o : {Objective::reverse, Objective::forward}) {
    for (Reduction r : {Reduction::mean, Reduction::sum}) {
      const Tensor zm = random_tensor({2, 3, 5}, rng);
      CHECK(ad::finite_difference_check([&](ad::Graph&, ad::Var x) { return kl_loss(o, x, zm, 2.0, r); },
                                        random_tensor({2, 3, 5}, rng), 1e-5) <= 1e-6);
    }
  }
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor zm = random_tensor({2, 3, 5}, rng), zs = random_tensor({2, 3, 5}, rng);
    ad::Graph g;
    ad::Var x = g.input(zs);
    ad::Var loss = reverse_kl_loss(x, zm, 2.0);
    g.backward(loss);
    Tensor stepped = zs;
    for (std::size_t i = 0; i < zs.numel(); ++i) stepped.data[i] -= 1e-3 * x.grad()[i];
    CHECK(loss_value(Objective::reverse, stepped, zm, 2.0) < loss.value().item());
  }
}

TEST_CASE("teacher combination") {
  Rng rng(6);
  const Tensor t = random_tensor({1, 2, 3}, rng);
  const TeacherTarget one = combine_teachers({t}, TeacherCombination::mean_prob);
  REQUIRE(one.logits.size() == 1);
  CHECK(one.logits[0].data == t.data);

  const Tensor mixed = combine_teachers({row({0.0, -1e4}), row({-1e4, 0.0})}, TeacherCombination::mean_prob).logits[0];
  const auto p = testing::softmax(mixed.data);
  CHECK(std::abs(p[0] - 0.5) < 1e-12);
  CHECK(std::abs(p[1] - 0.5) < 1e-12);

  const Tensor zs = random_tensor({1, 2, 3}, rng);
  for (Objective o : {Objective::reverse, Objective::forward}) {
    const double single = loss_value(o, zs, t, 2.0);
    for (TeacherCombination mode : {TeacherCombination::mean_loss, TeacherCombination::mean_prob}) {
      DistillConfig cfg;
      cfg.objective = o;
      cfg.combination = mode;
      cfg.teacher_count = 2;
      cfg.alpha = 0.0;
      const TeacherTarget target = combine_teachers({t, t}, mode);
      CHECK(target.logits.size() == (mode == TeacherCombination::mean_loss ? 2u : 1u));
      ad::Graph g(false);
      const auto mixed_targets_ = mixed_targets(zs, target, 1.0);
      const StepResult res = distillation_loss(g.constant(zs), mixed_targets_, IntTensor({1, 2}, {1, 2}), cfg, 1.0);
      CHECK(std::abs(res.breakdown.distillation - single) < 1e-10);
    }
  }
}

TEST_CASE("step-wise loss equals the unchunked loss") {
  CHECK(segment_bounds(128, 5).size() == 26);
  CHECK(segment_bounds(128, 5).back() == std::pair<std::size_t, std::size_t>{125, 128});
  CHECK(segment_bounds(128, 5)[24] == std::pair<std::size_t, std::size_t>{120, 125});
  CHECK(segment_bounds(8, 8).size() == 1);

  Rng rng(7);
  for (std::size_t len : {8u, 13u}) {
    const Tensor zs = random_tensor({2, len, 6}, rng), zm = random_tensor({2, len, 6}, rng);
    for (Objective o : {Objective::reverse, Objective::forward}) {
      for (Reduction r : {Reduction::mean, Reduction::sum}) {
        ad::Graph g0;
        ad::Var x0 = g0.input(zs);
        ad::Var full = kl_loss(o, x0, zm, 2.0, r);
        g0.backward(full);
        for (std::size_t k : {std::size_t{1}, std::size_t{5}, len, len + 3}) {
          ad::Graph g;
          ad::Var x = g.input(zs);
          ad::Var chunked = stepwise_loss(x, zm, 2.0, k, r, o);
          g.backward(chunked);
          if (k >= len) {
            CHECK(chunked.value().item() == full.value().item());
          } else {
            CHECK(std::abs(chunked.value().item() - full.value().item()) < 1e-9);
          }
          for (std::size_t i = 0; i < zs.numel(); ++i) CHECK(std::abs(x.grad()[i] - x0.grad()[i]) < 1e-9);
        }
      }
    }
  }
}

TEST_CASE("total loss") {
  ad::Graph g(false);
  ad::Var ce = g.constant(Tensor::scalar(2.0)), kl = g.constant(Tensor::scalar(4.0));
  CHECK(total_loss(ce, kl, 0.5).value().item() == 3.0);
  CHECK(total_loss(ce, kl, 1.0).value().item() == 2.0);
  CHECK(total_loss(ce, kl, 0.0).value().item() == 4.0);
  Rng rng(8);
  const Tensor zm = random_tensor({1, 3, 4}, rng);
  const IntTensor targets({1, 3}, {0, 3, 1});
  CHECK(ad::finite_difference_check(
            [&](ad::Graph&, ad::Var x) {
              ad::Var c = ad::cross_entropy(ad::log_softmax_with_temperature(x, 1.0), targets);
              return total_loss(c, reverse_kl_loss(x, zm, 2.0), 0.5);
            },
            random_tensor({1, 3, 4}, rng), 1e-5) <= 1e-6);
}

TEST_CASE("distillation step") {
  auto cfg_model = testing::tiny_config(8, 1);
  model::Weights student = model::init_weights(cfg_model);
  auto teacher_cfg = cfg_model;
  teacher_cfg.seed = 2;
  teacher_cfg.d_model = 16;
  const model::Weights teacher = model::init_weights(teacher_cfg);
  Rng rng(9);
  data::Batch batch{testing::random_tokens({2, 6}, 8, rng), testing::random_tokens({2, 6}, 8, rng), {0, 1}};

  SUBCASE("teacher identical to student gives zero distillation loss at beta = 1") {
    const model::Weights copy = student;
    DistillConfig cfg;
    ad::Graph g;
    const StepResult r = distillation_step(g, student, std::span<const model::Weights>(&copy, 1), batch, cfg,
                                           EpochState{0, 6, 1.0});
    CHECK(std::abs(r.breakdown.distillation) < 1e-9);
  }
  SUBCASE("alpha = 1 gives pure cross-entropy") {
    DistillConfig cfg;
    cfg.alpha = 1.0;
    ad::Graph g;
    const StepResult r = distillation_step(g, student, std::span<const model::Weights>(&teacher, 1), batch, cfg,
                                           EpochState::at(0, 6, cfg));
    CHECK(r.breakdown.total == r.breakdown.student_ce);
  }
  SUBCASE("breakdown identities and determinism") {
    DistillConfig cfg;
    auto run = [&] {
      ad::Graph g;
      return distillation_step(g, student, std::span<const model::Weights>(&teacher, 1), batch, cfg,
                               EpochState::at(2, 6, cfg))
          .breakdown;
    };
    const LossBreakdown a = run(), b = run();
    CHECK(a.total == b.total);
    CHECK(a.student_ce == b.student_ce);
    CHECK(a.distillation == b.distillation);
    CHECK(std::abs(a.total - (0.5 * a.student_ce + 0.5 * a.distillation)) < 1e-12);
    CHECK(a.distillation >= -1e-9);
    CHECK(a.beta == beta_at_epoch(2, 6, 0.7, 0.1));
    CHECK(a.temperature == 2.0);
  }
  SUBCASE("teacher count must match") {
    DistillConfig cfg;
    cfg.teacher_count = 2;
    ad::Graph g;
    CHECK_THROWS_AS(distillation_step(g, student, std::span<const model::Weights>(&teacher, 1), batch, cfg,
                                      EpochState::at(0, 6, cfg)),
                    std::invalid_argument);
  }
  SUBCASE("mixed target carries no gradient") {
    // At beta = 0 the target is the student itself, so the loss is 0 and so is its gradient.
    DistillConfig cfg;
    cfg.alpha = 0.0;
    student.zero_grad();
    ad::Graph g;
    const StepResult r = distillation_step(g, student, std::span<const model::Weights>(&teacher, 1), batch, cfg,
                                           EpochState{0, 6, 0.0});
    g.backward(r.loss);
    CHECK(std::abs(r.breakdown.total) < 1e-12);
    for (const auto& p : student.params()) {
      for (double v : p.param.grad) CHECK(std::abs(v) < 1e-12);
    }
  }
}

TEST_CASE("mode seeking versus mass covering on the bimodal fixture") {
  const auto rev = testing::fit_bimodal(Objective::reverse, 1);
  const auto fwd = testing::fit_bimodal(Objective::forward, 1);
  CHECK(rev.dominant_mass > fwd.dominant_mass);
  CHECK(rev.argmax == 0);
  // forward KL spreads over both modes
  CHECK(fwd.probs[testing::kBimodalVocab - 1] > rev.probs[testing::kBimodalVocab - 1]);
}
