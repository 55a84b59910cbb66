#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "kd/eval.hpp"
#include "kd/model.hpp"

using namespace kd;
using kd::testing::tiny_config;

TEST_CASE("init is deterministic and seed-dependent") {
  const auto c = tiny_config(16, 3);
  const model::Weights a = model::init_weights(c), b = model::init_weights(c);
  REQUIRE(a.params().size() == b.params().size());
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    CHECK(a.params()[i].name == b.params()[i].name);
    CHECK(a.params()[i].param.value.data == b.params()[i].param.value.data);
  }
  auto c2 = c;
  c2.seed = 4;
  const model::Weights d = model::init_weights(c2);
  bool differs = false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    differs = differs || a.params()[i].param.value.data != d.params()[i].param.value.data;
  }
  CHECK(differs);
}

TEST_CASE("init scale and norm gains") {
  model::ModelConfig c;
  c.d_model = 64;
  c.n_layers = 2;
  const model::Weights w = model::init_weights(c);
  for (const auto& p : w.params()) {
    if (p.param.value.rank() == 1) {
      for (double g : p.param.value.data) CHECK(g == 1.0);
    } else {
      double m = 0.0, s = 0.0;
      for (double v : p.param.value.data) m += v;
      m /= static_cast<double>(p.param.value.numel());
      for (double v : p.param.value.data) s += (v - m) * (v - m);
      const double sd = std::sqrt(s / static_cast<double>(p.param.value.numel()));
      CAPTURE(p.name);
      CHECK(std::abs(m) < 0.02);
      CHECK(sd == doctest::Approx(1.0 / 8.0).epsilon(0.1));
    }
  }
}

TEST_CASE("parameter count matches a hand tally") {
  model::ModelConfig c;
  c.vocab_size = 64;
  c.max_seq_len = 64;
  c.d_model = 64;
  c.n_layers = 2;
  c.ffn_multiplier = 4;
  // embeddings 64*64 + 64*64; per layer 2 norms, 4 attention, 3 ffn; final norm; output
  const std::size_t per_layer = 2 * 64 + 4 * 64 * 64 + 3 * 64 * 256;
  const std::size_t expected = 64 * 64 + 64 * 64 + 2 * per_layer + 64 + 64 * 64;
  CHECK(model::count_params(c) == expected);
  CHECK(model::count_params(c) == 143680);
  CHECK(model::init_weights(c).param_count() == expected);

  const auto tiny = tiny_config(8);  // V=8, len 8, d 8, 1 layer, ffn x2
  CHECK(model::count_params(tiny) == 8 * 8 + 8 * 8 + (2 * 8 + 4 * 64 + 3 * 8 * 16) + 8 + 8 * 8);

  model::ModelConfig big = c;
  big.vocab_size = 65;
  big.max_seq_len = 65;
  big.d_model = 128;
  big.n_heads = 8;
  big.n_layers = 3;
  big.ffn_multiplier = 5;
  CHECK(model::count_params(big) > model::count_params(c));
  CHECK(model::count_params(c) == model::count_params(c));
}

TEST_CASE("invalid configs are rejected") {
  auto c = tiny_config();
  c.d_model = 10;
  c.n_heads = 4;
  CHECK_THROWS_AS(model::init_weights(c), std::invalid_argument);
  c = tiny_config();
  c.vocab_size = 0;
  CHECK_THROWS_AS(model::init_weights(c), std::invalid_argument);
  c = tiny_config();
  c.norm_eps = 0.0;
  CHECK_THROWS_AS(model::count_params(c), std::invalid_argument);
}

TEST_CASE("forward shape, validity and errors") {
  model::ModelConfig c = tiny_config(16, 1);
  const model::Weights w = model::init_weights(c);
  Rng rng(2);
  const IntTensor tokens = testing::random_tokens({2, 8}, 16, rng);
  const Tensor z = model::logits(w, tokens);
  CHECK(z.shape == Shape{2, 8, 16});
  const Tensor p = ad::softmax_with_temperature(z, 1.0);
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double s = 0.0;
    for (double v : p.row(r)) s += v;
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  CHECK_THROWS_AS(model::logits(w, IntTensor({1, 2}, {3, 16})), std::invalid_argument);
  CHECK_THROWS_AS(model::logits(w, IntTensor({1, 2}, {3, -1})), std::invalid_argument);
  CHECK_THROWS_AS(model::logits(w, IntTensor({1, 9}, std::vector<std::int32_t>(9, 2))), std::invalid_argument);
  CHECK(model::logits(w, tokens).data == z.data);
}

TEST_CASE("zero output projection gives uniform predictions") {
  const auto c = tiny_config(16, 5);
  const model::Weights w = testing::uniform_model(c);
  Rng rng(3);
  const Tensor z = model::logits(w, testing::random_tokens({2, 8}, 16, rng));
  for (double v : z.data) CHECK(v == 0.0);
  const Tensor p = ad::softmax_with_temperature(z, 1.0);
  for (double v : p.data) CHECK(v == 1.0 / 16.0);
}

TEST_CASE("causality under position-wise perturbation") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto c = tiny_config(16, seed);
    c.n_layers = 2;
    const model::Weights w = model::init_weights(c);
    Rng rng(seed + 100);
    IntTensor tokens = testing::random_tokens({2, 8}, 16, rng);
    const Tensor base = model::logits(w, tokens);
    for (std::size_t pos = 1; pos < 8; ++pos) {
      IntTensor changed = tokens;
      for (std::size_t b = 0; b < 2; ++b) {
        auto& t = changed.data[b * 8 + pos];
        t = (t + 1 + static_cast<std::int32_t>(rng.below(15))) % 16;
      }
      const Tensor z = model::logits(w, changed);
      for (std::size_t b = 0; b < 2; ++b) {
        for (std::size_t t = 0; t < pos; ++t) {
          for (std::size_t v = 0; v < 16; ++v) {
            const std::size_t i = (b * 8 + t) * 16 + v;
            REQUIRE(z.data[i] == base.data[i]);
          }
        }
      }
    }
  }
}

TEST_CASE("model parameter gradients pass finite differences") {
  auto c = tiny_config(6, 9);
  c.n_layers = 2;
  model::Weights w = model::init_weights(c);
  Rng rng(4);
  const IntTensor tokens = testing::random_tokens({2, 4}, 6, rng);
  const IntTensor targets = testing::random_tokens({2, 4}, 6, rng);
  auto loss = [&](ad::Graph& g) {
    return ad::cross_entropy(ad::log_softmax_with_temperature(model::forward(g, w, tokens), 1.0), targets);
  };
  w.zero_grad();
  {
    ad::Graph g;
    g.backward(loss(g));
  }
  const double h = 1e-5;
  double worst = 0.0;
  for (auto& np : w.params()) {
    for (int trial = 0; trial < 6; ++trial) {
      const std::size_t i = rng.below(np.param.value.numel());
      double& x = np.param.value.data[i];
      const double x0 = x;
      x = x0 + h;
      const double up_x = x;
      ad::Graph gu(false);
      const double up = loss(gu).value().item();
      x = x0 - h;
      const double down_x = x;
      ad::Graph gd(false);
      const double down = loss(gd).value().item();
      x = x0;
      const double numeric = (up - down) / (up_x - down_x);
      const double analytic = np.param.grad[i];
      worst = std::max(worst, std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-4}));
    }
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("enumerated sequence distributions sum to one") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    for (std::size_t len : {1u, 2u, 3u, 4u}) {
      auto c = tiny_config(4, seed);
      const model::Weights w = model::init_weights(c);
      double total = 0.0;
      for (double lp : eval::enumerate_sequence_logprobs(w, len)) total += std::exp(lp);
      CHECK(std::abs(total - 1.0) < 1e-6);
    }
  }
}
