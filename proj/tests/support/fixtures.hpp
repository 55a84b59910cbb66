#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "kd/autodiff.hpp"
#include "kd/distill.hpp"
#include "kd/model.hpp"
#include "kd/rng.hpp"
#include "kd/tensor.hpp"
#include "kd/trainer.hpp"

namespace kd::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& x : t.data) x = scale * rng.normal();
  return t;
}

inline IntTensor random_tokens(Shape shape, std::size_t vocab, Rng& rng) {
  std::vector<std::int32_t> ids(shape_numel(shape));
  for (auto& id : ids) id = static_cast<std::int32_t>(rng.below(vocab));
  return IntTensor(std::move(shape), std::move(ids));
}

inline model::ModelConfig tiny_config(std::size_t vocab = 8, std::uint64_t seed = 0) {
  model::ModelConfig c;
  c.vocab_size = vocab;
  c.max_seq_len = 8;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 1;
  c.ffn_multiplier = 2;
  c.seed = seed;
  return c;
}

/// Output projection zeroed: every next-token distribution is uniform.
inline model::Weights uniform_model(const model::ModelConfig& c) {
  model::Weights w = model::init_weights(c);
  for (double& x : w.at("output").value.data) x = 0.0;
  return w;
}

inline std::vector<double> softmax(std::span<const double> z, double temperature = 1.0) {
  double m = z[0];
  for (double v : z) m = std::max(m, v);
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp((z[i] - m) / temperature));
  for (double& v : p) v /= s;
  return p;
}

/// Scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("kd_" + tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

// ---- bimodal fixture --------------------------------------------------------
//
// Vocabulary of 16 tokens indexed (a, b) in a 4x4 grid. The teacher puts 0.7
// on (0, 0) and 0.3 on (3, 3) plus a small uniform background. The student is
// factorized, logits u_a + w_b, so it is a product of two marginals and
// cannot place mass on both corners without also covering (0, 3) and (3, 0).

struct BimodalResult {
  std::vector<double> probs;  // student distribution over 16 tokens
  std::size_t argmax = 0;
  double dominant_mass = 0.0;  // mass on the teacher's 0.7 mode
  double loss = 0.0;           // final objective value
};

inline constexpr std::size_t kBimodalSide = 4;
inline constexpr std::size_t kBimodalVocab = kBimodalSide * kBimodalSide;

inline std::vector<double> bimodal_teacher(double background = 1e-3) {
  std::vector<double> p(kBimodalVocab, background / kBimodalVocab);
  p[0] += 0.7 * (1.0 - background);
  p[kBimodalVocab - 1] += 0.3 * (1.0 - background);
  return p;
}

/// Fits the factorized student to the teacher under `objective` with Adam,
/// from `restarts` seeded random starts, keeping the lowest final objective.
/// Reverse KL has a local optimum on the minor mode, so a single start can
/// land there; the restarts recover the family's minimizer.
inline BimodalResult fit_bimodal(distill::Objective objective, std::uint64_t seed, double init_scale = 0.1,
                                 std::size_t restarts = 8, std::size_t steps = 3000) {
  const auto teacher = bimodal_teacher();
  Tensor z_teacher({1, kBimodalVocab});
  for (std::size_t i = 0; i < kBimodalVocab; ++i) z_teacher.data[i] = std::log(teacher[i]);

  // Selector matrices mapping the marginal logits onto the grid.
  Tensor sel_a({kBimodalSide, kBimodalVocab}), sel_b({kBimodalSide, kBimodalVocab});
  for (std::size_t a = 0; a < kBimodalSide; ++a) {
    for (std::size_t b = 0; b < kBimodalSide; ++b) {
      sel_a.data[a * kBimodalVocab + a * kBimodalSide + b] = 1.0;
      sel_b.data[b * kBimodalVocab + a * kBimodalSide + b] = 1.0;
    }
  }

  Rng rng(seed);
  BimodalResult best;
  double best_loss = INFINITY;
  for (std::size_t start = 0; start < restarts; ++start) {
    ad::Parameter u(random_tensor({1, kBimodalSide}, rng, init_scale));
    ad::Parameter w(random_tensor({1, kBimodalSide}, rng, init_scale));
    std::vector<ad::Parameter*> params{&u, &w};
    train::OptimizerConfig opt;
    opt.lr = 0.05;
    opt.weight_decay = 0.0;
    opt.t_max = steps;
    auto state = train::OptimizerState::for_params(params);

    auto student_logits = [&](ad::Graph& g) {
      return ad::add(ad::matmul(g.param(u), g.constant_ref(sel_a)), ad::matmul(g.param(w), g.constant_ref(sel_b)));
    };
    for (std::size_t s = 0; s < steps; ++s) {
      ad::Graph g;
      ad::Var loss = distill::kl_loss(objective, student_logits(g), z_teacher, 1.0, distill::Reduction::sum);
      g.backward(loss);
      train::adamw_step(params, state, opt, opt.lr);
      u.zero_grad();
      w.zero_grad();
    }

    ad::Graph g(false);
    const Tensor z = student_logits(g).value();
    const double loss = distill::kl_loss(objective, g.constant(z), z_teacher, 1.0, distill::Reduction::sum).value().item();
    if (loss < best_loss) {
      best_loss = loss;
      best.probs = softmax(z.data);
      best.argmax =
          static_cast<std::size_t>(std::max_element(best.probs.begin(), best.probs.end()) - best.probs.begin());
      best.dominant_mass = best.probs[0];
      best.loss = loss;
    }
  }
  return best;
}

}  // namespace kd::testing
