#include "kd/model.hpp"

#include <cmath>
#include <stdexcept>

#include "kd/rng.hpp"

namespace kd::model {

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw std::invalid_argument(std::string("model config: ") + name + " must be positive");
  };
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(n_layers, "n_layers");
  positive(ffn_multiplier, "ffn_multiplier");
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("model config: d_model (" + std::to_string(d_model) +
                                ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
  }
  if (!(norm_eps > 0.0)) throw std::invalid_argument("model config: norm_eps must be positive");
}

std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.d_model, f = c.ffn_multiplier * c.d_model;
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("tok_embedding", Shape{c.vocab_size, d});
  out.emplace_back("pos_embedding", Shape{c.max_seq_len, d});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    out.emplace_back(p + "attn_norm", Shape{d});
    out.emplace_back(p + "wq", Shape{d, d});
    out.emplace_back(p + "wk", Shape{d, d});
    out.emplace_back(p + "wv", Shape{d, d});
    out.emplace_back(p + "wo", Shape{d, d});
    out.emplace_back(p + "ffn_norm", Shape{d});
    out.emplace_back(p + "w_gate", Shape{d, f});
    out.emplace_back(p + "w_up", Shape{d, f});
    out.emplace_back(p + "w_down", Shape{f, d});
  }
  out.emplace_back("final_norm", Shape{d});
  out.emplace_back("output", Shape{d, c.vocab_size});
  return out;
}

std::size_t count_params(const ModelConfig& config) {
  std::size_t total = 0;
  for (const auto& [name, shape] : parameter_shapes(config)) total += shape_numel(shape);
  return total;
}

Weights::Weights(const ModelConfig& config) : config_(config) {
  for (auto& [name, shape] : parameter_shapes(config)) {
    params_.push_back({name, ad::Parameter(Tensor(shape))});
  }
}

ad::Parameter& Weights::at(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return p.param;
  }
  throw std::invalid_argument("no parameter named '" + std::string(name) + "'");
}

const ad::Parameter& Weights::at(std::string_view name) const {
  return const_cast<Weights*>(this)->at(name);
}

std::size_t Weights::param_count() const {
  std::size_t total = 0;
  for (const auto& p : params_) total += p.param.value.numel();
  return total;
}

void Weights::zero_grad() {
  for (auto& p : params_) p.param.zero_grad();
}

Weights init_weights(const ModelConfig& config) {
  Weights w(config);
  Rng rng(config.seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  for (auto& p : w.params()) {
    auto& data = p.param.value.data;
    if (p.param.value.rank() == 1) {
      std::fill(data.begin(), data.end(), 1.0);
    } else {
      for (double& x : data) x = scale * rng.normal();
    }
  }
  return w;
}

namespace {

void check_tokens(const ModelConfig& c, const IntTensor& tokens) {
  if (tokens.shape.size() != 2) {
    throw std::invalid_argument("forward expects tokens [N, L], got " + shape_str(tokens.shape));
  }
  if (tokens.shape[1] > c.max_seq_len) {
    throw std::invalid_argument("sequence length " + std::to_string(tokens.shape[1]) +
                                " exceeds max_seq_len " + std::to_string(c.max_seq_len));
  }
  for (std::int32_t t : tokens.data) {
    if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size) {
      throw std::invalid_argument("token id " + std::to_string(t) + " outside vocabulary of size " +
                                  std::to_string(c.vocab_size));
    }
  }
}

template <class W>
ad::Var forward_impl(ad::Graph& g, W& weights, const IntTensor& tokens) {
  const ModelConfig& c = weights.config();
  check_tokens(c, tokens);
  const std::size_t n = tokens.shape[0], len = tokens.shape[1];
  std::vector<std::int32_t> pos(n * len);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < len; ++t) pos[i * len + t] = static_cast<std::int32_t>(t);
  }
  const IntTensor positions({n, len}, std::move(pos));

  auto p = [&](std::string_view name) { return g.param(weights.at(name)); };

  ad::Var x = ad::add(ad::embedding(p("tok_embedding"), tokens),
                      ad::embedding(p("pos_embedding"), positions));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    ad::Var h = ad::rmsnorm(x, p(pre + "attn_norm"), c.norm_eps);
    ad::Var q = ad::matmul(h, p(pre + "wq"));
    ad::Var k = ad::matmul(h, p(pre + "wk"));
    ad::Var v = ad::matmul(h, p(pre + "wv"));
    ad::Var att = ad::causal_attention(q, k, v, c.n_heads);
    x = ad::add(x, ad::matmul(att, p(pre + "wo")));

    h = ad::rmsnorm(x, p(pre + "ffn_norm"), c.norm_eps);
    ad::Var gate = ad::silu(ad::matmul(h, p(pre + "w_gate")));
    ad::Var up = ad::matmul(h, p(pre + "w_up"));
    x = ad::add(x, ad::matmul(ad::mul(gate, up), p(pre + "w_down")));
  }
  x = ad::rmsnorm(x, p("final_norm"), c.norm_eps);
  return ad::matmul(x, p("output"));
}

}  // namespace

ad::Var forward(ad::Graph& graph, Weights& weights, const IntTensor& tokens) {
  return forward_impl(graph, weights, tokens);
}

ad::Var forward(ad::Graph& graph, const Weights& weights, const IntTensor& tokens) {
  return forward_impl(graph, weights, tokens);
}

Tensor logits(const Weights& weights, const IntTensor& tokens) {
  ad::Graph g(false);
  return forward(g, weights, tokens).value();
}

}  // namespace kd::model
