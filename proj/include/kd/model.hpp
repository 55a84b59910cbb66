#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "kd/autodiff.hpp"
#include "kd/tensor.hpp"

namespace kd::model {

/// Architecture of a decoder-only transformer. Teacher and student differ
/// only in these values.
struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t max_seq_len = 64;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 1;
  std::size_t ffn_multiplier = 4;
  double norm_eps = 1e-5;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct NamedParameter {
  std::string name;
  ad::Parameter param;
};

/// Ordered named parameter set together with the config that shaped it.
class Weights {
 public:
  /// All-zero parameters with the shapes implied by `config`.
  explicit Weights(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  std::span<NamedParameter> params() { return params_; }
  std::span<const NamedParameter> params() const { return params_; }

  ad::Parameter& at(std::string_view name);
  const ad::Parameter& at(std::string_view name) const;

  std::size_t param_count() const;
  void zero_grad();

 private:
  ModelConfig config_;
  std::vector<NamedParameter> params_;
};

/// (name, shape) in canonical order. This order is also the checkpoint order.
std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& config);

std::size_t count_params(const ModelConfig& config);

/// Linear and embedding matrices ~ N(0, 1/d_model); norm gains = 1.
Weights init_weights(const ModelConfig& config);

/// Logits [N, L, V] for tokens [N, L]. The mutable overload routes gradients
/// into the weights' parameters; the const overload treats them as constants.
ad::Var forward(ad::Graph& graph, Weights& weights, const IntTensor& tokens);
ad::Var forward(ad::Graph& graph, const Weights& weights, const IntTensor& tokens);

/// Gradient-free forward pass.
Tensor logits(const Weights& weights, const IntTensor& tokens);

}  // namespace kd::model
