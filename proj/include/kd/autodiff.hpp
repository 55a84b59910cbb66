#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "kd/tensor.hpp"

namespace kd::ad {

/// Trainable leaf: a value plus a gradient buffer that persists across
/// graphs. Gradients accumulate; call zero_grad() between optimizer steps.
struct Parameter {
  Tensor value;
  std::vector<double> grad;

  Parameter() = default;
  explicit Parameter(Tensor v) : value(std::move(v)), grad(value.numel(), 0.0) {}
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while the graph
/// is alive and not reset.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t numel() const { return value().numel(); }
  /// Gradient of the last backward pass. Empty if the node does not require grad.
  std::span<const double> grad() const;
  bool requires_grad() const;
  Graph& graph() const { return *graph_; }
  std::uint32_t id() const { return id_; }

 private:
  friend class Graph;
  Var(Graph* g, std::uint32_t id) : graph_(g), id_(id) {}
  Graph* graph_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Tape of operations in insertion (= topological) order.
class Graph {
 public:
  // Called with the id of the node being differentiated.
  using BackwardFn = std::function<void(Graph&, std::uint32_t)>;

  explicit Graph(bool track_gradients = true) : tracking_(track_gradients) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  /// Constant that refers to external storage; `value` must outlive the graph.
  Var constant_ref(const Tensor& value);
  /// Leaf requiring gradient; the gradient stays on the node.
  Var input(Tensor value);
  /// Leaf whose gradient is added to `p.grad` by backward().
  Var param(Parameter& p);
  /// Read-only use of a parameter (no gradient).
  Var param(const Parameter& p) { return constant_ref(p.value); }

  void backward(Var loss);
  /// Drops all nodes; required before running backward again.
  void reset();

  bool tracking() const { return tracking_; }
  std::size_t size() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }

  // Op-author interface.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  const Tensor& value(std::uint32_t id) const;
  std::vector<double>& grad(std::uint32_t id) { return nodes_[id].grad; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  void check_owned(Var v) const;

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    std::vector<double> grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };

  Var push(Node node);

  std::vector<Node> nodes_;
  bool tracking_;
  bool backward_done_ = false;
};

void backward(Var loss);

// ---- ops ------------------------------------------------------------------
// Shapes must match exactly unless stated otherwise; violations throw
// std::invalid_argument.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var sum(Var a);
Var mean(Var a);
/// [..., V] -> [...]
Var sum_last(Var a);
Var exp(Var a);
/// max(a, floor) with zero gradient where clamped.
Var clamp_min(Var a, double floor);
Var silu(Var a);
Var reshape(Var a, Shape shape);

/// x[..., K] * w[K, N] -> [..., N]
Var matmul(Var x, Var w);
/// Row gather: table[V, d], ids of any shape -> ids.shape + [d].
Var embedding(Var table, const IntTensor& ids);
/// x[..., d] normalized by RMS and scaled by gain[d].
Var rmsnorm(Var x, Var gain, double eps);
/// Causal self-attention; q, k, v are [B, L, heads*head_dim].
Var causal_attention(Var q, Var k, Var v, std::size_t heads);

/// softmax(logits / T) over the last axis. T > 0.
Var softmax_with_temperature(Var logits, double temperature);
Var log_softmax_with_temperature(Var logits, double temperature);
/// Value-only versions for tensors outside any graph.
Tensor softmax_with_temperature(const Tensor& logits, double temperature);
Tensor log_softmax_with_temperature(const Tensor& logits, double temperature);

/// Mean of -log_probs[target] over positions whose target != ignore_index.
Var cross_entropy(Var log_probs, const IntTensor& targets,
                  std::optional<std::int32_t> ignore_index = std::nullopt);

/// x[N, L, ...] -> x[N, begin:end, ...]
Var slice_time(Var x, std::size_t begin, std::size_t end);

// ---- gradient checking ----------------------------------------------------

using ScalarFn = std::function<Var(Graph&, Var)>;

/// Max over elements of |analytic - numeric| / max(|analytic|, |numeric|, floor)
/// where numeric is the central difference with step h. Below the floor the
/// check is effectively absolute: at h = 1e-5 the difference quotient carries
/// roundoff of roughly 1e-11 to 1e-10.
double finite_difference_check(const ScalarFn& f, const Tensor& x, double h,
                               double denominator_floor = 1e-4);

}  // namespace kd::ad
