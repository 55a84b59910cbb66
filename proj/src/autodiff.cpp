#include "kd/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>

#include "kd/errors.hpp"
#include "kd/kernels.hpp"

namespace kd::ad {

// ---- Var / Graph ------------------------------------------------------------

const Tensor& Var::value() const { return graph_->value(id_); }

std::span<const double> Var::grad() const { return graph_->grad(id_); }

bool Var::requires_grad() const { return graph_->requires_grad(id_); }

const Tensor& Graph::value(std::uint32_t id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.owned;
}

void Graph::check_owned(Var v) const {
  if (v.graph_ != this || v.id_ >= nodes_.size()) {
    throw std::invalid_argument("variable does not belong to this graph");
  }
}

Var Graph::push(Node node) {
  if (backward_done_) throw StateError("graph already differentiated; reset() before recording");
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Graph::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  return push(std::move(n));
}

Var Graph::constant_ref(const Tensor& value) {
  Node n;
  n.external = &value;
  return push(std::move(n));
}

Var Graph::input(Tensor value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = tracking_;
  return push(std::move(n));
}

Var Graph::param(Parameter& p) {
  Node n;
  n.external = &p.value;
  n.requires_grad = tracking_;
  n.param = tracking_ ? &p : nullptr;
  return push(std::move(n));
}

Var Graph::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  bool needs = false;
  for (Var v : inputs) {
    check_owned(v);
    needs = needs || nodes_[v.id()].requires_grad;
  }
  Node n;
  n.owned = std::move(value);
  n.requires_grad = tracking_ && needs;
  if (n.requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

void Graph::backward(Var loss) {
  check_owned(loss);
  if (backward_done_) throw StateError("backward already ran on this graph; reset() first");
  if (value(loss.id()).numel() != 1) {
    throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                shape_str(value(loss.id()).shape));
  }
  backward_done_ = true;
  if (!nodes_[loss.id()].requires_grad) return;
  for (std::uint32_t i = 0; i <= loss.id(); ++i) {
    if (nodes_[i].requires_grad) nodes_[i].grad.assign(value(i).numel(), 0.0);
  }
  nodes_[loss.id()].grad[0] = 1.0;
  for (std::int64_t i = loss.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.requires_grad && n.backward) n.backward(*this, static_cast<std::uint32_t>(i));
  }
  for (Node& n : nodes_) {
    if (n.param && !n.grad.empty()) {
      for (std::size_t j = 0; j < n.grad.size(); ++j) n.param->grad[j] += n.grad[j];
    }
  }
}

void Graph::reset() {
  nodes_.clear();
  backward_done_ = false;
}

void backward(Var loss) { loss.graph().backward(loss); }

// ---- helpers --------------------------------------------------------------------

namespace {

void require_same_graph(Var a, Var b) {
  if (&a.graph() != &b.graph()) throw std::invalid_argument("variables from different graphs");
}

void require_same_shape(Var a, Var b, const char* op) {
  require_same_graph(a, b);
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

void check_temperature(double t) {
  if (!(t > 0.0) || !std::isfinite(t)) {
    throw std::invalid_argument("temperature must be positive, got " + std::to_string(t));
  }
}

// Accumulate `src` into the grad of `v` when v requires grad.
void accumulate(Graph& g, Var v, const std::vector<double>& src) {
  if (!g.requires_grad(v.id())) return;
  auto& dst = g.grad(v.id());
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

// ---- elementwise ------------------------------------------------------------------

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  const auto& bd = b.value().data;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += bd[i];
  return a.graph().record(std::move(out), {a, b}, [a, b](Graph& g, std::uint32_t self) {
    const auto& go = g.grad(self);
    accumulate(g, a, go);
    accumulate(g, b, go);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  const auto& bd = b.value().data;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= bd[i];
  return a.graph().record(std::move(out), {a, b}, [a, b](Graph& g, std::uint32_t self) {
    const auto& go = g.grad(self);
    accumulate(g, a, go);
    if (g.requires_grad(b.id())) {
      auto& gb = g.grad(b.id());
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= go[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  const auto& bd = b.value().data;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= bd[i];
  return a.graph().record(std::move(out), {a, b}, [a, b](Graph& g, std::uint32_t self) {
    const auto& go = g.grad(self);
    if (g.requires_grad(a.id())) {
      auto& ga = g.grad(a.id());
      const auto& bv = b.value().data;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * bv[i];
    }
    if (g.requires_grad(b.id())) {
      auto& gb = g.grad(b.id());
      const auto& av = a.value().data;
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i] * av[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& x : out.data) x *= factor;
  return a.graph().record(std::move(out), {a}, [a, factor](Graph& g, std::uint32_t self) {
    const auto& go = g.grad(self);
    auto& ga = g.grad(a.id());
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * factor;
  });
}

Var sum(Var a) {
  double total = 0.0;
  for (double x : a.value().data) total += x;
  return a.graph().record(Tensor::scalar(total), {a}, [a](Graph& g, std::uint32_t self) {
    const double go = g.grad(self)[0];
    for (double& x : g.grad(a.id())) x += go;
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Var sum_last(Var a) {
  const Tensor& av = a.value();
  if (av.rank() < 1) throw std::invalid_argument("sum_last needs rank >= 1");
  const std::size_t cols = av.last_dim(), rows = av.rows();
  Shape shape(av.shape.begin(), av.shape.end() - 1);
  Tensor out(shape.empty() ? Shape{} : shape);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += av.data[r * cols + c];
    out.data[r] = s;
  }
  return a.graph().record(std::move(out), {a}, [a, rows, cols](Graph& g, std::uint32_t self) {
    const auto& go = g.grad(self);
    auto& ga = g.grad(a.id());
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += go[r];
    }
  });
}

Var exp(Var a) {
  Tensor out = a.value();
  for (double& x : out.data) x = std::exp(x);
  return a.graph().record(std::move(out), {a}, [a](Graph& g, std::uint32_t self) {
    const auto& go = g.grad(self);
    const auto& y = g.value(self).data;
    auto& ga = g.grad(a.id());
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * y[i];
  });
}

Var clamp_min(Var a, double floor) {
  Tensor out = a.value();
  for (double& x : out.data) x = std::max(x, floor);
  return a.graph().record(std::move(out), {a}, [a, floor](Graph& g, std::uint32_t self) {
    const auto& go = g.grad(self);
    const auto& x = a.value().data;
    auto& ga = g.grad(a.id());
    for (std::size_t i = 0; i < ga.size(); ++i) {
      if (x[i] >= floor) ga[i] += go[i];
    }
  });
}

Var silu(Var a) {
  Tensor out = a.value();
  for (double& x : out.data) x = x / (1.0 + std::exp(-x));
  return a.graph().record(std::move(out), {a}, [a](Graph& g, std::uint32_t self) {
    const auto& go = g.grad(self);
    const auto& x = a.value().data;
    auto& ga = g.grad(a.id());
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-x[i]));
      ga[i] += go[i] * s * (1.0 + x[i] * (1.0 - s));
    }
  });
}

Var reshape(Var a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  Tensor out(std::move(shape), a.value().data);
  return a.graph().record(std::move(out), {a}, [a](Graph& g, std::uint32_t self) {
    accumulate(g, a, g.grad(self));
  });
}

// ---- linear algebra / model ops -----------------------------------------------------

Var matmul(Var x, Var w) {
  require_same_graph(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (wv.rank() != 2 || xv.rank() < 1 || xv.last_dim() != wv.shape[0]) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(xv.shape) + " x " +
                                shape_str(wv.shape));
  }
  const std::size_t m = xv.rows(), k = wv.shape[0], n = wv.shape[1];
  Shape shape = xv.shape;
  shape.back() = n;
  Tensor out(std::move(shape));
  kernels::matmul(xv.data.data(), wv.data.data(), out.data.data(), m, k, n);
  return x.graph().record(std::move(out), {x, w}, [x, w, m, k, n](Graph& g, std::uint32_t self) {
    const auto& go = g.grad(self);
    if (g.requires_grad(x.id())) {
      kernels::matmul_a_bt(go.data(), w.value().data.data(), g.grad(x.id()).data(), m, n, k, true);
    }
    if (g.requires_grad(w.id())) {
      kernels::matmul_at_b(x.value().data.data(), go.data(), g.grad(w.id()).data(), m, k, n);
    }
  });
}

Var embedding(Var table, const IntTensor& ids) {
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw std::invalid_argument("embedding table must be rank 2");
  const std::size_t rows = tv.shape[0], d = tv.shape[1];
  for (std::int32_t id : ids.data) {
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      throw std::invalid_argument("embedding: id " + std::to_string(id) + " out of range [0, " +
                                  std::to_string(rows) + ")");
    }
  }
  Shape shape = ids.shape;
  shape.push_back(d);
  Tensor out(std::move(shape));
  for (std::size_t i = 0; i < ids.numel(); ++i) {
    std::copy_n(tv.data.data() + static_cast<std::size_t>(ids.data[i]) * d, d, out.data.data() + i * d);
  }
  return table.graph().record(std::move(out), {table}, [table, ids, d](Graph& g, std::uint32_t self) {
    const auto& go = g.grad(self);
    auto& gt = g.grad(table.id());
    for (std::size_t i = 0; i < ids.numel(); ++i) {
      double* dst = gt.data() + static_cast<std::size_t>(ids.data[i]) * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += go[i * d + c];
    }
  });
}

Var rmsnorm(Var x, Var gain, double eps) {
  require_same_graph(x, gain);
  const Tensor& xv = x.value();
  const std::size_t d = xv.last_dim(), rows = xv.rows();
  if (gain.value().shape != Shape{d}) {
    throw std::invalid_argument("rmsnorm: gain shape " + shape_str(gain.shape()) +
                                " does not match last dim " + std::to_string(d));
  }
  Tensor out(xv.shape);
  auto inv_rms = std::make_shared<std::vector<double>>(rows);
  kernels::rmsnorm_forward(xv.data.data(), gain.value().data.data(), out.data.data(),
                           inv_rms->data(), rows, d, eps);
  return x.graph().record(std::move(out), {x, gain}, [x, gain, inv_rms, rows, d](Graph& g, std::uint32_t self) {
    const auto& go = g.grad(self);
    std::vector<double> scratch_dx;
    std::vector<double> scratch_dg;
    double* dx = nullptr;
    double* dg = nullptr;
    if (g.requires_grad(x.id())) {
      dx = g.grad(x.id()).data();
    } else {
      scratch_dx.assign(rows * d, 0.0);
      dx = scratch_dx.data();
    }
    if (g.requires_grad(gain.id())) {
      dg = g.grad(gain.id()).data();
    } else {
      scratch_dg.assign(d, 0.0);
      dg = scratch_dg.data();
    }
    kernels::rmsnorm_backward(x.value().data.data(), gain.value().data.data(), inv_rms->data(),
                              go.data(), dx, dg, rows, d);
  });
}

Var causal_attention(Var q, Var k, Var v, std::size_t heads) {
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  const Shape& s = q.shape();
  if (s.size() != 3 || heads == 0 || s[2] % heads != 0) {
    throw std::invalid_argument("attention expects [B, L, heads*head_dim], got " + shape_str(s));
  }
  const kernels::AttentionDims dims{s[0], s[1], heads, s[2] / heads};
  Tensor out(s);
  auto probs = std::make_shared<std::vector<double>>(dims.batch * heads * dims.seq * dims.seq);
  kernels::attention_forward(q.value().data.data(), k.value().data.data(), v.value().data.data(),
                             out.data.data(), probs->data(), dims);
  return q.graph().record(std::move(out), {q, k, v}, [q, k, v, probs, dims](Graph& g, std::uint32_t self) {
    const std::size_t n = dims.batch * dims.seq * dims.model_dim();
    std::vector<double> dq(n, 0.0), dk(n, 0.0), dv(n, 0.0);
    kernels::attention_backward(q.value().data.data(), k.value().data.data(),
                                v.value().data.data(), probs->data(), g.grad(self).data(),
                                dq.data(), dk.data(), dv.data(), dims);
    accumulate(g, q, dq);
    accumulate(g, k, dk);
    accumulate(g, v, dv);
  });
}

// ---- softmax family ---------------------------------------------------------------------

Tensor softmax_with_temperature(const Tensor& logits, double temperature) {
  check_temperature(temperature);
  if (logits.rank() == 0) throw std::invalid_argument("softmax needs a vocabulary axis");
  Tensor out(logits.shape);
  kernels::softmax_rows(logits.data.data(), out.data.data(), logits.rows(), logits.last_dim(),
                        1.0 / temperature);
  return out;
}

Tensor log_softmax_with_temperature(const Tensor& logits, double temperature) {
  check_temperature(temperature);
  if (logits.rank() == 0) throw std::invalid_argument("log_softmax needs a vocabulary axis");
  Tensor out(logits.shape);
  kernels::log_softmax_rows(logits.data.data(), out.data.data(), logits.rows(),
                            logits.last_dim(), 1.0 / temperature);
  return out;
}

Var softmax_with_temperature(Var logits, double temperature) {
  Tensor out = softmax_with_temperature(logits.value(), temperature);
  const std::size_t rows = out.rows(), cols = out.last_dim();
  return logits.graph().record(std::move(out), {logits}, [logits, temperature, rows, cols](Graph& g, std::uint32_t self) {
    // dz = y * (dy - <dy, y>) / T
    const auto& go = g.grad(self);
    const auto& y = g.value(self).data;
    auto& gz = g.grad(logits.id());
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += go[r * cols + c] * y[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) {
        gz[r * cols + c] += y[r * cols + c] * (go[r * cols + c] - dot) / temperature;
      }
    }
  });
}

Var log_softmax_with_temperature(Var logits, double temperature) {
  Tensor out = log_softmax_with_temperature(logits.value(), temperature);
  const std::size_t rows = out.rows(), cols = out.last_dim();
  return logits.graph().record(std::move(out), {logits}, [logits, temperature, rows, cols](Graph& g, std::uint32_t self) {
    // dz = (dy - softmax * sum(dy)) / T
    const auto& go = g.grad(self);
    const auto& y = g.value(self).data;
    auto& gz = g.grad(logits.id());
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < cols; ++c) total += go[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) {
        gz[r * cols + c] += (go[r * cols + c] - std::exp(y[r * cols + c]) * total) / temperature;
      }
    }
  });
}

Var cross_entropy(Var log_probs, const IntTensor& targets, std::optional<std::int32_t> ignore_index) {
  const Tensor& lp = log_probs.value();
  if (lp.rank() < 1) throw std::invalid_argument("cross_entropy needs a vocabulary axis");
  const std::size_t vocab = lp.last_dim(), rows = lp.rows();
  if (Shape(lp.shape.begin(), lp.shape.end() - 1) != targets.shape) {
    throw std::invalid_argument("cross_entropy: targets shape " + shape_str(targets.shape) +
                                " does not match log-probs " + shape_str(lp.shape));
  }
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::int32_t t = targets.data[r];
    if (ignore_index && t == *ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw std::invalid_argument("cross_entropy: target " + std::to_string(t) +
                                  " out of range [0, " + std::to_string(vocab) + ")");
    }
    total -= lp.data[r * vocab + static_cast<std::size_t>(t)];
    ++count;
  }
  if (count == 0) throw std::invalid_argument("cross_entropy: every position is ignored");
  const double inv = 1.0 / static_cast<double>(count);
  return log_probs.graph().record(Tensor::scalar(total * inv), {log_probs},
                                  [log_probs, targets, ignore_index, vocab, inv](Graph& g, std::uint32_t self) {
    const double go = g.grad(self)[0];
    auto& gl = g.grad(log_probs.id());
    for (std::size_t r = 0; r < targets.numel(); ++r) {
      const std::int32_t t = targets.data[r];
      if (ignore_index && t == *ignore_index) continue;
      gl[r * vocab + static_cast<std::size_t>(t)] -= go * inv;
    }
  });
}

Var slice_time(Var x, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  if (xv.rank() < 2 || begin >= end || end > xv.shape[1]) {
    throw std::invalid_argument("slice_time: bad range [" + std::to_string(begin) + ", " +
                                std::to_string(end) + ") for shape " + shape_str(xv.shape));
  }
  const std::size_t n = xv.shape[0], len = xv.shape[1];
  const std::size_t inner = xv.numel() / (n * len);
  const std::size_t width = end - begin;
  Shape shape = xv.shape;
  shape[1] = width;
  Tensor out(std::move(shape));
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(xv.data.data() + (i * len + begin) * inner, width * inner,
                out.data.data() + i * width * inner);
  }
  return x.graph().record(std::move(out), {x}, [x, n, len, inner, begin, width](Graph& g, std::uint32_t self) {
    const auto& go = g.grad(self);
    auto& gx = g.grad(x.id());
    for (std::size_t i = 0; i < n; ++i) {
      const double* src = go.data() + i * width * inner;
      double* dst = gx.data() + (i * len + begin) * inner;
      for (std::size_t j = 0; j < width * inner; ++j) dst[j] += src[j];
    }
  });
}

// ---- gradient checking -----------------------------------------------------------------

double finite_difference_check(const ScalarFn& f, const Tensor& x, double h, double denominator_floor) {
  if (!(h > 0.0)) throw std::invalid_argument("finite difference step must be positive");
  std::vector<double> analytic;
  {
    Graph g;
    Var in = g.input(x);
    Var loss = f(g, in);
    g.backward(loss);
    analytic.assign(in.grad().begin(), in.grad().end());
    if (analytic.empty()) analytic.assign(x.numel(), 0.0);
  }
  auto eval = [&](const Tensor& point) {
    Graph g(false);
    return f(g, g.constant(point)).value().item();
  };
  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double xi = x.data[i];
    probe.data[i] = xi + h;
    const double up_x = probe.data[i];
    const double up = eval(probe);
    probe.data[i] = xi - h;
    const double down_x = probe.data[i];
    const double down = eval(probe);
    probe.data[i] = xi;
    const double numeric = (up - down) / (up_x - down_x);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), denominator_floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace kd::ad
