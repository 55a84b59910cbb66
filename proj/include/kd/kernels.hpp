#pragma once

#include <cstddef>

// Numeric kernels behind the autodiff ops. The top-level functions are
// OpenMP-parallel over independent output rows (no cross-thread reductions,
// so results do not depend on the thread count). `serial::` holds the plain
// loop versions the parallel kernels are tested and benchmarked against.

namespace kd::kernels {

/// c[m,n] = a[m,k] * b[k,n]  (accumulate: c += ...)
void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate = false);

/// c[k,n] += a[m,k]^T * b[m,n]
void matmul_at_b(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n);

/// c[m,k] = a[m,n] * b[k,n]^T  (accumulate: c += ...)
void matmul_a_bt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                 std::size_t k, bool accumulate = false);

/// Row-wise softmax / log-softmax of x * inv_temperature with max subtraction.
void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols,
                  double inv_temperature);
void log_softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols,
                      double inv_temperature);

/// y = x / sqrt(mean(x^2) + eps) * gain, per row. Stores 1/rms per row.
void rmsnorm_forward(const double* x, const double* gain, double* y, double* inv_rms,
                     std::size_t rows, std::size_t dim, double eps);
/// Accumulates into dx and dgain.
void rmsnorm_backward(const double* x, const double* gain, const double* inv_rms,
                      const double* dy, double* dx, double* dgain, std::size_t rows,
                      std::size_t dim);

struct AttentionDims {
  std::size_t batch;
  std::size_t seq;
  std::size_t heads;
  std::size_t head_dim;
  std::size_t model_dim() const { return heads * head_dim; }
};

/// Causal multi-head attention. q, k, v, out are [batch, seq, heads*head_dim];
/// probs is [batch, heads, seq, seq] (upper triangle left zero).
void attention_forward(const double* q, const double* k, const double* v, double* out,
                       double* probs, const AttentionDims& dims);
/// Accumulates into dq, dk, dv.
void attention_backward(const double* q, const double* k, const double* v, const double* probs,
                        const double* dout, double* dq, double* dk, double* dv,
                        const AttentionDims& dims);

namespace serial {

void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate = false);
void matmul_at_b(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n);
void matmul_a_bt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                 std::size_t k, bool accumulate = false);
void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols,
                  double inv_temperature);
void log_softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols,
                      double inv_temperature);
void rmsnorm_forward(const double* x, const double* gain, double* y, double* inv_rms,
                     std::size_t rows, std::size_t dim, double eps);
void rmsnorm_backward(const double* x, const double* gain, const double* inv_rms,
                      const double* dy, double* dx, double* dgain, std::size_t rows,
                      std::size_t dim);
void attention_forward(const double* q, const double* k, const double* v, double* out,
                       double* probs, const AttentionDims& dims);
void attention_backward(const double* q, const double* k, const double* v, const double* probs,
                        const double* dout, double* dq, double* dk, double* dv,
                        const AttentionDims& dims);

}  // namespace serial

}  // namespace kd::kernels
