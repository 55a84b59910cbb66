#include "kd/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace kd::kernels {

namespace {

using Index = std::int64_t;

inline void softmax_row(const double* x, double* y, std::size_t cols, double inv_t) {
  double mx = x[0] * inv_t;
  for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j] * inv_t);
  double total = 0.0;
  for (std::size_t j = 0; j < cols; ++j) {
    y[j] = std::exp(x[j] * inv_t - mx);
    total += y[j];
  }
  const double inv = 1.0 / total;
  for (std::size_t j = 0; j < cols; ++j) y[j] *= inv;
}

inline void log_softmax_row(const double* x, double* y, std::size_t cols, double inv_t) {
  double mx = x[0] * inv_t;
  for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j] * inv_t);
  double total = 0.0;
  for (std::size_t j = 0; j < cols; ++j) total += std::exp(x[j] * inv_t - mx);
  const double lse = mx + std::log(total);
  for (std::size_t j = 0; j < cols; ++j) y[j] = x[j] * inv_t - lse;
}

inline void rmsnorm_row(const double* x, const double* gain, double* y, double* inv_rms,
                        std::size_t dim, double eps) {
  double ss = 0.0;
  for (std::size_t j = 0; j < dim; ++j) ss += x[j] * x[j];
  const double r = 1.0 / std::sqrt(ss / static_cast<double>(dim) + eps);
  *inv_rms = r;
  for (std::size_t j = 0; j < dim; ++j) y[j] = x[j] * r * gain[j];
}

inline void rmsnorm_row_backward(const double* x, const double* gain, double r, const double* dy,
                                 double* dx, std::size_t dim) {
  // xhat = x*r; dxhat = dy*gain; dx = r*(dxhat - xhat*mean(dxhat*xhat))
  double dot = 0.0;
  for (std::size_t j = 0; j < dim; ++j) dot += dy[j] * gain[j] * x[j] * r;
  const double mean = dot / static_cast<double>(dim);
  for (std::size_t j = 0; j < dim; ++j) dx[j] += r * (dy[j] * gain[j] - x[j] * r * mean);
}

void attention_head_forward(const double* q, const double* k, const double* v, double* out,
                            double* probs, const AttentionDims& d, std::size_t b, std::size_t h) {
  const std::size_t stride = d.model_dim();
  const std::size_t base = b * d.seq * stride + h * d.head_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d.head_dim));
  double* p_head = probs + (b * d.heads + h) * d.seq * d.seq;
  for (std::size_t i = 0; i < d.seq; ++i) {
    const double* qi = q + base + i * stride;
    double* prow = p_head + i * d.seq;
    double mx = -INFINITY;
    for (std::size_t j = 0; j <= i; ++j) {
      const double* kj = k + base + j * stride;
      double s = 0.0;
      for (std::size_t c = 0; c < d.head_dim; ++c) s += qi[c] * kj[c];
      prow[j] = s * scale;
      mx = std::max(mx, prow[j]);
    }
    double total = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      prow[j] = std::exp(prow[j] - mx);
      total += prow[j];
    }
    const double inv = 1.0 / total;
    for (std::size_t j = 0; j <= i; ++j) prow[j] *= inv;
    for (std::size_t j = i + 1; j < d.seq; ++j) prow[j] = 0.0;
    double* oi = out + base + i * stride;
    for (std::size_t c = 0; c < d.head_dim; ++c) oi[c] = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      const double* vj = v + base + j * stride;
      const double pj = prow[j];
      for (std::size_t c = 0; c < d.head_dim; ++c) oi[c] += pj * vj[c];
    }
  }
}

void attention_head_backward(const double* q, const double* k, const double* v,
                             const double* probs, const double* dout, double* dq, double* dk,
                             double* dv, const AttentionDims& d, std::size_t b, std::size_t h,
                             std::vector<double>& scratch) {
  const std::size_t stride = d.model_dim();
  const std::size_t base = b * d.seq * stride + h * d.head_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d.head_dim));
  const double* p_head = probs + (b * d.heads + h) * d.seq * d.seq;
  scratch.resize(d.seq);
  for (std::size_t i = 0; i < d.seq; ++i) {
    const double* prow = p_head + i * d.seq;
    const double* doi = dout + base + i * stride;
    double weighted = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      const double* vj = v + base + j * stride;
      double dp = 0.0;
      for (std::size_t c = 0; c < d.head_dim; ++c) dp += doi[c] * vj[c];
      scratch[j] = dp;
      weighted += prow[j] * dp;
      double* dvj = dv + base + j * stride;
      for (std::size_t c = 0; c < d.head_dim; ++c) dvj[c] += prow[j] * doi[c];
    }
    const double* qi = q + base + i * stride;
    double* dqi = dq + base + i * stride;
    for (std::size_t j = 0; j <= i; ++j) {
      const double ds = prow[j] * (scratch[j] - weighted) * scale;
      const double* kj = k + base + j * stride;
      double* dkj = dk + base + j * stride;
      for (std::size_t c = 0; c < d.head_dim; ++c) {
        dqi[c] += ds * kj[c];
        dkj[c] += ds * qi[c];
      }
    }
  }
}

// Four output rows per pass so each loaded row of b feeds four accumulators.
void matmul_rows(const double* a, const double* b, double* c, std::size_t row_begin,
                 std::size_t row_end, std::size_t k, std::size_t n, bool accumulate) {
  std::size_t i = row_begin;
  for (; i + 4 <= row_end; i += 4) {
    double* c0 = c + i * n;
    double* c1 = c0 + n;
    double* c2 = c1 + n;
    double* c3 = c2 + n;
    if (!accumulate) {
      std::fill(c0, c0 + 4 * n, 0.0);
    }
    const double* a0 = a + i * k;
    const double* a1 = a0 + k;
    const double* a2 = a1 + k;
    const double* a3 = a2 + k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      const double x0 = a0[p], x1 = a1[p], x2 = a2[p], x3 = a3[p];
      for (std::size_t j = 0; j < n; ++j) {
        const double bv = bp[j];
        c0[j] += x0 * bv;
        c1[j] += x1 * bv;
        c2[j] += x2 * bv;
        c3[j] += x3 * bv;
      }
    }
  }
  for (; i < row_end; ++i) {
    double* ci = c + i * n;
    if (!accumulate) std::fill(ci, ci + n, 0.0);
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      const double x = ai[p];
      for (std::size_t j = 0; j < n; ++j) ci[j] += x * bp[j];
    }
  }
}

constexpr std::size_t kRowBlock = 16;

}  // namespace

void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate) {
  const Index blocks = static_cast<Index>((m + kRowBlock - 1) / kRowBlock);
#pragma omp parallel for schedule(static) if (m * k * n > 32768)
  for (Index blk = 0; blk < blocks; ++blk) {
    const std::size_t begin = static_cast<std::size_t>(blk) * kRowBlock;
    const std::size_t end = std::min(m, begin + kRowBlock);
    matmul_rows(a, b, c, begin, end, k, n, accumulate);
  }
}

void matmul_at_b(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  // Each thread owns a block of output rows (columns of a) and sweeps all m.
  const Index blocks = static_cast<Index>((k + 3) / 4);
#pragma omp parallel for schedule(static) if (m * k * n > 32768)
  for (Index blk = 0; blk < blocks; ++blk) {
    const std::size_t r0 = static_cast<std::size_t>(blk) * 4;
    const std::size_t rows = std::min<std::size_t>(4, k - r0);
    if (rows == 4) {
      double* c0 = c + r0 * n;
      double* c1 = c0 + n;
      double* c2 = c1 + n;
      double* c3 = c2 + n;
      for (std::size_t p = 0; p < m; ++p) {
        const double* ap = a + p * k + r0;
        const double* bp = b + p * n;
        const double x0 = ap[0], x1 = ap[1], x2 = ap[2], x3 = ap[3];
        for (std::size_t j = 0; j < n; ++j) {
          const double bv = bp[j];
          c0[j] += x0 * bv;
          c1[j] += x1 * bv;
          c2[j] += x2 * bv;
          c3[j] += x3 * bv;
        }
      }
    } else {
      for (std::size_t r = r0; r < r0 + rows; ++r) {
        double* cr = c + r * n;
        for (std::size_t p = 0; p < m; ++p) {
          const double x = a[p * k + r];
          const double* bp = b + p * n;
          for (std::size_t j = 0; j < n; ++j) cr[j] += x * bp[j];
        }
      }
    }
  }
}

void matmul_a_bt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                 std::size_t k, bool accumulate) {
  std::vector<double> bt(n * k);
  for (std::size_t r = 0; r < k; ++r) {
    for (std::size_t j = 0; j < n; ++j) bt[j * k + r] = b[r * n + j];
  }
  matmul(a, bt.data(), c, m, n, k, accumulate);
}

void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols,
                  double inv_temperature) {
#pragma omp parallel for schedule(static) if (rows * cols > 16384)
  for (Index r = 0; r < static_cast<Index>(rows); ++r) {
    softmax_row(x + r * cols, y + r * cols, cols, inv_temperature);
  }
}

void log_softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols,
                      double inv_temperature) {
#pragma omp parallel for schedule(static) if (rows * cols > 16384)
  for (Index r = 0; r < static_cast<Index>(rows); ++r) {
    log_softmax_row(x + r * cols, y + r * cols, cols, inv_temperature);
  }
}

void rmsnorm_forward(const double* x, const double* gain, double* y, double* inv_rms,
                     std::size_t rows, std::size_t dim, double eps) {
#pragma omp parallel for schedule(static) if (rows * dim > 16384)
  for (Index r = 0; r < static_cast<Index>(rows); ++r) {
    rmsnorm_row(x + r * dim, gain, y + r * dim, inv_rms + r, dim, eps);
  }
}

void rmsnorm_backward(const double* x, const double* gain, const double* inv_rms,
                      const double* dy, double* dx, double* dgain, std::size_t rows,
                      std::size_t dim) {
#pragma omp parallel for schedule(static) if (rows * dim > 16384)
  for (Index r = 0; r < static_cast<Index>(rows); ++r) {
    rmsnorm_row_backward(x + r * dim, gain, inv_rms[r], dy + r * dim, dx + r * dim, dim);
  }
  // Gain gradient: column sums, row order fixed.
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * dim;
    const double* dyr = dy + r * dim;
    const double ir = inv_rms[r];
    for (std::size_t j = 0; j < dim; ++j) dgain[j] += dyr[j] * xr[j] * ir;
  }
}

void attention_forward(const double* q, const double* k, const double* v, double* out,
                       double* probs, const AttentionDims& dims) {
  const Index units = static_cast<Index>(dims.batch * dims.heads);
#pragma omp parallel for schedule(static)
  for (Index u = 0; u < units; ++u) {
    const std::size_t b = static_cast<std::size_t>(u) / dims.heads;
    const std::size_t h = static_cast<std::size_t>(u) % dims.heads;
    attention_head_forward(q, k, v, out, probs, dims, b, h);
  }
}

void attention_backward(const double* q, const double* k, const double* v, const double* probs,
                        const double* dout, double* dq, double* dk, double* dv,
                        const AttentionDims& dims) {
  const Index units = static_cast<Index>(dims.batch * dims.heads);
#pragma omp parallel
  {
    std::vector<double> scratch;
#pragma omp for schedule(static)
    for (Index u = 0; u < units; ++u) {
      const std::size_t b = static_cast<std::size_t>(u) / dims.heads;
      const std::size_t h = static_cast<std::size_t>(u) % dims.heads;
      attention_head_backward(q, k, v, probs, dout, dq, dk, dv, dims, b, h, scratch);
    }
  }
}

namespace serial {

void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

void matmul_at_b(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t r = 0; r < k; ++r) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < m; ++p) s += a[p * k + r] * b[p * n + j];
      c[r * n + j] += s;
    }
  }
}

void matmul_a_bt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                 std::size_t k, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t r = 0; r < k; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += a[i * n + j] * b[r * n + j];
      c[i * k + r] = accumulate ? c[i * k + r] + s : s;
    }
  }
}

void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols,
                  double inv_temperature) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * cols;
    const double mx = *std::max_element(xr, xr + cols) * inv_temperature;
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) total += std::exp(xr[j] * inv_temperature - mx);
    for (std::size_t j = 0; j < cols; ++j) y[r * cols + j] = std::exp(xr[j] * inv_temperature - mx) / total;
  }
}

void log_softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols,
                      double inv_temperature) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * cols;
    const double mx = *std::max_element(xr, xr + cols) * inv_temperature;
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) total += std::exp(xr[j] * inv_temperature - mx);
    for (std::size_t j = 0; j < cols; ++j) y[r * cols + j] = xr[j] * inv_temperature - mx - std::log(total);
  }
}

void rmsnorm_forward(const double* x, const double* gain, double* y, double* inv_rms,
                     std::size_t rows, std::size_t dim, double eps) {
  for (std::size_t r = 0; r < rows; ++r) {
    double ms = 0.0;
    for (std::size_t j = 0; j < dim; ++j) ms += x[r * dim + j] * x[r * dim + j];
    ms /= static_cast<double>(dim);
    const double rms = std::sqrt(ms + eps);
    inv_rms[r] = 1.0 / rms;
    for (std::size_t j = 0; j < dim; ++j) y[r * dim + j] = gain[j] * x[r * dim + j] / rms;
  }
}

void rmsnorm_backward(const double* x, const double* gain, const double* inv_rms,
                      const double* dy, double* dx, double* dgain, std::size_t rows,
                      std::size_t dim) {
  // Full Jacobian form: dy_j/dx_i = g_j * (r*delta_ij - r^3 * x_i * x_j / dim).
  for (std::size_t r = 0; r < rows; ++r) {
    const double ir = inv_rms[r];
    for (std::size_t i = 0; i < dim; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        const double jac = gain[j] * ((i == j ? ir : 0.0) -
                                      ir * ir * ir * x[r * dim + i] * x[r * dim + j] /
                                          static_cast<double>(dim));
        s += dy[r * dim + j] * jac;
      }
      dx[r * dim + i] += s;
    }
    for (std::size_t j = 0; j < dim; ++j) dgain[j] += dy[r * dim + j] * x[r * dim + j] * ir;
  }
}

void attention_forward(const double* q, const double* k, const double* v, double* out,
                       double* probs, const AttentionDims& dims) {
  const std::size_t L = dims.seq, D = dims.model_dim(), hd = dims.head_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double> scores(L * L);
  for (std::size_t b = 0; b < dims.batch; ++b) {
    for (std::size_t h = 0; h < dims.heads; ++h) {
      for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t j = 0; j < L; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < hd; ++c) {
            s += q[(b * L + i) * D + h * hd + c] * k[(b * L + j) * D + h * hd + c];
          }
          scores[i * L + j] = j <= i ? s * scale : -INFINITY;
        }
      }
      double* p = probs + (b * dims.heads + h) * L * L;
      softmax_rows(scores.data(), p, L, L, 1.0);
      for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t c = 0; c < hd; ++c) {
          double s = 0.0;
          for (std::size_t j = 0; j < L; ++j) s += p[i * L + j] * v[(b * L + j) * D + h * hd + c];
          out[(b * L + i) * D + h * hd + c] = s;
        }
      }
    }
  }
}

void attention_backward(const double* q, const double* k, const double* v, const double* probs,
                        const double* dout, double* dq, double* dk, double* dv,
                        const AttentionDims& dims) {
  const std::size_t L = dims.seq, D = dims.model_dim(), hd = dims.head_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double> dp(L * L), ds(L * L);
  for (std::size_t b = 0; b < dims.batch; ++b) {
    for (std::size_t h = 0; h < dims.heads; ++h) {
      const double* p = probs + (b * dims.heads + h) * L * L;
      auto at = [&](std::size_t row, std::size_t c) { return (b * L + row) * D + h * hd + c; };
      for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t j = 0; j < L; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < hd; ++c) s += dout[at(i, c)] * v[at(j, c)];
          dp[i * L + j] = s;
        }
      }
      for (std::size_t j = 0; j < L; ++j) {
        for (std::size_t c = 0; c < hd; ++c) {
          double s = 0.0;
          for (std::size_t i = 0; i < L; ++i) s += p[i * L + j] * dout[at(i, c)];
          dv[at(j, c)] += s;
        }
      }
      for (std::size_t i = 0; i < L; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < L; ++j) row += p[i * L + j] * dp[i * L + j];
        for (std::size_t j = 0; j < L; ++j) ds[i * L + j] = p[i * L + j] * (dp[i * L + j] - row) * scale;
      }
      for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t c = 0; c < hd; ++c) {
          double sq = 0.0, sk = 0.0;
          for (std::size_t j = 0; j < L; ++j) {
            sq += ds[i * L + j] * k[at(j, c)];
            sk += ds[j * L + i] * q[at(j, c)];
          }
          dq[at(i, c)] += sq;
          dk[at(i, c)] += sk;
        }
      }
    }
  }
}

}  // namespace serial

}  // namespace kd::kernels
