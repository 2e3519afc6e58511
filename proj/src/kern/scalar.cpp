#include <cmath>
#include <cstring>
#include <vector>

#include "divot/kernels.hpp"
#include "divot/threads.hpp"
#include "exp_poly.hpp"
#include "table.hpp"

// Scalar reference kernels. The float32 entry points mirror the AVX2 variants
// operation-for-operation (see exp_poly.hpp); float64 has only this path.
// This translation unit is compiled with -ffp-contract=off so the written
// mul/add sequence is exactly what runs.

namespace divot::kern {
namespace {

using detail::poly_expf;
using detail::poly_geluf;
using detail::poly_gelu_gradf;
using detail::poly_tanhf;

template <typename T>
void gemm_impl(const T* a, const T* b, T* c, int m, int n, int k, bool acc) {
  parallel_for(m, 64, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      T* crow = c + i * n;
      if (!acc)
        for (int j = 0; j < n; ++j) crow[j] = T(0);
      const T* arow = a + i * k;
      for (int kk = 0; kk < k; ++kk) {
        const T av = arow[kk];
        const T* brow = b + static_cast<int64_t>(kk) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  });
}

template <typename T>
void transpose_impl(const T* in, T* out, int rows, int cols) {
  constexpr int kB = 32;
  for (int i0 = 0; i0 < rows; i0 += kB)
    for (int j0 = 0; j0 < cols; j0 += kB) {
      const int i1 = std::min(i0 + kB, rows), j1 = std::min(j0 + kB, cols);
      for (int i = i0; i < i1; ++i)
        for (int j = j0; j < j1; ++j) out[static_cast<int64_t>(j) * rows + i] = in[static_cast<int64_t>(i) * cols + j];
    }
}

template <typename T>
void softmax_rows_impl(const T* x, T* y, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    const T* xr = x + static_cast<int64_t>(r) * cols;
    T* yr = y + static_cast<int64_t>(r) * cols;
    T m = xr[0];
    for (int c = 1; c < cols; ++c) m = std::max(m, xr[c]);
    T s = T(0);
    for (int c = 0; c < cols; ++c) {
      if constexpr (std::is_same_v<T, float>)
        yr[c] = poly_expf(xr[c] - m);
      else
        yr[c] = std::exp(xr[c] - m);
      s += yr[c];
    }
    const T inv = T(1) / s;
    for (int c = 0; c < cols; ++c) yr[c] *= inv;
  }
}

template <typename T>
void softmax_bwd_rows_impl(const T* y, const T* dy, T* dx, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    const T* yr = y + static_cast<int64_t>(r) * cols;
    const T* dyr = dy + static_cast<int64_t>(r) * cols;
    T* dxr = dx + static_cast<int64_t>(r) * cols;
    T dot = T(0);
    for (int c = 0; c < cols; ++c) dot += yr[c] * dyr[c];
    for (int c = 0; c < cols; ++c) dxr[c] += yr[c] * (dyr[c] - dot);
  }
}

template <typename T>
void logsumexp_rows_impl(const T* x, T* out, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    const T* xr = x + static_cast<int64_t>(r) * cols;
    T m = xr[0];
    for (int c = 1; c < cols; ++c) m = std::max(m, xr[c]);
    T s = T(0);
    for (int c = 0; c < cols; ++c) {
      if constexpr (std::is_same_v<T, float>)
        s += poly_expf(xr[c] - m);
      else
        s += std::exp(xr[c] - m);
    }
    out[r] = m + std::log(s);
  }
}

template <typename T>
void layernorm_rows_impl(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd, int rows, int cols, T eps) {
  for (int r = 0; r < rows; ++r) {
    const T* xr = x + static_cast<int64_t>(r) * cols;
    T* yr = y + static_cast<int64_t>(r) * cols;
    T mu = T(0);
    for (int c = 0; c < cols; ++c) mu += xr[c];
    mu /= T(cols);
    T var = T(0);
    for (int c = 0; c < cols; ++c) {
      const T d = xr[c] - mu;
      var += d * d;
    }
    var /= T(cols);
    const T rs = T(1) / std::sqrt(var + eps);
    mean[r] = mu;
    rstd[r] = rs;
    for (int c = 0; c < cols; ++c) yr[c] = (xr[c] - mu) * rs * gamma[c] + beta[c];
  }
}

template <typename T>
void layernorm_bwd_rows_impl(const T* x, const T* gamma, const T* mean, const T* rstd, const T* dy, T* dx, T* dgamma, T* dbeta,
                             int rows, int cols) {
  const T invc = T(1) / T(cols);
  for (int r = 0; r < rows; ++r) {
    const T* xr = x + static_cast<int64_t>(r) * cols;
    const T* dyr = dy + static_cast<int64_t>(r) * cols;
    T* dxr = dx + static_cast<int64_t>(r) * cols;
    const T mu = mean[r], rs = rstd[r];
    T s1 = T(0), s2 = T(0);
    for (int c = 0; c < cols; ++c) {
      const T xhat = (xr[c] - mu) * rs;
      const T g = dyr[c] * gamma[c];
      s1 += g;
      s2 += g * xhat;
      dgamma[c] += dyr[c] * xhat;
      dbeta[c] += dyr[c];
    }
    s1 *= invc;
    s2 *= invc;
    for (int c = 0; c < cols; ++c) {
      const T xhat = (xr[c] - mu) * rs;
      dxr[c] += rs * (dyr[c] * gamma[c] - s1 - xhat * s2);
    }
  }
}

// float32 scalar entry points (reference half of the dispatch pair)

void s_gemm(const float* a, const float* b, float* c, int m, int n, int k, bool acc) { gemm_impl(a, b, c, m, n, k, acc); }
void s_vexp(const float* x, float* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = poly_expf(x[i]);
}
void s_vtanh(const float* x, float* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = poly_tanhf(x[i]);
}
void s_vgelu(const float* x, float* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = poly_geluf(x[i]);
}
void s_tanh_bwd(const float* y, const float* dy, float* dx, int64_t n) {
  for (int64_t i = 0; i < n; ++i) dx[i] += dy[i] * (1.0f - y[i] * y[i]);
}
void s_gelu_bwd(const float* x, const float* dy, float* dx, int64_t n) {
  for (int64_t i = 0; i < n; ++i) dx[i] += dy[i] * poly_gelu_gradf(x[i]);
}
void s_vadd(const float* a, const float* b, float* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
}
void s_vmul(const float* a, const float* b, float* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
}
void s_axpy(float a, const float* x, float* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}
void s_softmax_rows(const float* x, float* y, int r, int c) { softmax_rows_impl(x, y, r, c); }
void s_softmax_bwd_rows(const float* y, const float* dy, float* dx, int r, int c) { softmax_bwd_rows_impl(y, dy, dx, r, c); }
void s_logsumexp_rows(const float* x, float* o, int r, int c) { logsumexp_rows_impl(x, o, r, c); }
void s_layernorm_rows(const float* x, const float* g, const float* b, float* y, float* mean, float* rstd, int r, int c, float eps) {
  layernorm_rows_impl(x, g, b, y, mean, rstd, r, c, eps);
}
void s_layernorm_bwd_rows(const float* x, const float* g, const float* mean, const float* rstd, const float* dy, float* dx, float* dg,
                          float* db, int r, int c) {
  layernorm_bwd_rows_impl(x, g, mean, rstd, dy, dx, dg, db, r, c);
}

}  // namespace

namespace detail {
const F32Table kScalarTable = {
    s_gemm, s_vexp, s_vtanh, s_vgelu, s_tanh_bwd, s_gelu_bwd, s_vadd, s_vmul, s_axpy,
    s_softmax_rows, s_softmax_bwd_rows, s_logsumexp_rows, s_layernorm_rows, s_layernorm_bwd_rows,
};
}  // namespace detail

// float64: scalar only (verification path)

void gemm_f64(const double* a, const double* b, double* c, int m, int n, int k, bool acc) { gemm_impl(a, b, c, m, n, k, acc); }
void transpose2d_f32(const float* in, float* out, int rows, int cols) { transpose_impl(in, out, rows, cols); }
void transpose2d_f64(const double* in, double* out, int rows, int cols) { transpose_impl(in, out, rows, cols); }
void vexp_f64(const double* x, double* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = std::exp(x[i]);
}
void vtanh_f64(const double* x, double* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = std::tanh(x[i]);
}
void vgelu_f64(const double* x, double* y, int64_t n) {
  constexpr double c = 0.7978845608028653558798921198687637;
  constexpr double d = c * 0.044715;
  for (int64_t i = 0; i < n; ++i) {
    const double u = x[i] * (c + d * x[i] * x[i]);
    y[i] = 0.5 * x[i] * (1.0 + std::tanh(u));
  }
}
void tanh_bwd_f64(const double* y, const double* dy, double* dx, int64_t n) {
  for (int64_t i = 0; i < n; ++i) dx[i] += dy[i] * (1.0 - y[i] * y[i]);
}
void gelu_bwd_f64(const double* x, const double* dy, double* dx, int64_t n) {
  constexpr double c = 0.7978845608028653558798921198687637;
  constexpr double d = c * 0.044715;
  for (int64_t i = 0; i < n; ++i) {
    const double x2 = x[i] * x[i];
    const double t = std::tanh(x[i] * (c + d * x2));
    const double up = c + 3.0 * d * x2;
    dx[i] += dy[i] * (0.5 * (1.0 + t) + 0.5 * x[i] * (1.0 - t * t) * up);
  }
}
void vadd_f64(const double* a, const double* b, double* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
}
void vmul_f64(const double* a, const double* b, double* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
}
void axpy_f64(double a, const double* x, double* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}
void softmax_rows_f64(const double* x, double* y, int r, int c) { softmax_rows_impl(x, y, r, c); }
void softmax_bwd_rows_f64(const double* y, const double* dy, double* dx, int r, int c) { softmax_bwd_rows_impl(y, dy, dx, r, c); }
void logsumexp_rows_f64(const double* x, double* o, int r, int c) { logsumexp_rows_impl(x, o, r, c); }
void layernorm_rows_f64(const double* x, const double* g, const double* b, double* y, double* mean, double* rstd, int r, int c,
                        double eps) {
  layernorm_rows_impl(x, g, b, y, mean, rstd, r, c, eps);
}
void layernorm_bwd_rows_f64(const double* x, const double* g, const double* mean, const double* rstd, const double* dy, double* dx,
                            double* dg, double* db, int r, int c) {
  layernorm_bwd_rows_impl(x, g, mean, rstd, dy, dx, dg, db, r, c);
}

void colsum_acc_f32(const float* x, float* out, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = x + r * cols;
    for (int64_t c = 0; c < cols; ++c) out[c] += xr[c];
  }
}
void colsum_acc_f64(const double* x, double* out, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x + r * cols;
    for (int64_t c = 0; c < cols; ++c) out[c] += xr[c];
  }
}

double reduce_sum_f32(const float* x, int64_t n) {
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += x[i];
  return s;
}
double reduce_sum_f64(const double* x, int64_t n) {
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += x[i];
  return s;
}

}  // namespace divot::kern
