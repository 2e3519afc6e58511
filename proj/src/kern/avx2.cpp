#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "divot/threads.hpp"
#include "exp_poly.hpp"
#include "table.hpp"

// AVX2+FMA kernels. Only reachable when dispatch verified CPU support. The
// elementwise transcendentals follow exp_poly.hpp operation-for-operation
// (mul+add, no contraction) so they match the scalar reference bit for bit;
// gemm and the row reductions use FMA and lane-parallel sums, which reorder
// additions, so those pair with tolerance-based equivalence tests instead.

namespace divot::kern {
namespace {

using namespace detail;

inline __m256 exp8(__m256 x) {
  const __m256 lo = _mm256_set1_ps(kExpLo), hi = _mm256_set1_ps(kExpHi);
  x = _mm256_min_ps(_mm256_max_ps(x, lo), hi);
  const __m256 nf = _mm256_floor_ps(
      _mm256_add_ps(_mm256_mul_ps(x, _mm256_set1_ps(kLog2e)), _mm256_set1_ps(0.5f)));
  __m256 r = _mm256_sub_ps(x, _mm256_mul_ps(nf, _mm256_set1_ps(kLn2Hi)));
  r = _mm256_sub_ps(r, _mm256_mul_ps(nf, _mm256_set1_ps(kLn2Lo)));
  __m256 y = _mm256_set1_ps(kExpP0);
  y = _mm256_add_ps(_mm256_mul_ps(y, r), _mm256_set1_ps(kExpP1));
  y = _mm256_add_ps(_mm256_mul_ps(y, r), _mm256_set1_ps(kExpP2));
  y = _mm256_add_ps(_mm256_mul_ps(y, r), _mm256_set1_ps(kExpP3));
  y = _mm256_add_ps(_mm256_mul_ps(y, r), _mm256_set1_ps(kExpP4));
  y = _mm256_add_ps(_mm256_mul_ps(y, r), _mm256_set1_ps(kExpP5));
  y = _mm256_add_ps(_mm256_add_ps(_mm256_mul_ps(y, _mm256_mul_ps(r, r)), r), _mm256_set1_ps(1.0f));
  const __m256i n = _mm256_cvtps_epi32(nf);  // nf is already integral
  const __m256i bits = _mm256_slli_epi32(_mm256_add_epi32(n, _mm256_set1_epi32(127)), 23);
  return _mm256_mul_ps(y, _mm256_castsi256_ps(bits));
}

inline __m256 tanh8(__m256 x) {
  const __m256 sign_mask = _mm256_set1_ps(-0.0f);
  const __m256 sign = _mm256_and_ps(x, sign_mask);
  const __m256 ax = _mm256_andnot_ps(sign_mask, x);
  const __m256 z = _mm256_min_ps(ax, _mm256_set1_ps(kTanhClamp));
  const __m256 e = exp8(_mm256_mul_ps(_mm256_set1_ps(2.0f), z));
  const __m256 t = _mm256_sub_ps(_mm256_set1_ps(1.0f),
                                 _mm256_div_ps(_mm256_set1_ps(2.0f), _mm256_add_ps(e, _mm256_set1_ps(1.0f))));
  return _mm256_or_ps(t, sign);
}

inline __m256 gelu8(__m256 x) {
  const __m256 x2 = _mm256_mul_ps(x, x);
  const __m256 u = _mm256_mul_ps(x, _mm256_add_ps(_mm256_set1_ps(kGeluC), _mm256_mul_ps(_mm256_set1_ps(kGeluD), x2)));
  const __m256 t = tanh8(u);
  return _mm256_mul_ps(_mm256_mul_ps(_mm256_set1_ps(0.5f), x), _mm256_add_ps(_mm256_set1_ps(1.0f), t));
}

inline float hsum8(__m256 v) {
  const __m128 lo = _mm256_castps256_ps128(v);
  const __m128 hi = _mm256_extractf128_ps(v, 1);
  __m128 s = _mm_add_ps(lo, hi);
  s = _mm_add_ps(s, _mm_movehl_ps(s, s));
  s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
  return _mm_cvtss_f32(s);
}

inline float hmax8(__m256 v) {
  const __m128 lo = _mm256_castps256_ps128(v);
  const __m128 hi = _mm256_extractf128_ps(v, 1);
  __m128 s = _mm_max_ps(lo, hi);
  s = _mm_max_ps(s, _mm_movehl_ps(s, s));
  s = _mm_max_ss(s, _mm_shuffle_ps(s, s, 1));
  return _mm_cvtss_f32(s);
}

// gemm: 6x16 microkernel over a packed 16-column B panel.

void pack_b16(const float* b, int ldb, int k, int jcols, float* bp) {
  for (int kk = 0; kk < k; ++kk) {
    const float* src = b + static_cast<int64_t>(kk) * ldb;
    float* dst = bp + kk * 16;
    int c = 0;
    for (; c < jcols; ++c) dst[c] = src[c];
    for (; c < 16; ++c) dst[c] = 0.0f;
  }
}

template <int MR>
void micro_mr16(const float* a, int lda, const float* bp, int k, float* c, int ldc, int jcols, bool acc) {
  __m256 a0[MR], a1[MR];
  for (int r = 0; r < MR; ++r) {
    a0[r] = _mm256_setzero_ps();
    a1[r] = _mm256_setzero_ps();
  }
  for (int kk = 0; kk < k; ++kk) {
    const __m256 b0 = _mm256_load_ps(bp + kk * 16);
    const __m256 b1 = _mm256_load_ps(bp + kk * 16 + 8);
    for (int r = 0; r < MR; ++r) {
      const __m256 av = _mm256_set1_ps(a[static_cast<int64_t>(r) * lda + kk]);
      a0[r] = _mm256_fmadd_ps(av, b0, a0[r]);
      a1[r] = _mm256_fmadd_ps(av, b1, a1[r]);
    }
  }
  if (jcols == 16) {
    for (int r = 0; r < MR; ++r) {
      float* crow = c + static_cast<int64_t>(r) * ldc;
      __m256 r0 = a0[r], r1 = a1[r];
      if (acc) {
        r0 = _mm256_add_ps(r0, _mm256_loadu_ps(crow));
        r1 = _mm256_add_ps(r1, _mm256_loadu_ps(crow + 8));
      }
      _mm256_storeu_ps(crow, r0);
      _mm256_storeu_ps(crow + 8, r1);
    }
  } else {
    alignas(32) float tmp[16];
    for (int r = 0; r < MR; ++r) {
      _mm256_store_ps(tmp, a0[r]);
      _mm256_store_ps(tmp + 8, a1[r]);
      float* crow = c + static_cast<int64_t>(r) * ldc;
      for (int cc = 0; cc < jcols; ++cc) crow[cc] = acc ? crow[cc] + tmp[cc] : tmp[cc];
    }
  }
}

void rows_mr16(const float* a, int lda, const float* bp, int k, float* c, int ldc, int jcols, bool acc, int64_t i0, int64_t i1) {
  int64_t i = i0;
  for (; i + 6 <= i1; i += 6) micro_mr16<6>(a + i * lda, lda, bp, k, c + i * ldc, ldc, jcols, acc);
  switch (i1 - i) {
    case 5: micro_mr16<5>(a + i * lda, lda, bp, k, c + i * ldc, ldc, jcols, acc); break;
    case 4: micro_mr16<4>(a + i * lda, lda, bp, k, c + i * ldc, ldc, jcols, acc); break;
    case 3: micro_mr16<3>(a + i * lda, lda, bp, k, c + i * ldc, ldc, jcols, acc); break;
    case 2: micro_mr16<2>(a + i * lda, lda, bp, k, c + i * ldc, ldc, jcols, acc); break;
    case 1: micro_mr16<1>(a + i * lda, lda, bp, k, c + i * ldc, ldc, jcols, acc); break;
    default: break;
  }
}

void a_gemm(const float* a, const float* b, float* c, int m, int n, int k, bool acc) {
  thread_local std::vector<float> panel;
  panel.resize(static_cast<size_t>(k) * 16 + 8);
  float* bp = panel.data();
  // align to 32B for _mm256_load_ps
  bp += (32 - (reinterpret_cast<uintptr_t>(bp) & 31)) / 4 % 8;
  for (int j0 = 0; j0 < n; j0 += 16) {
    const int jc = std::min(16, n - j0);
    pack_b16(b + j0, n, k, jc, bp);
    parallel_for(m, 384, [&](int64_t i0, int64_t i1) { rows_mr16(a, k, bp, k, c + j0, n, jc, acc, i0, i1); });
  }
}

// elementwise

void a_vexp(const float* x, float* y, int64_t n) {
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(y + i, exp8(_mm256_loadu_ps(x + i)));
  for (; i < n; ++i) y[i] = poly_expf(x[i]);
}
void a_vtanh(const float* x, float* y, int64_t n) {
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(y + i, tanh8(_mm256_loadu_ps(x + i)));
  for (; i < n; ++i) y[i] = poly_tanhf(x[i]);
}
void a_vgelu(const float* x, float* y, int64_t n) {
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(y + i, gelu8(_mm256_loadu_ps(x + i)));
  for (; i < n; ++i) y[i] = poly_geluf(x[i]);
}
void a_tanh_bwd(const float* y, const float* dy, float* dx, int64_t n) {
  const __m256 one = _mm256_set1_ps(1.0f);
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 yv = _mm256_loadu_ps(y + i);
    const __m256 g = _mm256_mul_ps(_mm256_loadu_ps(dy + i), _mm256_sub_ps(one, _mm256_mul_ps(yv, yv)));
    _mm256_storeu_ps(dx + i, _mm256_add_ps(_mm256_loadu_ps(dx + i), g));
  }
  for (; i < n; ++i) dx[i] += dy[i] * (1.0f - y[i] * y[i]);
}
void a_gelu_bwd(const float* x, const float* dy, float* dx, int64_t n) {
  const __m256 half = _mm256_set1_ps(0.5f), one = _mm256_set1_ps(1.0f);
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 xv = _mm256_loadu_ps(x + i);
    const __m256 x2 = _mm256_mul_ps(xv, xv);
    const __m256 u = _mm256_mul_ps(xv, _mm256_add_ps(_mm256_set1_ps(kGeluC), _mm256_mul_ps(_mm256_set1_ps(kGeluD), x2)));
    const __m256 t = tanh8(u);
    const __m256 up = _mm256_add_ps(_mm256_set1_ps(kGeluC), _mm256_mul_ps(_mm256_set1_ps(kGeluD3), x2));
    const __m256 g = _mm256_add_ps(
        _mm256_mul_ps(half, _mm256_add_ps(one, t)),
        _mm256_mul_ps(_mm256_mul_ps(_mm256_mul_ps(half, xv), _mm256_sub_ps(one, _mm256_mul_ps(t, t))), up));
    _mm256_storeu_ps(dx + i, _mm256_add_ps(_mm256_loadu_ps(dx + i), _mm256_mul_ps(_mm256_loadu_ps(dy + i), g)));
  }
  for (; i < n; ++i) dx[i] += dy[i] * poly_gelu_gradf(x[i]);
}
void a_vadd(const float* a, const float* b, float* y, int64_t n) {
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) y[i] = a[i] + b[i];
}
void a_vmul(const float* a, const float* b, float* y, int64_t n) {
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(y + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) y[i] = a[i] * b[i];
}
void a_axpy(float a, const float* x, float* y, int64_t n) {
  const __m256 av = _mm256_set1_ps(a);
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(y + i, _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] += a * x[i];
}

// row reductions

void a_softmax_rows(const float* x, float* y, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    const float* xr = x + static_cast<int64_t>(r) * cols;
    float* yr = y + static_cast<int64_t>(r) * cols;
    __m256 mv = _mm256_set1_ps(-std::numeric_limits<float>::infinity());
    int c = 0;
    for (; c + 8 <= cols; c += 8) mv = _mm256_max_ps(mv, _mm256_loadu_ps(xr + c));
    float m = hmax8(mv);
    for (; c < cols; ++c) m = std::max(m, xr[c]);
    const __m256 msub = _mm256_set1_ps(m);
    __m256 sv = _mm256_setzero_ps();
    c = 0;
    for (; c + 8 <= cols; c += 8) {
      const __m256 e = exp8(_mm256_sub_ps(_mm256_loadu_ps(xr + c), msub));
      _mm256_storeu_ps(yr + c, e);
      sv = _mm256_add_ps(sv, e);
    }
    float s = hsum8(sv);
    for (; c < cols; ++c) {
      yr[c] = poly_expf(xr[c] - m);
      s += yr[c];
    }
    const __m256 inv = _mm256_set1_ps(1.0f / s);
    c = 0;
    for (; c + 8 <= cols; c += 8) _mm256_storeu_ps(yr + c, _mm256_mul_ps(_mm256_loadu_ps(yr + c), inv));
    for (; c < cols; ++c) yr[c] *= 1.0f / s;
  }
}

void a_softmax_bwd_rows(const float* y, const float* dy, float* dx, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    const float* yr = y + static_cast<int64_t>(r) * cols;
    const float* dyr = dy + static_cast<int64_t>(r) * cols;
    float* dxr = dx + static_cast<int64_t>(r) * cols;
    __m256 dv = _mm256_setzero_ps();
    int c = 0;
    for (; c + 8 <= cols; c += 8) dv = _mm256_fmadd_ps(_mm256_loadu_ps(yr + c), _mm256_loadu_ps(dyr + c), dv);
    float dot = hsum8(dv);
    for (; c < cols; ++c) dot += yr[c] * dyr[c];
    const __m256 dots = _mm256_set1_ps(dot);
    c = 0;
    for (; c + 8 <= cols; c += 8) {
      const __m256 g = _mm256_mul_ps(_mm256_loadu_ps(yr + c), _mm256_sub_ps(_mm256_loadu_ps(dyr + c), dots));
      _mm256_storeu_ps(dxr + c, _mm256_add_ps(_mm256_loadu_ps(dxr + c), g));
    }
    for (; c < cols; ++c) dxr[c] += yr[c] * (dyr[c] - dot);
  }
}

void a_logsumexp_rows(const float* x, float* out, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    const float* xr = x + static_cast<int64_t>(r) * cols;
    __m256 mv = _mm256_set1_ps(-std::numeric_limits<float>::infinity());
    int c = 0;
    for (; c + 8 <= cols; c += 8) mv = _mm256_max_ps(mv, _mm256_loadu_ps(xr + c));
    float m = hmax8(mv);
    for (; c < cols; ++c) m = std::max(m, xr[c]);
    const __m256 msub = _mm256_set1_ps(m);
    __m256 sv = _mm256_setzero_ps();
    c = 0;
    for (; c + 8 <= cols; c += 8) sv = _mm256_add_ps(sv, exp8(_mm256_sub_ps(_mm256_loadu_ps(xr + c), msub)));
    float s = hsum8(sv);
    for (; c < cols; ++c) s += poly_expf(xr[c] - m);
    out[r] = m + std::log(s);
  }
}

void a_layernorm_rows(const float* x, const float* gamma, const float* beta, float* y, float* mean, float* rstd, int rows, int cols,
                      float eps) {
  for (int r = 0; r < rows; ++r) {
    const float* xr = x + static_cast<int64_t>(r) * cols;
    float* yr = y + static_cast<int64_t>(r) * cols;
    __m256 sv = _mm256_setzero_ps();
    int c = 0;
    for (; c + 8 <= cols; c += 8) sv = _mm256_add_ps(sv, _mm256_loadu_ps(xr + c));
    float mu = hsum8(sv);
    for (; c < cols; ++c) mu += xr[c];
    mu /= static_cast<float>(cols);
    const __m256 muv = _mm256_set1_ps(mu);
    __m256 vv = _mm256_setzero_ps();
    c = 0;
    for (; c + 8 <= cols; c += 8) {
      const __m256 d = _mm256_sub_ps(_mm256_loadu_ps(xr + c), muv);
      vv = _mm256_fmadd_ps(d, d, vv);
    }
    float var = hsum8(vv);
    for (; c < cols; ++c) {
      const float d = xr[c] - mu;
      var += d * d;
    }
    var /= static_cast<float>(cols);
    const float rs = 1.0f / std::sqrt(var + eps);
    mean[r] = mu;
    rstd[r] = rs;
    const __m256 rsv = _mm256_set1_ps(rs);
    c = 0;
    for (; c + 8 <= cols; c += 8) {
      const __m256 xhat = _mm256_mul_ps(_mm256_sub_ps(_mm256_loadu_ps(xr + c), muv), rsv);
      _mm256_storeu_ps(yr + c, _mm256_fmadd_ps(xhat, _mm256_loadu_ps(gamma + c), _mm256_loadu_ps(beta + c)));
    }
    for (; c < cols; ++c) yr[c] = (xr[c] - mu) * rs * gamma[c] + beta[c];
  }
}

void a_layernorm_bwd_rows(const float* x, const float* gamma, const float* mean, const float* rstd, const float* dy, float* dx,
                          float* dgamma, float* dbeta, int rows, int cols) {
  const float invc = 1.0f / static_cast<float>(cols);
  for (int r = 0; r < rows; ++r) {
    const float* xr = x + static_cast<int64_t>(r) * cols;
    const float* dyr = dy + static_cast<int64_t>(r) * cols;
    float* dxr = dx + static_cast<int64_t>(r) * cols;
    const float mu = mean[r], rs = rstd[r];
    const __m256 muv = _mm256_set1_ps(mu), rsv = _mm256_set1_ps(rs);
    __m256 s1v = _mm256_setzero_ps(), s2v = _mm256_setzero_ps();
    int c = 0;
    for (; c + 8 <= cols; c += 8) {
      const __m256 xhat = _mm256_mul_ps(_mm256_sub_ps(_mm256_loadu_ps(xr + c), muv), rsv);
      const __m256 dyv = _mm256_loadu_ps(dyr + c);
      const __m256 g = _mm256_mul_ps(dyv, _mm256_loadu_ps(gamma + c));
      s1v = _mm256_add_ps(s1v, g);
      s2v = _mm256_fmadd_ps(g, xhat, s2v);
      _mm256_storeu_ps(dgamma + c, _mm256_fmadd_ps(dyv, xhat, _mm256_loadu_ps(dgamma + c)));
      _mm256_storeu_ps(dbeta + c, _mm256_add_ps(dyv, _mm256_loadu_ps(dbeta + c)));
    }
    float s1 = hsum8(s1v), s2 = hsum8(s2v);
    for (; c < cols; ++c) {
      const float xhat = (xr[c] - mu) * rs;
      const float g = dyr[c] * gamma[c];
      s1 += g;
      s2 += g * xhat;
      dgamma[c] += dyr[c] * xhat;
      dbeta[c] += dyr[c];
    }
    s1 *= invc;
    s2 *= invc;
    const __m256 s1vv = _mm256_set1_ps(s1), s2vv = _mm256_set1_ps(s2);
    c = 0;
    for (; c + 8 <= cols; c += 8) {
      const __m256 xhat = _mm256_mul_ps(_mm256_sub_ps(_mm256_loadu_ps(xr + c), muv), rsv);
      const __m256 g = _mm256_mul_ps(_mm256_loadu_ps(dyr + c), _mm256_loadu_ps(gamma + c));
      const __m256 d = _mm256_mul_ps(rsv, _mm256_sub_ps(_mm256_sub_ps(g, s1vv), _mm256_mul_ps(xhat, s2vv)));
      _mm256_storeu_ps(dxr + c, _mm256_add_ps(_mm256_loadu_ps(dxr + c), d));
    }
    for (; c < cols; ++c) {
      const float xhat = (xr[c] - mu) * rs;
      dxr[c] += rs * (dyr[c] * gamma[c] - s1 - xhat * s2);
    }
  }
}

}  // namespace

namespace detail {
const F32Table kAvx2Table = {
    a_gemm, a_vexp, a_vtanh, a_vgelu, a_tanh_bwd, a_gelu_bwd, a_vadd, a_vmul, a_axpy,
    a_softmax_rows, a_softmax_bwd_rows, a_logsumexp_rows, a_layernorm_rows, a_layernorm_bwd_rows,
};
}  // namespace detail

}  // namespace divot::kern
