#pragma once

#include <cstdint>

#include "divot/isa.hpp"

// Compute kernels backing the autodiff layer. Two float32 implementations
// exist for every hot routine: a scalar reference and an AVX2+FMA variant,
// chosen once at startup (see isa.hpp). float64 always runs the scalar
// reference; it exists for verification, not speed.
//
// Conventions:
//  * all matrices are dense row-major
//  * forward kernels overwrite their output
//  * backward kernels accumulate (+=) into their gradient outputs, matching
//    how the tape merges gradients from multiple consumers
//  * the elementwise transcendentals (exp/tanh/gelu) use one shared polynomial
//    for float32, so scalar and AVX2 results are bit-identical; reductions
//    (gemm, softmax sums) differ only by summation order
namespace divot::kern {

// C[M,N] = A[M,K] * B[K,N], adding into C when acc is set.
void gemm_f32(const float* a, const float* b, float* c, int m, int n, int k, bool acc);
void gemm_f64(const double* a, const double* b, double* c, int m, int n, int k, bool acc);

// out[C,R] = in[R,C] transposed.
void transpose2d_f32(const float* in, float* out, int rows, int cols);
void transpose2d_f64(const double* in, double* out, int rows, int cols);

// Elementwise forward.
void vexp_f32(const float* x, float* y, int64_t n);
void vtanh_f32(const float* x, float* y, int64_t n);
void vgelu_f32(const float* x, float* y, int64_t n);
void vexp_f64(const double* x, double* y, int64_t n);
void vtanh_f64(const double* x, double* y, int64_t n);
void vgelu_f64(const double* x, double* y, int64_t n);

// Elementwise backward (dx += ...).
void tanh_bwd_f32(const float* y, const float* dy, float* dx, int64_t n);
void gelu_bwd_f32(const float* x, const float* dy, float* dx, int64_t n);
void tanh_bwd_f64(const double* y, const double* dy, double* dx, int64_t n);
void gelu_bwd_f64(const double* x, const double* dy, double* dx, int64_t n);

// Simple arithmetic.
void vadd_f32(const float* a, const float* b, float* y, int64_t n);
void vmul_f32(const float* a, const float* b, float* y, int64_t n);
void axpy_f32(float a, const float* x, float* y, int64_t n);  // y += a*x
void vadd_f64(const double* a, const double* b, double* y, int64_t n);
void vmul_f64(const double* a, const double* b, double* y, int64_t n);
void axpy_f64(double a, const double* x, double* y, int64_t n);

// Rows are independent; `cols` is the softmax axis.
void softmax_rows_f32(const float* x, float* y, int rows, int cols);
void softmax_rows_f64(const double* x, double* y, int rows, int cols);
// dx += y .* (dy - rowdot(dy, y))
void softmax_bwd_rows_f32(const float* y, const float* dy, float* dx, int rows, int cols);
void softmax_bwd_rows_f64(const double* y, const double* dy, double* dx, int rows, int cols);

void logsumexp_rows_f32(const float* x, float* out, int rows, int cols);
void logsumexp_rows_f64(const double* x, double* out, int rows, int cols);

// y = (x - mean)/sqrt(var + eps) * gamma + beta, per row; mean/rstd saved for backward.
void layernorm_rows_f32(const float* x, const float* gamma, const float* beta, float* y,
                        float* mean, float* rstd, int rows, int cols, float eps);
void layernorm_rows_f64(const double* x, const double* gamma, const double* beta, double* y,
                        double* mean, double* rstd, int rows, int cols, double eps);
void layernorm_bwd_rows_f32(const float* x, const float* gamma, const float* mean, const float* rstd,
                            const float* dy, float* dx, float* dgamma, float* dbeta, int rows, int cols);
void layernorm_bwd_rows_f64(const double* x, const double* gamma, const double* mean, const double* rstd,
                            const double* dy, double* dx, double* dgamma, double* dbeta, int rows, int cols);

// out[c] += sum_r x[r,c]  (reduction over leading axis, for bias/broadcast grads)
void colsum_acc_f32(const float* x, float* out, int64_t rows, int64_t cols);
void colsum_acc_f64(const double* x, double* out, int64_t rows, int64_t cols);

double reduce_sum_f32(const float* x, int64_t n);  // f64 accumulator, fixed order
double reduce_sum_f64(const double* x, int64_t n);

// Templated front-end so the autodiff tape can be generic over float/double.
template <typename T>
struct Kern;

template <>
struct Kern<float> {
  static void gemm(const float* a, const float* b, float* c, int m, int n, int k, bool acc) { gemm_f32(a, b, c, m, n, k, acc); }
  static void transpose2d(const float* in, float* out, int r, int c) { transpose2d_f32(in, out, r, c); }
  static void vexp(const float* x, float* y, int64_t n) { vexp_f32(x, y, n); }
  static void vtanh(const float* x, float* y, int64_t n) { vtanh_f32(x, y, n); }
  static void vgelu(const float* x, float* y, int64_t n) { vgelu_f32(x, y, n); }
  static void tanh_bwd(const float* y, const float* dy, float* dx, int64_t n) { tanh_bwd_f32(y, dy, dx, n); }
  static void gelu_bwd(const float* x, const float* dy, float* dx, int64_t n) { gelu_bwd_f32(x, dy, dx, n); }
  static void vadd(const float* a, const float* b, float* y, int64_t n) { vadd_f32(a, b, y, n); }
  static void vmul(const float* a, const float* b, float* y, int64_t n) { vmul_f32(a, b, y, n); }
  static void axpy(float a, const float* x, float* y, int64_t n) { axpy_f32(a, x, y, n); }
  static void softmax_rows(const float* x, float* y, int r, int c) { softmax_rows_f32(x, y, r, c); }
  static void softmax_bwd_rows(const float* y, const float* dy, float* dx, int r, int c) { softmax_bwd_rows_f32(y, dy, dx, r, c); }
  static void logsumexp_rows(const float* x, float* o, int r, int c) { logsumexp_rows_f32(x, o, r, c); }
  static void layernorm_rows(const float* x, const float* g, const float* b, float* y, float* mean, float* rstd, int r, int c, float eps) {
    layernorm_rows_f32(x, g, b, y, mean, rstd, r, c, eps);
  }
  static void layernorm_bwd_rows(const float* x, const float* g, const float* mean, const float* rstd, const float* dy, float* dx,
                                 float* dg, float* db, int r, int c) {
    layernorm_bwd_rows_f32(x, g, mean, rstd, dy, dx, dg, db, r, c);
  }
  static void colsum_acc(const float* x, float* o, int64_t r, int64_t c) { colsum_acc_f32(x, o, r, c); }
  static double reduce_sum(const float* x, int64_t n) { return reduce_sum_f32(x, n); }
};

template <>
struct Kern<double> {
  static void gemm(const double* a, const double* b, double* c, int m, int n, int k, bool acc) { gemm_f64(a, b, c, m, n, k, acc); }
  static void transpose2d(const double* in, double* out, int r, int c) { transpose2d_f64(in, out, r, c); }
  static void vexp(const double* x, double* y, int64_t n) { vexp_f64(x, y, n); }
  static void vtanh(const double* x, double* y, int64_t n) { vtanh_f64(x, y, n); }
  static void vgelu(const double* x, double* y, int64_t n) { vgelu_f64(x, y, n); }
  static void tanh_bwd(const double* y, const double* dy, double* dx, int64_t n) { tanh_bwd_f64(y, dy, dx, n); }
  static void gelu_bwd(const double* x, const double* dy, double* dx, int64_t n) { gelu_bwd_f64(x, dy, dx, n); }
  static void vadd(const double* a, const double* b, double* y, int64_t n) { vadd_f64(a, b, y, n); }
  static void vmul(const double* a, const double* b, double* y, int64_t n) { vmul_f64(a, b, y, n); }
  static void axpy(double a, const double* x, double* y, int64_t n) { axpy_f64(a, x, y, n); }
  static void softmax_rows(const double* x, double* y, int r, int c) { softmax_rows_f64(x, y, r, c); }
  static void softmax_bwd_rows(const double* y, const double* dy, double* dx, int r, int c) { softmax_bwd_rows_f64(y, dy, dx, r, c); }
  static void logsumexp_rows(const double* x, double* o, int r, int c) { logsumexp_rows_f64(x, o, r, c); }
  static void layernorm_rows(const double* x, const double* g, const double* b, double* y, double* mean, double* rstd, int r, int c, double eps) {
    layernorm_rows_f64(x, g, b, y, mean, rstd, r, c, eps);
  }
  static void layernorm_bwd_rows(const double* x, const double* g, const double* mean, const double* rstd, const double* dy, double* dx,
                                 double* dg, double* db, int r, int c) {
    layernorm_bwd_rows_f64(x, g, mean, rstd, dy, dx, dg, db, r, c);
  }
  static void colsum_acc(const double* x, double* o, int64_t r, int64_t c) { colsum_acc_f64(x, o, r, c); }
  static double reduce_sum(const double* x, int64_t n) { return reduce_sum_f64(x, n); }
};

}  // namespace divot::kern
