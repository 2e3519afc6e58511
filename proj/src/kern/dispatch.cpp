#include <cstdlib>
#include <mutex>
#include <string>

#include "divot/errors.hpp"
#include "divot/isa.hpp"
#include "divot/kernels.hpp"
#include "table.hpp"

namespace divot::kern {
namespace {

const detail::F32Table* g_table = nullptr;
Isa g_isa = Isa::scalar;
std::once_flag g_once;

void select_from_env() {
  Isa want = cpu_has_avx2_fma() ? Isa::avx2 : Isa::scalar;
  if (const char* env = std::getenv("DIVOTLAB_KERNELS")) {
    const std::string v(env);
    if (v == "scalar") {
      want = Isa::scalar;
    } else if (v == "avx2") {
      if (!cpu_has_avx2_fma()) fail_config("DIVOTLAB_KERNELS=avx2 but the CPU lacks AVX2+FMA");
      want = Isa::avx2;
    } else if (v != "auto" && !v.empty()) {
      fail_config("DIVOTLAB_KERNELS must be auto|scalar|avx2, got '" + v + "'");
    }
  }
  g_isa = want;
  g_table = want == Isa::avx2 ? &detail::kAvx2Table : &detail::kScalarTable;
}

const detail::F32Table& table() {
  std::call_once(g_once, select_from_env);
  return *g_table;
}

}  // namespace

bool cpu_has_avx2_fma() { return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma"); }

Isa active_isa() {
  table();
  return g_isa;
}

const char* isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

void force_isa(Isa isa) {
  table();  // ensure one-time init already ran
  if (isa == Isa::avx2 && !cpu_has_avx2_fma()) fail_config("force_isa(avx2): CPU lacks AVX2+FMA");
  g_isa = isa;
  g_table = isa == Isa::avx2 ? &detail::kAvx2Table : &detail::kScalarTable;
}

void gemm_f32(const float* a, const float* b, float* c, int m, int n, int k, bool acc) { table().gemm(a, b, c, m, n, k, acc); }
void vexp_f32(const float* x, float* y, int64_t n) { table().vexp(x, y, n); }
void vtanh_f32(const float* x, float* y, int64_t n) { table().vtanh(x, y, n); }
void vgelu_f32(const float* x, float* y, int64_t n) { table().vgelu(x, y, n); }
void tanh_bwd_f32(const float* y, const float* dy, float* dx, int64_t n) { table().tanh_bwd(y, dy, dx, n); }
void gelu_bwd_f32(const float* x, const float* dy, float* dx, int64_t n) { table().gelu_bwd(x, dy, dx, n); }
void vadd_f32(const float* a, const float* b, float* y, int64_t n) { table().vadd(a, b, y, n); }
void vmul_f32(const float* a, const float* b, float* y, int64_t n) { table().vmul(a, b, y, n); }
void axpy_f32(float a, const float* x, float* y, int64_t n) { table().axpy(a, x, y, n); }
void softmax_rows_f32(const float* x, float* y, int r, int c) { table().softmax_rows(x, y, r, c); }
void softmax_bwd_rows_f32(const float* y, const float* dy, float* dx, int r, int c) { table().softmax_bwd_rows(y, dy, dx, r, c); }
void logsumexp_rows_f32(const float* x, float* o, int r, int c) { table().logsumexp_rows(x, o, r, c); }
void layernorm_rows_f32(const float* x, const float* g, const float* b, float* y, float* mean, float* rstd, int r, int c, float eps) {
  table().layernorm_rows(x, g, b, y, mean, rstd, r, c, eps);
}
void layernorm_bwd_rows_f32(const float* x, const float* g, const float* mean, const float* rstd, const float* dy, float* dx, float* dg,
                            float* db, int r, int c) {
  table().layernorm_bwd_rows(x, g, mean, rstd, dy, dx, dg, db, r, c);
}

}  // namespace divot::kern
