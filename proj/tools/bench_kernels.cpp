// Microbenchmark for the kernel layer. Prints GF/s (or GB/s-ish element
// throughput) per routine and ISA so training budgets can be sized.
#include <chrono>
#include <cstdio>
#include <vector>

#include "divot/isa.hpp"
#include "divot/kernels.hpp"
#include "divot/rng.hpp"

using namespace divot::kern;

namespace {

double now_s() {
  using clk = std::chrono::steady_clock;
  return std::chrono::duration<double>(clk::now().time_since_epoch()).count();
}

std::vector<float> randf(int64_t n, uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = rng.normalf();
  return v;
}

void bench_gemm(int m, int n, int k) {
  const auto a = randf(int64_t(m) * k, 1), b = randf(int64_t(k) * n, 2);
  std::vector<float> c(int64_t(m) * n);
  const double flops = 2.0 * m * n * k;
  gemm_f32(a.data(), b.data(), c.data(), m, n, k, false);  // warm
  int iters = std::max(1, static_cast<int>(2e9 / flops));
  const double t0 = now_s();
  for (int i = 0; i < iters; ++i) gemm_f32(a.data(), b.data(), c.data(), m, n, k, false);
  const double dt = now_s() - t0;
  std::printf("  gemm %5dx%4dx%4d  %7.2f GF/s  (%.3f ms/call)\n", m, n, k, flops * iters / dt / 1e9, dt / iters * 1e3);
}

void bench_elem(const char* name, void (*fn)(const float*, float*, int64_t), int64_t n) {
  const auto x = randf(n, 3);
  std::vector<float> y(n);
  fn(x.data(), y.data(), n);
  const int iters = 200;
  const double t0 = now_s();
  for (int i = 0; i < iters; ++i) fn(x.data(), y.data(), n);
  const double dt = now_s() - t0;
  std::printf("  %-6s n=%lld  %7.2f Gelem/s\n", name, static_cast<long long>(n), n * double(iters) / dt / 1e9);
}

void bench_softmax(int rows, int cols) {
  const auto x = randf(int64_t(rows) * cols, 4);
  std::vector<float> y(int64_t(rows) * cols);
  softmax_rows_f32(x.data(), y.data(), rows, cols);
  const int iters = 200;
  const double t0 = now_s();
  for (int i = 0; i < iters; ++i) softmax_rows_f32(x.data(), y.data(), rows, cols);
  const double dt = now_s() - t0;
  std::printf("  softmax %dx%d  %7.2f Gelem/s\n", rows, cols, double(rows) * cols * iters / dt / 1e9);
}

void run_suite() {
  std::printf("isa: %s\n", isa_name(active_isa()));
  bench_gemm(8192, 384, 128);
  bench_gemm(8192, 128, 128);
  bench_gemm(1024, 384, 128);
  bench_gemm(1024, 512, 128);
  bench_gemm(320, 384, 128);
  bench_gemm(64, 4112, 256);
  bench_gemm(256, 256, 256);
  bench_elem("exp", vexp_f32, 1 << 20);
  bench_elem("tanh", vtanh_f32, 1 << 20);
  bench_elem("gelu", vgelu_f32, 1 << 20);
  bench_softmax(8192, 64);
  bench_softmax(4096, 1024);
}

}  // namespace

int main() {
  run_suite();
  if (active_isa() == Isa::avx2) {
    force_isa(Isa::scalar);
    run_suite();
  }
  return 0;
}
