#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "divot/isa.hpp"
#include "divot/kernels.hpp"
#include "divot/rng.hpp"
#include "divot/threads.hpp"

using namespace divot::kern;

namespace {

std::vector<float> randn(int64_t n, uint64_t seed, float scale = 1.0f) {
  Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = rng.normalf() * scale;
  return v;
}

// Max |a-b| normalized by the largest magnitude in either array; random sums
// can land near zero, so a plain per-element relative metric is meaningless.
double max_scaled_err(const std::vector<float>& a, const std::vector<float>& b) {
  REQUIRE(a.size() == b.size());
  double diff = 0.0, scale = 1.0;
  for (size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::fabs(double(a[i]) - double(b[i])));
    scale = std::max({scale, std::fabs(double(a[i])), std::fabs(double(b[i]))});
  }
  return diff / scale;
}

bool have_both_isas() { return cpu_has_avx2_fma(); }

// Runs fn under both ISAs and returns the two outputs.
template <typename Fn>
std::pair<std::vector<float>, std::vector<float>> run_both(int64_t out_n, Fn&& fn) {
  std::vector<float> ya(out_n, 0.0f), yb(out_n, 0.0f);
  force_isa(Isa::scalar);
  fn(ya);
  force_isa(Isa::avx2);
  fn(yb);
  force_isa(cpu_has_avx2_fma() ? Isa::avx2 : Isa::scalar);
  return {ya, yb};
}

}  // namespace

TEST_CASE("exp/tanh/gelu: scalar matches a plain double reference") {
  Rng rng(7);
  std::vector<float> xs(20000);
  for (size_t i = 0; i < xs.size(); ++i) xs[i] = float(rng.uniform(-80.0, 80.0));
  xs.push_back(0.0f);
  xs.push_back(-0.0f);
  xs.push_back(1.0f);
  std::vector<float> y(xs.size());
  force_isa(Isa::scalar);
  vexp_f32(xs.data(), y.data(), xs.size());
  for (size_t i = 0; i < xs.size(); ++i) {
    const double ref = std::exp(double(xs[i]));
    CHECK(std::fabs(y[i] - ref) / ref < 5e-7);
  }
  // tanh and gelu over a narrower, non-saturated range
  for (size_t i = 0; i < xs.size(); ++i) xs[i] = float(rng.uniform(-6.0, 6.0));
  vtanh_f32(xs.data(), y.data(), xs.size());
  for (size_t i = 0; i < xs.size(); ++i) {
    CHECK(std::fabs(y[i] - std::tanh(double(xs[i]))) < 1e-6);
  }
  vgelu_f32(xs.data(), y.data(), xs.size());
  for (size_t i = 0; i < xs.size(); ++i) {
    const double x = xs[i];
    const double u = x * (0.7978845608028654 + 0.03567740813630013 * x * x);
    const double ref = 0.5 * x * (1.0 + std::tanh(u));
    CHECK(std::fabs(y[i] - ref) < 1e-6);
  }
  force_isa(cpu_has_avx2_fma() ? Isa::avx2 : Isa::scalar);
}

TEST_CASE("elementwise kernels: scalar and AVX2 agree bit for bit") {
  if (!have_both_isas()) return;
  const int64_t n = 4099;  // odd length exercises the remainder loop
  const auto x = randn(n, 11, 3.0f);
  for (auto fn : {vexp_f32, vtanh_f32, vgelu_f32}) {
    auto [ya, yb] = run_both(n, [&](std::vector<float>& y) { fn(x.data(), y.data(), n); });
    CHECK(std::memcmp(ya.data(), yb.data(), n * sizeof(float)) == 0);
  }
  const auto y0 = randn(n, 12);
  const auto dy = randn(n, 13);
  {
    auto [ya, yb] = run_both(n, [&](std::vector<float>& dx) { tanh_bwd_f32(y0.data(), dy.data(), dx.data(), n); });
    CHECK(std::memcmp(ya.data(), yb.data(), n * sizeof(float)) == 0);
  }
  {
    auto [ya, yb] = run_both(n, [&](std::vector<float>& dx) { gelu_bwd_f32(x.data(), dy.data(), dx.data(), n); });
    CHECK(std::memcmp(ya.data(), yb.data(), n * sizeof(float)) == 0);
  }
}

TEST_CASE("gemm: AVX2 matches scalar reference within accumulation tolerance") {
  if (!have_both_isas()) return;
  for (auto [m, n, k] : {std::tuple{64, 64, 64}, {7, 17, 13}, {1, 16, 1}, {129, 33, 65}, {256, 384, 128}}) {
    const auto a = randn(int64_t(m) * k, 21);
    const auto b = randn(int64_t(k) * n, 22);
    auto [ca, cb] = run_both(int64_t(m) * n, [&](std::vector<float>& c) { gemm_f32(a.data(), b.data(), c.data(), m, n, k, false); });
    CHECK(max_scaled_err(ca, cb) < 1e-5);
    // accumulate variant
    auto [da, db] = run_both(int64_t(m) * n, [&](std::vector<float>& c) {
      std::fill(c.begin(), c.end(), 1.0f);
      gemm_f32(a.data(), b.data(), c.data(), m, n, k, true);
    });
    CHECK(max_scaled_err(da, db) < 1e-5);
  }
}

TEST_CASE("gemm: matches a double-precision naive product") {
  const int m = 23, n = 31, k = 41;
  const auto a = randn(int64_t(m) * k, 31);
  const auto b = randn(int64_t(k) * n, 32);
  std::vector<float> c(int64_t(m) * n);
  gemm_f32(a.data(), b.data(), c.data(), m, n, k, false);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int kk = 0; kk < k; ++kk) s += double(a[i * k + kk]) * double(b[kk * n + j]);
      CHECK(std::fabs(c[i * n + j] - s) < 1e-4);
    }
}

TEST_CASE("gemm f64 matches naive") {
  const int m = 9, n = 14, k = 17;
  Rng rng(44);
  std::vector<double> a(m * k), b(k * n), c(m * n);
  for (auto& v : a) v = rng.normal();
  for (auto& v : b) v = rng.normal();
  gemm_f64(a.data(), b.data(), c.data(), m, n, k, false);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int kk = 0; kk < k; ++kk) s += a[i * k + kk] * b[kk * n + j];
      CHECK(c[i * n + j] == doctest::Approx(s).epsilon(1e-12));
    }
}

TEST_CASE("softmax/logsumexp/layernorm: ISA equivalence and correctness") {
  const int rows = 33, cols = 67;
  const auto x = randn(int64_t(rows) * cols, 51, 2.0f);
  std::vector<float> y(x.size());
  softmax_rows_f32(x.data(), y.data(), rows, cols);
  for (int r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int c = 0; c < cols; ++c) {
      CHECK(y[r * cols + c] >= 0.0f);
      s += y[r * cols + c];
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
  }
  if (have_both_isas()) {
    auto [ya, yb] = run_both(x.size(), [&](std::vector<float>& out) { softmax_rows_f32(x.data(), out.data(), rows, cols); });
    CHECK(max_scaled_err(ya, yb) < 1e-5);

    const auto dy = randn(x.size(), 52);
    auto [da, db] = run_both(x.size(), [&](std::vector<float>& dx) { softmax_bwd_rows_f32(ya.data(), dy.data(), dx.data(), rows, cols); });
    CHECK(max_scaled_err(da, db) < 1e-5);

    auto [la, lb] = run_both(rows, [&](std::vector<float>& out) { logsumexp_rows_f32(x.data(), out.data(), rows, cols); });
    CHECK(max_scaled_err(la, lb) < 1e-5);
  }
  // logsumexp against double reference
  std::vector<float> lse(rows);
  logsumexp_rows_f32(x.data(), lse.data(), rows, cols);
  for (int r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int c = 0; c < cols; ++c) s += std::exp(double(x[r * cols + c]));
    CHECK(lse[r] == doctest::Approx(std::log(s)).epsilon(1e-5));
  }
}

TEST_CASE("layernorm: unit gamma produces zero-mean unit-variance rows") {
  const int rows = 19, cols = 48;
  const auto x = randn(int64_t(rows) * cols, 61, 4.0f);
  std::vector<float> gamma(cols, 1.0f), beta(cols, 0.0f), y(x.size()), mean(rows), rstd(rows);
  layernorm_rows_f32(x.data(), gamma.data(), beta.data(), y.data(), mean.data(), rstd.data(), rows, cols, 1e-5f);
  for (int r = 0; r < rows; ++r) {
    double mu = 0.0, var = 0.0;
    for (int c = 0; c < cols; ++c) mu += y[r * cols + c];
    mu /= cols;
    for (int c = 0; c < cols; ++c) var += (y[r * cols + c] - mu) * (y[r * cols + c] - mu);
    var /= cols;
    CHECK(std::fabs(mu) < 1e-5);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }
  if (have_both_isas()) {
    auto [ya, yb] = run_both(x.size(), [&](std::vector<float>& out) {
      std::vector<float> mu(rows), rs(rows);
      layernorm_rows_f32(x.data(), gamma.data(), beta.data(), out.data(), mu.data(), rs.data(), rows, cols, 1e-5f);
    });
    CHECK(max_scaled_err(ya, yb) < 1e-5);
    const auto dy = randn(x.size(), 62);
    auto [da, db] = run_both(x.size(), [&](std::vector<float>& dx) {
      std::vector<float> dg(cols, 0.0f), dbta(cols, 0.0f);
      layernorm_bwd_rows_f32(x.data(), gamma.data(), mean.data(), rstd.data(), dy.data(), dx.data(), dg.data(), dbta.data(), rows, cols);
    });
    CHECK(max_scaled_err(da, db) < 2e-5);
  }
}

TEST_CASE("parallel_for covers every index exactly once, any grain") {
  for (int64_t grain : {1, 3, 64, 1000}) {
    const int64_t n = 997;
    std::vector<int> hits(n, 0);
    parallel_for(n, grain, [&](int64_t b, int64_t e) {
      for (int64_t i = b; i < e; ++i) hits[i]++;
    });
    for (int64_t i = 0; i < n; ++i) CHECK(hits[i] == 1);
  }
}

TEST_CASE("rng: deterministic, splittable, sane normal moments") {
  Rng a = Rng::stream(123, "unit", {5});
  Rng b = Rng::stream(123, "unit", {5});
  for (int i = 0; i < 100; ++i) CHECK(a.u64() == b.u64());

  Rng c = Rng::stream(123, "unit", {6});
  bool same = true;
  Rng a2 = Rng::stream(123, "unit", {5});
  for (int i = 0; i < 16; ++i) same = same && (a2.u64() == c.u64());
  CHECK_FALSE(same);

  Rng n(99);
  double mu = 0.0, m2 = 0.0;
  const int cnt = 200000;
  for (int i = 0; i < cnt; ++i) {
    const double z = n.normal();
    mu += z;
    m2 += z * z;
  }
  mu /= cnt;
  m2 /= cnt;
  CHECK(std::fabs(mu) < 0.01);
  CHECK(m2 == doctest::Approx(1.0).epsilon(0.02));

  Rng u(7);
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform();
    CHECK(v >= 0.0);
    CHECK(v < 1.0);
  }
}
