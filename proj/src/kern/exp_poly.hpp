#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>

// Shared float32 polynomial for exp/tanh/gelu (cephes-style expf) plus the
// scalar helpers built on it. The AVX2 kernels implement the same operation
// sequence with these constants, and both translation units are compiled with
// -ffp-contract=off, so scalar and AVX2 results are bit-identical lane for
// lane (the AVX2 remainder loops call these scalar helpers directly). Keep the
// two implementations in lockstep.
namespace divot::kern::detail {

inline constexpr float kExpHi = 88.3762626647949f;
inline constexpr float kExpLo = -87.3365478515625f;
inline constexpr float kLog2e = 1.44269504088896341f;
inline constexpr float kLn2Hi = 0.693359375f;
inline constexpr float kLn2Lo = -2.12194440e-4f;
inline constexpr float kExpP0 = 1.9875691500e-4f;
inline constexpr float kExpP1 = 1.3981999507e-3f;
inline constexpr float kExpP2 = 8.3334519073e-3f;
inline constexpr float kExpP3 = 4.1665795894e-2f;
inline constexpr float kExpP4 = 1.6666665459e-1f;
inline constexpr float kExpP5 = 5.0000001201e-1f;

// tanh saturates beyond this under the exp formula in float32.
inline constexpr float kTanhClamp = 9.0f;

// gelu(x) = 0.5 x (1 + tanh(x*(kGeluC + kGeluD*x^2))), tanh-approximation form.
inline constexpr float kGeluC = 0.79788456080286535588f;  // sqrt(2/pi)
inline constexpr float kGeluD = 0.035677408136300125f;    // 0.044715 * sqrt(2/pi)
inline constexpr float kGeluD3 = 0.10703222440890037f;    // 3 * kGeluD

inline float poly_expf(float x) {
  x = x < kExpLo ? kExpLo : (x > kExpHi ? kExpHi : x);
  const float nf = std::floor(x * kLog2e + 0.5f);
  float r = x - nf * kLn2Hi;
  r = r - nf * kLn2Lo;
  float y = kExpP0;
  y = y * r + kExpP1;
  y = y * r + kExpP2;
  y = y * r + kExpP3;
  y = y * r + kExpP4;
  y = y * r + kExpP5;
  y = y * (r * r) + r + 1.0f;
  const int n = static_cast<int>(nf);
  const uint32_t bits = static_cast<uint32_t>(n + 127) << 23;
  float scale;
  std::memcpy(&scale, &bits, sizeof scale);
  return y * scale;
}

inline float poly_tanhf(float x) {
  const float ax = std::fabs(x);
  const float z = ax > kTanhClamp ? kTanhClamp : ax;
  const float e = poly_expf(2.0f * z);
  const float t = 1.0f - 2.0f / (e + 1.0f);
  return x < 0.0f ? -t : t;
}

inline float poly_geluf(float x) {
  const float x2 = x * x;
  const float u = x * (kGeluC + kGeluD * x2);
  const float t = poly_tanhf(u);
  return 0.5f * x * (1.0f + t);
}

inline float poly_gelu_gradf(float x) {
  const float x2 = x * x;
  const float u = x * (kGeluC + kGeluD * x2);
  const float t = poly_tanhf(u);
  const float up = kGeluC + kGeluD3 * x2;
  return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * up;
}

}  // namespace divot::kern::detail
