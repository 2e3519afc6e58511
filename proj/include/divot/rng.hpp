#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <string_view>

namespace divot::kern {

// Deterministic, splittable RNG (xoshiro256++ seeded via splitmix64).
// std::mt19937 + std::normal_distribution would tie byte-level reproducibility
// to the standard library implementation, so the generator and the normal
// transform are pinned here instead.
class Rng {
public:
  explicit Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& w : s_) w = splitmix(x);
  }

  // Derives an independent stream from (seed, tag, indices...). Used to give
  // every clip / step / draw its own generator so corpus shards, training and
  // sampling stay reproducible regardless of evaluation order.
  static Rng stream(uint64_t seed, std::string_view tag, std::initializer_list<uint64_t> path = {}) {
    uint64_t h = seed ^ 0x9e3779b97f4a7c15ull;
    for (char c : tag) {
      h ^= static_cast<uint64_t>(static_cast<unsigned char>(c));
      h = splitmix(h);
    }
    for (uint64_t p : path) {
      h ^= p;
      h = splitmix(h);
    }
    return Rng(h);
  }

  uint64_t u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }
  float uniformf() { return static_cast<float>(u64() >> 40) * 0x1.0p-24f; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  int uniform_int(int n) { return static_cast<int>(u64() % static_cast<uint64_t>(n)); }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller; the second draw of each pair is cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1], keeps log() finite
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double th = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(th);
    have_spare_ = true;
    return r * std::cos(th);
  }

  float normalf() { return static_cast<float>(normal()); }

private:
  static constexpr uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  static uint64_t splitmix(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  uint64_t s_[4];
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace divot::kern
