#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "divot/param.hpp"

namespace divot::nn {

// AdamW with decoupled weight decay, linear warmup and global grad-norm
// clipping. Updates walk parameters in registration order with fixed-order
// arithmetic, so training is bit-reproducible for a given seed and config.
template <typename T>
class AdamW {
public:
  struct Config {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double clip = 1.0;  // global L2 norm ceiling; <= 0 disables
    int warmup = 0;     // steps of linear lr ramp
  };

  explicit AdamW(Config cfg = {}) : cfg_(cfg) {}

  const Config& config() const { return cfg_; }
  int64_t steps_taken() const { return t_; }

  // Effective learning rate for the step about to be applied.
  double current_lr() const {
    const int64_t next = t_ + 1;
    if (cfg_.warmup > 0 && next <= cfg_.warmup) return cfg_.lr * static_cast<double>(next) / cfg_.warmup;
    return cfg_.lr;
  }

  // Applies one update from the gradients currently held in the params.
  // Returns the pre-clip global gradient norm.
  double step(const std::vector<ad::Param<T>*>& params) {
    double sq = 0.0;
    for (const auto* p : params)
      for (const T g : p->grad) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    double scale = 1.0;
    if (cfg_.clip > 0.0 && norm > cfg_.clip) scale = cfg_.clip / norm;

    const double lr = current_lr();
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));

    for (auto* p : params) {
      if (p->m.empty()) {
        p->m.assign(p->count(), T(0));
        p->v.assign(p->count(), T(0));
      }
      const double wd = p->decay ? cfg_.weight_decay : 0.0;
      const int64_t n = p->count();
      for (int64_t i = 0; i < n; ++i) {
        const double g = static_cast<double>(p->grad[i]) * scale;
        const double m = cfg_.beta1 * static_cast<double>(p->m[i]) + (1.0 - cfg_.beta1) * g;
        const double v = cfg_.beta2 * static_cast<double>(p->v[i]) + (1.0 - cfg_.beta2) * g * g;
        p->m[i] = static_cast<T>(m);
        p->v[i] = static_cast<T>(v);
        const double update = (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps) + wd * static_cast<double>(p->value[i]);
        p->value[i] = static_cast<T>(static_cast<double>(p->value[i]) - lr * update);
      }
    }
    return norm;
  }

private:
  Config cfg_;
  int64_t t_ = 0;
};

}  // namespace divot::nn
