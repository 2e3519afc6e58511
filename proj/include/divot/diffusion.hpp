#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "divot/errors.hpp"
#include "divot/rng.hpp"
#include "divot/tape.hpp"

// DDPM machinery shared by the clip de-tokenizer and the diffusion generation
// head: the noise schedule, the forward (noising) closed form, epsilon- and
// v-prediction training targets, classifier-free guidance, and the ancestral
// sampler that walks the schedule back down.

namespace divot::diff {

using ad::Ref;
using ad::Tape;
using kern::Rng;

// Variance schedule over T steps plus the cumulative products the closed
// forms need. Timesteps are 1-based: t in [1, T].
//
// Betas follow the scaled-linear convention, beta_t = linspace(s*1e-4,
// s*0.02, T) with s = 1000/T, so the endpoints of the cumulative schedule
// stay put when T changes: alpha_bar_1 > 0.99 (first step nearly clean) and
// alpha_bar_T < 0.01 (last step nearly pure noise). Both bounds are asserted
// at construction.
struct NoiseSchedule {
  explicit NoiseSchedule(int timesteps = 200);

  int T = 0;
  std::vector<float> betas;       // [T], betas[t-1] is beta_t
  std::vector<float> alpha_bars;  // [T], alpha_bars[t-1] is that cumulative product

  float beta(int t) const { return betas[check_t(t) - 1]; }
  float alpha_bar(int t) const { return alpha_bars[check_t(t) - 1]; }
  float alpha_bar_prev(int t) const { return check_t(t) == 1 ? 1.0f : alpha_bars[t - 2]; }

 private:
  int check_t(int t) const {
    if (t < 1 || t > T) fail_runtime("diffusion: timestep " + std::to_string(t) + " outside [1," + std::to_string(T) + "]");
    return t;
  }
};

// Which quantity a trained denoiser predicts. Recorded in checkpoints so a
// sampler can never be driven with the wrong conversion.
enum class PredMode : int { eps_pred = 0, v_pred = 1 };

const char* pred_mode_name(PredMode m);
PredMode pred_mode_from_name(const std::string& name);

// ---- closed forms on plain buffers (sampler + oracles) ----

// x_t = sqrt(abar)*x0 + sqrt(1-abar)*eps
void forward_diffuse(const float* x0, const float* eps, int n, float abar, float* xt);
// v = sqrt(abar)*eps - sqrt(1-abar)*x0
void v_target(const float* x0, const float* eps, int n, float abar, float* v);
// invert the v parameterization given the noised point
void eps_from_v(const float* xt, const float* v, int n, float abar, float* eps);
void x0_from_v(const float* xt, const float* v, int n, float abar, float* x0);

// guided = uncond + w*(cond - uncond); w=0 and w=1 copy the respective input
// bit-exactly rather than taking the arithmetic detour.
void cfg_combine(const float* uncond, const float* cond, int n, float w, float* out);

// ---- training-loss builders on the tape ----

// Noised sample as a differentiable expression of x0 and eps.
template <typename T>
Ref<T> forward_diffuse(Tape<T>& tape, Ref<T> x0, Ref<T> eps, T abar) {
  return tape.add(tape.scale(x0, std::sqrt(abar)), tape.scale(eps, std::sqrt(T(1) - abar)));
}

// MSE between the denoiser's prediction and the mode's target. x0 and eps may
// themselves be differentiable (the de-tokenizer backpropagates into x0's
// conditioning path only through pred, but the generality costs nothing).
template <typename T>
Ref<T> diffusion_loss(Tape<T>& tape, Ref<T> pred, Ref<T> x0, Ref<T> eps, T abar, PredMode mode) {
  if (pred.shape() != x0.shape() || pred.shape() != eps.shape())
    fail_runtime("diffusion: prediction shape " + ad::shape_str(pred.shape()) + " does not match data shape " +
                 ad::shape_str(x0.shape()));
  Ref<T> target = mode == PredMode::eps_pred
                      ? eps
                      : tape.sub(tape.scale(eps, std::sqrt(abar)), tape.scale(x0, std::sqrt(T(1) - abar)));
  const Ref<T> diff = tape.sub(pred, target);
  return tape.mean(tape.mul(diff, diff));
}

// ---- ancestral sampling ----

// Denoiser callback for sampling: reads x_t [B, D] plus the timestep and
// writes the prediction (same layout). `use_null_cond` selects the learned
// null conditioning; the sampler only raises it when guidance actually needs
// the unconditional branch.
using DenoiseFn = std::function<void(const float* x_t, int batch, int t, bool use_null_cond, float* pred)>;

struct SampleConfig {
  PredMode mode = PredMode::eps_pred;
  float guidance = 1.0f;  // w; 1 = conditional only, 0 = unconditional only
  uint64_t seed = 0;
};

// DDPM ancestral sampling from pure noise down to an x0 estimate. out is
// [batch, dim]; deterministic for a fixed (seed, schedule, denoiser).
void sample(const DenoiseFn& denoise, int batch, int dim, const NoiseSchedule& sched, const SampleConfig& cfg, float* out);

}  // namespace divot::diff
