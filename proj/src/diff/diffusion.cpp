#include <cmath>
#include <cstring>

#include "divot/diffusion.hpp"
#include "divot/errors.hpp"

namespace divot::diff {

NoiseSchedule::NoiseSchedule(int timesteps) : T(timesteps) {
  if (T < 2) fail_config("diffusion: schedule needs at least 2 timesteps");
  betas.resize(T);
  alpha_bars.resize(T);
  const double s = 1000.0 / T;
  const double b0 = s * 1e-4, b1 = s * 0.02;
  double abar = 1.0;
  for (int i = 0; i < T; ++i) {
    const double beta = b0 + (b1 - b0) * (T == 1 ? 0.0 : static_cast<double>(i) / (T - 1));
    if (beta <= 0.0 || beta >= 1.0) fail_config("diffusion: beta outside (0,1); lower T");
    abar *= 1.0 - beta;
    betas[i] = static_cast<float>(beta);
    alpha_bars[i] = static_cast<float>(abar);
  }
  for (int i = 1; i < T; ++i)
    if (!(alpha_bars[i] < alpha_bars[i - 1])) fail_config("diffusion: alpha_bar not strictly decreasing");
  if (!(alpha_bars[0] > 0.99f)) fail_config("diffusion: alpha_bar_1 must exceed 0.99 (first step too noisy)");
  if (!(alpha_bars[T - 1] < 0.01f)) fail_config("diffusion: alpha_bar_T must fall below 0.01 (schedule too short)");
}

const char* pred_mode_name(PredMode m) { return m == PredMode::eps_pred ? "eps_pred" : "v_pred"; }

PredMode pred_mode_from_name(const std::string& name) {
  if (name == "eps_pred") return PredMode::eps_pred;
  if (name == "v_pred") return PredMode::v_pred;
  fail_runtime("diffusion: unknown prediction mode: " + name);
}

void forward_diffuse(const float* x0, const float* eps, int n, float abar, float* xt) {
  const float a = std::sqrt(abar), b = std::sqrt(1.0f - abar);
  for (int i = 0; i < n; ++i) xt[i] = a * x0[i] + b * eps[i];
}

void v_target(const float* x0, const float* eps, int n, float abar, float* v) {
  const float a = std::sqrt(abar), b = std::sqrt(1.0f - abar);
  for (int i = 0; i < n; ++i) v[i] = a * eps[i] - b * x0[i];
}

void eps_from_v(const float* xt, const float* v, int n, float abar, float* eps) {
  const float a = std::sqrt(abar), b = std::sqrt(1.0f - abar);
  for (int i = 0; i < n; ++i) eps[i] = b * xt[i] + a * v[i];
}

void x0_from_v(const float* xt, const float* v, int n, float abar, float* x0) {
  const float a = std::sqrt(abar), b = std::sqrt(1.0f - abar);
  for (int i = 0; i < n; ++i) x0[i] = a * xt[i] - b * v[i];
}

void cfg_combine(const float* uncond, const float* cond, int n, float w, float* out) {
  if (w == 0.0f) {
    if (out != uncond) std::memcpy(out, uncond, sizeof(float) * n);
    return;
  }
  if (w == 1.0f) {
    if (out != cond) std::memcpy(out, cond, sizeof(float) * n);
    return;
  }
  for (int i = 0; i < n; ++i) out[i] = uncond[i] + w * (cond[i] - uncond[i]);
}

void sample(const DenoiseFn& denoise, int batch, int dim, const NoiseSchedule& sched, const SampleConfig& cfg, float* out) {
  if (batch <= 0 || dim <= 0) fail_runtime("diffusion: sample needs a positive batch and dimension");
  if (cfg.guidance < 0.0f) fail_runtime("diffusion: guidance weight must be non-negative");
  const int n = batch * dim;
  auto rng = Rng::stream(cfg.seed, "ancestral");
  std::vector<float> x(n), pred(n), pred_null(n), eps_hat(n);
  for (float& v : x) v = rng.normalf();

  const bool need_cond = cfg.guidance != 0.0f;
  const bool need_null = cfg.guidance != 1.0f;
  for (int t = sched.T; t >= 1; --t) {
    if (need_cond) denoise(x.data(), batch, t, /*use_null_cond=*/false, pred.data());
    if (need_null) denoise(x.data(), batch, t, /*use_null_cond=*/true, pred_null.data());
    if (need_cond && need_null)
      cfg_combine(pred_null.data(), pred.data(), n, cfg.guidance, pred.data());
    else if (!need_cond)
      pred.swap(pred_null);

    if (cfg.mode == PredMode::v_pred)
      eps_from_v(x.data(), pred.data(), n, sched.alpha_bar(t), eps_hat.data());
    else
      std::memcpy(eps_hat.data(), pred.data(), sizeof(float) * n);

    const float beta = sched.beta(t);
    const float abar = sched.alpha_bar(t);
    const float abar_prev = sched.alpha_bar_prev(t);
    const float inv_sqrt_alpha = 1.0f / std::sqrt(1.0f - beta);
    const float eps_coef = beta / std::sqrt(1.0f - abar);
    for (int i = 0; i < n; ++i) x[i] = inv_sqrt_alpha * (x[i] - eps_coef * eps_hat[i]);
    if (t > 1) {
      const float sigma = std::sqrt(beta * (1.0f - abar_prev) / (1.0f - abar));
      for (int i = 0; i < n; ++i) x[i] += sigma * rng.normalf();
    }
  }
  std::memcpy(out, x.data(), sizeof(float) * n);
}

}  // namespace divot::diff
