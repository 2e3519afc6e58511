#pragma once
// Continuous-token generative heads. Each head maps an LM output vector to a
// training loss against target video tokens and to a sampling procedure:
//   - MseHead:       two-layer regression, squared-error loss.
//   - DiffusionHead: small conditional denoiser trained with the shared
//                    diffusion objective and sampled ancestrally.
//   - GmmHead:       mixture-density head predicting 2kd + k parameters per
//                    token (diagonal Gaussians), trained by NLL.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "divot/diffusion.hpp"
#include "divot/errors.hpp"
#include "divot/nn.hpp"

namespace divot::nn {

inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 5.0;
inline constexpr double kLn2Pi = 1.8378770664093455;

// ---------------------------------------------------------------------------
// Buffer-level reference ops (defined in heads.cpp).

// Negative log-likelihood of x [d] under a diagonal-Gaussian mixture,
// evaluated in double precision via log-sum-exp. Throws on non-finite input.
double gmm_nll_value(int k, int d, const double* means, const double* log_vars,
                     const double* logits, const double* x);

// Draw one vector from the mixture: categorical pick over softmax(logits),
// then a Gaussian draw whose standard deviation is scaled by `temperature`.
// Consumes exactly 1 + d variates from `rng`, so the component choice is
// unchanged by temperature.
void gmm_sample_row(int k, int d, const float* means, const float* log_vars,
                    const float* logits, kern::Rng& rng, float temperature, float* out);
void gmm_sample_row(int k, int d, const float* means, const float* log_vars,
                    const float* logits, uint64_t seed, float temperature, float* out);

// ---------------------------------------------------------------------------

// Mixture parameters for a batch of token rows.
template <typename T>
struct GmmParams {
  Ref<T> means;     // [B, k, d]
  Ref<T> log_vars;  // [B, k, d], clamped to [kLogVarMin, kLogVarMax]
  Ref<T> logits;    // [B, k]
  int k = 0;
  int d = 0;
};

// Mean squared error between two equally shaped tensors.
template <typename T>
Ref<T> mse_loss(Tape<T>& t, Ref<T> pred, Ref<T> target) {
  if (pred.shape() != target.shape())
    fail_runtime("mse loss: shape mismatch " + ad::shape_str(pred.shape()) + " vs " +
                 ad::shape_str(target.shape()));
  Ref<T> diff = t.sub(pred, target);
  return t.mean(t.mul(diff, diff));
}

// Noise the target token, run any denoiser on it, and score the prediction
// with the shared diffusion objective.
template <typename T, typename PredFn>
Ref<T> diffusion_head_loss(Tape<T>& t, PredFn&& pred_fn, Ref<T> x0, const diff::NoiseSchedule& sched,
                           int timestep, Ref<T> eps, diff::PredMode mode) {
  const T abar = static_cast<T>(sched.alpha_bar(timestep));
  Ref<T> xt = diff::forward_diffuse(t, x0, eps, abar);
  Ref<T> pred = pred_fn(t, xt, timestep);
  return diff::diffusion_loss(t, pred, x0, eps, abar, mode);
}

// ---------------------------------------------------------------------------

template <typename T>
class MseHead {
 public:
  struct Config {
    int lm_dim = 256;
    int token_dim = 128;
    int hidden = 256;
    uint64_t seed = 4;
    void validate() const {
      if (lm_dim < 1 || token_dim < 1 || hidden < 1) fail_config("mse head: dims must be positive");
    }
  };

  explicit MseHead(Config cfg = {}) : cfg_(cfg) {
    cfg_.validate();
    fc1_ = Linear<T>(ps_, "mse.fc1", cfg_.lm_dim, cfg_.hidden, cfg_.seed);
    fc2_ = Linear<T>(ps_, "mse.fc2", cfg_.hidden, cfg_.token_dim, cfg_.seed);
  }

  const Config& config() const { return cfg_; }
  ParamStore<T>& params() { return ps_; }

  // h: [B, lm_dim] -> predicted tokens [B, token_dim].
  Ref<T> predict(Tape<T>& t, Ref<T> h) const {
    check_rows(h);
    return fc2_(t, t.gelu(fc1_(t, h)));
  }

  Ref<T> loss(Tape<T>& t, Ref<T> h, Ref<T> target) const {
    return mse_loss(t, predict(t, h), target);
  }

 private:
  void check_rows(Ref<T> h) const {
    if (h.rank() != 2 || h.dim(1) != cfg_.lm_dim)
      fail_runtime("mse head: expected [B," + std::to_string(cfg_.lm_dim) + "], got " +
                   ad::shape_str(h.shape()));
  }

  Config cfg_;
  ParamStore<T> ps_;
  Linear<T> fc1_, fc2_;
};

// ---------------------------------------------------------------------------

template <typename T>
class DiffusionHead {
 public:
  struct Config {
    int lm_dim = 256;
    int token_dim = 128;
    int hidden = 256;
    int time_dim = 64;
    diff::PredMode mode = diff::PredMode::v_pred;
    uint64_t seed = 5;
    void validate() const {
      if (lm_dim < 1 || token_dim < 1 || hidden < 1) fail_config("diffusion head: dims must be positive");
      if (time_dim < 2 || time_dim % 2 != 0) fail_config("diffusion head: time_dim must be even and >= 2");
    }
  };

  explicit DiffusionHead(Config cfg = {}) : cfg_(cfg) {
    cfg_.validate();
    fc1_ = Linear<T>(ps_, "dhead.fc1", cfg_.token_dim + cfg_.lm_dim + cfg_.time_dim, cfg_.hidden, cfg_.seed);
    fc2_ = Linear<T>(ps_, "dhead.fc2", cfg_.hidden, cfg_.hidden, cfg_.seed);
    out_ = Linear<T>(ps_, "dhead.out", cfg_.hidden, cfg_.token_dim, cfg_.seed);
  }

  const Config& config() const { return cfg_; }
  ParamStore<T>& params() { return ps_; }

  // z_t: [B, token_dim], cond: [B, lm_dim] -> prediction [B, token_dim].
  Ref<T> predict(Tape<T>& t, Ref<T> z_t, int timestep, Ref<T> cond) const {
    if (timestep < 1) fail_runtime("diffusion head: timestep must be >= 1");
    if (z_t.rank() != 2 || z_t.dim(1) != cfg_.token_dim)
      fail_runtime("diffusion head: expected noisy tokens [B," + std::to_string(cfg_.token_dim) +
                   "], got " + ad::shape_str(z_t.shape()));
    if (cond.rank() != 2 || cond.dim(0) != z_t.dim(0) || cond.dim(1) != cfg_.lm_dim)
      fail_runtime("diffusion head: condition shape " + ad::shape_str(cond.shape()) +
                   " does not match tokens " + ad::shape_str(z_t.shape()));
    const int B = z_t.dim(0);
    Ref<T> temb = t.repeat_axis(time_embedding(t, timestep), 0, B);  // [B, time_dim]
    Ref<T> x = t.concat({z_t, cond, temb}, 1);
    return out_(t, t.gelu(fc2_(t, t.gelu(fc1_(t, x)))));
  }

  Ref<T> loss(Tape<T>& t, Ref<T> cond, Ref<T> x0, const diff::NoiseSchedule& sched, int timestep,
              Ref<T> eps) const {
    auto fn = [this, cond](Tape<T>& tp, Ref<T> xt, int step) { return predict(tp, xt, step, cond); };
    return diffusion_head_loss(t, fn, x0, sched, timestep, eps, cfg_.mode);
  }

  // Ancestral sampling of one token per condition row. `tape` is a scratch
  // workspace; it is reset per denoiser call and left in no-grad state's
  // inverse (grad re-enabled) on return.
  void sample_tokens(Tape<T>& tape, const T* cond, int batch, const diff::NoiseSchedule& sched,
                     uint64_t seed, T* out) const {
    static_assert(std::is_same_v<T, float>, "ancestral sampling runs in float");
    tape.set_grad_enabled(false);
    diff::DenoiseFn fn = [&](const float* x, int b, int step, bool /*use_null*/, float* pred) {
      tape.reset();
      Ref<float> zt = tape.borrow({b, cfg_.token_dim}, x);
      Ref<float> c = tape.borrow({b, cfg_.lm_dim}, cond);
      Ref<float> p = predict(tape, zt, step, c);
      std::memcpy(pred, p.value().data(), sizeof(float) * p.count());
    };
    diff::SampleConfig scfg;
    scfg.mode = cfg_.mode;
    scfg.guidance = 1.0f;
    scfg.seed = seed;
    diff::sample(fn, batch, cfg_.token_dim, sched, scfg, out);
    tape.reset();
    tape.set_grad_enabled(true);
  }

 private:
  Ref<T> time_embedding(Tape<T>& t, int timestep) const {
    const int e = cfg_.time_dim, half = e / 2;
    std::vector<T> emb(e);
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      emb[i] = static_cast<T>(std::sin(timestep * freq));
      emb[half + i] = static_cast<T>(std::cos(timestep * freq));
    }
    return t.input({e}, emb);
  }

  Config cfg_;
  ParamStore<T> ps_;
  Linear<T> fc1_, fc2_, out_;
};

// ---------------------------------------------------------------------------

template <typename T>
class GmmHead {
 public:
  struct Config {
    int lm_dim = 256;
    int token_dim = 128;
    int components = 16;
    int hidden = 256;
    double mean_spread = 0.5;  // sd of the mean-bias init that breaks component symmetry
    double var_bias = 0.0;     // initial log-variance bias; > 0 widens components at start
    uint64_t seed = 3;
    void validate() const {
      if (lm_dim < 1 || token_dim < 1 || hidden < 1) fail_config("gmm head: dims must be positive");
      if (components < 1) fail_config("gmm head: need at least one mixture component");
    }
  };

  explicit GmmHead(Config cfg = {}) : cfg_(cfg) {
    cfg_.validate();
    const int kd = cfg_.components * cfg_.token_dim;
    fc1_ = Linear<T>(ps_, "gmm.fc1", cfg_.lm_dim, cfg_.hidden, cfg_.seed);
    fc2_ = Linear<T>(ps_, "gmm.fc2", cfg_.hidden, 2 * kd + cfg_.components, cfg_.seed);
    // Spread the mean biases so the components start distinct; otherwise a
    // symmetric init lets one component swallow the whole density.
    Rng rng = Rng::stream(cfg_.seed, "gmm.meanbias");
    for (int i = 0; i < kd; ++i) fc2_.b->value[i] = static_cast<T>(cfg_.mean_spread * rng.normal());
    for (int i = kd; i < 2 * kd; ++i) fc2_.b->value[i] = static_cast<T>(cfg_.var_bias);
  }

  const Config& config() const { return cfg_; }
  ParamStore<T>& params() { return ps_; }
  int params_per_token() const { return 2 * cfg_.components * cfg_.token_dim + cfg_.components; }

  // h: [B, lm_dim] -> mixture parameters per row.
  GmmParams<T> project(Tape<T>& t, Ref<T> h) const {
    if (h.rank() != 2 || h.dim(1) != cfg_.lm_dim)
      fail_runtime("gmm head: expected [B," + std::to_string(cfg_.lm_dim) + "], got " +
                   ad::shape_str(h.shape()));
    const int B = h.dim(0), k = cfg_.components, d = cfg_.token_dim, kd = k * d;
    Ref<T> raw = fc2_(t, t.gelu(fc1_(t, h)));  // [B, 2kd + k]
    GmmParams<T> p;
    p.k = k;
    p.d = d;
    p.means = t.reshape(t.slice(raw, 1, 0, kd), {B, k, d});
    p.log_vars = t.clamp(t.reshape(t.slice(raw, 1, kd, kd), {B, k, d}), T(kLogVarMin), T(kLogVarMax));
    p.logits = t.slice(raw, 1, 2 * kd, k);
    return p;
  }

  // Mean over rows of the per-row mixture NLL, via log-sum-exp.
  Ref<T> nll(Tape<T>& t, const GmmParams<T>& p, Ref<T> x) const {
    if (x.rank() != 2 || x.dim(1) != cfg_.token_dim)
      fail_runtime("gmm head: expected targets [B," + std::to_string(cfg_.token_dim) + "], got " +
                   ad::shape_str(x.shape()));
    if (p.means.dim(0) != x.dim(0))
      fail_runtime("gmm head: parameter batch " + std::to_string(p.means.dim(0)) +
                   " does not match target batch " + std::to_string(x.dim(0)));
    const int k = p.k, d = p.d;
    Ref<T> xk = t.repeat_axis(x, 1, k);  // [B, k, d]
    Ref<T> diff = t.sub(xk, p.means);
    Ref<T> mahal = t.sum_last(t.mul(t.mul(diff, diff), t.exp(t.neg(p.log_vars))));  // [B, k]
    Ref<T> logdet = t.sum_last(p.log_vars);                                         // [B, k]
    Ref<T> log_comp = t.scale(t.add_const(t.add(mahal, logdet), T(d * kLn2Pi)), T(-0.5));
    Ref<T> log_mix = t.sub(p.logits, t.repeat_axis(t.logsumexp(p.logits), 1, k));
    Ref<T> per_row = t.logsumexp(t.add(log_mix, log_comp));  // [B]
    return t.neg(t.mean(per_row));
  }

  Ref<T> loss(Tape<T>& t, Ref<T> h, Ref<T> target) const { return nll(t, project(t, h), target); }

  // Project each row without gradients and draw one token per row. Row i uses
  // its own derived stream so the draw order never matters.
  void sample_tokens(Tape<T>& tape, const T* h, int batch, uint64_t seed, T temperature,
                     T* out) const {
    static_assert(std::is_same_v<T, float>, "mixture sampling runs in float");
    const int k = cfg_.components, d = cfg_.token_dim;
    tape.set_grad_enabled(false);
    tape.reset();
    Ref<float> hv = tape.borrow({batch, cfg_.lm_dim}, h);
    GmmParams<float> p = project(tape, hv);
    const float* mv = p.means.value().data();
    const float* lv = p.log_vars.value().data();
    const float* gv = p.logits.value().data();
    for (int b = 0; b < batch; ++b) {
      Rng rng = Rng::stream(seed, "gmm-sample", {static_cast<uint64_t>(b)});
      gmm_sample_row(k, d, mv + int64_t(b) * k * d, lv + int64_t(b) * k * d, gv + int64_t(b) * k,
                     rng, temperature, out + int64_t(b) * d);
    }
    tape.reset();
    tape.set_grad_enabled(true);
  }

 private:
  Config cfg_;
  ParamStore<T> ps_;
  Linear<T> fc1_, fc2_;
};

}  // namespace divot::nn
