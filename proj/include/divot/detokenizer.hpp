#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "divot/errors.hpp"
#include "divot/nn.hpp"
#include "divot/tape.hpp"

// Conditional denoiser over dense-frame patch latents. A transformer whose
// self-attention alternates between spatial (within a frame) and temporal
// (within a patch position) axes, with every layer cross-attending to the K
// video tokens — each latent position can see all tokens, there is no
// cross-attention mask. Timestep enters as a sinusoidal embedding pushed
// through a two-layer MLP and added to every position.

namespace divot::nn {

struct DenoiserConfig {
  int frames = 16;  // dense frames per clip
  int height = 32, width = 32, channels = 3;
  int patch = 4;
  int dim = 128;
  int heads = 4;
  int depth = 4;
  int cond_dim = 128;    // token width from the tokenizer
  int cond_tokens = 16;  // K, for the learned null condition
  int mlp_mult = 4;
  uint64_t seed = 2;

  int grid() const { return (height / patch) * (width / patch); }
  int latent_dim() const { return patch * patch * channels; }
  int positions() const { return frames * grid(); }

  void validate() const {
    if (height % patch != 0 || width % patch != 0) fail_config("denoiser: frame side not divisible by patch size");
    if (dim % heads != 0) fail_config("denoiser: heads must divide dim");
    if (dim % 2 != 0) fail_config("denoiser: dim must be even for the sinusoidal embedding");
    if (depth < 1 || cond_tokens < 1) fail_config("denoiser: depth and token count must be positive");
  }
};

template <typename T>
struct DenoiserLayer {
  LayerNorm<T> ln1, lnc, ln2;
  SelfAttention<T> attn;
  CrossAttention<T> cross;
  Mlp<T> mlp;

  DenoiserLayer() = default;
  DenoiserLayer(ParamStore<T>& ps, const std::string& name, int dim, int cond_dim, int heads, int mlp_mult, uint64_t seed)
      : ln1(ps, name + ".ln1", dim),
        lnc(ps, name + ".lnc", dim),
        ln2(ps, name + ".ln2", dim),
        attn(ps, name + ".attn", dim, heads, seed),
        cross(ps, name + ".cross", dim, cond_dim, heads, seed),
        mlp(ps, name + ".mlp", dim, mlp_mult * dim, seed) {}
};

template <typename T>
class Detokenizer {
 public:
  explicit Detokenizer(DenoiserConfig cfg = {}) : cfg_(cfg) {
    cfg_.validate();
    const int d = cfg_.dim;
    in_proj_ = Linear<T>(ps_, "detok.in", cfg_.latent_dim(), d, cfg_.seed);
    spatial_pos_ = &ps_.make("detok.pos.spatial", {cfg_.grid(), d});
    temporal_pos_ = &ps_.make("detok.pos.temporal", {cfg_.frames, d});
    init_normal(*spatial_pos_, cfg_.seed, 0.02);
    init_normal(*temporal_pos_, cfg_.seed, 0.02);
    spatial_pos_->decay = false;
    temporal_pos_->decay = false;
    time_fc1_ = Linear<T>(ps_, "detok.time.fc1", d, d, cfg_.seed);
    time_fc2_ = Linear<T>(ps_, "detok.time.fc2", d, d, cfg_.seed);
    for (int i = 0; i < cfg_.depth; ++i)
      layers_.emplace_back(ps_, "detok.layer" + std::to_string(i), d, cfg_.cond_dim, cfg_.heads, cfg_.mlp_mult, cfg_.seed);
    out_ln_ = LayerNorm<T>(ps_, "detok.outln", d);
    out_proj_ = Linear<T>(ps_, "detok.out", d, cfg_.latent_dim(), cfg_.seed);
    null_cond_ = &ps_.make("detok.null_cond", {cfg_.cond_tokens, cfg_.cond_dim});
    init_normal(*null_cond_, cfg_.seed, 0.02);
    null_cond_->decay = false;
  }

  const DenoiserConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return ps_; }

  // The learned null condition, expanded to a batch: [B, K, cond_dim].
  Ref<T> null_tokens(Tape<T>& t, int batch) const {
    return t.repeat_axis(t.param(*null_cond_), 0, batch);
  }

  // z_t: [B, positions, latent_dim]; tokens: [B, K, cond_dim] or invalid with
  // use_null set. Returns the prediction with z_t's shape.
  Ref<T> predict(Tape<T>& t, Ref<T> z_t, int timestep, Ref<T> tokens, bool use_null = false) const {
    const ad::Shape& s = z_t.shape();
    if (s.size() != 3 || s[1] != cfg_.positions() || s[2] != cfg_.latent_dim())
      fail_runtime("denoiser: want [B," + std::to_string(cfg_.positions()) + "," + std::to_string(cfg_.latent_dim()) +
                   "], got " + ad::shape_str(s));
    if (timestep < 1) fail_runtime("denoiser: timestep must be at least 1");
    const int B = s[0];
    if (!tokens.valid()) {
      if (!use_null) fail_runtime("denoiser: missing tokens; pass the condition or request the null embedding");
      tokens = null_tokens(t, B);
    } else if (use_null) {
      fail_runtime("denoiser: got both tokens and the null-condition request");
    }
    const ad::Shape& ts = tokens.shape();
    if (ts.size() != 3 || ts[0] != B || ts[2] != cfg_.cond_dim)
      fail_runtime("denoiser: token shape " + ad::shape_str(ts) + " does not condition batch " + std::to_string(B));

    const int F = cfg_.frames, G = cfg_.grid(), d = cfg_.dim, P = cfg_.positions();
    Ref<T> x = in_proj_(t, z_t);                            // [B, P, d]
    x = t.reshape(x, {B, F, G, d});
    x = t.add(x, t.param(*spatial_pos_));                   // broadcast [G, d]
    x = t.permute(x, {0, 2, 1, 3});
    x = t.add(x, t.param(*temporal_pos_));                  // broadcast [F, d]
    x = t.permute(x, {0, 2, 1, 3});
    x = t.reshape(x, {B, P, d});
    x = t.add(x, time_embedding(t, timestep));              // broadcast [d]

    for (int i = 0; i < cfg_.depth; ++i) {
      const auto& L = layers_[i];
      Ref<T> h;
      if (i % 2 == 0) {  // spatial: attend within each frame
        Ref<T> g = t.reshape(x, {B * F, G, d});
        h = t.reshape(L.attn(t, L.ln1(t, g)), {B, P, d});
      } else {  // temporal: attend within each patch position
        Ref<T> g = t.reshape(t.permute(t.reshape(x, {B, F, G, d}), {0, 2, 1, 3}), {B * G, F, d});
        h = L.attn(t, L.ln1(t, g));
        h = t.reshape(t.permute(t.reshape(h, {B, G, F, d}), {0, 2, 1, 3}), {B, P, d});
      }
      x = t.add(x, h);
      x = t.add(x, L.cross(t, L.lnc(t, x), tokens));
      x = t.add(x, L.mlp(t, L.ln2(t, x)));
    }
    return out_proj_(t, out_ln_(t, x));                     // [B, P, latent_dim]
  }

 private:
  // Classic sinusoidal embedding of the integer timestep, then a 2-layer MLP.
  Ref<T> time_embedding(Tape<T>& t, int timestep) const {
    const int d = cfg_.dim, half = d / 2;
    std::vector<T> emb(d);
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      emb[i] = static_cast<T>(std::sin(timestep * freq));
      emb[half + i] = static_cast<T>(std::cos(timestep * freq));
    }
    Ref<T> e = t.input({1, d}, emb);
    e = time_fc2_(t, t.gelu(time_fc1_(t, e)));
    return t.reshape(e, {d});
  }

  DenoiserConfig cfg_;
  ParamStore<T> ps_;
  Linear<T> in_proj_;
  ad::Param<T>* spatial_pos_ = nullptr;
  ad::Param<T>* temporal_pos_ = nullptr;
  Linear<T> time_fc1_, time_fc2_;
  std::vector<DenoiserLayer<T>> layers_;
  LayerNorm<T> out_ln_;
  Linear<T> out_proj_;
  ad::Param<T>* null_cond_ = nullptr;
};

}  // namespace divot::nn
