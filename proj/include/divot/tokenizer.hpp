#pragma once

#include <string>
#include <vector>

#include "divot/errors.hpp"
#include "divot/nn.hpp"
#include "divot/patches.hpp"
#include "divot/tape.hpp"

// Video tokenizer: sparse frames -> a fixed set of K continuous tokens.
// Pipeline: patch embedding with spatial and per-frame temporal positions ->
// temporal transformer (attention along time, per patch position) -> temporal
// average pooling -> fusion transformer over the remaining positions ->
// query-based resampler whose K learnable queries cross-attend to the fused
// grid. The fused grid (patch-position dependent) and the resampled tokens
// (position independent) are both exposed; the representation ablation
// contrasts them as prediction targets.

namespace divot::nn {

struct TokenizerConfig {
  int frames = 5;  // sparse frames per clip
  int height = 32, width = 32, channels = 3;
  int patch = 4;
  int dim = 128;
  int heads = 4;
  int temporal_layers = 2;
  int fusion_layers = 2;
  int resampler_layers = 2;
  int tokens = 16;  // K
  int pool = 5;     // temporal average-pool window
  int mlp_mult = 4;
  uint64_t seed = 1;

  int grid() const { return (height / patch) * (width / patch); }
  int patch_dim() const { return patch * patch * channels; }
  int pooled_slots() const { return frames / pool; }
  int positions() const { return grid() * pooled_slots(); }

  void validate() const {
    if (height % patch != 0 || width % patch != 0) fail_config("tokenizer: frame side not divisible by patch size");
    if (frames % pool != 0 || pool < 1) fail_config("tokenizer: pool size must divide the frame count");
    if (tokens < 1) fail_config("tokenizer: token count must be at least 1");
    if (dim % heads != 0) fail_config("tokenizer: heads must divide dim");
  }
};

template <typename T>
struct ResamplerLayer {
  LayerNorm<T> lnq, lnm;
  CrossAttention<T> ca;
  Mlp<T> mlp;

  ResamplerLayer() = default;
  ResamplerLayer(ParamStore<T>& ps, const std::string& name, int dim, int heads, int mlp_mult, uint64_t seed)
      : lnq(ps, name + ".lnq", dim),
        lnm(ps, name + ".lnm", dim),
        ca(ps, name + ".ca", dim, dim, heads, seed),
        mlp(ps, name + ".mlp", dim, mlp_mult * dim, seed) {}

  Ref<T> operator()(Tape<T>& t, Ref<T> q, Ref<T> ctx) const {
    q = t.add(q, ca(t, lnq(t, q), ctx));
    return t.add(q, mlp(t, lnm(t, q)));
  }
};

template <typename T>
class Tokenizer {
 public:
  explicit Tokenizer(TokenizerConfig cfg = {}) : cfg_(cfg) {
    cfg_.validate();
    const int d = cfg_.dim;
    patch_embed_ = Linear<T>(ps_, "tok.patch", cfg_.patch_dim(), d, cfg_.seed);
    spatial_pos_ = &ps_.make("tok.pos.spatial", {cfg_.grid(), d});
    temporal_pos_ = &ps_.make("tok.pos.temporal", {cfg_.frames, d});
    init_normal(*spatial_pos_, cfg_.seed, 0.02);
    init_normal(*temporal_pos_, cfg_.seed, 0.02);
    spatial_pos_->decay = false;
    temporal_pos_->decay = false;
    for (int i = 0; i < cfg_.temporal_layers; ++i)
      temporal_.emplace_back(ps_, "tok.tblk" + std::to_string(i), d, cfg_.heads, cfg_.seed, cfg_.mlp_mult);
    for (int i = 0; i < cfg_.fusion_layers; ++i)
      fusion_.emplace_back(ps_, "tok.fblk" + std::to_string(i), d, cfg_.heads, cfg_.seed, cfg_.mlp_mult);
    queries_ = &ps_.make("tok.queries", {cfg_.tokens, d});
    init_normal(*queries_, cfg_.seed, 0.02);
    ctx_ln_ = LayerNorm<T>(ps_, "tok.resampler.ctxln", d);
    for (int i = 0; i < cfg_.resampler_layers; ++i)
      resampler_.emplace_back(ps_, "tok.resampler.l" + std::to_string(i), d, cfg_.heads, cfg_.mlp_mult, cfg_.seed);
    out_ln_ = LayerNorm<T>(ps_, "tok.outln", d);
  }

  const TokenizerConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return ps_; }

  // patches: [B, frames, grid, patch_dim] -> fused grid [B, positions, dim].
  Ref<T> encode_pre_resampler(Tape<T>& t, Ref<T> patches) const {
    check_input(patches);
    const int B = patches.shape()[0];
    const int G = cfg_.grid(), F = cfg_.frames, d = cfg_.dim;
    Ref<T> x = patch_embed_(t, patches);                   // [B, F, G, d]
    x = t.add(x, t.param(*spatial_pos_));                  // broadcast over [G, d]
    x = t.permute(x, {0, 2, 1, 3});                        // [B, G, F, d]
    x = t.add(x, t.param(*temporal_pos_));                 // broadcast over [F, d]
    x = t.reshape(x, {B * G, F, d});
    for (const auto& blk : temporal_) x = blk(t, x);       // attention along time
    x = t.reshape(x, {B, G, F, d});
    // temporal average pool: [B, G, S, pool, d] -> mean over the pool axis
    const int S = cfg_.pooled_slots();
    x = t.reshape(x, {B, G, S, cfg_.pool, d});
    x = t.mean_last(t.permute(x, {0, 1, 2, 4, 3}));        // [B, G, S, d]
    x = t.reshape(x, {B, cfg_.positions(), d});
    for (const auto& blk : fusion_) x = blk(t, x);
    return x;
  }

  // fused grid -> tokens [B, K, dim] via the learnable-query resampler.
  Ref<T> resample(Tape<T>& t, Ref<T> fused) const {
    const int B = fused.shape()[0];
    Ref<T> ctx = ctx_ln_(t, fused);
    Ref<T> q = t.repeat_axis(t.param(*queries_), 0, B);
    for (const auto& layer : resampler_) q = layer(t, q, ctx);
    return out_ln_(t, q);
  }

  Ref<T> encode(Tape<T>& t, Ref<T> patches) const { return resample(t, encode_pre_resampler(t, patches)); }

 private:
  void check_input(Ref<T> patches) const {
    const ad::Shape& s = patches.shape();
    if (s.size() != 4 || s[1] != cfg_.frames || s[2] != cfg_.grid() || s[3] != cfg_.patch_dim())
      fail_runtime("tokenizer: want [B," + std::to_string(cfg_.frames) + "," + std::to_string(cfg_.grid()) + "," +
                   std::to_string(cfg_.patch_dim()) + "], got " + ad::shape_str(s));
  }

  TokenizerConfig cfg_;
  ParamStore<T> ps_;
  Linear<T> patch_embed_;
  ad::Param<T>* spatial_pos_ = nullptr;
  ad::Param<T>* temporal_pos_ = nullptr;
  std::vector<Block<T>> temporal_;
  std::vector<Block<T>> fusion_;
  ad::Param<T>* queries_ = nullptr;
  LayerNorm<T> ctx_ln_;
  std::vector<ResamplerLayer<T>> resampler_;
  LayerNorm<T> out_ln_;
};

}  // namespace divot::nn
