#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "divot/errors.hpp"
#include "divot/param.hpp"
#include "divot/rng.hpp"
#include "divot/tape.hpp"

// Small library of parameterized layers. Layers register their tensors in a
// ParamStore at construction (names are "<prefix>.<piece>", so checkpoints
// and the optimizer see a flat, stable namespace) and are pure functions of
// (tape, inputs) afterwards: the same layer object serves training,
// inference and the f64 gradient checks.

namespace divot::nn {

using ad::Param;
using ad::ParamStore;
using ad::Ref;
using ad::Shape;
using ad::Tape;
using kern::Rng;

// Xavier-uniform init; every parameter gets its own named stream so layer
// construction order never changes the draw.
template <typename T>
void init_xavier(Param<T>& p, uint64_t seed, int fan_in, int fan_out) {
  Rng rng = Rng::stream(seed, p.name);
  const double s = std::sqrt(6.0 / (fan_in + fan_out));
  for (auto& v : p.value) v = static_cast<T>(rng.uniform(-s, s));
}

// Small-scale normal init for positional embeddings and query banks.
template <typename T>
void init_normal(Param<T>& p, uint64_t seed, double sd) {
  Rng rng = Rng::stream(seed, p.name);
  for (auto& v : p.value) v = static_cast<T>(sd * rng.normal());
}

template <typename T>
struct Linear {
  Param<T>* w = nullptr;  // [in, out]
  Param<T>* b = nullptr;  // [out], optional

  Linear() = default;
  Linear(ParamStore<T>& ps, const std::string& name, int in, int out, uint64_t seed, bool bias = true) {
    w = &ps.make(name + ".w", {in, out});
    init_xavier(*w, seed, in, out);
    if (bias) {
      b = &ps.make(name + ".b", {out});
      b->decay = false;
    }
  }

  // x [..., in] -> [..., out]
  Ref<T> operator()(Tape<T>& t, Ref<T> x) const {
    Ref<T> y = t.matmul(x, t.param(*w));
    if (b) y = t.add(y, t.param(*b));
    return y;
  }
};

template <typename T>
struct LayerNorm {
  Param<T>* gamma = nullptr;
  Param<T>* beta = nullptr;

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& ps, const std::string& name, int dim) {
    gamma = &ps.make(name + ".g", {dim});
    beta = &ps.make(name + ".b", {dim});
    std::fill(gamma->value.begin(), gamma->value.end(), T(1));
    gamma->decay = false;
    beta->decay = false;
  }

  Ref<T> operator()(Tape<T>& t, Ref<T> x) const {
    return t.layer_norm(x, t.param(*gamma), t.param(*beta), T(1e-5));
  }
};

// [B, L, H*Dh] -> [B*H, L, Dh]: fold heads into the group axis for sdpa.
template <typename T>
Ref<T> split_heads(Tape<T>& t, Ref<T> x, int heads) {
  const Shape& s = x.shape();
  const int B = s[0], L = s[1], D = s[2];
  const int dh = D / heads;
  return t.reshape(t.permute(t.reshape(x, {B, L, heads, dh}), {0, 2, 1, 3}), {B * heads, L, dh});
}

template <typename T>
Ref<T> merge_heads(Tape<T>& t, Ref<T> x, int batch, int heads) {
  const Shape& s = x.shape();
  const int L = s[1], dh = s[2];
  return t.reshape(t.permute(t.reshape(x, {batch, heads, L, dh}), {0, 2, 1, 3}), {batch, L, heads * dh});
}

// Multi-head self-attention over x [B, L, d]. The mask, when given, is
// additive (0 keeps, large negative blocks), shaped [L, L] and shared by all
// batch rows and heads.
template <typename T>
struct SelfAttention {
  Linear<T> qkv, proj;
  int dim = 0, heads = 0;

  SelfAttention() = default;
  SelfAttention(ParamStore<T>& ps, const std::string& name, int dim_, int heads_, uint64_t seed)
      : qkv(ps, name + ".qkv", dim_, 3 * dim_, seed), proj(ps, name + ".proj", dim_, dim_, seed), dim(dim_), heads(heads_) {
    if (dim_ % heads_ != 0) fail_runtime("attention: heads must divide dim (" + std::to_string(dim_) + "/" + std::to_string(heads_) + ")");
  }

  Ref<T> operator()(Tape<T>& t, Ref<T> x, Ref<T> mask = {}) const {
    const Shape& s = x.shape();
    if (s.size() != 3 || s[2] != dim) fail_runtime("self_attention: want [B,L," + std::to_string(dim) + "], got " + ad::shape_str(s));
    const int B = s[0];
    Ref<T> a = qkv(t, x);  // [B, L, 3d]
    Ref<T> q = split_heads(t, t.slice(a, 2, 0, dim), heads);
    Ref<T> k = split_heads(t, t.slice(a, 2, dim, dim), heads);
    Ref<T> v = split_heads(t, t.slice(a, 2, 2 * dim, dim), heads);
    const T scale = T(1) / std::sqrt(T(dim / heads));
    Ref<T> o = t.sdpa(q, k, v, mask, scale);
    return proj(t, merge_heads(t, o, B, heads));
  }
};

// Queries from x [B, Lq, d]; keys/values from ctx [B, Lk, dim_kv].
template <typename T>
struct CrossAttention {
  Linear<T> q, kv, proj;
  int dim = 0, heads = 0;

  CrossAttention() = default;
  CrossAttention(ParamStore<T>& ps, const std::string& name, int dim_, int dim_kv, int heads_, uint64_t seed)
      : q(ps, name + ".q", dim_, dim_, seed),
        kv(ps, name + ".kv", dim_kv, 2 * dim_, seed),
        proj(ps, name + ".proj", dim_, dim_, seed),
        dim(dim_),
        heads(heads_) {
    if (dim_ % heads_ != 0) fail_runtime("attention: heads must divide dim (" + std::to_string(dim_) + "/" + std::to_string(heads_) + ")");
  }

  Ref<T> operator()(Tape<T>& t, Ref<T> x, Ref<T> ctx, Ref<T> mask = {}) const {
    const Shape& sx = x.shape();
    const Shape& sc = ctx.shape();
    if (sx.size() != 3 || sc.size() != 3 || sx[0] != sc[0])
      fail_runtime("cross_attention: batch mismatch " + ad::shape_str(sx) + " vs " + ad::shape_str(sc));
    const int B = sx[0];
    Ref<T> qh = split_heads(t, q(t, x), heads);
    Ref<T> a = kv(t, ctx);  // [B, Lk, 2d]
    Ref<T> kh = split_heads(t, t.slice(a, 2, 0, dim), heads);
    Ref<T> vh = split_heads(t, t.slice(a, 2, dim, dim), heads);
    const T scale = T(1) / std::sqrt(T(dim / heads));
    Ref<T> o = t.sdpa(qh, kh, vh, mask, scale);
    return proj(t, merge_heads(t, o, B, heads));
  }
};

template <typename T>
struct Mlp {
  Linear<T> fc1, fc2;

  Mlp() = default;
  Mlp(ParamStore<T>& ps, const std::string& name, int dim, int hidden, uint64_t seed)
      : fc1(ps, name + ".fc1", dim, hidden, seed), fc2(ps, name + ".fc2", hidden, dim, seed) {}

  Ref<T> operator()(Tape<T>& t, Ref<T> x) const { return fc2(t, t.gelu(fc1(t, x))); }
};

// Standard pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
template <typename T>
struct Block {
  LayerNorm<T> ln1, ln2;
  SelfAttention<T> attn;
  Mlp<T> mlp;

  Block() = default;
  Block(ParamStore<T>& ps, const std::string& name, int dim, int heads, uint64_t seed, int mlp_mult = 4)
      : ln1(ps, name + ".ln1", dim),
        ln2(ps, name + ".ln2", dim),
        attn(ps, name + ".attn", dim, heads, seed),
        mlp(ps, name + ".mlp", dim, mlp_mult * dim, seed) {}

  Ref<T> operator()(Tape<T>& t, Ref<T> x, Ref<T> mask = {}) const {
    x = t.add(x, attn(t, ln1(t, x), mask));
    return t.add(x, mlp(t, ln2(t, x)));
  }
};

// Additive attention mask where position i may attend to j only if j <= i.
template <typename T>
std::vector<T> causal_mask(int L) {
  std::vector<T> m(int64_t(L) * L, T(0));
  for (int i = 0; i < L; ++i)
    for (int j = i + 1; j < L; ++j) m[int64_t(i) * L + j] = T(-1e30);
  return m;
}

}  // namespace divot::nn
