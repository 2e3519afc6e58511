#pragma once
// Tiny decoder-only transformer over caption ids and continuous video tokens.
// Two jobs: next-token prediction of captions conditioned on video tokens
// (comprehension), and producing per-token condition vectors for a generative
// head (generation), via one of three mechanisms:
//   - ar_causal:           tokens predicted one at a time behind a causal
//                          mask, each sampled token fed back as input;
//   - query_causal:        N learnable queries appended after the text with a
//                          causal mask among the queries;
//   - query_bidirectional: N queries with full mutual attention and full view
//                          of the text prefix. Text never attends to queries.

#include <cstdint>
#include <cstring>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "divot/errors.hpp"
#include "divot/nn.hpp"

namespace divot::nn {

enum class Mechanism { ar_causal, query_causal, query_bidirectional };

inline const char* mechanism_name(Mechanism m) {
  switch (m) {
    case Mechanism::ar_causal: return "ar_causal";
    case Mechanism::query_causal: return "query_causal";
    case Mechanism::query_bidirectional: return "query_bidirectional";
  }
  return "?";
}

inline Mechanism mechanism_from_name(std::string_view s) {
  if (s == "ar_causal") return Mechanism::ar_causal;
  if (s == "query_causal") return Mechanism::query_causal;
  if (s == "query_bidirectional") return Mechanism::query_bidirectional;
  fail_config("unknown mechanism '" + std::string(s) +
              "' (want ar_causal | query_causal | query_bidirectional)");
}

template <typename T>
class Lm {
 public:
  struct Config {
    int layers = 4;
    int dim = 256;
    int heads = 4;
    int vocab = 21;      // caption vocabulary plus the BOV/EOV markers
    int text_len = 6;    // fixed caption length
    int queries = 16;    // N; equals the video-token count it generates
    int token_dim = 128; // continuous video-token width
    int mlp_mult = 4;
    uint64_t seed = 7;

    int bov_id() const { return vocab - 2; }
    int eov_id() const { return vocab - 1; }
    // [BOV, video tokens, EOV, caption]
    int comprehension_len() const { return queries + 2 + text_len; }
    // [caption, queries] or [caption, BOV, tokens 0..N-2]
    int generation_len() const { return text_len + queries; }

    void validate() const {
      if (layers < 1 || dim < 1 || heads < 1) fail_config("lm: layers/dim/heads must be positive");
      if (dim % heads != 0) fail_config("lm: heads must divide dim");
      if (vocab < 3) fail_config("lm: vocabulary too small for BOV/EOV markers");
      if (text_len < 1 || queries < 1 || token_dim < 1)
        fail_config("lm: text_len, queries and token_dim must be positive");
    }
  };

  explicit Lm(Config cfg = {}) : cfg_(cfg) {
    cfg_.validate();
    const int d = cfg_.dim;
    embed_ = &ps_.make("lm.embed", {cfg_.vocab, d});
    init_normal(*embed_, cfg_.seed, 0.02);
    embed_->decay = false;
    const int max_pos = cfg_.comprehension_len();
    pos_ = &ps_.make("lm.pos", {max_pos, d});
    init_normal(*pos_, cfg_.seed, 0.02);
    pos_->decay = false;
    vid_fc1_ = Linear<T>(ps_, "lm.vid.fc1", cfg_.token_dim, d, cfg_.seed);
    vid_fc2_ = Linear<T>(ps_, "lm.vid.fc2", d, d, cfg_.seed);
    query_ = &ps_.make("lm.query", {cfg_.queries, d});
    init_normal(*query_, cfg_.seed, 0.02);
    query_->decay = false;
    qpos_ = &ps_.make("lm.qpos", {cfg_.queries, d});
    init_normal(*qpos_, cfg_.seed, 0.02);
    qpos_->decay = false;
    for (int i = 0; i < cfg_.layers; ++i)
      blocks_.emplace_back(ps_, "lm.blk" + std::to_string(i), d, cfg_.heads, cfg_.seed, cfg_.mlp_mult);
    out_ln_ = LayerNorm<T>(ps_, "lm.outln", d);
    txt_ = Linear<T>(ps_, "lm.txt", d, cfg_.vocab, cfg_.seed);
  }

  const Config& config() const { return cfg_; }
  ParamStore<T>& params() { return ps_; }
  const ParamStore<T>& params() const { return ps_; }

  // Additive attention mask for a generation layout of `text_len` caption
  // positions followed by `n` query/token positions. Causal throughout; the
  // bidirectional variant opens full mutual attention among the trailing n
  // positions (rows >= text_len), while text rows never see them.
  static std::vector<T> mechanism_mask(Mechanism m, int text_len, int n) {
    const int L = text_len + n;
    std::vector<T> mask = causal_mask<T>(L);
    if (m == Mechanism::query_bidirectional)
      for (int i = text_len; i < L; ++i)
        for (int j = text_len; j < L; ++j) mask[int64_t(i) * L + j] = T(0);
    return mask;
  }

  // Positions of the comprehension layout whose output feeds the loss
  // (i.e. positions that predict a caption id). Video positions are zero.
  std::vector<uint8_t> comprehension_loss_positions() const {
    std::vector<uint8_t> on(cfg_.comprehension_len(), 0);
    for (int k = 0; k < cfg_.text_len; ++k) on[cfg_.queries + 1 + k] = 1;
    return on;
  }

  // Cross-entropy of the caption ids given the video tokens, averaged over
  // caption positions only. video_tokens: [B, N, token_dim]; captions:
  // row-major [B * text_len] ids.
  Ref<T> comprehend_loss(Tape<T>& t, Ref<T> video_tokens, const std::vector<int>& captions) const {
    Ref<T> logits = comprehension_logits(t, video_tokens, captions);
    const int B = video_tokens.dim(0);
    // Rows EOV .. second-to-last caption position predict the caption ids.
    Ref<T> sel = t.reshape(t.slice(logits, 1, cfg_.queries + 1, cfg_.text_len),
                           {B * cfg_.text_len, cfg_.vocab});
    Ref<T> logsm = t.sub(sel, t.repeat_axis(t.logsumexp(sel), 1, cfg_.vocab));
    return t.neg(t.mean(t.take_per_row(logsm, captions)));
  }

  // Greedy caption decode for one clip's tokens ([1, N, token_dim]). Builds
  // one forward per caption slot; resets the tape between them.
  std::vector<int> greedy_caption(Tape<T>& t, const std::vector<T>& video_tokens) const {
    if (static_cast<int64_t>(video_tokens.size()) != int64_t(cfg_.queries) * cfg_.token_dim)
      fail_runtime("lm: greedy decode expects one clip of tokens");
    std::vector<int> ids(cfg_.text_len, 0);
    for (int k = 0; k < cfg_.text_len; ++k) {
      t.reset();
      Ref<T> vt = t.input({1, cfg_.queries, cfg_.token_dim}, video_tokens);
      Ref<T> logits = comprehension_logits(t, vt, ids);
      // The row at EOV+k attends only the ids decoded so far, so the
      // placeholder zeros in later slots cannot leak backward.
      const T* row = logits.value().data() + (int64_t(cfg_.queries) + 1 + k) * cfg_.vocab;
      int best = 0;
      for (int v = 1; v < cfg_.vocab; ++v)
        if (row[v] > row[best]) best = v;
      ids[k] = best;
    }
    return ids;
  }

  // Per-token condition vectors for a generative head: [B, N, dim].
  // Query mechanisms run the caption plus N learnable queries; ar_causal
  // teacher-forces the target tokens (prev_tokens required, [B, N, token_dim])
  // behind a causal mask, so row i conditions on tokens < i.
  Ref<T> generation_outputs(Tape<T>& t, Mechanism mech, const std::vector<int>& captions,
                            Ref<T> prev_tokens = {}) const {
    const int d = cfg_.dim, N = cfg_.queries, Lt = cfg_.text_len;
    const int B = static_cast<int>(captions.size()) / std::max(1, Lt);
    check_captions(captions, B);
    const int L = cfg_.generation_len();

    Ref<T> emb = t.param(*embed_);
    Ref<T> cap = t.reshape(t.rows(emb, captions), {B, Lt, d});

    Ref<T> x;
    if (mech == Mechanism::ar_causal) {
      if (!prev_tokens.valid()) fail_runtime("lm: ar_causal needs the previous tokens");
      check_tokens(prev_tokens);
      if (prev_tokens.dim(0) != B) fail_runtime("lm: token batch does not match captions");
      Ref<T> bov = t.reshape(t.rows(emb, std::vector<int>(B, cfg_.bov_id())), {B, 1, d});
      if (N > 1) {
        Ref<T> prev = project_tokens(t, t.slice(prev_tokens, 1, 0, N - 1));
        x = t.concat({cap, bov, prev}, 1);
      } else {
        x = t.concat({cap, bov}, 1);
      }
      x = t.add(x, t.slice(t.param(*pos_), 0, 0, L));
    } else {
      if (prev_tokens.valid()) fail_runtime("lm: query mechanisms take no previous tokens");
      cap = t.add(cap, t.slice(t.param(*pos_), 0, 0, Lt));
      Ref<T> q = t.repeat_axis(t.add(t.param(*query_), t.param(*qpos_)), 0, B);
      x = t.concat({cap, q}, 1);
    }
    Ref<T> h = backbone(t, x, mechanism_mask(mech, Lt, N));
    return t.slice(h, 1, Lt, N);
  }

 private:
  // Logits over the [BOV, video, EOV, caption] layout: [B, L, vocab].
  Ref<T> comprehension_logits(Tape<T>& t, Ref<T> video_tokens, const std::vector<int>& captions) const {
    check_tokens(video_tokens);
    const int B = video_tokens.dim(0), d = cfg_.dim;
    check_captions(captions, B);
    const int L = cfg_.comprehension_len();
    Ref<T> emb = t.param(*embed_);
    Ref<T> bov = t.reshape(t.rows(emb, std::vector<int>(B, cfg_.bov_id())), {B, 1, d});
    Ref<T> eov = t.reshape(t.rows(emb, std::vector<int>(B, cfg_.eov_id())), {B, 1, d});
    Ref<T> cap = t.reshape(t.rows(emb, captions), {B, cfg_.text_len, d});
    Ref<T> vid = project_tokens(t, video_tokens);
    Ref<T> x = t.concat({bov, vid, eov, cap}, 1);
    x = t.add(x, t.slice(t.param(*pos_), 0, 0, L));
    Ref<T> h = backbone(t, x, causal_mask<T>(L));
    return txt_(t, h);
  }

  Ref<T> project_tokens(Tape<T>& t, Ref<T> tok) const {
    return vid_fc2_(t, t.gelu(vid_fc1_(t, tok)));
  }

  Ref<T> backbone(Tape<T>& t, Ref<T> x, const std::vector<T>& mask) const {
    const int L = x.dim(1);
    Ref<T> m = t.input({L, L}, mask);
    for (const auto& b : blocks_) x = b(t, x, m);
    return out_ln_(t, x);
  }

  void check_tokens(Ref<T> tok) const {
    if (tok.rank() != 3 || tok.dim(1) != cfg_.queries || tok.dim(2) != cfg_.token_dim)
      fail_runtime("lm: expected video tokens [B," + std::to_string(cfg_.queries) + "," +
                   std::to_string(cfg_.token_dim) + "], got " + ad::shape_str(tok.shape()));
  }

  void check_captions(const std::vector<int>& captions, int B) const {
    if (static_cast<int>(captions.size()) != B * cfg_.text_len)
      fail_runtime("lm: caption ids must be batch * text_len, got " +
                   std::to_string(captions.size()));
    for (int id : captions)
      if (id < 0 || id >= cfg_.vocab - 2)
        fail_runtime("lm: caption id " + std::to_string(id) + " outside the text vocabulary");
  }

  Config cfg_;
  ParamStore<T> ps_;
  Param<T>* embed_ = nullptr;
  Param<T>* pos_ = nullptr;
  Param<T>* query_ = nullptr;
  Param<T>* qpos_ = nullptr;
  Linear<T> vid_fc1_, vid_fc2_;
  std::vector<Block<T>> blocks_;
  LayerNorm<T> out_ln_;
  Linear<T> txt_;
};

// Draws one token per slot from a trained model. The sampler closes over a
// head and its seed: it maps `rows` condition vectors of lm dim to `rows`
// sampled tokens of token_dim. For ar_causal each sampled token is fed back
// before the next is drawn.
using RowSampler = std::function<void(const float* cond, int rows, float* out)>;

inline void generate_tokens(ad::Tape<float>& tape, const Lm<float>& lm, Mechanism mech,
                            const std::vector<int>& caption, const RowSampler& sampler,
                            float* out) {
  const auto& cfg = lm.config();
  const int N = cfg.queries, d = cfg.dim, td = cfg.token_dim;
  tape.set_grad_enabled(false);
  if (mech != Mechanism::ar_causal) {
    tape.reset();
    ad::Ref<float> h = lm.generation_outputs(tape, mech, caption);
    std::vector<float> cond(h.value().begin(), h.value().end());  // [1, N, d]
    tape.reset();
    tape.set_grad_enabled(true);
    sampler(cond.data(), N, out);
    return;
  }
  std::vector<float> tokens(size_t(N) * td, 0.0f);
  std::vector<float> row(d);
  for (int i = 0; i < N; ++i) {
    tape.reset();
    ad::Ref<float> prev = tape.borrow({1, N, td}, tokens.data());
    ad::Ref<float> h = lm.generation_outputs(tape, mech, caption, prev);  // [1, N, d]
    std::memcpy(row.data(), h.value().data() + size_t(i) * d, sizeof(float) * d);
    sampler(row.data(), 1, tokens.data() + size_t(i) * td);
  }
  tape.reset();
  tape.set_grad_enabled(true);
  std::memcpy(out, tokens.data(), sizeof(float) * tokens.size());
}

}  // namespace divot::nn
