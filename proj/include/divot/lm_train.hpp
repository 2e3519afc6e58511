#pragma once
// Generation training: a frozen tokenizer supplies target features per clip,
// the LM produces per-token condition vectors under a chosen mechanism, and a
// generative head scores them. Comprehension (caption cross-entropy) can be
// summed in per batch.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include "divot/diffusion.hpp"
#include "divot/errors.hpp"
#include "divot/heads.hpp"
#include "divot/lm.hpp"
#include "divot/optim.hpp"
#include "divot/synth.hpp"
#include "divot/tokenizer.hpp"

namespace divot::vid {

enum class HeadKind { mse, diffusion_eps, diffusion_v, gmm };

inline const char* head_kind_name(HeadKind h) {
  switch (h) {
    case HeadKind::mse: return "mse";
    case HeadKind::diffusion_eps: return "diff-eps";
    case HeadKind::diffusion_v: return "diff-v";
    case HeadKind::gmm: return "gmm";
  }
  return "?";
}

inline HeadKind head_kind_from_name(std::string_view s) {
  if (s == "mse") return HeadKind::mse;
  if (s == "diff-eps") return HeadKind::diffusion_eps;
  if (s == "diff-v") return HeadKind::diffusion_v;
  if (s == "gmm") return HeadKind::gmm;
  fail_config("unknown head '" + std::string(s) + "' (want mse | diff-eps | diff-v | gmm)");
}

struct GenTrainOptions {
  int steps = 2000;
  int batch = 8;
  uint64_t seed = 0;
  double lr = 3e-4;
  int warmup = 100;
  double weight_decay = 0.01;
  double clip = 1.0;
  bool joint_comprehension = true;    // sum caption cross-entropy into the step loss
  double comprehension_weight = 1.0;
  bool pre_resampler = false;         // target the fused grid instead of the resampled tokens
};

struct GenTrainResult {
  std::vector<float> gen_losses;
  std::vector<float> comp_losses;  // empty unless joint_comprehension
};

// One stored clip, prepared for the LM pipeline.
struct ClipSample {
  std::vector<float> patches;  // [1, F_sparse, grid, patch_dim]
  std::array<int, synth::kCaptionLen> caption{};
};
void load_clip(const synth::CorpusReader& corpus, int index, const nn::TokenizerConfig& tc,
               ClipSample* out);

// Frozen-pass target features for `batch` clips whose patches sit back to
// back in `patches`: the resampled tokens [B, K, dim], or the pre-resampler
// grid [B, positions, dim]. Appends nothing to the caller's graph.
void encode_targets(const nn::Tokenizer<float>& tok, ad::Tape<float>& tape, const float* patches,
                    int batch, bool pre_resampler, std::vector<float>* out);

// Token count a representation yields per clip.
inline int representation_tokens(const nn::TokenizerConfig& tc, bool pre_resampler) {
  return pre_resampler ? tc.positions() : tc.tokens;
}

// ---------------------------------------------------------------------------
// Per-head loss adapters: one step's generation loss over flattened rows.

inline ad::Ref<float> head_step_loss(ad::Tape<float>& t, nn::GmmHead<float>& head,
                                     ad::Ref<float> cond, ad::Ref<float> target,
                                     const diff::NoiseSchedule&, kern::Rng&) {
  return head.loss(t, cond, target);
}

inline ad::Ref<float> head_step_loss(ad::Tape<float>& t, nn::MseHead<float>& head,
                                     ad::Ref<float> cond, ad::Ref<float> target,
                                     const diff::NoiseSchedule&, kern::Rng&) {
  return head.loss(t, cond, target);
}

inline ad::Ref<float> head_step_loss(ad::Tape<float>& t, nn::DiffusionHead<float>& head,
                                     ad::Ref<float> cond, ad::Ref<float> target,
                                     const diff::NoiseSchedule& sched, kern::Rng& rng) {
  const int ts = 1 + rng.uniform_int(sched.T);
  std::vector<float> ev(target.count());
  for (auto& v : ev) v = rng.normalf();
  ad::Ref<float> eps = t.input(target.shape(), ev);
  return head.loss(t, cond, target, sched, ts, eps);
}

// ---------------------------------------------------------------------------

// Trains the LM and head against frozen-tokenizer targets. The tokenizer
// never enters the optimizer; a per-step scan asserts no gradient reaches it.
template <typename Head>
GenTrainResult train_generation(const synth::CorpusReader& corpus, nn::Tokenizer<float>& tok,
                                nn::Lm<float>& lm, Head& head, nn::Mechanism mech,
                                const diff::NoiseSchedule& sched, const GenTrainOptions& opt) {
  const auto& tc = tok.config();
  const auto& lc = lm.config();
  const int n_tok = representation_tokens(tc, opt.pre_resampler);
  if (lc.queries != n_tok || lc.token_dim != tc.dim)
    fail_config("lm training: lm wants " + std::to_string(lc.queries) + "x" +
                std::to_string(lc.token_dim) + " tokens but the representation yields " +
                std::to_string(n_tok) + "x" + std::to_string(tc.dim));
  if (head.config().lm_dim != lc.dim || head.config().token_dim != tc.dim)
    fail_config("lm training: head dims (" + std::to_string(head.config().lm_dim) + "->" +
                std::to_string(head.config().token_dim) + ") do not match lm " +
                std::to_string(lc.dim) + " and tokens " + std::to_string(tc.dim));
  if (opt.steps < 1 || opt.batch < 1) fail_config("lm training: steps and batch must be positive");
  if (corpus.count() < 1) fail_runtime("lm training: empty corpus");

  std::vector<ad::Param<float>*> params = lm.params().all();
  for (auto* p : head.params().all()) params.push_back(p);

  nn::AdamW<float>::Config ocfg;
  ocfg.lr = opt.lr;
  ocfg.warmup = opt.warmup;
  ocfg.weight_decay = opt.weight_decay;
  ocfg.clip = opt.clip;
  nn::AdamW<float> adam(ocfg);

  GenTrainResult res;
  res.gen_losses.reserve(opt.steps);
  if (opt.joint_comprehension) res.comp_losses.reserve(opt.steps);

  ad::Tape<float> tape;
  const int64_t clip_patches = static_cast<int64_t>(tc.frames) * tc.grid() * tc.patch_dim();
  std::vector<float> patches(opt.batch * clip_patches);
  std::vector<int> captions(static_cast<size_t>(opt.batch) * synth::kCaptionLen);
  std::vector<float> targets;
  ClipSample sample;

  for (int step = 0; step < opt.steps; ++step) {
    kern::Rng rng = kern::Rng::stream(opt.seed, "lm-gen", {static_cast<uint64_t>(step)});
    for (int b = 0; b < opt.batch; ++b) {
      load_clip(corpus, rng.uniform_int(corpus.count()), tc, &sample);
      std::memcpy(patches.data() + b * clip_patches, sample.patches.data(),
                  sizeof(float) * clip_patches);
      for (int k = 0; k < synth::kCaptionLen; ++k)
        captions[b * synth::kCaptionLen + k] = sample.caption[k];
    }
    encode_targets(tok, tape, patches.data(), opt.batch, opt.pre_resampler, &targets);

    tape.reset();
    lm.params().zero_grad();
    head.params().zero_grad();
    ad::Ref<float> target = tape.borrow({opt.batch, n_tok, tc.dim}, targets.data());
    ad::Ref<float> cond = lm.generation_outputs(
        tape, mech, captions, mech == nn::Mechanism::ar_causal ? target : ad::Ref<float>{});
    ad::Ref<float> cond2 = tape.reshape(cond, {opt.batch * n_tok, lc.dim});
    ad::Ref<float> target2 = tape.reshape(target, {opt.batch * n_tok, tc.dim});
    ad::Ref<float> gen = head_step_loss(tape, head, cond2, target2, sched, rng);
    ad::Ref<float> total = gen;
    ad::Ref<float> comp;
    if (opt.joint_comprehension) {
      comp = lm.comprehend_loss(tape, target, captions);
      total = tape.add(gen, tape.scale(comp, static_cast<float>(opt.comprehension_weight)));
    }
    tape.backward(total);

    const float gv = gen.scalar();
    if (!std::isfinite(gv))
      fail_runtime("lm training: non-finite generation loss at step " + std::to_string(step));
    res.gen_losses.push_back(gv);
    if (opt.joint_comprehension) {
      const float cv = comp.scalar();
      if (!std::isfinite(cv))
        fail_runtime("lm training: non-finite comprehension loss at step " + std::to_string(step));
      res.comp_losses.push_back(cv);
    }
    adam.step(params);

    for (const auto* p : tok.params().all())
      for (float g : p->grad)
        if (g != 0.0f)
          fail_runtime("gradient leaked into frozen tokenizer parameter " + p->name);
  }
  return res;
}

}  // namespace divot::vid
