#pragma once

#include <cstdint>
#include <vector>

#include "divot/detokenizer.hpp"
#include "divot/diffusion.hpp"
#include "divot/synth.hpp"
#include "divot/tokenizer.hpp"

// The two-stage training recipe for the video tokenizer/de-tokenizer pair and
// clip reconstruction on top of the trained checkpoints. Stage 1 trains the
// tokenizer and the denoiser end-to-end with v-prediction and no condition
// dropout; stage 2 freezes the tokenizer and fine-tunes the denoiser alone as
// a generator, swapping the token condition for a learned null embedding on a
// small fraction of samples so classifier-free guidance works at sampling
// time.

namespace divot::vid {

struct StageOptions {
  int steps = 1000;
  int batch = 8;
  uint64_t seed = 0;
  double lr = 3e-4;
  int warmup = 100;
  double weight_decay = 0.01;
  double clip = 1.0;
  float dropout = 0.05f;                 // stage 2: per-sample null-condition rate
  bool frozen_random_condition = false;  // stage 1 control: random vectors instead of the tokenizer
};

struct StageResult {
  std::vector<float> losses;  // one entry per step
  int dropout_count = 0;      // samples that saw the null condition
  int dropout_total = 0;      // samples processed
};

StageResult train_stage1(const synth::CorpusReader& corpus, nn::Tokenizer<float>& tok, nn::Detokenizer<float>& detok,
                         const diff::NoiseSchedule& sched, const StageOptions& opt);

StageResult finetune_stage2(const synth::CorpusReader& corpus, nn::Tokenizer<float>& tok, nn::Detokenizer<float>& detok,
                            const diff::NoiseSchedule& sched, const StageOptions& opt);

// Encode the clip's sparse frames, sample dense latents conditioned on the
// tokens, and return the decoded clip (same dense layout, clamped to [0,1]).
void reconstruct(const float* dense_clip, const nn::Tokenizer<float>& tok, const nn::Detokenizer<float>& detok,
                 const diff::NoiseSchedule& sched, float guidance, uint64_t seed, float* out_dense);

// Sample a dense clip straight from a token set [cond_tokens, cond_dim]
// (the decoding half of reconstruct; generation pipelines feed it tokens an
// LM produced instead of encoded ones).
void decode_tokens(const float* tokens, const nn::Detokenizer<float>& detok, const diff::NoiseSchedule& sched,
                   float guidance, uint64_t seed, float* out_dense);

}  // namespace divot::vid
