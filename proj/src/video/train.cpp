#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "divot/errors.hpp"
#include "divot/optim.hpp"
#include "divot/patches.hpp"
#include "divot/video_train.hpp"

namespace divot::vid {

using ad::Ref;
using ad::Tape;
using kern::Rng;

namespace {

void check_configs(const nn::Tokenizer<float>& tok, const nn::Detokenizer<float>& detok) {
  const auto& tc = tok.config();
  const auto& dc = detok.config();
  if (tc.dim != dc.cond_dim || tc.tokens != dc.cond_tokens)
    fail_config("training: tokenizer output (" + std::to_string(tc.tokens) + "x" + std::to_string(tc.dim) +
                ") does not match the denoiser condition (" + std::to_string(dc.cond_tokens) + "x" +
                std::to_string(dc.cond_dim) + ")");
  if (tc.frames != synth::kSparseFrames || dc.frames != synth::kDenseFrames || tc.height != synth::kH ||
      tc.width != synth::kW || dc.height != synth::kH || dc.width != synth::kW || tc.channels != synth::kC ||
      dc.channels != synth::kC)
    fail_config("training: model dimensions do not match the clip format");
}

// One training batch: tokenizer input patches (raw [0,1] pixels) and the
// dense latents the denoiser diffuses (pixels rescaled to [-1,1]).
struct ClipBatch {
  std::vector<float> patches;  // [B, F_sparse, grid, patch_dim]
  std::vector<float> z0;       // [B, positions, latent_dim]
  std::vector<int> indices;
};

void assemble(const synth::CorpusReader& corpus, Rng& rng, int batch, const nn::TokenizerConfig& tc,
              const nn::DenoiserConfig& dc, ClipBatch* out) {
  const int64_t sp = static_cast<int64_t>(tc.frames) * tc.grid() * tc.patch_dim();
  const int64_t dp = static_cast<int64_t>(dc.positions()) * dc.latent_dim();
  out->patches.resize(batch * sp);
  out->z0.resize(batch * dp);
  out->indices.resize(batch);
  synth::ClipRecord rec;
  std::vector<float> sparse(synth::kSparseFrames * synth::kFramePixels);
  for (int b = 0; b < batch; ++b) {
    const int idx = rng.uniform_int(corpus.count());
    out->indices[b] = idx;
    corpus.read(idx, &rec);
    synth::extract_sparse(rec.dense.data(), sparse.data());
    patchify(sparse.data(), tc.frames, tc.height, tc.width, tc.channels, tc.patch, out->patches.data() + b * sp);
    for (float& v : rec.dense) v = 2.0f * v - 1.0f;
    patchify(rec.dense.data(), dc.frames, dc.height, dc.width, dc.channels, dc.patch, out->z0.data() + b * dp);
  }
}

float run_step_loss(Ref<float> loss, int step, const char* stage) {
  const float value = loss.scalar();
  if (!std::isfinite(value)) fail_runtime(std::string(stage) + ": non-finite loss at step " + std::to_string(step));
  return value;
}

}  // namespace

StageResult train_stage1(const synth::CorpusReader& corpus, nn::Tokenizer<float>& tok, nn::Detokenizer<float>& detok,
                         const diff::NoiseSchedule& sched, const StageOptions& opt) {
  check_configs(tok, detok);
  const auto& tc = tok.config();
  const auto& dc = detok.config();

  std::vector<ad::Param<float>*> params = detok.params().all();
  if (!opt.frozen_random_condition)
    for (auto* p : tok.params().all()) params.push_back(p);

  nn::AdamW<float>::Config ocfg;
  ocfg.lr = opt.lr;
  ocfg.warmup = opt.warmup;
  ocfg.weight_decay = opt.weight_decay;
  ocfg.clip = opt.clip;
  nn::AdamW<float> adam(ocfg);

  StageResult res;
  res.losses.reserve(opt.steps);
  Tape<float> tape;
  ClipBatch batch;
  const int64_t n_lat = static_cast<int64_t>(opt.batch) * dc.positions() * dc.latent_dim();
  std::vector<float> eps(n_lat), xt(n_lat);
  std::vector<float> frozen_tokens;

  for (int step = 0; step < opt.steps; ++step) {
    tape.reset();
    Rng rng = Rng::stream(opt.seed, "stage1", {static_cast<uint64_t>(step)});
    assemble(corpus, rng, opt.batch, tc, dc, &batch);
    const int t = 1 + rng.uniform_int(sched.T);
    const float abar = sched.alpha_bar(t);
    for (auto& e : eps) e = rng.normalf();
    diff::forward_diffuse(batch.z0.data(), eps.data(), static_cast<int>(n_lat), abar, xt.data());

    Ref<float> x0r = tape.borrow({opt.batch, dc.positions(), dc.latent_dim()}, batch.z0.data());
    Ref<float> epsr = tape.borrow({opt.batch, dc.positions(), dc.latent_dim()}, eps.data());
    Ref<float> xtr = tape.borrow({opt.batch, dc.positions(), dc.latent_dim()}, xt.data());

    Ref<float> tokens;
    if (opt.frozen_random_condition) {
      // control run: the condition is a fixed random vector per clip, so any
      // gap to the jointly trained run is attributable to the tokenizer
      frozen_tokens.resize(static_cast<int64_t>(opt.batch) * tc.tokens * tc.dim);
      for (int b = 0; b < opt.batch; ++b) {
        Rng crng = Rng::stream(opt.seed, "frozen-cond", {static_cast<uint64_t>(batch.indices[b])});
        float* dst = frozen_tokens.data() + static_cast<int64_t>(b) * tc.tokens * tc.dim;
        for (int i = 0; i < tc.tokens * tc.dim; ++i) dst[i] = crng.normalf();
      }
      tokens = tape.borrow({opt.batch, tc.tokens, tc.dim}, frozen_tokens.data());
    } else {
      Ref<float> patches = tape.borrow({opt.batch, tc.frames, tc.grid(), tc.patch_dim()}, batch.patches.data());
      tokens = tok.encode(tape, patches);
    }

    Ref<float> pred = detok.predict(tape, xtr, t, tokens);
    Ref<float> loss = diff::diffusion_loss(tape, pred, x0r, epsr, abar, diff::PredMode::v_pred);
    res.losses.push_back(run_step_loss(loss, step, "stage 1"));

    tok.params().zero_grad();
    detok.params().zero_grad();
    tape.backward(loss);
    adam.step(params);
    res.dropout_total += opt.batch;  // counted but never dropped in stage 1
  }
  return res;
}

StageResult finetune_stage2(const synth::CorpusReader& corpus, nn::Tokenizer<float>& tok, nn::Detokenizer<float>& detok,
                            const diff::NoiseSchedule& sched, const StageOptions& opt) {
  check_configs(tok, detok);
  const auto& tc = tok.config();
  const auto& dc = detok.config();
  std::vector<ad::Param<float>*> params = detok.params().all();

  nn::AdamW<float>::Config ocfg;
  ocfg.lr = opt.lr;
  ocfg.warmup = opt.warmup;
  ocfg.weight_decay = opt.weight_decay;
  ocfg.clip = opt.clip;
  nn::AdamW<float> adam(ocfg);

  StageResult res;
  res.losses.reserve(opt.steps);
  Tape<float> tape;
  ClipBatch batch;
  const int64_t n_lat = static_cast<int64_t>(opt.batch) * dc.positions() * dc.latent_dim();
  std::vector<float> eps(n_lat), xt(n_lat);
  std::vector<float> tokbuf(static_cast<int64_t>(opt.batch) * tc.tokens * tc.dim);

  for (int step = 0; step < opt.steps; ++step) {
    tape.reset();
    Rng rng = Rng::stream(opt.seed, "stage2", {static_cast<uint64_t>(step)});
    assemble(corpus, rng, opt.batch, tc, dc, &batch);
    const int t = 1 + rng.uniform_int(sched.T);
    const float abar = sched.alpha_bar(t);
    for (auto& e : eps) e = rng.normalf();
    diff::forward_diffuse(batch.z0.data(), eps.data(), static_cast<int>(n_lat), abar, xt.data());

    // frozen tokenizer: encode without recording gradients, then hand the
    // values back in as plain data
    tape.set_grad_enabled(false);
    Ref<float> patches = tape.borrow({opt.batch, tc.frames, tc.grid(), tc.patch_dim()}, batch.patches.data());
    Ref<float> enc = tok.encode(tape, patches);
    std::memcpy(tokbuf.data(), enc.value().data(), sizeof(float) * tokbuf.size());
    tape.set_grad_enabled(true);

    Ref<float> tok_in = tape.borrow({opt.batch, tc.tokens, tc.dim}, tokbuf.data());
    std::vector<Ref<float>> rows;
    rows.reserve(opt.batch);
    for (int b = 0; b < opt.batch; ++b) {
      const bool drop = rng.bernoulli(opt.dropout);
      if (drop) {
        rows.push_back(detok.null_tokens(tape, 1));
        ++res.dropout_count;
      } else {
        rows.push_back(tape.slice(tok_in, 0, b, 1));
      }
    }
    res.dropout_total += opt.batch;
    Ref<float> cond = opt.batch == 1 ? rows[0] : tape.concat(rows, 0);

    Ref<float> x0r = tape.borrow({opt.batch, dc.positions(), dc.latent_dim()}, batch.z0.data());
    Ref<float> epsr = tape.borrow({opt.batch, dc.positions(), dc.latent_dim()}, eps.data());
    Ref<float> xtr = tape.borrow({opt.batch, dc.positions(), dc.latent_dim()}, xt.data());
    Ref<float> pred = detok.predict(tape, xtr, t, cond);
    Ref<float> loss = diff::diffusion_loss(tape, pred, x0r, epsr, abar, diff::PredMode::v_pred);
    res.losses.push_back(run_step_loss(loss, step, "stage 2"));

    tok.params().zero_grad();
    detok.params().zero_grad();
    tape.backward(loss);
    adam.step(params);

    for (const auto* p : tok.params().all())
      for (const float g : p->grad)
        if (g != 0.0f) fail_runtime("stage 2: gradient leaked into frozen tokenizer parameter " + p->name);
  }
  return res;
}

void reconstruct(const float* dense_clip, const nn::Tokenizer<float>& tok, const nn::Detokenizer<float>& detok,
                 const diff::NoiseSchedule& sched, float guidance, uint64_t seed, float* out_dense) {
  check_configs(tok, detok);
  const auto& tc = tok.config();
  const auto& dc = detok.config();

  std::vector<float> sparse(synth::kSparseFrames * synth::kFramePixels);
  synth::extract_sparse(dense_clip, sparse.data());
  std::vector<float> patches(static_cast<int64_t>(tc.frames) * tc.grid() * tc.patch_dim());
  patchify(sparse.data(), tc.frames, tc.height, tc.width, tc.channels, tc.patch, patches.data());

  Tape<float> tape;
  tape.set_grad_enabled(false);
  std::vector<float> tokbuf(static_cast<int64_t>(tc.tokens) * tc.dim);
  {
    Ref<float> pr = tape.borrow({1, tc.frames, tc.grid(), tc.patch_dim()}, patches.data());
    Ref<float> enc = tok.encode(tape, pr);
    std::memcpy(tokbuf.data(), enc.value().data(), sizeof(float) * tokbuf.size());
  }
  tape.set_grad_enabled(true);
  decode_tokens(tokbuf.data(), detok, sched, guidance, seed, out_dense);
}

void decode_tokens(const float* tokens, const nn::Detokenizer<float>& detok, const diff::NoiseSchedule& sched,
                   float guidance, uint64_t seed, float* out_dense) {
  const auto& dc = detok.config();
  Tape<float> tape;
  tape.set_grad_enabled(false);

  const int P = dc.positions(), L = dc.latent_dim();
  diff::DenoiseFn fn = [&](const float* x, int batch, int t, bool use_null, float* pred) {
    tape.reset();
    Ref<float> zt = tape.borrow({batch, P, L}, x);
    Ref<float> cond;
    if (!use_null) cond = tape.borrow({batch, dc.cond_tokens, dc.cond_dim}, tokens);
    Ref<float> out = detok.predict(tape, zt, t, cond, use_null);
    std::memcpy(pred, out.value().data(), sizeof(float) * batch * P * L);
  };

  diff::SampleConfig scfg;
  scfg.mode = diff::PredMode::v_pred;
  scfg.guidance = guidance;
  scfg.seed = seed;
  std::vector<float> x0n(static_cast<int64_t>(P) * L);
  diff::sample(fn, 1, P * L, sched, scfg, x0n.data());

  for (float& v : x0n) {
    v = 0.5f * (v + 1.0f);
    v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
  }
  unpatchify(x0n.data(), dc.frames, dc.height, dc.width, dc.channels, dc.patch, out_dense);
}

}  // namespace divot::vid
