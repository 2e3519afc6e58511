#pragma once

// One flat configuration object for the whole pipeline: corpus generation,
// the two tokenizer training stages, generation training, and evaluation.
// Serialized as flat `section.key=value` text lines so a run directory's
// resolved config is diffable and round-trips losslessly; unknown keys and
// malformed values are configuration errors.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "divot/detokenizer.hpp"
#include "divot/diffusion.hpp"
#include "divot/heads.hpp"
#include "divot/lm.hpp"
#include "divot/lm_train.hpp"
#include "divot/tokenizer.hpp"
#include "divot/video_train.hpp"

namespace divot::cli {

struct RunConfig {
  uint64_t seed = 0;           // master seed; every stage derives from it
  std::string out = "runs/divot";

  // corpus
  int corpus_clips = 20000;
  int corpus_shard_cap = 500;
  double corpus_seconds = 2.0;  // fixed by the renderer, validated
  int corpus_resolution = 32;   // fixed by the renderer, validated

  // tokenizer (sparse frames -> K tokens)
  int tok_patch = 4;
  int tok_dim = 128;
  int tok_heads = 4;
  int tok_temporal_layers = 2;
  int tok_fusion_layers = 2;
  int tok_resampler_layers = 2;
  int tok_tokens = 16;
  int tok_pool = 5;
  int tok_mlp_mult = 4;

  // denoiser (dense-latent de-tokenizer)
  int den_patch = 4;
  int den_dim = 128;
  int den_heads = 4;
  int den_depth = 4;
  int den_mlp_mult = 4;

  int schedule_steps = 200;  // shared diffusion schedule length

  // stage 1: joint tokenizer + denoiser training
  int s1_steps = 3000;
  int s1_batch = 8;
  int s1_warmup = 100;
  double s1_lr = 3e-4;
  double s1_weight_decay = 0.01;
  double s1_clip = 1.0;

  // stage 2: denoiser fine-tune with condition dropout
  int s2_steps = 1500;
  int s2_batch = 8;
  int s2_warmup = 100;
  double s2_lr = 1e-4;
  double s2_weight_decay = 0.01;
  double s2_clip = 1.0;
  double s2_dropout = 0.05;

  // language model backbone
  int lm_layers = 4;
  int lm_dim = 256;
  int lm_heads = 4;
  int lm_mlp_mult = 4;

  // generative head
  std::string head = "gmm";  // mse | diff-eps | diff-v | gmm
  int head_hidden = 256;
  int gmm_components = 16;
  double gmm_mean_spread = 0.5;
  double gmm_var_bias = 0.0;
  double gmm_temperature = 1.0;
  int diff_time_dim = 64;

  // generation training
  std::string mechanism = "query_bidirectional";
  std::string representation = "resampled";  // resampled | pre-resampler
  int gen_steps = 2000;
  int gen_batch = 8;
  int gen_warmup = 100;
  double gen_lr = 3e-4;
  double gen_weight_decay = 0.01;
  double gen_clip = 1.0;
  bool gen_joint_comprehension = true;
  double gen_comprehension_weight = 1.0;

  // evaluation
  int eval_clips = 48;
  double eval_guidance = 1.5;
  int eval_div_captions = 6;
  int eval_div_samples = 3;
  bool eval_dump_clips = false;

  // ---- key-value serialization ----
  static const std::vector<std::string>& keys();
  std::string get(const std::string& key) const;
  void set(const std::string& key, const std::string& value);  // throws on unknown key / bad value
  std::string to_text() const;                                 // every key, one per line, fixed order
  static RunConfig from_text(const std::string& text);
  static RunConfig load_file(const std::string& path);
  void save_file(const std::string& path) const;

  // Consistency of the whole config (delegates to the module validators).
  void validate() const;

  // ---- derived module configs ----
  nn::TokenizerConfig tokenizer_config() const;
  nn::DenoiserConfig denoiser_config() const;
  diff::NoiseSchedule noise_schedule() const { return diff::NoiseSchedule(schedule_steps); }
  vid::StageOptions stage1_options() const;
  vid::StageOptions stage2_options() const;
  nn::Lm<float>::Config lm_config() const;
  vid::HeadKind head_kind() const { return vid::head_kind_from_name(head); }
  nn::GmmHead<float>::Config gmm_config() const;
  nn::MseHead<float>::Config mse_config() const;
  nn::DiffusionHead<float>::Config diffusion_config() const;
  nn::Mechanism lm_mechanism() const { return nn::mechanism_from_name(mechanism); }
  bool pre_resampler() const;
  vid::GenTrainOptions gen_options() const;
};

// CLI spellings of the mechanisms (ar | causal-query | bidir-query) on top of
// the canonical names; returns the canonical name.
std::string canonical_mechanism(const std::string& name);

}  // namespace divot::cli
