#pragma once

// The pipeline steps behind the command-line tool, shared with the acceptance
// checks: corpus generation, the two tokenizer training stages, generation
// training plus evaluation, report collation, and the ablation runner. Every
// step writes its resolved config next to its artifacts and is deterministic
// for a fixed config and seed.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "divot/lm_train.hpp"
#include "divot/metrics.hpp"
#include "divot/runcfg.hpp"
#include "divot/video_train.hpp"

namespace divot::cli {

// ---- artifact locations under cfg.out ----
std::string corpus_prefix(const RunConfig& cfg);
std::string pair_checkpoint(const RunConfig& cfg);   // stage-1 tokenizer + denoiser
std::string detok_checkpoint(const RunConfig& cfg);  // stage-2 fine-tuned pair
std::string runs_dir(const RunConfig& cfg);
std::string lm_checkpoint(const RunConfig& cfg, const std::string& run_id);

// Renders cfg.corpus_clips clips into shards; returns the number written.
int generate_corpus(const RunConfig& cfg);

// Stage 1: joint tokenizer + denoiser training from scratch.
vid::StageResult run_stage1(const RunConfig& cfg);

// Stage 2: loads the stage-1 pair and fine-tunes the denoiser with condition
// dropout so guidance works at sampling time.
vid::StageResult run_stage2(const RunConfig& cfg);

// Whichever generative head the config picked, behind one surface.
struct HeadSet {
  vid::HeadKind kind = vid::HeadKind::gmm;
  std::unique_ptr<nn::MseHead<float>> mse;
  std::unique_ptr<nn::DiffusionHead<float>> diffusion;
  std::unique_ptr<nn::GmmHead<float>> gmm;

  static HeadSet make(const RunConfig& cfg);
  std::vector<ad::Param<float>*> params();
  const char* name() const { return vid::head_kind_name(kind); }
  vid::GenTrainResult train(const synth::CorpusReader& corpus, nn::Tokenizer<float>& tok, nn::Lm<float>& lm,
                            nn::Mechanism mech, const diff::NoiseSchedule& sched, const vid::GenTrainOptions& opt);
  // Maps condition rows to sampled tokens; each call advances its own
  // counter-derived stream so autoregressive feedback never reuses draws.
  nn::RowSampler sampler(ad::Tape<float>& tape, const diff::NoiseSchedule& sched, uint64_t seed,
                         double temperature) const;
};

struct LmRun {
  vid::GenTrainResult train;
  metrics::RunRow row;  // also written as <runs>/<run_id>.metrics.json
};

// Generation training for cfg.head / cfg.mechanism / cfg.representation on
// top of the frozen stage-2 pair, followed by generation-quality evaluation.
LmRun run_lm(const RunConfig& cfg, const std::string& run_id);

// report.csv / report.json over every sidecar under dir.
std::vector<metrics::RunRow> collate_runs(const std::string& dir);

struct SeedVerdict {
  uint64_t seed = 0;
  bool pass = false;
  std::string detail;
};

struct AblateOutcome {
  std::string suite;
  std::vector<metrics::RunRow> rows;
  std::vector<SeedVerdict> verdicts;
  bool majority_pass = false;
};

// Runs the suite's factorial cells for every seed on top of the existing
// stage-2 checkpoint, evaluates each run, and scores the orderings:
//   q1: representation (resampled vs pre-resampler targets)
//   q2: generative head (gmm vs mse vs both diffusion heads)
//   q3: generation mechanism (bidirectional vs causal queries vs AR)
// Writes <out>/ablate-<suite>.json and refreshes the run report.
AblateOutcome run_ablation(const RunConfig& base, const std::string& suite, const std::vector<uint64_t>& seeds);

}  // namespace divot::cli
