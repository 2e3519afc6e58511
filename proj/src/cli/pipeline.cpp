#include "divot/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include "divot/checkpoint.hpp"
#include "divot/errors.hpp"
#include "json.hpp"

namespace divot::cli {

namespace fs = std::filesystem;

namespace {

std::vector<ad::Param<float>*> pair_params(nn::Tokenizer<float>& tok, nn::Detokenizer<float>& detok) {
  std::vector<ad::Param<float>*> all = tok.params().all();
  for (auto* p : detok.params().all()) all.push_back(p);
  return all;
}

void write_loss_csv(const std::string& path, const vid::StageResult& res) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail_runtime("cannot open " + path + " for writing");
  out << "step,loss\n";
  char buf[64];
  for (size_t i = 0; i < res.losses.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", i, static_cast<double>(res.losses[i]));
    out << buf;
  }
  if (!out.good()) fail_runtime("cannot write " + path);
}

void write_gen_loss_csv(const std::string& path, const vid::GenTrainResult& res) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail_runtime("cannot open " + path + " for writing");
  const bool joint = !res.comp_losses.empty();
  out << (joint ? "step,gen_loss,comp_loss\n" : "step,gen_loss\n");
  char buf[96];
  for (size_t i = 0; i < res.gen_losses.size(); ++i) {
    if (joint)
      std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", i, static_cast<double>(res.gen_losses[i]),
                    static_cast<double>(res.comp_losses[i]));
    else
      std::snprintf(buf, sizeof buf, "%zu,%.9g\n", i, static_cast<double>(res.gen_losses[i]));
    out << buf;
  }
  if (!out.good()) fail_runtime("cannot write " + path);
}

void require_file(const std::string& path, const std::string& hint) {
  if (!fs::exists(path)) fail_runtime("missing " + path + "; " + hint);
}

// Generated rows -> a decoded dense clip. For pre-resampler targets the rows
// are fused-grid features, pushed through the frozen resampler first.
void decode_rows(const RunConfig& cfg, const nn::Tokenizer<float>& tok, const nn::Detokenizer<float>& detok,
                 const diff::NoiseSchedule& sched, ad::Tape<float>& tape, const float* rows, uint64_t seed,
                 float* out_dense) {
  const auto& tc = tok.config();
  if (!cfg.pre_resampler()) {
    vid::decode_tokens(rows, detok, sched, static_cast<float>(cfg.eval_guidance), seed, out_dense);
    return;
  }
  std::vector<float> tokens(static_cast<size_t>(tc.tokens) * tc.dim);
  tape.set_grad_enabled(false);
  tape.reset();
  ad::Ref<float> fused = tape.borrow({1, tc.positions(), tc.dim}, rows);
  ad::Ref<float> toks = tok.resample(tape, fused);
  std::memcpy(tokens.data(), toks.value().data(), sizeof(float) * tokens.size());
  tape.reset();
  tape.set_grad_enabled(true);
  vid::decode_tokens(tokens.data(), detok, sched, static_cast<float>(cfg.eval_guidance), seed, out_dense);
}

metrics::RunRow evaluate_generation(const RunConfig& cfg, const nn::Tokenizer<float>& tok,
                                    const nn::Detokenizer<float>& detok, const nn::Lm<float>& lm,
                                    const HeadSet& head, const std::string& run_id) {
  const auto& tc = tok.config();
  const nn::Mechanism mech = cfg.lm_mechanism();
  const int n_rows = lm.config().queries;
  const int64_t row_floats = static_cast<int64_t>(n_rows) * tc.dim;
  const diff::NoiseSchedule sched = cfg.noise_schedule();
  const synth::OracleProbe probe;
  ad::Tape<float> tape;

  metrics::FeatureSet real;
  real.source = "real";
  metrics::FeatureSet gen;
  gen.source = "generated";
  std::vector<double> scores;
  scores.reserve(cfg.eval_clips);

  std::vector<float> dense(synth::kClipFloats);
  std::vector<float> sparse(static_cast<size_t>(synth::kSparseFrames) * synth::kFramePixels);
  std::vector<float> rows(row_floats);
  std::vector<float> decoded(synth::kClipFloats);
  std::vector<float> dump;
  if (cfg.eval_dump_clips) dump.reserve(static_cast<size_t>(cfg.eval_clips) * synth::kClipFloats);

  for (int i = 0; i < cfg.eval_clips; ++i) {
    kern::Rng spec_rng = kern::Rng::stream(cfg.seed, "eval-spec", {static_cast<uint64_t>(i)});
    const synth::FactorSpec spec = synth::sample_spec(spec_rng);
    synth::render_dense_clip(spec, dense.data());
    synth::extract_sparse(dense.data(), sparse.data());
    real.append(metrics::factor_embedding(probe.probe(sparse.data(), synth::kSparseFrames)));

    const auto cap = synth::encode_caption(synth::discretize(spec));
    const std::vector<int> caption(cap.begin(), cap.end());
    const uint64_t gen_seed = kern::Rng::stream(cfg.seed, "eval-gen", {static_cast<uint64_t>(i)}).u64();
    const nn::RowSampler sampler = head.sampler(tape, sched, gen_seed, cfg.gmm_temperature);
    nn::generate_tokens(tape, lm, mech, caption, sampler, rows.data());

    const uint64_t decode_seed = kern::Rng::stream(cfg.seed, "eval-decode", {static_cast<uint64_t>(i)}).u64();
    decode_rows(cfg, tok, detok, sched, tape, rows.data(), decode_seed, decoded.data());
    synth::extract_sparse(decoded.data(), sparse.data());
    const synth::ProbeResult pr = probe.probe(sparse.data(), synth::kSparseFrames);
    scores.push_back(synth::OracleProbe::factor_match(pr, synth::discretize(spec)));
    gen.append(metrics::factor_embedding(pr));
    if (cfg.eval_dump_clips) dump.insert(dump.end(), decoded.begin(), decoded.end());
  }

  // diversity: repeated draws for a few fixed captions, compared in token space
  double diversity = 0.0;
  {
    std::vector<float> draws(static_cast<size_t>(cfg.eval_div_samples) * row_floats);
    for (int c = 0; c < cfg.eval_div_captions; ++c) {
      kern::Rng spec_rng = kern::Rng::stream(cfg.seed, "eval-spec", {static_cast<uint64_t>(c)});
      const synth::FactorSpec spec = synth::sample_spec(spec_rng);
      const auto cap = synth::encode_caption(synth::discretize(spec));
      const std::vector<int> caption(cap.begin(), cap.end());
      for (int s = 0; s < cfg.eval_div_samples; ++s) {
        const uint64_t seed =
            kern::Rng::stream(cfg.seed, "eval-div", {static_cast<uint64_t>(c), static_cast<uint64_t>(s)}).u64();
        const nn::RowSampler sampler = head.sampler(tape, sched, seed, cfg.gmm_temperature);
        nn::generate_tokens(tape, lm, mech, caption, sampler, draws.data() + static_cast<size_t>(s) * row_floats);
      }
      diversity += metrics::mean_pairwise_distance(draws.data(), cfg.eval_div_samples, static_cast<int>(row_floats));
    }
    diversity /= cfg.eval_div_captions;
  }

  const metrics::MatchStats ms = metrics::aggregate_scores(scores);
  metrics::RunRow row;
  row.run_id = run_id;
  row.head = head.name();
  row.mechanism = cfg.mechanism;
  row.representation = cfg.representation;
  row.frechet = metrics::frechet_distance(real, gen);
  row.factor_match_mean = ms.mean;
  row.factor_match_ci95 = ms.ci95;
  row.diversity = diversity;

  fs::create_directories(runs_dir(cfg));
  {
    const std::string path = runs_dir(cfg) + "/" + run_id + ".metrics.json";
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail_runtime("cannot open " + path + " for writing");
    out << metrics::run_row_json(row);
    if (!out.good()) fail_runtime("cannot write " + path);
  }
  if (cfg.eval_dump_clips) {
    const std::string path = runs_dir(cfg) + "/" + run_id + ".clips.bin";
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail_runtime("cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(dump.data()), static_cast<std::streamsize>(dump.size() * sizeof(float)));
    if (!out.good()) fail_runtime("cannot write " + path);
  }
  return row;
}

}  // namespace

std::string corpus_prefix(const RunConfig& cfg) { return cfg.out + "/corpus/clips"; }
std::string pair_checkpoint(const RunConfig& cfg) { return cfg.out + "/tokenizer.dvck"; }
std::string detok_checkpoint(const RunConfig& cfg) { return cfg.out + "/detok.dvck"; }
std::string runs_dir(const RunConfig& cfg) { return cfg.out + "/runs"; }
std::string lm_checkpoint(const RunConfig& cfg, const std::string& run_id) {
  return runs_dir(cfg) + "/" + run_id + ".dvck";
}

int generate_corpus(const RunConfig& cfg) {
  cfg.validate();
  fs::create_directories(cfg.out + "/corpus");
  cfg.save_file(cfg.out + "/config.txt");
  synth::CorpusWriter writer(corpus_prefix(cfg), cfg.corpus_shard_cap);
  std::vector<float> dense(synth::kClipFloats);
  for (int i = 0; i < cfg.corpus_clips; ++i) {
    kern::Rng rng = kern::Rng::stream(cfg.seed, "corpus", {static_cast<uint64_t>(i)});
    const synth::FactorSpec spec = synth::sample_spec(rng);
    synth::render_dense_clip(spec, dense.data());
    writer.add(static_cast<uint64_t>(i), spec, dense.data());
  }
  writer.finish();
  return writer.clips_written();
}

vid::StageResult run_stage1(const RunConfig& cfg) {
  cfg.validate();
  require_file(corpus_prefix(cfg) + "_0000.dvts", "generate the corpus first");
  const synth::CorpusReader corpus(corpus_prefix(cfg));
  nn::Tokenizer<float> tok(cfg.tokenizer_config());
  nn::Detokenizer<float> detok(cfg.denoiser_config());
  const diff::NoiseSchedule sched = cfg.noise_schedule();
  const vid::StageResult res = vid::train_stage1(corpus, tok, detok, sched, cfg.stage1_options());
  fs::create_directories(cfg.out);
  cfg.save_file(cfg.out + "/config.txt");
  io::save_checkpoint(pair_checkpoint(cfg), pair_params(tok, detok), {{"model", "tokenizer-pair"}, {"stage", "1"}});
  write_loss_csv(cfg.out + "/stage1_losses.csv", res);
  return res;
}

vid::StageResult run_stage2(const RunConfig& cfg) {
  cfg.validate();
  require_file(pair_checkpoint(cfg), "run `train tokenizer` first");
  const synth::CorpusReader corpus(corpus_prefix(cfg));
  nn::Tokenizer<float> tok(cfg.tokenizer_config());
  nn::Detokenizer<float> detok(cfg.denoiser_config());
  auto params = pair_params(tok, detok);
  io::load_checkpoint(pair_checkpoint(cfg), params);
  const diff::NoiseSchedule sched = cfg.noise_schedule();
  const vid::StageResult res = vid::finetune_stage2(corpus, tok, detok, sched, cfg.stage2_options());
  cfg.save_file(cfg.out + "/config.txt");
  io::save_checkpoint(detok_checkpoint(cfg), params,
                      {{"model", "tokenizer-pair"},
                       {"stage", "2"},
                       {"dropout_count", std::to_string(res.dropout_count)},
                       {"dropout_total", std::to_string(res.dropout_total)}});
  write_loss_csv(cfg.out + "/stage2_losses.csv", res);
  return res;
}

HeadSet HeadSet::make(const RunConfig& cfg) {
  HeadSet h;
  h.kind = cfg.head_kind();
  switch (h.kind) {
    case vid::HeadKind::mse: h.mse = std::make_unique<nn::MseHead<float>>(cfg.mse_config()); break;
    case vid::HeadKind::gmm: h.gmm = std::make_unique<nn::GmmHead<float>>(cfg.gmm_config()); break;
    default: h.diffusion = std::make_unique<nn::DiffusionHead<float>>(cfg.diffusion_config()); break;
  }
  return h;
}

std::vector<ad::Param<float>*> HeadSet::params() {
  switch (kind) {
    case vid::HeadKind::mse: return mse->params().all();
    case vid::HeadKind::gmm: return gmm->params().all();
    default: return diffusion->params().all();
  }
}

vid::GenTrainResult HeadSet::train(const synth::CorpusReader& corpus, nn::Tokenizer<float>& tok, nn::Lm<float>& lm,
                                   nn::Mechanism mech, const diff::NoiseSchedule& sched,
                                   const vid::GenTrainOptions& opt) {
  switch (kind) {
    case vid::HeadKind::mse: return vid::train_generation(corpus, tok, lm, *mse, mech, sched, opt);
    case vid::HeadKind::gmm: return vid::train_generation(corpus, tok, lm, *gmm, mech, sched, opt);
    default: return vid::train_generation(corpus, tok, lm, *diffusion, mech, sched, opt);
  }
}

nn::RowSampler HeadSet::sampler(ad::Tape<float>& tape, const diff::NoiseSchedule& sched, uint64_t seed,
                                double temperature) const {
  auto calls = std::make_shared<uint64_t>(0);
  switch (kind) {
    case vid::HeadKind::mse:
      return [this, &tape](const float* cond, int rows, float* out) {
        tape.set_grad_enabled(false);
        tape.reset();
        ad::Ref<float> h = tape.borrow({rows, mse->config().lm_dim}, cond);
        ad::Ref<float> p = mse->predict(tape, h);
        std::memcpy(out, p.value().data(), sizeof(float) * p.count());
        tape.reset();
        tape.set_grad_enabled(true);
      };
    case vid::HeadKind::gmm:
      return [this, &tape, seed, temperature, calls](const float* cond, int rows, float* out) {
        const uint64_t call = (*calls)++;
        const uint64_t call_seed = kern::Rng::stream(seed, "head-call", {call}).u64();
        gmm->sample_tokens(tape, cond, rows, call_seed, static_cast<float>(temperature), out);
      };
    default:
      return [this, &tape, &sched, seed, calls](const float* cond, int rows, float* out) {
        const uint64_t call = (*calls)++;
        const uint64_t call_seed = kern::Rng::stream(seed, "head-call", {call}).u64();
        diffusion->sample_tokens(tape, cond, rows, sched, call_seed, out);
      };
  }
}

LmRun run_lm(const RunConfig& cfg, const std::string& run_id) {
  cfg.validate();
  if (run_id.empty()) fail_config("train lm: run id must not be empty");
  require_file(detok_checkpoint(cfg), "run `train tokenizer` and `train detok` first");
  const synth::CorpusReader corpus(corpus_prefix(cfg));

  nn::Tokenizer<float> tok(cfg.tokenizer_config());
  nn::Detokenizer<float> detok(cfg.denoiser_config());
  auto frozen = pair_params(tok, detok);
  io::load_checkpoint(detok_checkpoint(cfg), frozen);

  nn::Lm<float> lm(cfg.lm_config());
  HeadSet head = HeadSet::make(cfg);
  const diff::NoiseSchedule sched = cfg.noise_schedule();

  LmRun out;
  out.train = head.train(corpus, tok, lm, cfg.lm_mechanism(), sched, cfg.gen_options());

  fs::create_directories(runs_dir(cfg));
  cfg.save_file(cfg.out + "/config.txt");
  cfg.save_file(runs_dir(cfg) + "/" + run_id + ".config.txt");
  std::vector<ad::Param<float>*> trained = lm.params().all();
  for (auto* p : head.params()) trained.push_back(p);
  io::save_checkpoint(lm_checkpoint(cfg, run_id), trained,
                      {{"model", "lm"},
                       {"head", cfg.head},
                       {"mechanism", cfg.mechanism},
                       {"representation", cfg.representation}});
  write_gen_loss_csv(runs_dir(cfg) + "/" + run_id + ".losses.csv", out.train);

  out.row = evaluate_generation(cfg, tok, detok, lm, head, run_id);
  return out;
}

std::vector<metrics::RunRow> collate_runs(const std::string& dir) { return metrics::write_report(dir); }

AblateOutcome run_ablation(const RunConfig& base, const std::string& suite, const std::vector<uint64_t>& seeds) {
  if (seeds.empty()) fail_config("ablate: need at least one seed");
  struct Cell {
    const char* head;
    const char* mech;
    const char* rep;
  };
  std::vector<Cell> cells;
  if (suite == "q1") {
    cells = {{"gmm", "query_bidirectional", "resampled"}, {"gmm", "query_bidirectional", "pre-resampler"}};
  } else if (suite == "q2") {
    cells = {{"mse", "query_bidirectional", "resampled"},
             {"diff-eps", "query_bidirectional", "resampled"},
             {"diff-v", "query_bidirectional", "resampled"},
             {"gmm", "query_bidirectional", "resampled"}};
  } else if (suite == "q3") {
    cells = {{"gmm", "ar_causal", "resampled"},
             {"gmm", "query_causal", "resampled"},
             {"gmm", "query_bidirectional", "resampled"}};
  } else {
    fail_config("ablate: unknown suite '" + suite + "' (want q1 | q2 | q3)");
  }

  AblateOutcome out;
  out.suite = suite;
  char buf[160];
  for (const uint64_t sd : seeds) {
    std::map<std::string, metrics::RunRow> by_key;
    for (const Cell& cell : cells) {
      RunConfig cfg = base;
      cfg.seed = sd;
      cfg.head = cell.head;
      cfg.mechanism = cell.mech;
      cfg.representation = cell.rep;
      const std::string run_id = suite + "-s" + std::to_string(sd) + "-" + cell.head + "-" + cell.mech + "-" + cell.rep;
      const LmRun run = run_lm(cfg, run_id);
      out.rows.push_back(run.row);
      by_key[std::string(cell.head) + "|" + cell.mech + "|" + cell.rep] = run.row;
    }

    SeedVerdict v;
    v.seed = sd;
    if (suite == "q1") {
      const auto& re = by_key.at("gmm|query_bidirectional|resampled");
      const auto& pre = by_key.at("gmm|query_bidirectional|pre-resampler");
      v.pass = re.factor_match_mean >= pre.factor_match_mean;
      std::snprintf(buf, sizeof buf, "factor_match resampled=%.4f pre-resampler=%.4f", re.factor_match_mean,
                    pre.factor_match_mean);
      v.detail = buf;
    } else if (suite == "q2") {
      const auto& g = by_key.at("gmm|query_bidirectional|resampled");
      const auto& m = by_key.at("mse|query_bidirectional|resampled");
      const auto& de = by_key.at("diff-eps|query_bidirectional|resampled");
      const auto& dv = by_key.at("diff-v|query_bidirectional|resampled");
      v.pass = g.factor_match_mean > m.factor_match_mean && g.factor_match_mean > de.factor_match_mean &&
               g.factor_match_mean > dv.factor_match_mean && g.frechet <= m.frechet && m.diversity < g.diversity;
      std::snprintf(buf, sizeof buf,
                    "factor_match gmm=%.4f mse=%.4f diff-eps=%.4f diff-v=%.4f; frechet gmm=%.3f mse=%.3f; "
                    "diversity mse=%.3f gmm=%.3f",
                    g.factor_match_mean, m.factor_match_mean, de.factor_match_mean, dv.factor_match_mean, g.frechet,
                    m.frechet, m.diversity, g.diversity);
      v.detail = buf;
    } else {
      const auto& ar = by_key.at("gmm|ar_causal|resampled");
      const auto& qc = by_key.at("gmm|query_causal|resampled");
      const auto& qb = by_key.at("gmm|query_bidirectional|resampled");
      v.pass = qb.factor_match_mean >= qc.factor_match_mean && qc.factor_match_mean > ar.factor_match_mean;
      std::snprintf(buf, sizeof buf, "factor_match bidir=%.4f causal=%.4f ar=%.4f", qb.factor_match_mean,
                    qc.factor_match_mean, ar.factor_match_mean);
      v.detail = buf;
    }
    out.verdicts.push_back(v);
  }

  int passes = 0;
  for (const SeedVerdict& v : out.verdicts) passes += v.pass ? 1 : 0;
  out.majority_pass = 2 * passes > static_cast<int>(out.verdicts.size());

  nlohmann::json j;
  j["suite"] = suite;
  j["majority_pass"] = out.majority_pass;
  j["seeds"] = nlohmann::json::array();
  for (const SeedVerdict& v : out.verdicts)
    j["seeds"].push_back({{"seed", v.seed}, {"pass", v.pass}, {"detail", v.detail}});
  {
    const std::string path = base.out + "/ablate-" + suite + ".json";
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) fail_runtime("cannot open " + path + " for writing");
    f << j.dump(2) << "\n";
    if (!f.good()) fail_runtime("cannot write " + path);
  }
  collate_runs(runs_dir(base));
  return out;
}

}  // namespace divot::cli
