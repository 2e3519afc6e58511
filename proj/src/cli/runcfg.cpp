#include "divot/runcfg.hpp"

#include <charconv>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <variant>

#include "divot/errors.hpp"
#include "divot/metrics.hpp"
#include "divot/synth.hpp"

namespace divot::cli {

namespace {

using FieldRef = std::variant<int RunConfig::*, double RunConfig::*, bool RunConfig::*, uint64_t RunConfig::*,
                              std::string RunConfig::*>;

struct Field {
  const char* key;
  FieldRef ref;
};

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      {"seed", &RunConfig::seed},
      {"out", &RunConfig::out},
      {"corpus.clips", &RunConfig::corpus_clips},
      {"corpus.shard_cap", &RunConfig::corpus_shard_cap},
      {"corpus.seconds", &RunConfig::corpus_seconds},
      {"corpus.resolution", &RunConfig::corpus_resolution},
      {"tokenizer.patch", &RunConfig::tok_patch},
      {"tokenizer.dim", &RunConfig::tok_dim},
      {"tokenizer.heads", &RunConfig::tok_heads},
      {"tokenizer.temporal_layers", &RunConfig::tok_temporal_layers},
      {"tokenizer.fusion_layers", &RunConfig::tok_fusion_layers},
      {"tokenizer.resampler_layers", &RunConfig::tok_resampler_layers},
      {"tokenizer.tokens", &RunConfig::tok_tokens},
      {"tokenizer.pool", &RunConfig::tok_pool},
      {"tokenizer.mlp_mult", &RunConfig::tok_mlp_mult},
      {"denoiser.patch", &RunConfig::den_patch},
      {"denoiser.dim", &RunConfig::den_dim},
      {"denoiser.heads", &RunConfig::den_heads},
      {"denoiser.depth", &RunConfig::den_depth},
      {"denoiser.mlp_mult", &RunConfig::den_mlp_mult},
      {"schedule.steps", &RunConfig::schedule_steps},
      {"stage1.steps", &RunConfig::s1_steps},
      {"stage1.batch", &RunConfig::s1_batch},
      {"stage1.warmup", &RunConfig::s1_warmup},
      {"stage1.lr", &RunConfig::s1_lr},
      {"stage1.weight_decay", &RunConfig::s1_weight_decay},
      {"stage1.clip", &RunConfig::s1_clip},
      {"stage2.steps", &RunConfig::s2_steps},
      {"stage2.batch", &RunConfig::s2_batch},
      {"stage2.warmup", &RunConfig::s2_warmup},
      {"stage2.lr", &RunConfig::s2_lr},
      {"stage2.weight_decay", &RunConfig::s2_weight_decay},
      {"stage2.clip", &RunConfig::s2_clip},
      {"stage2.dropout", &RunConfig::s2_dropout},
      {"lm.layers", &RunConfig::lm_layers},
      {"lm.dim", &RunConfig::lm_dim},
      {"lm.heads", &RunConfig::lm_heads},
      {"lm.mlp_mult", &RunConfig::lm_mlp_mult},
      {"head.kind", &RunConfig::head},
      {"head.hidden", &RunConfig::head_hidden},
      {"gmm.components", &RunConfig::gmm_components},
      {"gmm.mean_spread", &RunConfig::gmm_mean_spread},
      {"gmm.var_bias", &RunConfig::gmm_var_bias},
      {"gmm.temperature", &RunConfig::gmm_temperature},
      {"diff.time_dim", &RunConfig::diff_time_dim},
      {"gen.mechanism", &RunConfig::mechanism},
      {"gen.representation", &RunConfig::representation},
      {"gen.steps", &RunConfig::gen_steps},
      {"gen.batch", &RunConfig::gen_batch},
      {"gen.warmup", &RunConfig::gen_warmup},
      {"gen.lr", &RunConfig::gen_lr},
      {"gen.weight_decay", &RunConfig::gen_weight_decay},
      {"gen.clip", &RunConfig::gen_clip},
      {"gen.joint_comprehension", &RunConfig::gen_joint_comprehension},
      {"gen.comprehension_weight", &RunConfig::gen_comprehension_weight},
      {"eval.clips", &RunConfig::eval_clips},
      {"eval.guidance", &RunConfig::eval_guidance},
      {"eval.div_captions", &RunConfig::eval_div_captions},
      {"eval.div_samples", &RunConfig::eval_div_samples},
      {"eval.dump_clips", &RunConfig::eval_dump_clips},
  };
  return f;
}

const Field& find_field(const std::string& key) {
  for (const Field& f : fields())
    if (key == f.key) return f;
  fail_config("config: unknown key '" + key + "'");
}

std::string format_value(const RunConfig& cfg, const Field& f) {
  char buf[64];
  if (auto* p = std::get_if<int RunConfig::*>(&f.ref)) {
    std::snprintf(buf, sizeof buf, "%d", cfg.**p);
  } else if (auto* p = std::get_if<double RunConfig::*>(&f.ref)) {
    std::snprintf(buf, sizeof buf, "%.17g", cfg.**p);
  } else if (auto* p = std::get_if<bool RunConfig::*>(&f.ref)) {
    return cfg.**p ? "true" : "false";
  } else if (auto* p = std::get_if<uint64_t RunConfig::*>(&f.ref)) {
    std::snprintf(buf, sizeof buf, "%" PRIu64, cfg.**p);
  } else {
    return cfg.*std::get<std::string RunConfig::*>(f.ref);
  }
  return buf;
}

void parse_value(RunConfig& cfg, const Field& f, const std::string& value) {
  const auto bad = [&]() -> void { fail_config(std::string("config: bad value '") + value + "' for " + f.key); };
  if (auto* p = std::get_if<int RunConfig::*>(&f.ref)) {
    int v = 0;
    auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc{} || end != value.data() + value.size()) bad();
    cfg.**p = v;
  } else if (auto* p = std::get_if<double RunConfig::*>(&f.ref)) {
    size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(value, &used);
    } catch (const std::exception&) {
      bad();
    }
    if (used != value.size()) bad();
    cfg.**p = v;
  } else if (auto* p = std::get_if<bool RunConfig::*>(&f.ref)) {
    if (value == "true") cfg.**p = true;
    else if (value == "false") cfg.**p = false;
    else bad();
  } else if (auto* p = std::get_if<uint64_t RunConfig::*>(&f.ref)) {
    uint64_t v = 0;
    auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc{} || end != value.data() + value.size()) bad();
    cfg.**p = v;
  } else {
    cfg.*std::get<std::string RunConfig::*>(f.ref) = value;
  }
}

}  // namespace

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const Field& f : fields()) out.emplace_back(f.key);
    return out;
  }();
  return k;
}

std::string RunConfig::get(const std::string& key) const { return format_value(*this, find_field(key)); }

void RunConfig::set(const std::string& key, const std::string& value) { parse_value(*this, find_field(key), value); }

std::string RunConfig::to_text() const {
  std::string out;
  for (const Field& f : fields()) {
    out += f.key;
    out += '=';
    out += format_value(*this, f);
    out += '\n';
  }
  return out;
}

RunConfig RunConfig::from_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const size_t first = line.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    if (line[first] == '#') continue;
    const size_t eq = line.find('=', first);
    if (eq == std::string::npos)
      fail_config("config: line " + std::to_string(lineno) + " is not key=value: '" + line + "'");
    std::string key = line.substr(first, eq - first);
    while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
    std::string value = line.substr(eq + 1);
    const size_t vstart = value.find_first_not_of(" \t");
    value = vstart == std::string::npos ? std::string() : value.substr(vstart);
    while (!value.empty() && (value.back() == ' ' || value.back() == '\t')) value.pop_back();
    cfg.set(key, value);
  }
  return cfg;
}

RunConfig RunConfig::load_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_config("config: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str());
}

void RunConfig::save_file(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail_runtime("config: cannot open " + path + " for writing");
  const std::string text = to_text();
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out.good()) fail_runtime("config: cannot write " + path);
}

void RunConfig::validate() const {
  if (corpus_seconds != 2.0) fail_config("config: this build renders 2-second clips (corpus.seconds=2)");
  if (corpus_resolution != synth::kH)
    fail_config("config: this build renders " + std::to_string(synth::kH) + "x" + std::to_string(synth::kW) +
                " clips (corpus.resolution=" + std::to_string(synth::kH) + ")");
  if (corpus_clips < 1 || corpus_shard_cap < 1) fail_config("config: corpus.clips and corpus.shard_cap must be positive");
  if (schedule_steps < 1) fail_config("config: schedule.steps must be positive");
  noise_schedule();  // rejects lengths whose betas leave (0,1)
  tokenizer_config().validate();
  denoiser_config().validate();
  lm_config().validate();
  switch (head_kind()) {  // also validates the name
    case vid::HeadKind::gmm: gmm_config().validate(); break;
    case vid::HeadKind::mse: mse_config().validate(); break;
    default: diffusion_config().validate(); break;
  }
  lm_mechanism();
  pre_resampler();
  const auto positive = [](int v, const char* what) {
    if (v < 1) fail_config(std::string("config: ") + what + " must be positive");
  };
  positive(s1_steps, "stage1.steps");
  positive(s1_batch, "stage1.batch");
  positive(s2_steps, "stage2.steps");
  positive(s2_batch, "stage2.batch");
  positive(gen_steps, "gen.steps");
  positive(gen_batch, "gen.batch");
  if (s2_dropout < 0.0 || s2_dropout > 1.0) fail_config("config: stage2.dropout must sit in [0,1]");
  if (eval_clips < metrics::kFeatureDim + 1)
    fail_config("config: eval.clips must be at least " + std::to_string(metrics::kFeatureDim + 1) +
                " for the feature-distance covariance");
  if (eval_div_captions < 1 || eval_div_samples < 2)
    fail_config("config: eval.div_captions must be >= 1 and eval.div_samples >= 2");
  if (gmm_temperature <= 0.0) fail_config("config: gmm.temperature must be positive");
}

nn::TokenizerConfig RunConfig::tokenizer_config() const {
  nn::TokenizerConfig c;
  c.frames = synth::kSparseFrames;
  c.height = synth::kH;
  c.width = synth::kW;
  c.channels = synth::kC;
  c.patch = tok_patch;
  c.dim = tok_dim;
  c.heads = tok_heads;
  c.temporal_layers = tok_temporal_layers;
  c.fusion_layers = tok_fusion_layers;
  c.resampler_layers = tok_resampler_layers;
  c.tokens = tok_tokens;
  c.pool = tok_pool;
  c.mlp_mult = tok_mlp_mult;
  c.seed = seed * 8 + 1;
  return c;
}

nn::DenoiserConfig RunConfig::denoiser_config() const {
  nn::DenoiserConfig c;
  c.frames = synth::kDenseFrames;
  c.height = synth::kH;
  c.width = synth::kW;
  c.channels = synth::kC;
  c.patch = den_patch;
  c.dim = den_dim;
  c.heads = den_heads;
  c.depth = den_depth;
  c.cond_dim = tok_dim;
  c.cond_tokens = tok_tokens;
  c.mlp_mult = den_mlp_mult;
  c.seed = seed * 8 + 2;
  return c;
}

vid::StageOptions RunConfig::stage1_options() const {
  vid::StageOptions o;
  o.steps = s1_steps;
  o.batch = s1_batch;
  o.seed = seed;
  o.lr = s1_lr;
  o.warmup = s1_warmup;
  o.weight_decay = s1_weight_decay;
  o.clip = s1_clip;
  return o;
}

vid::StageOptions RunConfig::stage2_options() const {
  vid::StageOptions o;
  o.steps = s2_steps;
  o.batch = s2_batch;
  o.seed = seed;
  o.lr = s2_lr;
  o.warmup = s2_warmup;
  o.weight_decay = s2_weight_decay;
  o.clip = s2_clip;
  o.dropout = static_cast<float>(s2_dropout);
  return o;
}

nn::Lm<float>::Config RunConfig::lm_config() const {
  nn::Lm<float>::Config c;
  c.layers = lm_layers;
  c.dim = lm_dim;
  c.heads = lm_heads;
  c.vocab = synth::kVocab + 2;
  c.text_len = synth::kCaptionLen;
  c.queries = vid::representation_tokens(tokenizer_config(), pre_resampler());
  c.token_dim = tok_dim;
  c.mlp_mult = lm_mlp_mult;
  c.seed = seed * 8 + 7;
  return c;
}

nn::GmmHead<float>::Config RunConfig::gmm_config() const {
  nn::GmmHead<float>::Config c;
  c.lm_dim = lm_dim;
  c.token_dim = tok_dim;
  c.components = gmm_components;
  c.hidden = head_hidden;
  c.mean_spread = gmm_mean_spread;
  c.var_bias = gmm_var_bias;
  c.seed = seed * 8 + 3;
  return c;
}

nn::MseHead<float>::Config RunConfig::mse_config() const {
  nn::MseHead<float>::Config c;
  c.lm_dim = lm_dim;
  c.token_dim = tok_dim;
  c.hidden = head_hidden;
  c.seed = seed * 8 + 3;
  return c;
}

nn::DiffusionHead<float>::Config RunConfig::diffusion_config() const {
  nn::DiffusionHead<float>::Config c;
  c.lm_dim = lm_dim;
  c.token_dim = tok_dim;
  c.hidden = head_hidden;
  c.time_dim = diff_time_dim;
  c.mode = head_kind() == vid::HeadKind::diffusion_eps ? diff::PredMode::eps_pred : diff::PredMode::v_pred;
  c.seed = seed * 8 + 3;
  return c;
}

bool RunConfig::pre_resampler() const {
  if (representation == "resampled") return false;
  if (representation == "pre-resampler") return true;
  fail_config("config: unknown representation '" + representation + "' (want resampled | pre-resampler)");
}

vid::GenTrainOptions RunConfig::gen_options() const {
  vid::GenTrainOptions o;
  o.steps = gen_steps;
  o.batch = gen_batch;
  o.seed = seed;
  o.lr = gen_lr;
  o.warmup = gen_warmup;
  o.weight_decay = gen_weight_decay;
  o.clip = gen_clip;
  o.joint_comprehension = gen_joint_comprehension;
  o.comprehension_weight = gen_comprehension_weight;
  o.pre_resampler = pre_resampler();
  return o;
}

std::string canonical_mechanism(const std::string& name) {
  if (name == "ar") return "ar_causal";
  if (name == "causal-query") return "query_causal";
  if (name == "bidir-query") return "query_bidirectional";
  nn::mechanism_from_name(name);  // throws on anything unknown
  return name;
}

}  // namespace divot::cli
