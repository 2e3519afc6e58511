// divotlab: the command-line front end for the moving-shapes video lab.
//
//   divotlab synth generate ...      render a clip corpus
//   divotlab train tokenizer ...     stage 1: tokenizer + denoiser from scratch
//   divotlab train detok ...         stage 2: fine-tune the pair with dropout
//   divotlab train lm ...            generation training + evaluation for one cell
//   divotlab eval --run DIR          collate run sidecars into report.csv/json
//   divotlab ablate --suite qN ...   factorial head / mechanism / representation runs
//
// Every training subcommand takes --config FILE (key=value lines), repeatable
// --set key=value overrides, and sugar flags for the common knobs; later
// settings win, named flags last. Exit codes: 1 usage, 2 config, 3 runtime.

#include <cinttypes>
#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "divot/errors.hpp"
#include "divot/pipeline.hpp"

namespace {

using divot::cli::RunConfig;

struct ConfigArgs {
  std::string config_path;
  std::vector<std::string> sets;        // raw key=value, applied in order
  std::vector<std::string> flag_sets;   // from sugar flags, applied after sets
};

void add_config_options(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("--config", args.config_path, "config file with key=value lines")
      ->check(CLI::ExistingFile);
  cmd->add_option("--set", args.sets, "override one config key (key=value, repeatable)");
}

// Sugar flag -> dotted config key. The flag takes one value and is recorded
// only when actually given, so file/--set settings survive otherwise.
void add_keyed_flag(CLI::App* cmd, ConfigArgs& args, const std::string& flag, const std::string& key,
                    const std::string& help) {
  cmd->add_option_function<std::string>(
         flag, [&args, key](const std::string& v) { args.flag_sets.push_back(key + "=" + v); }, help)
      ->expected(1);
}

RunConfig resolve_config(const ConfigArgs& args) {
  RunConfig cfg = args.config_path.empty() ? RunConfig{} : RunConfig::load_file(args.config_path);
  for (const std::string& kv : args.sets) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos) divot::fail_config("--set wants key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  for (const std::string& kv : args.flag_sets) {
    const size_t eq = kv.find('=');
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

void print_row(const divot::metrics::RunRow& row) {
  std::printf("run %s: head=%s mechanism=%s representation=%s\n", row.run_id.c_str(), row.head.c_str(),
              row.mechanism.c_str(), row.representation.c_str());
  std::printf("  factor_match %.4f +/- %.4f   frechet %.4f   diversity %.4f\n", row.factor_match_mean,
              row.factor_match_ci95, row.frechet, row.diversity);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moving-shapes video tokenization and generation lab"};
  app.require_subcommand(1);

  // ---- synth generate ----
  CLI::App* synth = app.add_subcommand("synth", "synthetic data");
  synth->require_subcommand(1);
  CLI::App* generate = synth->add_subcommand("generate", "render a clip corpus");
  ConfigArgs gen_args;
  add_config_options(generate, gen_args);
  add_keyed_flag(generate, gen_args, "--out", "out", "output directory");
  add_keyed_flag(generate, gen_args, "--seed", "seed", "master seed");
  add_keyed_flag(generate, gen_args, "--clips", "corpus.clips", "number of clips");
  add_keyed_flag(generate, gen_args, "--duration", "corpus.seconds", "clip length in seconds");
  add_keyed_flag(generate, gen_args, "--resolution", "corpus.resolution", "frame height/width in pixels");
  add_keyed_flag(generate, gen_args, "--shard-cap", "corpus.shard_cap", "max clips per shard file");
  generate->callback([&] {
    const RunConfig cfg = resolve_config(gen_args);
    const int n = divot::cli::generate_corpus(cfg);
    std::printf("wrote %d clips under %s\n", n, divot::cli::corpus_prefix(cfg).c_str());
  });

  // ---- train {tokenizer, detok, lm} ----
  CLI::App* train = app.add_subcommand("train", "training stages");
  train->require_subcommand(1);

  CLI::App* tok_cmd = train->add_subcommand("tokenizer", "stage 1: tokenizer + denoiser from scratch");
  ConfigArgs tok_args;
  add_config_options(tok_cmd, tok_args);
  add_keyed_flag(tok_cmd, tok_args, "--out", "out", "run directory");
  add_keyed_flag(tok_cmd, tok_args, "--seed", "seed", "master seed");
  add_keyed_flag(tok_cmd, tok_args, "--steps", "stage1.steps", "optimizer steps");
  tok_cmd->callback([&] {
    const RunConfig cfg = resolve_config(tok_args);
    const auto res = divot::cli::run_stage1(cfg);
    std::printf("stage 1 done: %zu steps, final loss %.5f -> %s\n", res.losses.size(),
                res.losses.empty() ? 0.0 : static_cast<double>(res.losses.back()),
                divot::cli::pair_checkpoint(cfg).c_str());
  });

  CLI::App* detok_cmd = train->add_subcommand("detok", "stage 2: fine-tune the pair with condition dropout");
  ConfigArgs detok_args;
  add_config_options(detok_cmd, detok_args);
  add_keyed_flag(detok_cmd, detok_args, "--out", "out", "run directory");
  add_keyed_flag(detok_cmd, detok_args, "--seed", "seed", "master seed");
  add_keyed_flag(detok_cmd, detok_args, "--steps", "stage2.steps", "optimizer steps");
  detok_cmd->callback([&] {
    const RunConfig cfg = resolve_config(detok_args);
    const auto res = divot::cli::run_stage2(cfg);
    const double rate = res.dropout_total > 0 ? static_cast<double>(res.dropout_count) / res.dropout_total : 0.0;
    std::printf("stage 2 done: %zu steps, final loss %.5f, condition dropout %.3f -> %s\n", res.losses.size(),
                res.losses.empty() ? 0.0 : static_cast<double>(res.losses.back()), rate,
                divot::cli::detok_checkpoint(cfg).c_str());
  });

  CLI::App* lm_cmd = train->add_subcommand("lm", "generation training + evaluation for one cell");
  ConfigArgs lm_args;
  std::string run_id;
  std::string mechanism_alias;
  add_config_options(lm_cmd, lm_args);
  add_keyed_flag(lm_cmd, lm_args, "--out", "out", "run directory");
  add_keyed_flag(lm_cmd, lm_args, "--seed", "seed", "master seed");
  add_keyed_flag(lm_cmd, lm_args, "--steps", "gen.steps", "optimizer steps");
  add_keyed_flag(lm_cmd, lm_args, "--head", "head.kind", "mse | diff-eps | diff-v | gmm");
  add_keyed_flag(lm_cmd, lm_args, "--representation", "gen.representation", "resampled | pre-resampler");
  lm_cmd->add_option("--mechanism", mechanism_alias, "ar | causal-query | bidir-query (or full names)");
  lm_cmd->add_option("--run-id", run_id, "artifact basename under <out>/runs (default: derived)");
  lm_cmd->callback([&] {
    ConfigArgs args = lm_args;
    if (!mechanism_alias.empty())
      args.flag_sets.push_back("gen.mechanism=" + divot::cli::canonical_mechanism(mechanism_alias));
    const RunConfig cfg = resolve_config(args);
    std::string id = run_id;
    if (id.empty())
      id = "lm-" + cfg.head + "-" + cfg.mechanism + "-" + cfg.representation + "-s" + std::to_string(cfg.seed);
    const auto run = divot::cli::run_lm(cfg, id);
    print_row(run.row);
  });

  // ---- eval ----
  CLI::App* eval_cmd = app.add_subcommand("eval", "collate run sidecars into report.csv / report.json");
  std::string eval_dir;
  eval_cmd->add_option("--run", eval_dir, "directory holding *.metrics.json sidecars")
      ->required()
      ->check(CLI::ExistingDirectory);
  eval_cmd->callback([&] {
    const auto rows = divot::cli::collate_runs(eval_dir);
    for (const auto& row : rows) print_row(row);
    std::printf("collated %zu runs -> %s/report.csv, %s/report.json\n", rows.size(), eval_dir.c_str(),
                eval_dir.c_str());
  });

  // ---- ablate ----
  CLI::App* ablate_cmd = app.add_subcommand("ablate", "run one ablation suite across seeds");
  ConfigArgs ab_args;
  std::string suite;
  std::vector<uint64_t> seeds;
  add_config_options(ablate_cmd, ab_args);
  add_keyed_flag(ablate_cmd, ab_args, "--out", "out", "run directory");
  ablate_cmd->add_option("--suite", suite, "q1 (representation) | q2 (heads) | q3 (mechanisms)")->required();
  ablate_cmd->add_option("--seeds", seeds, "master seeds, one full suite per seed")->required()->expected(-1);
  ablate_cmd->callback([&] {
    const RunConfig base = resolve_config(ab_args);
    const auto outcome = divot::cli::run_ablation(base, suite, seeds);
    for (const auto& v : outcome.verdicts)
      std::printf("seed %" PRIu64 ": %s  (%s)\n", v.seed, v.pass ? "pass" : "FAIL", v.detail.c_str());
    std::printf("%s majority: %s\n", suite.c_str(), outcome.majority_pass ? "pass" : "FAIL");
    if (!outcome.majority_pass) divot::fail_runtime("ablation suite " + suite + " failed its majority verdict");
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;  // --help exits 0; any parse problem is a usage error
  } catch (const divot::Error& e) {
    std::fprintf(stderr, "divotlab: %s\n", e.what());
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "divotlab: %s\n", e.what());
    return static_cast<int>(divot::ErrKind::runtime);
  }
  return 0;
}
