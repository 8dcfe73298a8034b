#include <string>

#include "CLI11.hpp"
#include "mtaesth/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{
      "mtaesth - multi-task aesthetic quality assessment with semantic "
      "attributes and task-relationship learning"};
  app.require_subcommand(1);

  using mtaesth::cli::Overrides;

  // gen
  std::string gen_spec, gen_out = ".";
  auto* gen = app.add_subcommand(
      "gen", "Generate a synthetic dataset (container + labels + manifest)");
  gen->add_option("--spec", gen_spec, "Generator spec file (key=value)")
      ->required();
  gen->add_option("--out", gen_out, "Output directory (default: .)");

  // train
  std::string train_config;
  std::string lambda_mode, variant, delta, seed, epochs, out_dir, manifest,
      finetune_from;
  bool relationship = false;
  auto* train = app.add_subcommand(
      "train",
      "Train a multi-task network; flags override config file keys");
  train->add_option("--config", train_config,
                    "Run config file (key=value); optional if --manifest set");
  train->add_option("--manifest", manifest, "Dataset manifest path");
  train->add_option("--lambda-mode", lambda_mode,
                    "zero|one-over-m|two-over-m|one|early-stop|strategy "
                    "(default strategy: 1/M, 2/M for enhanced)");
  train->add_option("--variant", variant, "mtcnn1|mtcnn2|mtcnn3|enhanced");
  train->add_option("--delta", delta,
                    "Training-set labeling threshold (test always uses 0)");
  train->add_flag("--relationship", relationship,
                  "Enable task-relationship learning (omega updates)");
  train->add_option("--seed", seed, "Run seed (default 1)");
  train->add_option("--epochs", epochs, "Epoch count");
  train->add_option("--out", out_dir, "Output directory");
  train->add_option("--finetune-from", finetune_from,
                    "Checkpoint to initialize from (semantic loss masked via "
                    "mask_semantic=1)");

  // eval
  std::string eval_ckpt, eval_manifest, eval_split = "test";
  auto* eval = app.add_subcommand(
      "eval", "Evaluate a checkpoint (deterministic center crop)");
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--manifest", eval_manifest, "Dataset manifest")
      ->required();
  eval->add_option("--split", eval_split, "test (default) or train");

  // analyze
  std::string omega_csv, corr_out;
  std::size_t top_k = 5;
  auto* analyze = app.add_subcommand(
      "analyze",
      "Convert a learned omega CSV into correlations and ranked pairs");
  analyze->add_option("--omega", omega_csv, "omega.csv from a training run")
      ->required();
  analyze->add_option("--out", corr_out,
                      "Correlation CSV path (default: next to omega)");
  analyze->add_option("--top-k", top_k, "Pairs to print (default 5)");

  // gradcheck
  std::string gc_config;
  bool gc_fault = false;
  auto* gradcheck = app.add_subcommand(
      "gradcheck",
      "Finite-difference gradient verification across all variants");
  gradcheck->add_option("--config", gc_config,
                        "Optional config with architecture knobs");
  gradcheck->add_flag("--inject-fault", gc_fault,
                      "Corrupt one gradient first (harness self-test)");

  CLI11_PARSE(app, argc, argv);

  if (gen->parsed()) return mtaesth::cli::cmd_gen(gen_spec, gen_out);
  if (train->parsed()) {
    Overrides ov;
    if (!manifest.empty()) ov["manifest"] = manifest;
    if (!lambda_mode.empty()) ov["lambda_mode"] = lambda_mode;
    if (!variant.empty()) ov["variant"] = variant;
    if (!delta.empty()) ov["delta"] = delta;
    if (relationship) ov["relationship"] = "1";
    if (!seed.empty()) ov["seed"] = seed;
    if (!epochs.empty()) ov["epochs"] = epochs;
    if (!out_dir.empty()) ov["out_dir"] = out_dir;
    if (!finetune_from.empty()) {
      ov["finetune_from"] = finetune_from;
      ov["mask_semantic"] = "1";
    }
    return mtaesth::cli::cmd_train(train_config, ov);
  }
  if (eval->parsed()) {
    return mtaesth::cli::cmd_eval(eval_ckpt, eval_manifest, eval_split);
  }
  if (analyze->parsed()) {
    return mtaesth::cli::cmd_analyze(omega_csv, corr_out, top_k);
  }
  if (gradcheck->parsed()) {
    return mtaesth::cli::cmd_gradcheck(gc_config, gc_fault);
  }
  return 1;
}
