// eamser: energy-adaptive mixup, training, evaluation and gradient checks
// for utterance-level emotion classifiers.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "eamser/commands.hpp"
#include "eamser/error.hpp"

namespace {

using namespace eamser;

void add_fold_options(CLI::App* cmd, FoldOptions& f, std::string& group_key) {
  cmd->add_option("--fold", f.fold, "Held-out fold index (0-based); -1 uses every utterance");
  cmd->add_option("--n-folds", f.n_folds, "Number of cross-validation folds")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--group-key", group_key, "Fold grouping: session or speaker")
      ->check(CLI::IsMember({"session", "speaker"}));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"eamser: energy-adaptive mixup and multi-loss emotion classifier toolkit"};
  app.option_defaults()->always_capture_default();
  app.set_config("--config", "", "TOML/INI overlay; command-line flags take precedence");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);

  int threads = 1;
  std::string classes_csv;
  std::string group_key = "session";

  // augment -----------------------------------------------------------------
  AugmentOptions aug;
  std::string aug_mixup = "eam";
  auto* augment = app.add_subcommand("augment", "Mix utterance pairs into new WAVs with soft labels");
  augment->add_option("--manifest", aug.manifest, "Input manifest (JSON lines)")->required();
  augment->add_option("--out-dir", aug.out_dir, "Output directory")->required();
  augment->add_option("--classes", classes_csv, "Comma-separated class list (default: labels present)");
  augment->add_option("--snr-min", aug.mix.snr_db_min, "Minimum SNR in dB");
  augment->add_option("--snr-max", aug.mix.snr_db_max, "Maximum SNR in dB");
  augment->add_option("--mix-frac-min", aug.mix.mix_frac_min, "Minimum mix length as a fraction of the base utterance");
  augment->add_option("--mix-frac-max", aug.mix.mix_frac_max, "Maximum mix length as a fraction of the base utterance");
  augment->add_option("--mixup", aug_mixup, "Mixing rule: eam or lam")->check(CLI::IsMember({"eam", "lam"}));
  augment->add_option("--pairs", aug.pairs, "Number of pairs to mix")->check(CLI::NonNegativeNumber);
  augment->add_option("--seed", aug.seed, "Random seed");
  add_fold_options(augment, aug.folds, group_key);

  // train -------------------------------------------------------------------
  TrainOptions tr;
  std::string tr_aggregation = "flam";
  std::string tr_mixup = "eam";
  bool no_cb = false, no_normalize = false;
  auto* train = app.add_subcommand("train", "Train on every fold except --fold and evaluate on it");
  train->add_option("--manifest", tr.manifest, "Manifest with feature_path entries")->required();
  train->add_option("--classes", classes_csv, "Comma-separated class list")->required();
  add_fold_options(train, tr.folds, group_key);
  train->add_option("--epochs", tr.train.epochs, "Training epochs")->check(CLI::NonNegativeNumber);
  train->add_option("--batch-size", tr.train.batch_size, "Utterances per batch");
  train->add_option("--model-lr", tr.train.model_lr, "Initial Adam learning rate");
  train->add_option("--center-lr", tr.train.center_lr, "Initial center learning rate");
  train->add_option("--decay", tr.train.decay, "Per-epoch learning-rate factor");
  train->add_option("--decay-until", tr.train.decay_until_epoch, "Last epoch boundary at which the rate decays");
  train->add_option("--aggregation", tr_aggregation, "flam, maxpool or meanpool")
      ->check(CLI::IsMember({"flam", "maxpool", "meanpool"}));
  train->add_option("--mixup", tr_mixup, "Which mixed utterances to train on: eam, lam or none")
      ->check(CLI::IsMember({"eam", "lam", "none"}));
  train->add_option("--lambda1", tr.train.loss.lambdas.kl, "KL weight");
  train->add_option("--lambda2", tr.train.loss.lambdas.focal, "Focal weight");
  train->add_option("--lambda3", tr.train.loss.lambdas.center, "Center-loss weight");
  train->add_option("--lambda4", tr.train.loss.lambdas.supcon, "SupCon weight");
  train->add_option("--gamma", tr.train.loss.gamma, "Focal exponent");
  train->add_option("--tau", tr.train.loss.tau, "SupCon temperature");
  train->add_option("--proj-dim", tr.train.loss.proj_dim, "Projection dimension for center and SupCon losses");
  train->add_option("--heads", tr.train.heads, "Attention heads");
  train->add_flag("--pool-softmax", tr.train.pool_softmax, "Softmax-normalize frame-attention scores");
  train->add_flag("--shared-frame-proj", tr.train.shared_frame_projection, "Reuse the pooled projection for frames");
  train->add_flag("--no-cb", no_cb, "Disable context broadcasting before SupCon");
  train->add_flag("--no-normalize", no_normalize, "Use raw (unnormalized) SupCon embeddings");
  train->add_option("--seed", tr.train.seed, "Random seed");
  train->add_option("--out", tr.out, "Checkpoint path")->required();
  train->add_option("--log", tr.log, "JSON-lines log path (default: <out>.log.jsonl)");
  train->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  // evaluate ----------------------------------------------------------------
  EvaluateOptions ev;
  ev.folds.fold = -1;
  auto* evaluate = app.add_subcommand("evaluate", "Print WA, UA and the confusion matrix as JSON");
  evaluate->add_option("--checkpoint", ev.checkpoint, "Checkpoint path")->required();
  evaluate->add_option("--manifest", ev.manifest, "Manifest with feature_path entries")->required();
  evaluate->add_option("--classes", classes_csv, "Comma-separated class list")->required();
  add_fold_options(evaluate, ev.folds, group_key);
  evaluate->add_option("--seed", ev.seed, "Seed used for the training run's fold plan");
  evaluate->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  // gradcheck ---------------------------------------------------------------
  GradcheckOptions gc;
  std::string sizes = "6,32,16";
  auto* gradcheck = app.add_subcommand("gradcheck", "Compare analytic gradients with central differences");
  gradcheck->add_option("--seed", gc.seed, "Random seed");
  gradcheck->add_option("--sizes", sizes, "Frames, feature dimension and heads as T,D,H");
  gradcheck->add_option("--batch", gc.batch, "Utterances in the composite check");
  gradcheck->add_option("--proj-dim", gc.proj_dim, "Projection dimension");
  gradcheck->add_option("--step", gc.step, "Finite-difference step");
  gradcheck->add_option("--tol", gc.tolerance, "Maximum relative error");

  // dump-embeddings ---------------------------------------------------------
  DumpOptions dump;
  dump.folds.fold = -1;
  auto* dump_cmd = app.add_subcommand("dump-embeddings", "Write projected utterance embeddings as CSV");
  dump_cmd->add_option("--checkpoint", dump.checkpoint, "Checkpoint path")->required();
  dump_cmd->add_option("--manifest", dump.manifest, "Manifest with feature_path entries")->required();
  dump_cmd->add_option("--classes", classes_csv, "Comma-separated class list")->required();
  dump_cmd->add_option("--out", dump.out, "CSV path")->required();
  add_fold_options(dump_cmd, dump.folds, group_key);
  dump_cmd->add_option("--seed", dump.seed, "Seed used for the training run's fold plan");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    const auto classes = split_classes(classes_csv);
    const GroupKey key = parse_group_key(group_key);

    if (*augment) {
      aug.classes = classes;
      aug.folds.group_key = key;
      aug.mixup = parse_mixup(aug_mixup);
      run_augment(aug, std::cerr);
    } else if (*train) {
      tr.classes = classes;
      tr.folds.group_key = key;
      tr.train.aggregation = parse_aggregation(tr_aggregation);
      tr.train.mixup = parse_mixup(tr_mixup);
      tr.train.loss.cb_enabled = !no_cb;
      tr.train.loss.normalize_embeddings = !no_normalize;
      tr.train.threads = threads;
      const TrainSummary s = run_train(tr, std::cerr);
      if (!s.records.empty())
        std::cout << to_json_line(s.records.back()) << '\n';
    } else if (*evaluate) {
      ev.classes = classes;
      ev.folds.group_key = key;
      ev.threads = threads;
      std::cout << run_evaluate(ev) << '\n';
    } else if (*gradcheck) {
      int t = 0, d = 0, h = 0;
      if (std::sscanf(sizes.c_str(), "%d,%d,%d", &t, &d, &h) != 3)
        throw Error(Errc::invalid_argument, "--sizes expects T,D,H");
      gc.frames = t;
      gc.dim = d;
      gc.heads = h;
      const auto reports = run_gradchecks(gc);
      std::cout << to_json(reports) << '\n';
      for (const auto& r : reports)
        if (!r.passed()) return kExitNumeric;
    } else if (*dump_cmd) {
      dump.classes = classes;
      dump.folds.group_key = key;
      run_dump_embeddings(dump);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitOk;
}
