#include <cstdint>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "dkit/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"dkit: disentanglement toolkit for synthetic cross-speaker style transfer"};
  app.require_subcommand(1);

  std::optional<uint64_t> seed;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic factor dataset");
  dkit::GenDataArgs gen_args;
  gen->add_option("--config", gen_args.config_path, "run config JSON");
  gen->add_option("--out", gen_args.out, "output dataset directory")->required();
  gen->add_flag("--force", gen_args.force, "overwrite a non-empty output directory");
  gen->add_flag("--quiet", gen_args.quiet, "suppress stdout");
  gen->add_option("--seed", seed, "override the config seed");

  auto* train = app.add_subcommand("train", "two-stage training run");
  dkit::TrainArgs train_args;
  train->add_option("--config", train_args.config_path, "run config JSON");
  train->add_option("--data", train_args.data_dir, "dataset directory")->required();
  train->add_option("--out", train_args.out, "output directory")->required();
  train->add_option("--resume", train_args.resume, "checkpoint to resume from");
  train->add_flag("--force", train_args.force, "overwrite a non-empty output directory");
  train->add_flag("--quiet", train_args.quiet, "suppress stdout");
  train->add_option("--seed", seed, "override the config seed");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  dkit::EvalArgs eval_args;
  eval->add_option("--ckpt", eval_args.ckpt, "checkpoint path")->required();
  eval->add_option("--data", eval_args.data_dir, "dataset directory")->required();
  eval->add_option("--out", eval_args.out, "output directory")->required();
  eval->add_flag("--force", eval_args.force, "overwrite a non-empty output directory");
  eval->add_flag("--quiet", eval_args.quiet, "suppress stdout");

  auto* probe = app.add_subcommand("flow-probe", "per-flow-step LK-CKA table");
  dkit::FlowProbeArgs probe_args;
  probe->add_option("--ckpt", probe_args.ckpt, "checkpoint path")->required();
  probe->add_option("--data", probe_args.data_dir, "dataset directory")->required();
  probe->add_option("--out", probe_args.out_file, "output CSV file")->required();
  probe->add_flag("--quiet", probe_args.quiet, "suppress stdout");

  auto* project = app.add_subcommand("project", "2-D PCA projection of emotion embeddings");
  dkit::ProjectArgs project_args;
  project->add_option("--ckpt", project_args.ckpt, "checkpoint path")->required();
  project->add_option("--data", project_args.data_dir, "dataset directory")->required();
  project->add_option("--out", project_args.out_file, "output CSV file")->required();
  project->add_flag("--quiet", project_args.quiet, "suppress stdout");

  auto* sweep = app.add_subcommand("sweep", "train + evaluate along an ablation axis");
  dkit::SweepArgs sweep_args;
  sweep->add_option("--config", sweep_args.config_path, "run config JSON");
  sweep->add_option("--axis", sweep_args.axis,
                    "grl_mode | encoder_loss | aug_proportion | aug_mode | reference_transform")
      ->required();
  sweep->add_option("--out", sweep_args.out, "output directory")->required();
  sweep->add_option("--seeds", sweep_args.seeds, "replicates per axis value (default 3)");
  sweep->add_flag("--force", sweep_args.force, "overwrite a non-empty output directory");
  sweep->add_flag("--quiet", sweep_args.quiet, "suppress stdout");
  sweep->add_option("--seed", seed, "override the config seed");

  auto* report = app.add_subcommand("report", "consolidate report.json files");
  dkit::ReportArgs report_args;
  report->add_option("--in", report_args.in_dir, "directory to scan")->required();
  report->add_option("--out", report_args.out, "output directory")->required();
  report->add_flag("--force", report_args.force, "overwrite a non-empty output directory");
  report->add_flag("--quiet", report_args.quiet, "suppress stdout");

  CLI11_PARSE(app, argc, argv);

  if (gen->parsed()) {
    gen_args.seed = seed;
    return dkit::cmd_gen_data(gen_args);
  }
  if (train->parsed()) {
    train_args.seed = seed;
    return dkit::cmd_train(train_args);
  }
  if (eval->parsed()) return dkit::cmd_eval(eval_args);
  if (probe->parsed()) return dkit::cmd_flow_probe(probe_args);
  if (project->parsed()) return dkit::cmd_project(project_args);
  if (sweep->parsed()) {
    sweep_args.seed = seed;
    return dkit::cmd_sweep(sweep_args);
  }
  if (report->parsed()) return dkit::cmd_report(report_args);
  return 1;
}
