#pragma once

#include <optional>
#include <string>

namespace dkit {

// Exit codes shared by every subcommand:
//   0 success, 1 unexpected error, 2 config error, 3 I/O error,
//   4 non-finite loss (last good checkpoint retained), 5 checkpoint/format error.

struct GenDataArgs {
  std::string config_path;  // empty: built-in defaults
  std::string out;
  bool force = false;
  bool quiet = false;
  std::optional<uint64_t> seed;
};
int cmd_gen_data(const GenDataArgs& args);

struct TrainArgs {
  std::string config_path;
  std::string data_dir;
  std::string out;
  std::string resume;  // checkpoint path, optional
  bool force = false;
  bool quiet = false;
  std::optional<uint64_t> seed;
};
int cmd_train(const TrainArgs& args);

struct EvalArgs {
  std::string ckpt;
  std::string data_dir;
  std::string out;
  bool force = false;
  bool quiet = false;
};
int cmd_eval(const EvalArgs& args);

struct FlowProbeArgs {
  std::string ckpt;
  std::string data_dir;
  std::string out_file;
  bool quiet = false;
};
int cmd_flow_probe(const FlowProbeArgs& args);

struct ProjectArgs {
  std::string ckpt;
  std::string data_dir;
  std::string out_file;
  bool quiet = false;
};
int cmd_project(const ProjectArgs& args);

struct SweepArgs {
  std::string config_path;
  std::string axis;  // grl_mode | encoder_loss | aug_proportion | aug_mode | reference_transform
  std::string out;
  int seeds = 3;
  bool force = false;
  bool quiet = false;
  std::optional<uint64_t> seed;
};
int cmd_sweep(const SweepArgs& args);

struct ReportArgs {
  std::string in_dir;
  std::string out;
  bool force = false;
  bool quiet = false;
};
int cmd_report(const ReportArgs& args);

}  // namespace dkit
