#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dkit/commands.hpp"
#include "dkit/runconfig.hpp"
#include "dkit/synthdata.hpp"
#include "dkit/trainer.hpp"
#include "json.hpp"

using namespace dkit;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// small config keeping every in-process command fast
const char* kTinyConfig = R"({
  "seed": 300,
  "dataset": {
    "n_speakers": 4, "n_emotions": 3, "samples_per_cell": 3,
    "feature_dim": 8, "speaker_factor_dim": 2,
    "seq_len_min": 8, "seq_len_max": 12,
    "neutral_only_speakers": [2, 3], "content_vocab": 5
  },
  "model": {"latent_dim": 4, "embed_dim": 4, "hidden": 8, "ref_channels": 8,
            "content_embed_dim": 4},
  "train": {"batch_size": 6, "stage1_steps": 6, "stage2_steps": 2,
            "log_every": 2, "eval_every": 0}
})";

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::path("/tmp") / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
  std::string sub(const std::string& child) const { return (path / child).string(); }
};

void write_config(const TempDir& dir, const std::string& name, const std::string& text) {
  std::ofstream os(dir.path / name);
  os << text;
}

}  // namespace

TEST_CASE("run config defaults and seed derivation") {
  RunConfig c = default_run_config();
  CHECK(c.dataset.n_speakers == 10);
  CHECK(c.train.lr_initial == doctest::Approx(2e-4));
  CHECK(c.train.beta1 == doctest::Approx(0.8));
  CHECK(c.train.beta2 == doctest::Approx(0.99));
  CHECK(c.train.weight_decay == doctest::Approx(0.01));
  CHECK(c.train.lr_decay_per_epoch == doctest::Approx(std::pow(0.999, 1.0 / 8.0)));
  CHECK(c.train.stage2_lr == doctest::Approx(2e-5));
  CHECK(c.train.aug.proportion == doctest::Approx(0.25));
  CHECK(c.train.aug.mode == AugMode::kENC);
  CHECK(c.train.encoder_loss == EncoderLoss::kMpcl);
  CHECK(c.train.grl_mode == GrlMode::kCosine);
  // section seeds derive from the master seed
  CHECK(c.dataset.seed == derive_seed(c.master_seed, hash_string("dataset")));
  CHECK(c.train.seed == derive_seed(c.master_seed, hash_string("train")));
}

TEST_CASE("run config rejects unknown keys with their path") {
  CHECK_THROWS_WITH_AS(parse_run_config_text(R"({"bogus": 1})"),
                       "config: unknown key (root).bogus", ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config_text(R"({"train": {"lr": 1}})"),
                       "config: unknown key train.lr", ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config_text(R"({"dataset": {"speakers": 3}})"),
                       "config: unknown key dataset.speakers", ConfigError);
}

TEST_CASE("run config reports malformed json with line and column") {
  try {
    parse_run_config_text("{\n  \"seed\": 1,\n  oops\n}");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    CHECK(msg.find("line 3") != std::string::npos);
    CHECK(msg.find("column") != std::string::npos);
  }
}

TEST_CASE("run config betas and ablation parsing") {
  RunConfig c = parse_run_config_text(
      R"({"train": {"betas": [0.7, 0.95]},
          "ablation": {"encoder_loss": "ce", "grl_mode": "none",
                       "reference_transform": "band_limit"}})");
  CHECK(c.train.beta1 == doctest::Approx(0.7));
  CHECK(c.train.beta2 == doctest::Approx(0.95));
  CHECK(c.train.encoder_loss == EncoderLoss::kCe);
  CHECK(c.train.grl_mode == GrlMode::kNone);
  CHECK(c.train.reference_transform == RefTransform::kBandLimit);

  // band-limited emotion input shrinks the encoder width
  ModelDims dims = resolve_dims(c, c.dataset);
  CHECK(dims.emotion_input_dim == (c.dataset.feature_dim + 3) / 4);

  CHECK_THROWS_AS(parse_run_config_text(R"({"train": {"betas": [0.7]}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config_text(R"({"ablation": {"grl_mode": "huh"}})"),
                  ConfigError);
}

TEST_CASE("gen-data writes a loadable dataset and prints counts") {
  TempDir tmp("dkit_cli_gen");
  write_config(tmp, "config.json", kTinyConfig);

  GenDataArgs args;
  args.config_path = tmp.sub("config.json");
  args.out = tmp.sub("data");
  args.quiet = true;
  CHECK(cmd_gen_data(args) == 0);

  Dataset ds = load_dataset(tmp.sub("data"));
  CHECK(ds.samples.size() == 4 * 3 * 3);
  // two neutral-only speakers hold out 2 * 2 * 3 emotional samples
  CHECK(ds.heldout_ids.size() == 12);
  CHECK(ds.train_ids.size() == 24);
}

TEST_CASE("gen-data refuses a non-empty output dir without --force") {
  TempDir tmp("dkit_cli_force");
  write_config(tmp, "config.json", kTinyConfig);
  fs::create_directories(tmp.sub("data"));
  {
    std::ofstream os(tmp.path / "data" / "existing.txt");
    os << "x";
  }
  GenDataArgs args;
  args.config_path = tmp.sub("config.json");
  args.out = tmp.sub("data");
  args.quiet = true;
  CHECK(cmd_gen_data(args) == 3);
  args.force = true;
  CHECK(cmd_gen_data(args) == 0);
}

TEST_CASE("gen-data exit code 2 on malformed config") {
  TempDir tmp("dkit_cli_badcfg");
  write_config(tmp, "config.json", "{ not json");
  GenDataArgs args;
  args.config_path = tmp.sub("config.json");
  args.out = tmp.sub("data");
  args.quiet = true;
  CHECK(cmd_gen_data(args) == 2);
}

TEST_CASE("gen-data re-runs are byte-identical") {
  TempDir tmp("dkit_cli_idempotent");
  write_config(tmp, "config.json", kTinyConfig);
  GenDataArgs args;
  args.config_path = tmp.sub("config.json");
  args.out = tmp.sub("data");
  args.quiet = true;
  CHECK(cmd_gen_data(args) == 0);
  std::string manifest1 = slurp(tmp.path / "data" / "manifest.json");
  std::string sample1 = slurp(tmp.path / "data" / "sample_00000.dkt");
  args.force = true;
  CHECK(cmd_gen_data(args) == 0);
  CHECK(slurp(tmp.path / "data" / "manifest.json") == manifest1);
  CHECK(slurp(tmp.path / "data" / "sample_00000.dkt") == sample1);
}

TEST_CASE("train, eval, flow-probe, project pipeline") {
  TempDir tmp("dkit_cli_pipeline");
  write_config(tmp, "config.json", kTinyConfig);

  GenDataArgs gen;
  gen.config_path = tmp.sub("config.json");
  gen.out = tmp.sub("data");
  gen.quiet = true;
  REQUIRE(cmd_gen_data(gen) == 0);

  TrainArgs tr;
  tr.config_path = tmp.sub("config.json");
  tr.data_dir = tmp.sub("data");
  tr.out = tmp.sub("run");
  tr.quiet = true;
  REQUIRE(cmd_train(tr) == 0);
  CHECK(fs::exists(tmp.path / "run" / "final.dkc"));
  CHECK(fs::exists(tmp.path / "run" / "best.dkc"));
  CHECK(fs::exists(tmp.path / "run" / "metrics.csv"));

  // identical invocation twice produces bit-identical checkpoints
  TrainArgs tr2 = tr;
  tr2.out = tmp.sub("run2");
  REQUIRE(cmd_train(tr2) == 0);
  CHECK(slurp(tmp.path / "run" / "final.dkc") == slurp(tmp.path / "run2" / "final.dkc"));

  EvalArgs ev;
  ev.ckpt = tmp.sub("run/final.dkc");
  ev.data_dir = tmp.sub("data");
  ev.out = tmp.sub("eval");
  ev.quiet = true;
  REQUIRE(cmd_eval(ev) == 0);

  // report rows: one per documented metric, csv and json mirrors agree
  std::ifstream csv(tmp.path / "eval" / "report.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "metric,config,value,seed");
  int csv_rows = 0;
  std::string line;
  std::vector<double> csv_values;
  while (std::getline(csv, line)) {
    ++csv_rows;
    size_t c1 = line.find(',');
    size_t c2 = line.find(',', c1 + 1);
    size_t c3 = line.find(',', c2 + 1);
    csv_values.push_back(std::stod(line.substr(c2 + 1, c3 - c2 - 1)));
  }
  CHECK(csv_rows == 10);
  std::ifstream jf(tmp.path / "eval" / "report.json");
  nlohmann::json j = nlohmann::json::parse(jf);
  REQUIRE(static_cast<int>(j.at("metrics").size()) == csv_rows);
  for (int i = 0; i < csv_rows; ++i)
    CHECK(j.at("metrics")[i].at("value").get<double>() == csv_values[i]);
  // lk-cka values are valid similarities
  for (const auto& m : j.at("metrics")) {
    std::string name = m.at("metric").get<std::string>();
    if (name.rfind("lk_cka", 0) == 0) {
      double v = m.at("value").get<double>();
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }

  FlowProbeArgs fp;
  fp.ckpt = tmp.sub("run/final.dkc");
  fp.data_dir = tmp.sub("data");
  fp.out_file = tmp.sub("probe.csv");
  fp.quiet = true;
  REQUIRE(cmd_flow_probe(fp) == 0);
  std::ifstream probe(tmp.sub("probe.csv"));
  std::getline(probe, header);
  CHECK(header == "flow_step,reverse,lk_cka_speaker,lk_cka_emotion");
  int probe_rows = 0;
  while (std::getline(probe, line)) ++probe_rows;
  CHECK(probe_rows == 8);

  ProjectArgs pj;
  pj.ckpt = tmp.sub("run/final.dkc");
  pj.data_dir = tmp.sub("data");
  pj.out_file = tmp.sub("proj.csv");
  pj.quiet = true;
  REQUIRE(cmd_project(pj) == 0);
  std::ifstream proj(tmp.sub("proj.csv"));
  std::getline(proj, header);
  CHECK(header == "sample_id,x,y,emotion,speaker");
  int proj_rows = 0;
  double var_x = 0.0, var_y = 0.0;
  while (std::getline(proj, line)) {
    ++proj_rows;
    std::stringstream ss(line);
    std::string field;
    std::getline(ss, field, ',');
    std::getline(ss, field, ',');
    double x = std::stod(field);
    std::getline(ss, field, ',');
    double y = std::stod(field);
    var_x += x * x;
    var_y += y * y;
  }
  CHECK(proj_rows == 12);  // eval-set size
  CHECK(var_x >= var_y);

  // resume from the final checkpoint runs zero extra steps and matches
  TrainArgs res;
  res.data_dir = tmp.sub("data");
  res.out = tmp.sub("resumed");
  res.resume = tmp.sub("run/final.dkc");
  res.quiet = true;
  REQUIRE(cmd_train(res) == 0);
  CHECK(slurp(tmp.path / "resumed" / "final.dkc") == slurp(tmp.path / "run" / "final.dkc"));
}

TEST_CASE("eval exit codes for missing and corrupt checkpoints") {
  TempDir tmp("dkit_cli_evalerr");
  write_config(tmp, "config.json", kTinyConfig);
  GenDataArgs gen;
  gen.config_path = tmp.sub("config.json");
  gen.out = tmp.sub("data");
  gen.quiet = true;
  REQUIRE(cmd_gen_data(gen) == 0);

  EvalArgs ev;
  ev.ckpt = tmp.sub("missing.dkc");
  ev.data_dir = tmp.sub("data");
  ev.out = tmp.sub("eval");
  ev.quiet = true;
  CHECK(cmd_eval(ev) == 3);  // I/O: file does not exist

  {
    std::ofstream os(tmp.path / "garbage.dkc", std::ios::binary);
    os << "GARBAGEGARBAGE";
  }
  ev.ckpt = tmp.sub("garbage.dkc");
  ev.out = tmp.sub("eval2");
  CHECK(cmd_eval(ev) == 5);  // checkpoint format mismatch
}

TEST_CASE("micro sweep over aug_mode emits consolidated tables") {
  TempDir tmp("dkit_cli_sweep");
  // shrink further: sweep trains one run per value
  std::string cfg = R"({
    "seed": 301,
    "dataset": {"n_speakers": 3, "n_emotions": 2, "samples_per_cell": 2,
                 "feature_dim": 8, "speaker_factor_dim": 2,
                 "seq_len_min": 8, "seq_len_max": 10,
                 "neutral_only_speakers": [2], "content_vocab": 5},
    "model": {"latent_dim": 4, "embed_dim": 4, "hidden": 8, "ref_channels": 8,
              "content_embed_dim": 4},
    "train": {"batch_size": 4, "stage1_steps": 2, "stage2_steps": 2,
              "log_every": 0, "eval_every": 0}
  })";
  write_config(tmp, "config.json", cfg);

  SweepArgs sw;
  sw.config_path = tmp.sub("config.json");
  sw.axis = "aug_mode";
  sw.out = tmp.sub("sweep");
  sw.seeds = 1;
  sw.quiet = true;
  REQUIRE(cmd_sweep(sw) == 0);

  std::ifstream runs(tmp.path / "sweep" / "sweep_runs.csv");
  std::string header, line;
  std::getline(runs, header);
  CHECK(header.rfind("config,replicate,seed,status", 0) == 0);
  int n_runs = 0;
  while (std::getline(runs, line)) {
    ++n_runs;
    CHECK(line.find("ok") != std::string::npos);
  }
  CHECK(n_runs == 3);  // GT, ENC, BOTH x 1 seed

  std::ifstream mean(tmp.path / "sweep" / "sweep.csv");
  std::getline(mean, header);
  int n_values = 0;
  while (std::getline(mean, line)) ++n_values;
  CHECK(n_values == 3);

  // per-run artifacts exist and consolidate via cmd_report
  CHECK(fs::exists(tmp.path / "sweep" / "ENC" / "seed_0" / "report.json"));
  ReportArgs rep;
  rep.in_dir = tmp.sub("sweep");
  rep.out = tmp.sub("summary");
  rep.quiet = true;
  REQUIRE(cmd_report(rep) == 0);
  std::ifstream rj(tmp.path / "summary" / "report.json");
  nlohmann::json j = nlohmann::json::parse(rj);
  CHECK(j.at("metrics").size() == 30);  // 3 runs x 10 metric rows
}

TEST_CASE("unknown sweep axis is a config error") {
  TempDir tmp("dkit_cli_axis");
  write_config(tmp, "config.json", kTinyConfig);
  SweepArgs sw;
  sw.config_path = tmp.sub("config.json");
  sw.axis = "bogus";
  sw.out = tmp.sub("sweep");
  sw.quiet = true;
  CHECK(cmd_sweep(sw) == 2);
}
