#include "dkit/commands.hpp"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <thread>
#include <vector>

#include "dkit/metrics.hpp"
#include "dkit/runconfig.hpp"
#include "dkit/trainer.hpp"
#include "json.hpp"

namespace dkit {

namespace fs = std::filesystem;

namespace {

int exit_code_for(const std::exception& e, bool quiet) {
  if (!quiet) std::cerr << "error: " << e.what() << "\n";
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const NonFiniteLossError*>(&e)) return 4;
  if (dynamic_cast<const FormatError*>(&e)) return 5;
  if (dynamic_cast<const IoError*>(&e)) return 3;
  return 1;
}

void ensure_out_dir(const std::string& dir, bool force) {
  fs::path p(dir);
  if (fs::exists(p)) {
    if (!fs::is_directory(p)) throw IoError("output path exists and is not a directory: " + dir);
    if (!fs::is_empty(p) && !force)
      throw IoError("output directory not empty (use --force): " + dir);
  }
  fs::create_directories(p);
}

void ensure_parent_dir(const std::string& file) {
  fs::path p(file);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

// the one timestamped artifact; everything else is byte-deterministic
void write_run_log(const std::string& dir, const std::string& line) {
  auto now = std::chrono::system_clock::now();
  auto secs = std::chrono::duration_cast<std::chrono::seconds>(now.time_since_epoch()).count();
  std::ofstream os(fs::path(dir) / "run.log", std::ios::app);
  os << secs << " " << line << "\n";
}

RunConfig load_config_or_default(const std::string& path, const std::optional<uint64_t>& seed) {
  RunConfig rc = path.empty() ? default_run_config() : load_run_config(path);
  if (seed) override_seed(rc, *seed);
  return rc;
}

Checkpoint load_checkpoint_checked(const std::string& path, const DatasetSpec& data_spec) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.config.dims.feature_dim != data_spec.feature_dim ||
      ckpt.config.dims.n_speakers != data_spec.n_speakers ||
      ckpt.config.dims.n_emotions != data_spec.n_emotions)
    throw FormatError("checkpoint dims do not match the dataset");
  return ckpt;
}

}  // namespace

int cmd_gen_data(const GenDataArgs& args) {
  try {
    RunConfig rc = load_config_or_default(args.config_path, args.seed);
    ensure_out_dir(args.out, args.force);
    Dataset ds = make_dataset(rc.dataset);
    save_dataset(ds, args.out);
    write_run_log(args.out, "gen-data config=" + args.config_path);
    if (!args.quiet) {
      std::cout << "train samples: " << ds.train_ids.size() << "\n";
      std::cout << "eval_heldout samples: " << ds.heldout_ids.size() << "\n";
    }
    return 0;
  } catch (const std::exception& e) {
    return exit_code_for(e, args.quiet);
  }
}

int cmd_train(const TrainArgs& args) {
  try {
    Dataset ds = load_dataset(args.data_dir);
    TrainConfig tc;
    std::optional<Checkpoint> resume;
    if (!args.resume.empty()) {
      resume = load_checkpoint_checked(args.resume, ds.spec);
      tc = resume->config;
    } else {
      RunConfig rc = load_config_or_default(args.config_path, args.seed);
      tc = finalize_train_config(rc, ds.spec);
    }
    ensure_out_dir(args.out, args.force);

    TrainResult result = train(tc, ds, resume ? &*resume : nullptr);
    save_checkpoint(result.last, (fs::path(args.out) / "final.dkc").string());
    save_checkpoint(result.best, (fs::path(args.out) / "best.dkc").string());
    write_history_csv((fs::path(args.out) / "metrics.csv").string(), result.history);
    write_run_log(args.out, "train data=" + args.data_dir);

    if (result.aborted_non_finite) {
      if (!args.quiet)
        std::cerr << "error: non-finite loss at step " << result.last.next_step
                  << "; last good checkpoint written\n";
      return 4;
    }
    if (!args.quiet)
      std::cout << "trained " << result.last.next_step << " steps ("
                << config_descriptor(tc) << ")\n";
    return 0;
  } catch (const std::exception& e) {
    return exit_code_for(e, args.quiet);
  }
}

int cmd_eval(const EvalArgs& args) {
  try {
    Dataset ds = load_dataset(args.data_dir);
    Checkpoint ckpt = load_checkpoint_checked(args.ckpt, ds.spec);
    ensure_out_dir(args.out, args.force);

    FactorReadout readout = fit_factor_readout(ds);
    EvalSummary summary =
        evaluate_model(ckpt.model, ds, readout, ckpt.config.seed);
    std::string desc = config_descriptor(ckpt.config);
    std::vector<MetricRow> rows = summary_rows(summary, desc, ckpt.config.seed);
    write_report_csv((fs::path(args.out) / "report.csv").string(), rows);
    write_report_json((fs::path(args.out) / "report.json").string(), rows,
                      {{"config", desc},
                       {"projection", "pca"},
                       {"tool", "dkit"}});
    write_run_log(args.out, "eval ckpt=" + args.ckpt);
    if (!args.quiet)
      std::cout << "cka_g_e=" << summary.cka_g_e << " lk_cka_speaker="
                << summary.lk_cka_speaker << " lk_cka_emotion=" << summary.lk_cka_emotion
                << " secs=" << summary.secs << " eecs=" << summary.eecs << "\n";
    return 0;
  } catch (const std::exception& e) {
    return exit_code_for(e, args.quiet);
  }
}

int cmd_flow_probe(const FlowProbeArgs& args) {
  try {
    Dataset ds = load_dataset(args.data_dir);
    Checkpoint ckpt = load_checkpoint_checked(args.ckpt, ds.spec);
    ensure_parent_dir(args.out_file);
    FlowProbeTable table = flow_probe(ckpt.model, ds);
    write_flow_probe_csv(args.out_file, table);
    if (!args.quiet) std::cout << "wrote " << table.rows.size() << " probe rows\n";
    return 0;
  } catch (const std::exception& e) {
    return exit_code_for(e, args.quiet);
  }
}

int cmd_project(const ProjectArgs& args) {
  try {
    Dataset ds = load_dataset(args.data_dir);
    Checkpoint ckpt = load_checkpoint_checked(args.ckpt, ds.spec);
    ensure_parent_dir(args.out_file);

    EmbeddingTable table = collect_embeddings(ckpt.model, ds, ds.heldout_ids);
    Matrix coords = pca_2d(table.e);
    std::ofstream os(args.out_file);
    if (!os) throw IoError("cannot write " + args.out_file);
    os << "sample_id,x,y,emotion,speaker\n";
    char buf[96];
    for (int i = 0; i < coords.rows; ++i) {
      std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%d,%d", ds.heldout_ids[i],
                    coords(i, 0), coords(i, 1), table.emotion_labels[i],
                    table.speaker_labels[i]);
      os << buf << "\n";
    }
    if (!os) throw IoError("write failed: " + args.out_file);
    if (!args.quiet) std::cout << "wrote " << coords.rows << " projected points\n";
    return 0;
  } catch (const std::exception& e) {
    return exit_code_for(e, args.quiet);
  }
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

namespace {

struct SweepRun {
  std::string token;   // axis value label
  TrainConfig config;
  uint64_t seed = 0;
  int replicate = 0;
};

std::vector<SweepRun> plan_sweep(const RunConfig& base, const DatasetSpec& data_spec,
                                 const std::string& axis, int seeds) {
  std::vector<std::pair<std::string, TrainConfig>> variants;
  TrainConfig proto = finalize_train_config(base, data_spec);
  auto add = [&](const std::string& token, TrainConfig t) {
    variants.emplace_back(token, std::move(t));
  };

  if (axis == "grl_mode") {
    for (EncoderLoss el : {EncoderLoss::kMpcl, EncoderLoss::kCe})
      for (GrlMode gm : {GrlMode::kNone, GrlMode::kCe, GrlMode::kCosine}) {
        TrainConfig t = proto;
        t.encoder_loss = el;
        t.grl_mode = gm;
        add(encoder_loss_name(el) + "+" + grl_mode_name(gm), t);
      }
  } else if (axis == "encoder_loss") {
    for (EncoderLoss el : {EncoderLoss::kMpcl, EncoderLoss::kCe}) {
      TrainConfig t = proto;
      t.encoder_loss = el;
      add(encoder_loss_name(el), t);
    }
  } else if (axis == "aug_proportion") {
    for (double rho : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      TrainConfig t = proto;
      t.aug.proportion = rho;
      char buf[16];
      std::snprintf(buf, sizeof(buf), "rho=%.2f", rho);
      add(buf, t);
    }
  } else if (axis == "aug_mode") {
    for (AugMode m : {AugMode::kGT, AugMode::kENC, AugMode::kBOTH}) {
      TrainConfig t = proto;
      t.aug.mode = m;
      add(aug_mode_name(m), t);
    }
  } else if (axis == "reference_transform") {
    for (RefTransform r : {RefTransform::kNone, RefTransform::kBandLimit,
                           RefTransform::kTimbrePerturb, RefTransform::kBoth}) {
      RunConfig rc = base;
      rc.train.reference_transform = r;
      TrainConfig t = finalize_train_config(rc, data_spec);  // emotion input width moves
      add(ref_transform_name(r), t);
    }
  } else {
    throw ConfigError("unknown sweep axis: " + axis);
  }

  std::vector<SweepRun> runs;
  for (auto& [token, cfg] : variants) {
    for (int r = 0; r < seeds; ++r) {
      SweepRun run;
      run.token = token;
      run.config = cfg;
      run.replicate = r;
      run.seed = derive_seed(base.master_seed, hash_string(token), r);
      run.config.seed = run.seed;
      run.config.aug.seed = 0;
      runs.push_back(std::move(run));
    }
  }
  return runs;
}

int thread_budget() {
  if (const char* env = std::getenv("DKIT_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1 && n <= 64) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return static_cast<int>(std::min(4u, hw == 0 ? 1u : hw));
}

struct SweepOutcome {
  bool ok = false;
  int code = 1;
  EvalSummary summary;
};

const std::vector<std::string> kSweepMetricNames = {
    "cka_g_e", "lk_cka_speaker", "lk_cka_emotion", "secs",
    "eecs",    "speaker_transfer_rate", "emotion_match_rate", "recon_heldout"};

std::vector<double> summary_values(const EvalSummary& s) {
  return {s.cka_g_e, s.lk_cka_speaker, s.lk_cka_emotion, s.secs,
          s.eecs,    s.speaker_transfer_rate, s.emotion_match_rate, s.recon_heldout};
}

}  // namespace

int cmd_sweep(const SweepArgs& args) {
  try {
    RunConfig rc = load_config_or_default(args.config_path, args.seed);
    ensure_out_dir(args.out, args.force);
    Dataset ds = make_dataset(rc.dataset);
    FactorReadout readout = fit_factor_readout(ds);
    std::vector<SweepRun> runs = plan_sweep(rc, ds.spec, args.axis, args.seeds);
    std::vector<SweepOutcome> outcomes(runs.size());

    std::atomic<size_t> next{0};
    auto worker = [&]() {
      while (true) {
        size_t i = next.fetch_add(1);
        if (i >= runs.size()) return;
        const SweepRun& run = runs[i];
        try {
          fs::path run_dir = fs::path(args.out) / run.token /
                             ("seed_" + std::to_string(run.replicate));
          fs::create_directories(run_dir);
          TrainResult tr = train(run.config, ds);
          save_checkpoint(tr.last, (run_dir / "final.dkc").string());
          write_history_csv((run_dir / "metrics.csv").string(), tr.history);
          if (tr.aborted_non_finite) {
            outcomes[i].code = 4;
            continue;
          }
          EvalSummary ev = evaluate_model(tr.last.model, ds, readout, run.seed);
          std::vector<MetricRow> rows =
              summary_rows(ev, run.token, run.seed);
          write_report_csv((run_dir / "report.csv").string(), rows);
          write_report_json((run_dir / "report.json").string(), rows,
                            {{"config", run.token}, {"tool", "dkit"}});
          outcomes[i].ok = true;
          outcomes[i].code = 0;
          outcomes[i].summary = ev;
        } catch (const std::exception& e) {
          outcomes[i].code = exit_code_for(e, args.quiet);
        }
      }
    };

    int n_threads = std::min<int>(thread_budget(), static_cast<int>(runs.size()));
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();

    // per-run rows
    {
      std::ofstream os(fs::path(args.out) / "sweep_runs.csv");
      if (!os) throw IoError("cannot write sweep_runs.csv");
      os << "config,replicate,seed,status";
      for (const auto& name : kSweepMetricNames) os << "," << name;
      os << "\n";
      char buf[40];
      for (size_t i = 0; i < runs.size(); ++i) {
        os << runs[i].token << "," << runs[i].replicate << "," << runs[i].seed << ","
           << (outcomes[i].ok ? "ok" : "failed");
        if (outcomes[i].ok) {
          for (double v : summary_values(outcomes[i].summary)) {
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            os << "," << buf;
          }
        } else {
          for (size_t c = 0; c < kSweepMetricNames.size(); ++c) os << ",";
        }
        os << "\n";
      }
    }

    // consolidated per-value means, in the planned (paper-table) order
    {
      std::vector<std::string> order;
      std::map<std::string, std::vector<const EvalSummary*>> grouped;
      for (size_t i = 0; i < runs.size(); ++i) {
        if (grouped.find(runs[i].token) == grouped.end()) order.push_back(runs[i].token);
        if (outcomes[i].ok) grouped[runs[i].token].push_back(&outcomes[i].summary);
        else grouped[runs[i].token];
      }
      std::ofstream os(fs::path(args.out) / "sweep.csv");
      if (!os) throw IoError("cannot write sweep.csv");
      os << "config,n_runs";
      for (const auto& name : kSweepMetricNames) os << "," << name;
      os << "\n";
      char buf[40];
      for (const auto& token : order) {
        const auto& group = grouped[token];
        os << token << "," << group.size();
        std::vector<double> mean(kSweepMetricNames.size(), 0.0);
        for (const EvalSummary* s : group) {
          std::vector<double> vals = summary_values(*s);
          for (size_t c = 0; c < mean.size(); ++c) mean[c] += vals[c];
        }
        for (size_t c = 0; c < mean.size(); ++c) {
          if (!group.empty()) mean[c] /= group.size();
          std::snprintf(buf, sizeof(buf), "%.17g", mean[c]);
          os << "," << (group.empty() ? "" : buf);
        }
        os << "\n";
      }
    }
    write_run_log(args.out, "sweep axis=" + args.axis);

    for (const auto& o : outcomes)
      if (!o.ok) return o.code;
    if (!args.quiet) std::cout << "sweep complete: " << runs.size() << " runs\n";
    return 0;
  } catch (const std::exception& e) {
    return exit_code_for(e, args.quiet);
  }
}

int cmd_report(const ReportArgs& args) {
  try {
    if (!fs::is_directory(args.in_dir)) throw IoError("not a directory: " + args.in_dir);
    ensure_out_dir(args.out, args.force);
    std::vector<MetricRow> rows;
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(args.in_dir))
      if (entry.is_regular_file() && entry.path().filename() == "report.json")
        files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
      std::ifstream is(file);
      nlohmann::json j = nlohmann::json::parse(is);
      for (const auto& m : j.at("metrics")) {
        MetricRow row;
        row.metric = m.at("metric").get<std::string>();
        row.config = m.at("config").get<std::string>();
        row.value = m.at("value").get<double>();
        row.seed = m.at("seed").get<uint64_t>();
        rows.push_back(std::move(row));
      }
    }
    write_report_csv((fs::path(args.out) / "report.csv").string(), rows);
    write_report_json((fs::path(args.out) / "report.json").string(), rows,
                      {{"source", args.in_dir}, {"tool", "dkit"}});
    write_run_log(args.out, "report in=" + args.in_dir);
    if (!args.quiet)
      std::cout << "consolidated " << rows.size() << " metric rows from " << files.size()
                << " reports\n";
    return 0;
  } catch (const std::exception& e) {
    return exit_code_for(e, args.quiet);
  }
}

}  // namespace dkit
