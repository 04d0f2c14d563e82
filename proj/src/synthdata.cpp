#include "dkit/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "dkit/tensor_io.hpp"
#include "json.hpp"

namespace dkit {

namespace {

constexpr double kTwoPi = 6.283185307179586;
constexpr double kTrajectoryPeriodFrames = 32.0;
constexpr double kLowBandLeak = 0.25;  // speaker/content presence in the prosody band

void validate(const DatasetSpec& spec) {
  if (spec.n_speakers < 1) throw InvalidSpecError("dataset: n_speakers < 1");
  if (spec.n_emotions < 2) throw InvalidSpecError("dataset: n_emotions must be >= 2");
  if (spec.samples_per_cell < 1) throw InvalidSpecError("dataset: samples_per_cell < 1");
  if (spec.feature_dim < 4) throw InvalidSpecError("dataset: feature_dim must be >= 4");
  if (spec.speaker_factor_dim < 1) throw InvalidSpecError("dataset: speaker_factor_dim < 1");
  if (spec.seq_len_min < 8) throw InvalidSpecError("dataset: seq_len_min must be >= 8");
  if (spec.seq_len_max < spec.seq_len_min)
    throw InvalidSpecError("dataset: seq_len_max < seq_len_min");
  if (spec.noise_std < 0.0) throw InvalidSpecError("dataset: noise_std < 0");
  if (spec.content_vocab < 2) throw InvalidSpecError("dataset: content_vocab < 2");
  for (int id : spec.neutral_only_speakers)
    if (id < 0 || id >= spec.n_speakers)
      throw InvalidSpecError("dataset: neutral_only speaker id out of range");
}

std::vector<EmotionParams> emotion_parameter_table(int n_emotions) {
  std::vector<EmotionParams> table(n_emotions);
  for (int k = 0; k < n_emotions; ++k) {
    table[k].frequency = std::pow(1.35, k);
    table[k].amplitude = 0.5 * std::pow(1.3, k);
    table[k].offset = k == 0 ? 0.0 : 0.6 * ((k + 1) / 2) * (k % 2 == 1 ? 1.0 : -1.0);
  }
  auto rel = [](double a, double b) {
    double m = std::max({std::fabs(a), std::fabs(b), 1e-9});
    return std::fabs(a - b) / m;
  };
  for (int i = 0; i < n_emotions; ++i)
    for (int j = i + 1; j < n_emotions; ++j) {
      bool ok = rel(table[i].frequency, table[j].frequency) >= 0.2 ||
                rel(table[i].amplitude, table[j].amplitude) >= 0.2 ||
                rel(table[i].offset, table[j].offset) >= 0.2;
      if (!ok)
        throw InvalidSpecError("dataset: emotion trajectories not separated by >= 20%");
    }
  return table;
}

}  // namespace

Dataset make_dataset(const DatasetSpec& spec) {
  validate(spec);
  Dataset ds;
  ds.spec = spec;
  ds.emotion_table = emotion_parameter_table(spec.n_emotions);

  int d = spec.feature_dim;
  int low = ds.low_band_dim();
  Rng table_rng(derive_seed(spec.seed, hash_string("tables")));

  ds.speaker_mixing = Matrix(d, spec.speaker_factor_dim);
  double mix_scale = 1.0 / std::sqrt(static_cast<double>(spec.speaker_factor_dim));
  for (int r = 0; r < d; ++r) {
    double band = r < low ? kLowBandLeak : 1.0;
    for (int c = 0; c < spec.speaker_factor_dim; ++c)
      ds.speaker_mixing(r, c) = band * mix_scale * table_rng.gaussian();
  }

  ds.emotion_direction.assign(d, 0.0);
  double dir_norm2 = 0.0;
  for (int r = 0; r < low; ++r) {
    ds.emotion_direction[r] = table_rng.gaussian();
    dir_norm2 += ds.emotion_direction[r] * ds.emotion_direction[r];
  }
  double dir_norm = std::sqrt(dir_norm2);
  for (int r = 0; r < low; ++r) ds.emotion_direction[r] /= dir_norm;

  ds.content_embeddings = Matrix(spec.content_vocab, d);
  for (int v = 0; v < spec.content_vocab; ++v)
    for (int c = 0; c < d; ++c) {
      double band = c < low ? kLowBandLeak : 1.0;
      ds.content_embeddings(v, c) = 0.7 * band * table_rng.gaussian();
    }

  ds.corpus_offset.assign(d, 0.0);
  for (int c = 0; c < d; ++c) ds.corpus_offset[c] = 0.5 * table_rng.gaussian();

  for (int s = 0; s < spec.n_speakers; ++s) {
    std::vector<double> factor(spec.speaker_factor_dim);
    for (double& v : factor) v = table_rng.gaussian();
    ds.speaker_factors.push_back(std::move(factor));
  }

  int index = 0;
  for (int spk = 0; spk < spec.n_speakers; ++spk) {
    for (int emo = 0; emo < spec.n_emotions; ++emo) {
      for (int cell = 0; cell < spec.samples_per_cell; ++cell, ++index) {
        Rng rng(derive_seed(spec.seed, hash_string("sample"), index));
        FactorSample sample;
        sample.speaker_id = spk;
        sample.emotion_id = emo;
        sample.speaker_factor = ds.speaker_factors[spk];
        sample.emotion_params = ds.emotion_table[emo];
        sample.corpus_id = spec.corpus_bias ? spk % 2 : 0;

        int t_len = rng.uniform_int(spec.seq_len_min, spec.seq_len_max);
        sample.content_tokens.reserve(t_len);
        while (static_cast<int>(sample.content_tokens.size()) < t_len) {
          int token = rng.uniform_int(0, spec.content_vocab - 1);
          int run = rng.uniform_int(4, 8);
          for (int i = 0; i < run && static_cast<int>(sample.content_tokens.size()) < t_len;
               ++i)
            sample.content_tokens.push_back(token);
        }

        double phase = rng.uniform(0.0, kTwoPi);
        const EmotionParams& ep = sample.emotion_params;

        std::vector<double> speaker_part(d, 0.0);
        for (int r = 0; r < d; ++r)
          for (int c = 0; c < spec.speaker_factor_dim; ++c)
            speaker_part[r] += ds.speaker_mixing(r, c) * sample.speaker_factor[c];

        sample.features = Matrix(t_len, d);
        for (int t = 0; t < t_len; ++t) {
          double traj = ep.amplitude *
                            std::sin(kTwoPi * ep.frequency * t / kTrajectoryPeriodFrames +
                                     phase) +
                        ep.offset;
          int token = sample.content_tokens[t];
          for (int c = 0; c < d; ++c) {
            double v = speaker_part[c] + traj * ds.emotion_direction[c] +
                       ds.content_embeddings(token, c) + spec.noise_std * rng.gaussian();
            if (sample.corpus_id == 1) v += ds.corpus_offset[c];
            sample.features(t, c) = v;
          }
        }

        bool neutral_only = std::find(spec.neutral_only_speakers.begin(),
                                      spec.neutral_only_speakers.end(),
                                      spk) != spec.neutral_only_speakers.end();
        if (neutral_only && emo != 0)
          ds.heldout_ids.push_back(index);
        else
          ds.train_ids.push_back(index);
        ds.samples.push_back(std::move(sample));
      }
    }
  }
  return ds;
}

BatchStream::BatchStream(const Dataset& dataset, int batch_size, uint64_t seed)
    : dataset_(&dataset), batch_size_(batch_size), seed_(seed) {
  if (dataset.train_ids.empty()) throw EmptyDatasetError("batch stream: empty train split");
  if (batch_size < 1 || batch_size > static_cast<int>(dataset.train_ids.size()))
    throw InvalidSpecError("batch stream: batch_size must be in [1, train size]");
  int n = static_cast<int>(dataset.train_ids.size());
  batches_per_epoch_ = (n + batch_size - 1) / batch_size;
  reshuffle();
}

void BatchStream::reshuffle() {
  order_ = dataset_->train_ids;
  Rng rng(derive_seed(seed_, hash_string("epoch"), static_cast<uint64_t>(epoch_)));
  rng.shuffle(order_);
}

Batch BatchStream::next() {
  Batch b;
  int n = static_cast<int>(order_.size());
  int start = pos_ * batch_size_;
  int end = std::min(start + batch_size_, n);
  b.ids.assign(order_.begin() + start, order_.begin() + end);
  ++pos_;
  if (pos_ >= batches_per_epoch_) {
    pos_ = 0;
    ++epoch_;
    reshuffle();
  }
  return b;
}

void BatchStream::seek(int64_t batches) {
  epoch_ = batches / batches_per_epoch_;
  pos_ = static_cast<int>(batches % batches_per_epoch_);
  reshuffle();
}

// ---------------------------------------------------------------------------
// Directory layout
// ---------------------------------------------------------------------------

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json spec_to_json(const DatasetSpec& s) {
  return json{{"n_speakers", s.n_speakers},
              {"n_emotions", s.n_emotions},
              {"samples_per_cell", s.samples_per_cell},
              {"feature_dim", s.feature_dim},
              {"speaker_factor_dim", s.speaker_factor_dim},
              {"seq_len_min", s.seq_len_min},
              {"seq_len_max", s.seq_len_max},
              {"noise_std", s.noise_std},
              {"neutral_only_speakers", s.neutral_only_speakers},
              {"corpus_bias", s.corpus_bias},
              {"content_vocab", s.content_vocab},
              {"seed", s.seed}};
}

DatasetSpec spec_from_json(const json& j) {
  DatasetSpec s;
  s.n_speakers = j.at("n_speakers").get<int>();
  s.n_emotions = j.at("n_emotions").get<int>();
  s.samples_per_cell = j.at("samples_per_cell").get<int>();
  s.feature_dim = j.at("feature_dim").get<int>();
  s.speaker_factor_dim = j.at("speaker_factor_dim").get<int>();
  s.seq_len_min = j.at("seq_len_min").get<int>();
  s.seq_len_max = j.at("seq_len_max").get<int>();
  s.noise_std = j.at("noise_std").get<double>();
  s.neutral_only_speakers = j.at("neutral_only_speakers").get<std::vector<int>>();
  s.corpus_bias = j.at("corpus_bias").get<bool>();
  s.content_vocab = j.at("content_vocab").get<int>();
  s.seed = j.at("seed").get<uint64_t>();
  return s;
}

std::string sample_file_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "sample_%05d.dkt", index);
  return buf;
}

json matrix_to_json(const Matrix& m) {
  return json{{"rows", m.rows}, {"cols", m.cols}, {"data", m.data}};
}

Matrix matrix_from_json(const json& j) {
  Matrix m(j.at("rows").get<int>(), j.at("cols").get<int>());
  m.data = j.at("data").get<std::vector<double>>();
  if (static_cast<int>(m.data.size()) != m.rows * m.cols)
    throw FormatError("manifest: matrix payload size mismatch");
  return m;
}

}  // namespace

void save_dataset(const Dataset& dataset, const std::string& dir) {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "dkit-dataset";
  manifest["version"] = 1;
  manifest["spec"] = spec_to_json(dataset.spec);
  manifest["train"] = dataset.train_ids;
  manifest["eval_heldout"] = dataset.heldout_ids;

  json emotions = json::array();
  for (const auto& ep : dataset.emotion_table)
    emotions.push_back(
        {{"frequency", ep.frequency}, {"amplitude", ep.amplitude}, {"offset", ep.offset}});
  manifest["emotion_table"] = emotions;
  manifest["speaker_factors"] = dataset.speaker_factors;
  manifest["speaker_mixing"] = matrix_to_json(dataset.speaker_mixing);
  manifest["emotion_direction"] = dataset.emotion_direction;
  manifest["content_embeddings"] = matrix_to_json(dataset.content_embeddings);
  manifest["corpus_offset"] = dataset.corpus_offset;

  json samples = json::array();
  for (size_t i = 0; i < dataset.samples.size(); ++i) {
    const FactorSample& s = dataset.samples[i];
    samples.push_back({{"file", sample_file_name(static_cast<int>(i))},
                       {"speaker_id", s.speaker_id},
                       {"emotion_id", s.emotion_id},
                       {"content_tokens", s.content_tokens},
                       {"corpus_id", s.corpus_id}});
    write_dkt1_matrix((fs::path(dir) / sample_file_name(static_cast<int>(i))).string(),
                      s.features);
  }
  manifest["samples"] = samples;

  std::ofstream os(fs::path(dir) / "manifest.json");
  if (!os) throw IoError("cannot write manifest.json in " + dir);
  os << manifest.dump(2) << "\n";
  if (!os) throw IoError("manifest write failed in " + dir);
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream is(fs::path(dir) / "manifest.json");
  if (!is) throw IoError("cannot open manifest.json in " + dir);
  json manifest = json::parse(is);
  if (manifest.value("format", "") != "dkit-dataset")
    throw FormatError("manifest: not a dkit dataset");

  Dataset ds;
  ds.spec = spec_from_json(manifest.at("spec"));
  ds.train_ids = manifest.at("train").get<std::vector<int>>();
  ds.heldout_ids = manifest.at("eval_heldout").get<std::vector<int>>();
  for (const auto& e : manifest.at("emotion_table")) {
    EmotionParams ep;
    ep.frequency = e.at("frequency").get<double>();
    ep.amplitude = e.at("amplitude").get<double>();
    ep.offset = e.at("offset").get<double>();
    ds.emotion_table.push_back(ep);
  }
  ds.speaker_factors = manifest.at("speaker_factors").get<std::vector<std::vector<double>>>();
  ds.speaker_mixing = matrix_from_json(manifest.at("speaker_mixing"));
  ds.emotion_direction = manifest.at("emotion_direction").get<std::vector<double>>();
  ds.content_embeddings = matrix_from_json(manifest.at("content_embeddings"));
  ds.corpus_offset = manifest.at("corpus_offset").get<std::vector<double>>();

  int index = 0;
  for (const auto& meta : manifest.at("samples")) {
    FactorSample s;
    s.speaker_id = meta.at("speaker_id").get<int>();
    s.emotion_id = meta.at("emotion_id").get<int>();
    s.content_tokens = meta.at("content_tokens").get<std::vector<int>>();
    s.corpus_id = meta.at("corpus_id").get<int>();
    s.speaker_factor = ds.speaker_factors.at(s.speaker_id);
    s.emotion_params = ds.emotion_table.at(s.emotion_id);
    s.features = read_dkt1_matrix(
        (fs::path(dir) / meta.at("file").get<std::string>()).string());
    ds.samples.push_back(std::move(s));
    ++index;
  }
  return ds;
}

}  // namespace dkit
