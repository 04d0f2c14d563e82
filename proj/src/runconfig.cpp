#include "dkit/runconfig.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace dkit {

using nlohmann::json;

namespace {

void reject_unknown_keys(const json& j, const std::set<std::string>& allowed,
                         const std::string& path) {
  if (!j.is_object()) throw ConfigError("config: " + path + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (allowed.find(it.key()) == allowed.end())
      throw ConfigError("config: unknown key " + path + "." + it.key());
  }
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::pair<int, int> line_col_of(const std::string& text, size_t byte) {
  int line = 1, col = 1;
  for (size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

void parse_dataset(const json& j, DatasetSpec& spec, bool& seed_given) {
  reject_unknown_keys(j, {"n_speakers", "n_emotions", "samples_per_cell", "feature_dim",
                          "speaker_factor_dim", "seq_len_min", "seq_len_max", "noise_std",
                          "neutral_only_speakers", "corpus_bias", "content_vocab", "seed"},
                      "dataset");
  read_field(j, "n_speakers", spec.n_speakers);
  read_field(j, "n_emotions", spec.n_emotions);
  read_field(j, "samples_per_cell", spec.samples_per_cell);
  read_field(j, "feature_dim", spec.feature_dim);
  read_field(j, "speaker_factor_dim", spec.speaker_factor_dim);
  read_field(j, "seq_len_min", spec.seq_len_min);
  read_field(j, "seq_len_max", spec.seq_len_max);
  read_field(j, "noise_std", spec.noise_std);
  read_field(j, "neutral_only_speakers", spec.neutral_only_speakers);
  read_field(j, "corpus_bias", spec.corpus_bias);
  read_field(j, "content_vocab", spec.content_vocab);
  if (j.contains("seed")) {
    spec.seed = j.at("seed").get<uint64_t>();
    seed_given = true;
  }
}

void parse_model(const json& j, RunConfig::ModelSection& m) {
  reject_unknown_keys(
      j, {"latent_dim", "embed_dim", "hidden", "ref_channels", "content_embed_dim"},
      "model");
  read_field(j, "latent_dim", m.latent_dim);
  read_field(j, "embed_dim", m.embed_dim);
  read_field(j, "hidden", m.hidden);
  read_field(j, "ref_channels", m.ref_channels);
  read_field(j, "content_embed_dim", m.content_embed_dim);
}

void parse_weights(const json& j, LossWeights& w) {
  reject_unknown_keys(j, {"recon", "kl", "mpcl_emotion", "mpcl_speaker", "cos_emb_ge",
                          "cos_emb_eg", "cos_content_e", "cos_content_g"},
                      "train.loss_weights");
  read_field(j, "recon", w.recon);
  read_field(j, "kl", w.kl);
  read_field(j, "mpcl_emotion", w.mpcl_emotion);
  read_field(j, "mpcl_speaker", w.mpcl_speaker);
  read_field(j, "cos_emb_ge", w.cos_emb_ge);
  read_field(j, "cos_emb_eg", w.cos_emb_eg);
  read_field(j, "cos_content_e", w.cos_content_e);
  read_field(j, "cos_content_g", w.cos_content_g);
}

void parse_train(const json& j, TrainConfig& t, bool& seed_given) {
  reject_unknown_keys(j, {"lr_initial", "betas", "weight_decay", "lr_decay_per_epoch",
                          "batch_size", "stage1_steps", "stage2_steps", "stage2_lr",
                          "grl_lambda", "mpcl_temperature", "grad_clip_norm",
                          "loss_weights", "seed", "log_every", "eval_every"},
                      "train");
  read_field(j, "lr_initial", t.lr_initial);
  if (j.contains("betas")) {
    auto betas = j.at("betas").get<std::vector<double>>();
    if (betas.size() != 2) throw ConfigError("config: train.betas must have 2 entries");
    t.beta1 = betas[0];
    t.beta2 = betas[1];
  }
  read_field(j, "weight_decay", t.weight_decay);
  read_field(j, "lr_decay_per_epoch", t.lr_decay_per_epoch);
  read_field(j, "batch_size", t.batch_size);
  read_field(j, "stage1_steps", t.stage1_steps);
  read_field(j, "stage2_steps", t.stage2_steps);
  read_field(j, "stage2_lr", t.stage2_lr);
  read_field(j, "grl_lambda", t.grl_lambda);
  read_field(j, "mpcl_temperature", t.mpcl_temperature);
  read_field(j, "grad_clip_norm", t.grad_clip_norm);
  if (j.contains("loss_weights")) parse_weights(j.at("loss_weights"), t.loss_weights);
  if (j.contains("seed")) {
    t.seed = j.at("seed").get<uint64_t>();
    seed_given = true;
  }
  read_field(j, "log_every", t.log_every);
  read_field(j, "eval_every", t.eval_every);
}

void parse_aug(const json& j, AugConfig& a) {
  reject_unknown_keys(j, {"mode", "proportion", "seed"}, "self_augmentation");
  if (j.contains("mode")) a.mode = parse_aug_mode(j.at("mode").get<std::string>());
  read_field(j, "proportion", a.proportion);
  read_field(j, "seed", a.seed);
  if (a.proportion < 0.0 || a.proportion > 1.0)
    throw ConfigError("config: self_augmentation.proportion must be in [0, 1]");
}

void parse_ablation(const json& j, TrainConfig& t) {
  reject_unknown_keys(j, {"encoder_loss", "grl_mode", "reference_transform"}, "ablation");
  if (j.contains("encoder_loss"))
    t.encoder_loss = parse_encoder_loss(j.at("encoder_loss").get<std::string>());
  if (j.contains("grl_mode")) t.grl_mode = parse_grl_mode(j.at("grl_mode").get<std::string>());
  if (j.contains("reference_transform"))
    t.reference_transform = parse_ref_transform(j.at("reference_transform").get<std::string>());
}

}  // namespace

RunConfig default_run_config() {
  RunConfig c;
  c.dataset.seed = derive_seed(c.master_seed, hash_string("dataset"));
  c.train.seed = derive_seed(c.master_seed, hash_string("train"));
  return c;
}

RunConfig parse_run_config_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    auto [line, col] = line_col_of(text, e.byte > 0 ? e.byte - 1 : 0);
    throw ConfigError("config: malformed JSON at line " + std::to_string(line) +
                      ", column " + std::to_string(col));
  }
  reject_unknown_keys(j, {"seed", "dataset", "model", "train", "self_augmentation", "ablation"},
                      "(root)");

  RunConfig c;
  bool dataset_seed_given = false, train_seed_given = false;
  if (j.contains("seed")) c.master_seed = j.at("seed").get<uint64_t>();
  if (j.contains("dataset")) parse_dataset(j.at("dataset"), c.dataset, dataset_seed_given);
  if (j.contains("model")) parse_model(j.at("model"), c.model);
  if (j.contains("train")) parse_train(j.at("train"), c.train, train_seed_given);
  if (j.contains("self_augmentation")) parse_aug(j.at("self_augmentation"), c.train.aug);
  if (j.contains("ablation")) parse_ablation(j.at("ablation"), c.train);

  if (!dataset_seed_given) c.dataset.seed = derive_seed(c.master_seed, hash_string("dataset"));
  if (!train_seed_given) c.train.seed = derive_seed(c.master_seed, hash_string("train"));
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_run_config_text(ss.str());
}

void override_seed(RunConfig& config, uint64_t seed) {
  config.master_seed = seed;
  config.dataset.seed = derive_seed(seed, hash_string("dataset"));
  config.train.seed = derive_seed(seed, hash_string("train"));
  config.train.aug.seed = 0;  // re-derive from the train seed
}

ModelDims resolve_dims(const RunConfig& config, const DatasetSpec& data_spec) {
  ModelDims d;
  d.feature_dim = data_spec.feature_dim;
  bool band = config.train.reference_transform == RefTransform::kBandLimit ||
              config.train.reference_transform == RefTransform::kBoth;
  d.emotion_input_dim = band ? (data_spec.feature_dim + 3) / 4 : data_spec.feature_dim;
  d.latent_dim = config.model.latent_dim;
  d.embed_dim = config.model.embed_dim;
  d.hidden = config.model.hidden;
  d.ref_channels = config.model.ref_channels;
  d.content_vocab = data_spec.content_vocab;
  d.content_embed_dim = config.model.content_embed_dim;
  d.n_speakers = data_spec.n_speakers;
  d.n_emotions = data_spec.n_emotions;
  return d;
}

TrainConfig finalize_train_config(const RunConfig& config, const DatasetSpec& data_spec) {
  TrainConfig t = config.train;
  t.dims = resolve_dims(config, data_spec);
  return t;
}

std::string config_descriptor(const TrainConfig& config) {
  std::string s = encoder_loss_name(config.encoder_loss) + "+" + grl_mode_name(config.grl_mode);
  if (config.reference_transform != RefTransform::kNone)
    s += "+" + ref_transform_name(config.reference_transform);
  if (config.stage2_steps > 0 && config.aug.proportion > 0.0)
    s += "+aug-" + aug_mode_name(config.aug.mode) + "-" +
         std::to_string(config.aug.proportion).substr(0, 4);
  return s;
}

}  // namespace dkit
