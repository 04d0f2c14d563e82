#pragma once

#include <optional>
#include <string>

#include "dkit/synthdata.hpp"
#include "dkit/trainer.hpp"

namespace dkit {

/// Parsed top-level JSON config. Sections: dataset, model, train,
/// self_augmentation, ablation. Every key is optional and defaulted; unknown
/// keys are rejected with their path. A single master seed feeds every
/// section that does not pin its own.
struct RunConfig {
  uint64_t master_seed = 1234;
  DatasetSpec dataset;
  struct ModelSection {
    int latent_dim = 8;
    int embed_dim = 8;
    int hidden = 32;
    int ref_channels = 32;
    int content_embed_dim = 8;
  } model;
  TrainConfig train;  // aug + ablation knobs live here; dims filled on finalize
};

RunConfig default_run_config();

/// Parses strict JSON text. Throws ConfigError with line/column on malformed
/// JSON and with the offending path on unknown keys.
RunConfig parse_run_config_text(const std::string& text);
RunConfig load_run_config(const std::string& path);

/// Applies a --seed override: the master seed and every derived seed move.
void override_seed(RunConfig& config, uint64_t seed);

/// Computes ModelDims from the dataset actually in use plus the ablation's
/// reference transform (band-limited emotion input shrinks the encoder).
ModelDims resolve_dims(const RunConfig& config, const DatasetSpec& data_spec);

/// TrainConfig ready for train(): dims resolved against the given dataset.
TrainConfig finalize_train_config(const RunConfig& config, const DatasetSpec& data_spec);

/// Short human-readable descriptor used in report `config` columns.
std::string config_descriptor(const TrainConfig& config);

}  // namespace dkit
