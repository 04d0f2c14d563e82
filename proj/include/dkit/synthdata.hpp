#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dkit/numerics.hpp"

namespace dkit {

/// Layout of the synthetic factor dataset. Emotion index 0 is neutral; the
/// neutral-only speakers contribute no emotional samples to the train split.
struct DatasetSpec {
  int n_speakers = 10;
  int n_emotions = 5;
  int samples_per_cell = 20;
  int feature_dim = 16;
  int speaker_factor_dim = 4;
  int seq_len_min = 24;
  int seq_len_max = 48;
  double noise_std = 0.1;
  std::vector<int> neutral_only_speakers = {8, 9};
  bool corpus_bias = false;
  int content_vocab = 12;
  uint64_t seed = 1234;
};

/// Sinusoidal prosody trajectory parameters; one triple per emotion id.
struct EmotionParams {
  double frequency = 0.0;
  double amplitude = 0.0;
  double offset = 0.0;
};

/// One synthetic utterance. Frame t of `features` is
///   W_s * speaker_factor + trajectory(t) * emotion_direction
///   + content_embedding[token_t] + corpus_offset + noise.
struct FactorSample {
  Matrix features;  // T x D
  int speaker_id = 0;
  int emotion_id = 0;
  std::vector<int> content_tokens;     // one per frame
  std::vector<double> speaker_factor;  // ground truth
  EmotionParams emotion_params;
  int corpus_id = 0;
};

struct Dataset {
  DatasetSpec spec;
  std::vector<FactorSample> samples;
  std::vector<int> train_ids;
  std::vector<int> heldout_ids;

  // generator tables, kept for the oracle readouts
  std::vector<EmotionParams> emotion_table;
  std::vector<std::vector<double>> speaker_factors;
  Matrix speaker_mixing;                  // D x speaker_factor_dim
  std::vector<double> emotion_direction;  // D, supported on the low band
  Matrix content_embeddings;              // vocab x D
  std::vector<double> corpus_offset;      // D, applied to corpus 1 when enabled

  int low_band_dim() const { return (spec.feature_dim + 3) / 4; }
};

/// Deterministic given spec.seed; speaker and emotion subspaces are linearly
/// separable by construction. Emotion parameter triples of distinct ids
/// differ by at least 20% in at least one component (checked).
Dataset make_dataset(const DatasetSpec& spec);

/// Shuffled mini-batches, reshuffled each epoch from a per-epoch derived
/// seed, so iteration order is a pure function of (seed, step).
struct Batch {
  std::vector<int> ids;
};

class BatchStream {
 public:
  BatchStream(const Dataset& dataset, int batch_size, uint64_t seed);
  Batch next();
  /// Fast-forwards to the state after `batches` calls to next().
  void seek(int64_t batches);
  int batches_per_epoch() const { return batches_per_epoch_; }

 private:
  void reshuffle();
  const Dataset* dataset_;
  int batch_size_;
  uint64_t seed_;
  int64_t epoch_ = 0;
  int pos_ = 0;  // batch index within epoch
  std::vector<int> order_;
  int batches_per_epoch_ = 0;
};

// Dataset directory: manifest.json plus one DKT1 tensor file per sample.
void save_dataset(const Dataset& dataset, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace dkit
