#pragma once

#include <string>
#include <vector>

#include "dkit/model.hpp"
#include "dkit/numerics.hpp"
#include "dkit/synthdata.hpp"

namespace dkit {

enum class AugMode { kGT, kENC, kBOTH };

AugMode parse_aug_mode(const std::string& name);
std::string aug_mode_name(AugMode mode);

struct AugConfig {
  AugMode mode = AugMode::kENC;
  double proportion = 0.25;  // rho
  uint64_t seed = 0;         // 0 means: derive from the trainer seed
};

/// The three aligned streams a training step consumes. Reference streams hold
/// full sequences; slicing and input transforms happen at step time.
struct TrainBatch {
  std::vector<Matrix> ground_truth_targets;
  std::vector<Matrix> speaker_reference_inputs;
  std::vector<Matrix> emotion_reference_inputs;
  std::vector<int> speaker_labels;
  std::vector<int> emotion_labels;
  std::vector<std::vector<int>> content_tokens;

  int size() const { return static_cast<int>(ground_truth_targets.size()); }
};

TrainBatch gather_batch(const Dataset& dataset, const std::vector<int>& sample_ids);

struct MixedBatch {
  std::vector<Matrix> ground_truth_targets;
  std::vector<Matrix> emotion_reference_inputs;
  std::vector<Matrix> speaker_reference_inputs;
  std::vector<int> emotion_labels;
  std::vector<int> speaker_labels;
  std::vector<std::vector<int>> content_tokens;
  /// Speaker provenance of the emotion-reference stream (the permuted target
  /// speaker for replaced items).
  std::vector<int> emotion_ref_speaker_labels;
  std::vector<bool> synthetic_mask;

  int size() const { return static_cast<int>(ground_truth_targets.size()); }
  int mask_count() const;
};

/// Uniformly random permutation of batch indices; item i's conversion target
/// is the speaker of item assignment[i].
std::vector<int> permute_speakers(const TrainBatch& batch, Rng& rng);

struct SyntheticBatch {
  std::vector<Matrix> features;
  std::vector<int> speaker_labels;  // assigned target speakers
  std::vector<int> emotion_labels;  // source emotions, preserved
};

/// Voice-converts every item to its assigned speaker while keeping the source
/// emotion (g from the assigned item's reference, e from the item's own).
/// Outputs are plain values; nothing backpropagates into this pass.
SyntheticBatch generate_synthetic(const ModelState& state, const TrainBatch& batch,
                                  const std::vector<int>& assignment, Rng& rng);

/// Replaces floor(rho * B) uniformly chosen items in the streams selected by
/// the mode: ENC touches only emotion references, GT only ground-truth
/// targets, BOTH both. Everything else is copied through unchanged.
MixedBatch mix_batch(const TrainBatch& batch, const SyntheticBatch& synthetic,
                     const AugConfig& config, Rng& rng);

/// The stage-1 path: streams copied, no synthetic entries.
MixedBatch passthrough_batch(const TrainBatch& batch);

}  // namespace dkit
