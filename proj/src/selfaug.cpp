#include "dkit/selfaug.hpp"

#include <cmath>

namespace dkit {

AugMode parse_aug_mode(const std::string& name) {
  if (name == "GT" || name == "gt") return AugMode::kGT;
  if (name == "ENC" || name == "enc") return AugMode::kENC;
  if (name == "BOTH" || name == "both") return AugMode::kBOTH;
  throw ConfigError("unknown self_augmentation mode: " + name);
}

std::string aug_mode_name(AugMode mode) {
  switch (mode) {
    case AugMode::kGT: return "GT";
    case AugMode::kENC: return "ENC";
    case AugMode::kBOTH: return "BOTH";
  }
  return "ENC";
}

TrainBatch gather_batch(const Dataset& dataset, const std::vector<int>& sample_ids) {
  TrainBatch b;
  for (int id : sample_ids) {
    const FactorSample& s = dataset.samples[id];
    b.ground_truth_targets.push_back(s.features);
    b.speaker_reference_inputs.push_back(s.features);
    b.emotion_reference_inputs.push_back(s.features);
    b.speaker_labels.push_back(s.speaker_id);
    b.emotion_labels.push_back(s.emotion_id);
    b.content_tokens.push_back(s.content_tokens);
  }
  return b;
}

int MixedBatch::mask_count() const {
  int n = 0;
  for (bool f : synthetic_mask)
    if (f) ++n;
  return n;
}

std::vector<int> permute_speakers(const TrainBatch& batch, Rng& rng) {
  int n = batch.size();
  if (n < 1) throw EmptyInputError("permute_speakers: empty batch");
  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = i;
  rng.shuffle(perm);
  return perm;
}

SyntheticBatch generate_synthetic(const ModelState& state, const TrainBatch& batch,
                                  const std::vector<int>& assignment, Rng& rng) {
  if (static_cast<int>(assignment.size()) != batch.size())
    throw ShapeMismatchError("generate_synthetic: assignment size differs from batch");
  SyntheticBatch out;
  for (int i = 0; i < batch.size(); ++i) {
    int j = assignment[i];
    std::vector<double> g_src =
        encode_speaker_reference(state, batch.speaker_reference_inputs[i]);
    std::vector<double> e_src =
        encode_emotion_reference(state, batch.emotion_reference_inputs[i]);
    std::vector<double> g_tgt =
        encode_speaker_reference(state, batch.speaker_reference_inputs[j]);
    Rng item_rng(derive_seed(rng.state, hash_string("synthetic"), i));
    // Eq.-9 pipeline with the source emotion kept: y = G(z_hat; g_tgt, e_src)
    out.features.push_back(voice_convert(state, batch.ground_truth_targets[i], g_src, e_src,
                                         g_tgt, e_src, item_rng));
    out.speaker_labels.push_back(batch.speaker_labels[j]);
    out.emotion_labels.push_back(batch.emotion_labels[i]);
  }
  return out;
}

MixedBatch passthrough_batch(const TrainBatch& batch) {
  MixedBatch m;
  m.ground_truth_targets = batch.ground_truth_targets;
  m.emotion_reference_inputs = batch.emotion_reference_inputs;
  m.speaker_reference_inputs = batch.speaker_reference_inputs;
  m.emotion_labels = batch.emotion_labels;
  m.speaker_labels = batch.speaker_labels;
  m.content_tokens = batch.content_tokens;
  m.emotion_ref_speaker_labels = batch.speaker_labels;
  m.synthetic_mask.assign(batch.size(), false);
  return m;
}

MixedBatch mix_batch(const TrainBatch& batch, const SyntheticBatch& synthetic,
                     const AugConfig& config, Rng& rng) {
  if (config.proportion < 0.0 || config.proportion > 1.0)
    throw InvalidProportionError("mix_batch: proportion must be in [0, 1]");
  if (static_cast<int>(synthetic.features.size()) != batch.size())
    throw ShapeMismatchError("mix_batch: synthetic not aligned with batch");

  MixedBatch m = passthrough_batch(batch);
  int b = batch.size();
  int count = static_cast<int>(std::floor(config.proportion * b));
  if (count == 0) return m;

  std::vector<int> pool(b);
  for (int i = 0; i < b; ++i) pool[i] = i;
  rng.shuffle(pool);

  for (int k = 0; k < count; ++k) {
    int i = pool[k];
    m.synthetic_mask[i] = true;
    if (config.mode == AugMode::kGT || config.mode == AugMode::kBOTH)
      m.ground_truth_targets[i] = synthetic.features[i];
    if (config.mode == AugMode::kENC || config.mode == AugMode::kBOTH) {
      m.emotion_reference_inputs[i] = synthetic.features[i];
      m.emotion_labels[i] = synthetic.emotion_labels[i];  // source emotion, preserved
      m.emotion_ref_speaker_labels[i] = synthetic.speaker_labels[i];
    }
  }
  return m;
}

}  // namespace dkit
