#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "dkit/model.hpp"
#include "dkit/numerics.hpp"
#include "dkit/selfaug.hpp"
#include "dkit/synthdata.hpp"

using namespace dkit;

namespace {

DatasetSpec tiny_spec() {
  DatasetSpec s;
  s.n_speakers = 4;
  s.n_emotions = 3;
  s.samples_per_cell = 2;
  s.feature_dim = 8;
  s.speaker_factor_dim = 2;
  s.seq_len_min = 8;
  s.seq_len_max = 10;
  s.neutral_only_speakers = {};
  s.content_vocab = 5;
  s.seed = 120;
  return s;
}

ModelDims tiny_dims(const DatasetSpec& spec) {
  ModelDims d;
  d.feature_dim = spec.feature_dim;
  d.emotion_input_dim = spec.feature_dim;
  d.latent_dim = 4;
  d.embed_dim = 4;
  d.hidden = 8;
  d.ref_channels = 8;
  d.content_vocab = spec.content_vocab;
  d.content_embed_dim = 4;
  d.n_speakers = spec.n_speakers;
  d.n_emotions = spec.n_emotions;
  return d;
}

TrainBatch make_batch(const Dataset& ds, int n) {
  std::vector<int> ids(ds.train_ids.begin(), ds.train_ids.begin() + n);
  return gather_batch(ds, ids);
}

}  // namespace

TEST_CASE("permute_speakers is a permutation and deterministic") {
  Dataset ds = make_dataset(tiny_spec());
  TrainBatch batch = make_batch(ds, 8);

  Rng a(121), b(121);
  std::vector<int> p1 = permute_speakers(batch, a);
  std::vector<int> p2 = permute_speakers(batch, b);
  CHECK(p1 == p2);

  std::vector<int> sorted = p1;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 8; ++i) CHECK(sorted[i] == i);

  // assigned speakers are the batch's speaker multiset
  std::vector<int> assigned, original;
  for (int i = 0; i < 8; ++i) {
    assigned.push_back(batch.speaker_labels[p1[i]]);
    original.push_back(batch.speaker_labels[i]);
  }
  std::sort(assigned.begin(), assigned.end());
  std::sort(original.begin(), original.end());
  CHECK(assigned == original);
}

TEST_CASE("permute_speakers batch of one is the identity") {
  Dataset ds = make_dataset(tiny_spec());
  TrainBatch batch = make_batch(ds, 1);
  Rng rng(122);
  std::vector<int> p = permute_speakers(batch, rng);
  REQUIRE(p.size() == 1);
  CHECK(p[0] == 0);
}

TEST_CASE("generate_synthetic keeps emotions, assigns speakers, preserves shapes") {
  DatasetSpec spec = tiny_spec();
  Dataset ds = make_dataset(spec);
  ModelState state = init_model(tiny_dims(spec), 123);
  Rng prng(124);
  randomize_parameters(state, prng, 0.2);

  TrainBatch batch = make_batch(ds, 6);
  Rng perm_rng(125);
  std::vector<int> assignment = permute_speakers(batch, perm_rng);
  Rng gen_rng(126);
  SyntheticBatch synth = generate_synthetic(state, batch, assignment, gen_rng);

  REQUIRE(static_cast<int>(synth.features.size()) == batch.size());
  CHECK(synth.emotion_labels == batch.emotion_labels);
  for (int i = 0; i < batch.size(); ++i) {
    CHECK(synth.speaker_labels[i] == batch.speaker_labels[assignment[i]]);
    CHECK(synth.features[i].rows == batch.ground_truth_targets[i].rows);
    CHECK(synth.features[i].cols == batch.ground_truth_targets[i].cols);
    CHECK(synth.features[i].all_finite());
  }
}

TEST_CASE("generate_synthetic identity assignment equals the reconstruction path") {
  DatasetSpec spec = tiny_spec();
  Dataset ds = make_dataset(spec);
  ModelState state = init_model(tiny_dims(spec), 127);
  Rng prng(128);
  randomize_parameters(state, prng, 0.2);

  TrainBatch batch = make_batch(ds, 4);
  std::vector<int> identity = {0, 1, 2, 3};
  Rng gen_rng(129);
  SyntheticBatch synth = generate_synthetic(state, batch, identity, gen_rng);

  for (int i = 0; i < 4; ++i) {
    auto g = encode_speaker_reference(state, batch.speaker_reference_inputs[i]);
    auto e = encode_emotion_reference(state, batch.emotion_reference_inputs[i]);
    Rng item_rng(derive_seed(Rng(129).state, hash_string("synthetic"), i));
    Matrix expect =
        voice_convert(state, batch.ground_truth_targets[i], g, e, g, e, item_rng);
    CHECK(synth.features[i] == expect);
  }
}

TEST_CASE("mix_batch mask cardinality is exactly floor(rho * B)") {
  DatasetSpec spec = tiny_spec();
  spec.samples_per_cell = 8;  // enough train samples for B up to 64
  Dataset ds = make_dataset(spec);
  ModelState state = init_model(tiny_dims(spec), 130);

  for (double rho : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    for (int b : {1, 2, 3, 5, 8, 16, 31, 32, 64}) {
      TrainBatch batch = make_batch(ds, b);
      SyntheticBatch synth;  // contents irrelevant for the cardinality check
      synth.features = batch.ground_truth_targets;
      synth.speaker_labels = batch.speaker_labels;
      synth.emotion_labels = batch.emotion_labels;
      AugConfig cfg;
      cfg.mode = AugMode::kENC;
      cfg.proportion = rho;
      Rng rng(derive_seed(131, b, static_cast<uint64_t>(rho * 100)));
      MixedBatch mixed = mix_batch(batch, synth, cfg, rng);
      CHECK(mixed.mask_count() == static_cast<int>(std::floor(rho * b)));
    }
  }
}

TEST_CASE("mix_batch rho zero is a no-op") {
  DatasetSpec spec = tiny_spec();
  Dataset ds = make_dataset(spec);
  ModelState state = init_model(tiny_dims(spec), 132);
  Rng prng(133);
  randomize_parameters(state, prng, 0.2);

  TrainBatch batch = make_batch(ds, 5);
  Rng perm_rng(134);
  std::vector<int> assignment = permute_speakers(batch, perm_rng);
  Rng gen_rng(135);
  SyntheticBatch synth = generate_synthetic(state, batch, assignment, gen_rng);

  AugConfig cfg;
  cfg.proportion = 0.0;
  Rng rng(136);
  MixedBatch mixed = mix_batch(batch, synth, cfg, rng);
  CHECK(mixed.mask_count() == 0);
  for (int i = 0; i < 5; ++i) {
    CHECK(mixed.ground_truth_targets[i] == batch.ground_truth_targets[i]);
    CHECK(mixed.emotion_reference_inputs[i] == batch.emotion_reference_inputs[i]);
    CHECK(mixed.speaker_reference_inputs[i] == batch.speaker_reference_inputs[i]);
  }
  CHECK(mixed.emotion_labels == batch.emotion_labels);
  CHECK(mixed.speaker_labels == batch.speaker_labels);
}

TEST_CASE("mix_batch modes touch only their streams") {
  DatasetSpec spec = tiny_spec();
  Dataset ds = make_dataset(spec);
  ModelState state = init_model(tiny_dims(spec), 137);
  Rng prng(138);
  randomize_parameters(state, prng, 0.2);

  TrainBatch batch = make_batch(ds, 6);
  Rng perm_rng(139);
  std::vector<int> assignment = permute_speakers(batch, perm_rng);
  Rng gen_rng(140);
  SyntheticBatch synth = generate_synthetic(state, batch, assignment, gen_rng);

  AugConfig cfg;
  cfg.proportion = 0.5;

  cfg.mode = AugMode::kENC;
  Rng r1(141);
  MixedBatch enc = mix_batch(batch, synth, cfg, r1);
  CHECK(enc.mask_count() == 3);
  for (int i = 0; i < 6; ++i) {
    // ENC: ground-truth targets, speaker refs, speaker labels all untouched
    CHECK(enc.ground_truth_targets[i] == batch.ground_truth_targets[i]);
    CHECK(enc.speaker_reference_inputs[i] == batch.speaker_reference_inputs[i]);
    CHECK(enc.speaker_labels[i] == batch.speaker_labels[i]);
    if (enc.synthetic_mask[i]) {
      CHECK(enc.emotion_reference_inputs[i] == synth.features[i]);
      CHECK(enc.emotion_labels[i] == batch.emotion_labels[i]);  // emotion preserved
      CHECK(enc.emotion_ref_speaker_labels[i] == synth.speaker_labels[i]);
    } else {
      CHECK(enc.emotion_reference_inputs[i] == batch.emotion_reference_inputs[i]);
    }
  }

  cfg.mode = AugMode::kGT;
  Rng r2(141);
  MixedBatch gt = mix_batch(batch, synth, cfg, r2);
  for (int i = 0; i < 6; ++i) {
    CHECK(gt.emotion_reference_inputs[i] == batch.emotion_reference_inputs[i]);
    CHECK(gt.speaker_reference_inputs[i] == batch.speaker_reference_inputs[i]);
    if (gt.synthetic_mask[i])
      CHECK(gt.ground_truth_targets[i] == synth.features[i]);
    else
      CHECK(gt.ground_truth_targets[i] == batch.ground_truth_targets[i]);
  }

  cfg.mode = AugMode::kBOTH;
  Rng r3(141);
  MixedBatch both = mix_batch(batch, synth, cfg, r3);
  for (int i = 0; i < 6; ++i) {
    if (both.synthetic_mask[i]) {
      CHECK(both.ground_truth_targets[i] == synth.features[i]);
      CHECK(both.emotion_reference_inputs[i] == synth.features[i]);
    }
  }

  // same selection rng => same mask across modes
  CHECK(enc.synthetic_mask == gt.synthetic_mask);
  CHECK(enc.synthetic_mask == both.synthetic_mask);
}

TEST_CASE("mix_batch rejects invalid proportions and misaligned synthetic") {
  DatasetSpec spec = tiny_spec();
  Dataset ds = make_dataset(spec);
  TrainBatch batch = make_batch(ds, 4);
  SyntheticBatch synth;
  synth.features = batch.ground_truth_targets;
  synth.speaker_labels = batch.speaker_labels;
  synth.emotion_labels = batch.emotion_labels;

  AugConfig cfg;
  cfg.proportion = 1.5;
  Rng rng(142);
  CHECK_THROWS_AS(mix_batch(batch, synth, cfg, rng), InvalidProportionError);
  cfg.proportion = -0.1;
  CHECK_THROWS_AS(mix_batch(batch, synth, cfg, rng), InvalidProportionError);

  cfg.proportion = 0.5;
  synth.features.pop_back();
  CHECK_THROWS_AS(mix_batch(batch, synth, cfg, rng), ShapeMismatchError);
}

TEST_CASE("aug mode parsing") {
  CHECK(parse_aug_mode("GT") == AugMode::kGT);
  CHECK(parse_aug_mode("enc") == AugMode::kENC);
  CHECK(parse_aug_mode("BOTH") == AugMode::kBOTH);
  CHECK_THROWS_AS(parse_aug_mode("bogus"), ConfigError);
  CHECK(aug_mode_name(AugMode::kENC) == "ENC");
}
