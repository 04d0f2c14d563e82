#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dkit/losses.hpp"
#include "dkit/metrics.hpp"
#include "dkit/model.hpp"
#include "dkit/selfaug.hpp"
#include "dkit/synthdata.hpp"

namespace dkit {

enum class EncoderLoss { kMpcl, kCe };
enum class GrlMode { kNone, kCe, kCosine };

EncoderLoss parse_encoder_loss(const std::string& name);
GrlMode parse_grl_mode(const std::string& name);
std::string encoder_loss_name(EncoderLoss v);
std::string grl_mode_name(GrlMode v);

struct TrainConfig {
  double lr_initial = 2e-4;
  double beta1 = 0.8;
  double beta2 = 0.99;
  double weight_decay = 0.01;
  double lr_decay_per_epoch = std::pow(0.999, 1.0 / 8.0);
  int batch_size = 32;
  int stage1_steps = 5000;
  int stage2_steps = 1000;
  double stage2_lr = 2e-5;
  double grl_lambda = 1.0;
  double mpcl_temperature = 0.1;
  double grad_clip_norm = 5.0;
  double adam_eps = 1e-8;
  // reconstruction carries the inherited heavy weighting; an unweighted sum
  // lets the KL term flatten the prosody trajectories the transfer metrics need
  LossWeights loss_weights{45.0};
  AugConfig aug;
  uint64_t seed = 1;
  int log_every = 50;
  int eval_every = 1000;
  EncoderLoss encoder_loss = EncoderLoss::kMpcl;
  GrlMode grl_mode = GrlMode::kCosine;
  RefTransform reference_transform = RefTransform::kNone;
  ModelDims dims;
};

// ---------------------------------------------------------------------------
// Optimizer (adaptive moments with decoupled weight decay)
// ---------------------------------------------------------------------------

struct AdamHyper {
  double beta1 = 0.8;
  double beta2 = 0.99;
  double weight_decay = 0.01;
  double eps = 1e-8;
};

struct OptimizerState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  int64_t step = 0;
};

OptimizerState init_optimizer(const ModelState& state);

/// Bias-corrected moment update followed by the decoupled decay
/// theta <- theta - lr * wd * theta, applied separately from the gradient term.
void optimizer_step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads,
                    OptimizerState& opt, double lr, const AdamHyper& hyper);

double lr_at_epoch(const TrainConfig& config, int64_t epoch);

// ---------------------------------------------------------------------------
// Objective assembly. One training step's randomness is fixed up front in
// StepData so the objective is a deterministic function of the parameters;
// grad checks and the GRL contract tests reuse the same builder.
// ---------------------------------------------------------------------------

struct StepData {
  MixedBatch mixed;
  std::vector<Matrix> speaker_slices;   // post slice
  std::vector<Matrix> emotion_slices;   // post slice + reference transform
  std::vector<Matrix> posterior_eps;    // per item, T x d_z
};

/// Slices references, applies the configured emotion-input transform, draws
/// posterior noise, and (in stage 2) generates and mixes synthetic samples.
StepData assemble_step(const TrainConfig& config, const Dataset& dataset,
                       const std::vector<int>& batch_ids, const ModelState& state,
                       int64_t step, bool stage2);

struct ObjectiveOptions {
  EncoderLoss encoder_loss = EncoderLoss::kMpcl;
  GrlMode grl_mode = GrlMode::kCosine;
  double grl_lambda = 1.0;
  double mpcl_temperature = 0.1;
  LossWeights weights;
  /// Replaces every gradient-reversal node with the identity; with this set
  /// the objective is a plain scalar function suitable for central-difference
  /// checking.
  bool bypass_grl = false;
  /// When set, the cosine terms compare against these fixed vectors instead
  /// of detached embeddings from the current pass (grad-check support: the
  /// checked function must not move its stop-gradient targets).
  const std::vector<std::vector<double>>* frozen_g = nullptr;
  const std::vector<std::vector<double>>* frozen_e = nullptr;
};

struct ObjectiveResult {
  LossReport report;       // reported terms; cosine slots carry raw cosines
  double objective = 0.0;  // scalar actually differentiated
  std::vector<Matrix> grads;  // aligned with ModelState::parameters()
};

/// Builds the full training objective on a tape and (optionally) backprops.
/// The reported total is the weighted sum of the reported terms; the
/// differentiated scalar enters each cosine disentanglement term with the
/// adversarial sign so that processors learn to predict the opposing
/// embedding while reversed gradients remove it upstream.
ObjectiveResult model_objective(const ModelState& state, const StepData& data,
                                const ObjectiveOptions& options, bool want_grads);

// ---------------------------------------------------------------------------
// Checkpoints: magic DKC1, u32 version, length-prefixed sections
// (config JSON, named parameter tensors, optimizer tensors, rng state).
// Parameter payloads are stored as float64 so resume is bit-exact.
// ---------------------------------------------------------------------------

struct Checkpoint {
  ModelState model;
  OptimizerState opt;
  TrainConfig config;
  int64_t next_step = 0;
  int stage = 1;
  uint64_t rng_state = 0;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct HistoryEntry {
  int64_t step = 0;
  int stage = 1;
  std::string metric;
  double value = 0.0;
};

struct TrainResult {
  Checkpoint last;
  Checkpoint best;
  std::vector<HistoryEntry> history;
  bool aborted_non_finite = false;
};

/// Stage 1 optimizes the full objective on ground-truth batches; stage 2
/// restarts the optimizer at the reduced learning rate and mixes in
/// Self-Augmentation batches per the aug config. Deterministic given the
/// config seed. A non-finite loss aborts with the last good checkpoint.
TrainResult train(const TrainConfig& config, const Dataset& dataset,
                  const Checkpoint* resume = nullptr);

void write_history_csv(const std::string& path, const std::vector<HistoryEntry>& entries);

}  // namespace dkit
