#pragma once

#include <map>
#include <string>
#include <vector>

#include "dkit/model.hpp"
#include "dkit/numerics.hpp"
#include "dkit/synthdata.hpp"

namespace dkit {

// ---------------------------------------------------------------------------
// Kernel alignment
// ---------------------------------------------------------------------------

/// Linear CKA with biased HSIC normalization: inner product of the doubly
/// centered Gram matrices over the product of their Frobenius norms.
/// Invariant to orthogonal transforms and isotropic scaling of either input.
double linear_cka(const Matrix& x, const Matrix& y);

/// K[i][j] = 1 when labels match, else 0.
Matrix label_kernel(const std::vector<int>& labels);

/// Linear CKA between the representation Gram and the label kernel.
double lk_cka(const Matrix& x, const std::vector<int>& labels);

// ---------------------------------------------------------------------------
// Prototypes and oracle factor readouts
// ---------------------------------------------------------------------------

struct PrototypeSet {
  std::map<int, std::vector<double>> centroids;
  std::map<int, int> counts;
};

PrototypeSet centroid_prototypes(const Matrix& embeddings, const std::vector<int>& labels);

/// Closed-form ridge regressors from per-sample feature summaries to the
/// generator's ground-truth factors. The summary of a T x D sequence is
/// [per-dim mean, per-dim std, per-dim mean |first difference|], which makes
/// offset, amplitude and frequency all visible to a linear map.
struct FactorReadout {
  Matrix w_speaker;  // (3D+1) x speaker_factor_dim, last row is the intercept
  Matrix w_emotion;  // (3D+1) x 3
  std::vector<double> emo_mean;  // per-coordinate stats of the emotion table,
  std::vector<double> emo_std;   // used for standardized cosine comparisons
  int feature_dim = 0;
};

std::vector<double> feature_summary(const Matrix& features);

FactorReadout fit_factor_readout(const Dataset& dataset, double regularization = 1e-3);

std::vector<double> readout_speaker_factor(const FactorReadout& r, const Matrix& features);
std::vector<double> readout_emotion_params(const FactorReadout& r, const Matrix& features);

/// Cosine between the readout of `generated` and a target factor. A target of
/// speaker-factor length uses the speaker head; a 3-vector target uses the
/// emotion head and is compared in emotion-table-standardized coordinates.
double factor_similarity(const Matrix& generated, const std::vector<double>& target_factor,
                         const FactorReadout& readout);

/// Standardized cosine between an emotion parameter readout and a table triple.
double emotion_param_similarity(const FactorReadout& r, const std::vector<double>& readout,
                                const EmotionParams& target);

// ---------------------------------------------------------------------------
// Probes
// ---------------------------------------------------------------------------

/// 5-fold cross-validated accuracy of a multinomial linear probe trained by
/// gradient descent on z-scored features.
double probe_accuracy(const Matrix& embeddings, const std::vector<int>& labels, Rng& rng);

struct FlowProbeRow {
  int flow_step = 0;  // 1..8
  bool reverse = false;
  double lk_cka_speaker = 0.0;
  double lk_cka_emotion = 0.0;
};

struct FlowProbeTable {
  std::vector<FlowProbeRow> rows;
};

/// Time-mean latent after each forward block and each inverse block (inverse
/// pass re-entered at z_p with the same conditioning), LK-CKA'd against
/// speaker and emotion labels over the train split. 8 rows.
FlowProbeTable flow_probe(const ModelState& state, const Dataset& dataset);

// ---------------------------------------------------------------------------
// Projection and reports
// ---------------------------------------------------------------------------

/// Exact PCA to 2 components (columns centered, deterministic sign).
Matrix pca_2d(const Matrix& x);

struct MetricRow {
  std::string metric;
  std::string config;
  double value = 0.0;
  uint64_t seed = 0;
};

void write_report_csv(const std::string& path, const std::vector<MetricRow>& rows);
void write_report_json(const std::string& path, const std::vector<MetricRow>& rows,
                       const std::map<std::string, std::string>& meta);
void write_flow_probe_csv(const std::string& path, const FlowProbeTable& table);

// ---------------------------------------------------------------------------
// Model evaluation suite
// ---------------------------------------------------------------------------

struct EmbeddingTable {
  Matrix g;  // n x d_emb
  Matrix e;  // n x d_emb
  std::vector<int> speaker_labels;
  std::vector<int> emotion_labels;
};
EmbeddingTable collect_embeddings(const ModelState& state, const Dataset& dataset,
                                  const std::vector<int>& sample_ids);

struct EvalSummary {
  double cka_g_e = 0.0;
  double lk_cka_speaker = 0.0;
  double lk_cka_emotion = 0.0;
  double probe_speaker_on_e = 0.0;
  double probe_emotion_on_g = 0.0;
  double secs = 0.0;
  double eecs = 0.0;
  double speaker_transfer_rate = 0.0;
  double emotion_match_rate = 0.0;
  double recon_heldout = 0.0;
  int n_conversions = 0;
};

/// Embedding metrics over the train split plus cross-speaker conversions of
/// the held-out emotional samples (each converted to another neutral-only
/// target speaker, conditioned on centroid prototypes).
EvalSummary evaluate_model(const ModelState& state, const Dataset& dataset,
                           const FactorReadout& readout, uint64_t seed);

std::vector<MetricRow> summary_rows(const EvalSummary& s, const std::string& config,
                                    uint64_t seed);

}  // namespace dkit
