#pragma once

#include <string>
#include <vector>

#include "dkit/numerics.hpp"
#include "dkit/tape.hpp"

namespace dkit {

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// Anchors scored against a shared candidate set. Rows are l2-normalized
/// internally before scoring. When `exclude_diagonal` is set, anchors and
/// candidates must be the same batch (B == K) and candidate i is removed
/// from anchor i's distribution and match count.
struct MPCLBatch {
  Matrix anchors;                    // B x d
  Matrix candidates;                 // K x d
  std::vector<int> anchor_labels;    // B
  std::vector<int> candidate_labels; // K
  double temperature = 0.1;
  bool exclude_diagonal = false;
};

struct GrlSpec {
  double lambda = 1.0;
};

struct LossTerms {
  double recon = 0.0;
  double kl = 0.0;
  double mpcl_emotion = 0.0;
  double mpcl_speaker = 0.0;
  double cos_emb_ge = 0.0;
  double cos_emb_eg = 0.0;
  double cos_content_e = 0.0;
  double cos_content_g = 0.0;
};

struct LossWeights {
  double recon = 1.0;
  double kl = 1.0;
  double mpcl_emotion = 1.0;
  double mpcl_speaker = 1.0;
  double cos_emb_ge = 1.0;
  double cos_emb_eg = 1.0;
  double cos_content_e = 1.0;
  double cos_content_g = 1.0;
};

/// One named scalar per objective term plus the weighted total.
struct LossReport {
  double recon = 0.0;
  double kl = 0.0;
  double mpcl_emotion = 0.0;
  double mpcl_speaker = 0.0;
  double cos_emb_ge = 0.0;
  double cos_emb_eg = 0.0;
  double cos_content_e = 0.0;
  double cos_content_g = 0.0;
  double total = 0.0;
};

// ---------------------------------------------------------------------------
// Standalone value + gradient operations
// ---------------------------------------------------------------------------

struct MpclResult {
  double value = 0.0;
  Matrix grad_anchors;
  Matrix grad_candidates;
};

/// Cross-entropy between the uniform same-label target distribution and the
/// temperature softmax over anchor-candidate dot products, averaged over
/// anchors. Gradients propagate through the internal l2 normalization.
MpclResult mpcl_loss(const MPCLBatch& batch);

struct CosineDisentangleResult {
  double value = 0.0;
  std::vector<double> grad_predicted;
  // gradient w.r.t. target is identically zero (detachment contract)
};

CosineDisentangleResult cosine_disentangle_loss(const std::vector<double>& predicted,
                                                const std::vector<double>& target);

/// Backward side of a gradient reversal layer: scales the upstream gradient
/// by -lambda. The forward pass is the identity.
std::vector<double> grl_backward(const std::vector<double>& upstream_gradient,
                                 const GrlSpec& spec);

/// log N(x; mean, exp(logstd)) summed over all entries.
double log_normal_sum(const Matrix& x, const Matrix& mean, const Matrix& logstd);

/// log q(z | posterior) minus the flow-transformed prior density of z,
/// averaged over frames and dimensions:
///   [sum log N(z; post) - sum log N(z_p; prior) - flow_logdet] / (T * d).
double kl_term(const Matrix& z, const Matrix& post_mean, const Matrix& post_logstd,
               const Matrix& z_p, double flow_logdet, const Matrix& prior_mean,
               const Matrix& prior_logstd);

/// Mean squared error over all entries.
double reconstruction_loss(const Matrix& predicted, const Matrix& target);

/// Weighted sum of the named terms. Throws NonFiniteTermError naming the
/// first non-finite part.
LossReport total_loss(const LossTerms& parts, const LossWeights& weights);

// ---------------------------------------------------------------------------
// Tape builders. The trainer composes the full objective from these; the
// standalone operations above run the same graphs on a private tape.
// ---------------------------------------------------------------------------

/// exclude_index[i] >= 0 removes that candidate from anchor i's distribution
/// and match count (the "anchor is not its own candidate" convention when
/// anchors and candidates are the same batch). Empty means no exclusions.
int mpcl_graph(Tape& t, int anchors, int candidates,
               const std::vector<int>& anchor_labels,
               const std::vector<int>& candidate_labels, double temperature,
               const std::vector<int>& exclude_index);

/// Mean cross-entropy of logits rows against integer labels.
int cross_entropy_graph(Tape& t, int logits, const std::vector<int>& labels);

int log_normal_sum_graph(Tape& t, int x, int mean, int logstd);

int kl_graph(Tape& t, int z, int post_mean, int post_logstd, int z_p, int flow_logdet,
             int prior_mean, int prior_logstd);

int mse_graph(Tape& t, int predicted, int target);

}  // namespace dkit
