#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "dkit/numerics.hpp"
#include "dkit/tape.hpp"

namespace dkit {

// ---------------------------------------------------------------------------
// Dimensions and parameter containers
// ---------------------------------------------------------------------------

struct ModelDims {
  int feature_dim = 16;        // D
  int emotion_input_dim = 16;  // emotion-encoder input width (band_limit shrinks it)
  int latent_dim = 8;          // d_z, must be even
  int embed_dim = 8;           // d_emb, shared by speaker and emotion encoders
  int hidden = 32;
  int ref_channels = 32;       // conv width inside the reference encoders
  int content_vocab = 12;
  int content_embed_dim = 8;
  int n_speakers = 10;         // classifier-head widths for the CE baselines
  int n_emotions = 5;
};

/// 6 stacked 1-D convolutions (kernel 3, stride 2) followed by a GRU summary
/// and a linear projection to the embedding dimension.
struct RefEncoderParams {
  struct ConvLayer {
    Matrix w;  // out x (3*in)
    Matrix b;  // 1 x out
  };
  std::vector<ConvLayer> conv_layers;
  Matrix w_r, w_u, w_n;  // H x C
  Matrix u_r, u_u, u_n;  // H x H
  Matrix b_r, b_u, b_n;  // 1 x H
  Matrix output_projection;  // d_emb x H
};

/// Three affine layers with ReLU between them; output width = embed dim.
struct LinearProcessorParams {
  Matrix w1, b1, w2, b2, w3, b3;
};

/// Three 1-D convolutions (kernel 3, stride 1) with ReLU, then mean pooling
/// over time; output width = embed dim.
struct ConvProcessorParams {
  Matrix w1, b1, w2, b2, w3, b3;
};

/// Conditioner MLP of one affine coupling step. Scale pre-activations are
/// tanh-clamped to +-5 before exponentiation, so the block is invertible for
/// any finite parameters. Blocks alternate which latent half they transform.
struct CouplingBlockParams {
  Matrix w1, b1;  // hidden x (half + 2*embed)
  Matrix ws, bs;  // half x hidden (scale head)
  Matrix wt, bt;  // half x hidden (shift head)
};

struct PosteriorParams {
  Matrix w1, b1;  // hidden x (D + 2*embed)
  Matrix w2, b2;  // 2*d_z x hidden
};

struct DecoderParams {
  Matrix w1, b1;  // hidden x (d_z + 2*embed)
  Matrix w2, b2;  // D x hidden
};

struct PriorParams {
  Matrix embed;   // vocab x content_embed_dim
  Matrix w1, b1;  // hidden x content_embed_dim
  Matrix w2, b2;  // 2*d_z x hidden
};

/// Linear label heads used only by the CE encoder-loss and CE-GRL baselines.
struct ClassifierHeads {
  Matrix spk_on_g_w, spk_on_g_b;
  Matrix emo_on_e_w, emo_on_e_b;
  Matrix emo_on_g_w, emo_on_g_b;  // adversarial, behind GRL
  Matrix spk_on_e_w, spk_on_e_b;  // adversarial, behind GRL
  Matrix spk_on_zp_w, spk_on_zp_b;
  Matrix emo_on_zp_w, emo_on_zp_b;
};

struct ModelState {
  ModelDims dims;
  RefEncoderParams speaker_encoder;
  RefEncoderParams emotion_encoder;
  LinearProcessorParams phi_linear_g;  // takes g, predicts e
  LinearProcessorParams phi_linear_e;  // takes e, predicts g
  ConvProcessorParams phi_conv_g;      // takes z_p, predicts g
  ConvProcessorParams phi_conv_e;      // takes z_p, predicts e
  PosteriorParams posterior;
  std::vector<CouplingBlockParams> flow;  // 4 blocks
  DecoderParams decoder;
  PriorParams prior;
  ClassifierHeads heads;

  /// Stable enumeration of every trainable matrix (name, pointer). The
  /// optimizer, checkpoint format and gradient checks all rely on this order.
  std::vector<std::pair<std::string, Matrix*>> parameters();
  std::vector<std::pair<std::string, const Matrix*>> parameters() const;
};

ModelState init_model(const ModelDims& dims, uint64_t seed);

/// Overwrites every parameter with scale * N(0,1) draws. Coupling blocks stop
/// being the identity, which several invertibility and probe tests need.
void randomize_parameters(ModelState& state, Rng& rng, double scale);

std::vector<double> flatten_parameters(const ModelState& state);
void unflatten_parameters(ModelState& state, const std::vector<double>& flat);

// ---------------------------------------------------------------------------
// Plain (value-only) operations
// ---------------------------------------------------------------------------

/// Random contiguous window of length T' uniform in [ceil(T/2), T].
Matrix slice_reference(const Matrix& features, Rng& rng);

enum class RefTransform { kNone, kBandLimit, kTimbrePerturb, kBoth };

/// band_limit keeps the first ceil(D/4) feature dims (the prosody-dominant
/// low band of the generator); timbre_perturb multiplies the speaker-factor
/// channels (dims >= ceil(D/4)) by one random scalar in [0.8, 1.25].
Matrix transform_reference(const Matrix& features, RefTransform mode, Rng& rng);

RefTransform parse_ref_transform(const std::string& name);
std::string ref_transform_name(RefTransform mode);

std::vector<double> reference_encode(const RefEncoderParams& params, const Matrix& slice);

std::vector<double> encode_speaker_reference(const ModelState& state, const Matrix& features);

/// Applies the deterministic band-limit first when the emotion encoder was
/// built for the narrow input; train-time-only perturbations stay off.
std::vector<double> encode_emotion_reference(const ModelState& state, const Matrix& features);

struct SampleEmbeddings {
  std::vector<double> g;
  std::vector<double> e;
};
SampleEmbeddings encode_sample_embeddings(const ModelState& state, const Matrix& features);

struct PosteriorSample {
  Matrix z;
  Matrix mean;
  Matrix logstd;
};

/// z = mean + noise_scale * exp(logstd) * eps, eps standard normal from rng.
PosteriorSample posterior_encode(const ModelState& state, const Matrix& features,
                                 const std::vector<double>& g, const std::vector<double>& e,
                                 Rng& rng, double noise_scale = 1.0);

struct FlowResult {
  Matrix z_out;
  double logdet = 0.0;
};

FlowResult flow_forward(const ModelState& state, const Matrix& z,
                        const std::vector<double>& g, const std::vector<double>& e);

Matrix flow_inverse(const ModelState& state, const Matrix& z_p,
                    const std::vector<double>& g, const std::vector<double>& e);

/// Inverse pass that also accumulates its log-determinant (the negated scale
/// sums), for the antisymmetry checks.
FlowResult flow_inverse_with_logdet(const ModelState& state, const Matrix& z_p,
                                    const std::vector<double>& g,
                                    const std::vector<double>& e);

/// Latents recorded after every block: 4 forward steps from z, then 4 inverse
/// steps re-entered at z_p with the same conditioning (the probe layout).
struct FlowTrace {
  std::vector<Matrix> forward_steps;
  std::vector<Matrix> inverse_steps;
  double logdet = 0.0;
};
FlowTrace flow_trace(const ModelState& state, const Matrix& z,
                     const std::vector<double>& g, const std::vector<double>& e);

Matrix decode(const ModelState& state, const Matrix& z, const std::vector<double>& g,
              const std::vector<double>& e);

/// posterior -> forward flow (source conditioning) -> inverse flow (target
/// conditioning) -> decode. Output shape equals the source shape.
Matrix voice_convert(const ModelState& state, const Matrix& source_features,
                     const std::vector<double>& g_src, const std::vector<double>& e_src,
                     const std::vector<double>& g_tgt, const std::vector<double>& e_tgt,
                     Rng& rng, double noise_scale = 1.0);

// ---------------------------------------------------------------------------
// Tape graphs. bind_model inserts every parameter as a leaf (or constant) and
// the builders below compose forward passes whose gradients reach them.
// ---------------------------------------------------------------------------

struct BoundModel {
  const ModelState* state = nullptr;
  std::unordered_map<const Matrix*, int> ids;
  int id(const Matrix& m) const;
};

BoundModel bind_model(Tape& t, const ModelState& state, bool trainable);

int affine_graph(Tape& t, const BoundModel& b, int x, const Matrix& w, const Matrix& bias);

int ref_encode_graph(Tape& t, const BoundModel& b, const RefEncoderParams& params, int input);

struct PosteriorGraph {
  int z = -1;
  int mean = -1;
  int logstd = -1;
};
PosteriorGraph posterior_graph(Tape& t, const BoundModel& b, int features, int g, int e,
                               const Matrix& eps, double noise_scale);

struct FlowGraph {
  int z_out = -1;
  int logdet = -1;                // 1x1
  std::vector<int> block_logdets; // 1x1 each
};
FlowGraph flow_forward_graph(Tape& t, const BoundModel& b, int z, int g, int e);

int decode_graph(Tape& t, const BoundModel& b, int z, int g, int e);

struct PriorGraph {
  int mean = -1;
  int logstd = -1;
};
PriorGraph prior_graph(Tape& t, const BoundModel& b, const std::vector<int>& tokens);

int linear_processor_graph(Tape& t, const BoundModel& b, const LinearProcessorParams& p,
                           int x);
int conv_processor_graph(Tape& t, const BoundModel& b, const ConvProcessorParams& p, int zp);

}  // namespace dkit
