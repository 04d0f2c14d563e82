#include "dkit/losses.hpp"

#include <cmath>

namespace dkit {

namespace {

constexpr double kLogSqrt2Pi = 0.9189385332046727;  // 0.5 * ln(2*pi)

Matrix match_distribution(const std::vector<int>& anchor_labels,
                          const std::vector<int>& candidate_labels,
                          const std::vector<int>& exclude_index) {
  int b = static_cast<int>(anchor_labels.size());
  int k = static_cast<int>(candidate_labels.size());
  Matrix c(b, k);
  for (int i = 0; i < b; ++i) {
    int skip = exclude_index.empty() ? -1 : exclude_index[i];
    int matches = 0;
    for (int j = 0; j < k; ++j) {
      if (j == skip) continue;
      if (anchor_labels[i] == candidate_labels[j]) {
        c(i, j) = 1.0;
        ++matches;
      }
    }
    if (matches == 0)
      throw NoPositiveError("mpcl: anchor " + std::to_string(i) +
                            " has no matching candidate");
    for (int j = 0; j < k; ++j) c(i, j) /= matches;
  }
  return c;
}

}  // namespace

int mpcl_graph(Tape& t, int anchors, int candidates,
               const std::vector<int>& anchor_labels,
               const std::vector<int>& candidate_labels, double temperature,
               const std::vector<int>& exclude_index) {
  if (temperature <= 0.0)
    throw NonPositiveTemperatureError("mpcl: temperature must be > 0");
  int b = t.rows(anchors);
  int k = t.rows(candidates);
  if (b != static_cast<int>(anchor_labels.size()) ||
      k != static_cast<int>(candidate_labels.size()))
    throw ShapeMismatchError("mpcl: label counts differ from batch shapes");
  if (!exclude_index.empty() && static_cast<int>(exclude_index.size()) != b)
    throw ShapeMismatchError("mpcl: exclude_index size differs from anchor count");

  Matrix target = match_distribution(anchor_labels, candidate_labels, exclude_index);

  int an = t.l2_normalize_rows(anchors);
  int cn = t.l2_normalize_rows(candidates);
  int scores = t.scale(t.matmul(an, t.transpose(cn)), 1.0 / temperature);
  if (!exclude_index.empty()) {
    Matrix mask(b, k);
    for (int i = 0; i < b; ++i)
      if (exclude_index[i] >= 0) mask(i, exclude_index[i]) = -1e30;
    scores = t.add(scores, t.constant(mask));
  }
  int logq = t.log_softmax_rows(scores);
  int weighted = t.hadamard(t.constant(target), logq);
  return t.scale(t.sum_all(weighted), -1.0 / b);
}

MpclResult mpcl_loss(const MPCLBatch& batch) {
  Tape t;
  int a = t.leaf(batch.anchors);
  int c = t.leaf(batch.candidates);
  std::vector<int> exclude;
  if (batch.exclude_diagonal) {
    if (batch.anchors.rows != batch.candidates.rows)
      throw ShapeMismatchError("mpcl: diagonal exclusion requires B == K");
    exclude.resize(batch.anchors.rows);
    for (int i = 0; i < batch.anchors.rows; ++i) exclude[i] = i;
  }
  int loss = mpcl_graph(t, a, c, batch.anchor_labels, batch.candidate_labels,
                        batch.temperature, exclude);
  t.backward(loss);
  MpclResult r;
  r.value = t.value(loss)(0, 0);
  r.grad_anchors = t.grad(a);
  r.grad_candidates = t.grad(c);
  if (r.grad_anchors.size() == 0) r.grad_anchors = Matrix(batch.anchors.rows, batch.anchors.cols);
  if (r.grad_candidates.size() == 0)
    r.grad_candidates = Matrix(batch.candidates.rows, batch.candidates.cols);
  return r;
}

CosineDisentangleResult cosine_disentangle_loss(const std::vector<double>& predicted,
                                                const std::vector<double>& target) {
  if (predicted.size() != target.size())
    throw ShapeMismatchError("cosine_disentangle_loss: lengths differ");
  double np2 = 0.0, nt2 = 0.0, dot = 0.0;
  for (size_t i = 0; i < predicted.size(); ++i) {
    np2 += predicted[i] * predicted[i];
    nt2 += target[i] * target[i];
    dot += predicted[i] * target[i];
  }
  double np = std::sqrt(np2), nt = std::sqrt(nt2);
  if (np < 1e-12 || nt < 1e-12)
    throw ZeroNormError("cosine_disentangle_loss: zero-norm argument");
  CosineDisentangleResult r;
  r.value = dot / (np * nt);
  r.grad_predicted.resize(predicted.size());
  for (size_t i = 0; i < predicted.size(); ++i)
    r.grad_predicted[i] = target[i] / (np * nt) - r.value * predicted[i] / np2;
  return r;
}

std::vector<double> grl_backward(const std::vector<double>& upstream_gradient,
                                 const GrlSpec& spec) {
  std::vector<double> out(upstream_gradient.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = -spec.lambda * upstream_gradient[i];
  return out;
}

double log_normal_sum(const Matrix& x, const Matrix& mean, const Matrix& logstd) {
  if (!x.same_shape(mean) || !x.same_shape(logstd))
    throw ShapeMismatchError("log_normal_sum: shapes differ");
  double s = 0.0;
  for (int i = 0; i < x.size(); ++i) {
    double z = (x.data[i] - mean.data[i]) * std::exp(-logstd.data[i]);
    s += -kLogSqrt2Pi - logstd.data[i] - 0.5 * z * z;
  }
  return s;
}

double kl_term(const Matrix& z, const Matrix& post_mean, const Matrix& post_logstd,
               const Matrix& z_p, double flow_logdet, const Matrix& prior_mean,
               const Matrix& prior_logstd) {
  if (!z.same_shape(post_mean) || !z.same_shape(post_logstd) || !z.same_shape(z_p) ||
      !z.same_shape(prior_mean) || !z.same_shape(prior_logstd))
    throw ShapeMismatchError("kl_term: shapes differ");
  double lq = log_normal_sum(z, post_mean, post_logstd);
  double lp = log_normal_sum(z_p, prior_mean, prior_logstd) + flow_logdet;
  return (lq - lp) / z.size();
}

double reconstruction_loss(const Matrix& predicted, const Matrix& target) {
  if (!predicted.same_shape(target))
    throw ShapeMismatchError("reconstruction_loss: shapes differ");
  double s = 0.0;
  for (int i = 0; i < predicted.size(); ++i) {
    double d = predicted.data[i] - target.data[i];
    s += d * d;
  }
  return s / predicted.size();
}

LossReport total_loss(const LossTerms& parts, const LossWeights& weights) {
  auto check = [](double v, const char* name) {
    if (!std::isfinite(v))
      throw NonFiniteTermError(std::string("total_loss: non-finite term ") + name);
  };
  check(parts.recon, "recon");
  check(parts.kl, "kl");
  check(parts.mpcl_emotion, "mpcl_emotion");
  check(parts.mpcl_speaker, "mpcl_speaker");
  check(parts.cos_emb_ge, "cos_emb_ge");
  check(parts.cos_emb_eg, "cos_emb_eg");
  check(parts.cos_content_e, "cos_content_e");
  check(parts.cos_content_g, "cos_content_g");

  LossReport r;
  r.recon = parts.recon;
  r.kl = parts.kl;
  r.mpcl_emotion = parts.mpcl_emotion;
  r.mpcl_speaker = parts.mpcl_speaker;
  r.cos_emb_ge = parts.cos_emb_ge;
  r.cos_emb_eg = parts.cos_emb_eg;
  r.cos_content_e = parts.cos_content_e;
  r.cos_content_g = parts.cos_content_g;
  r.total = weights.recon * parts.recon + weights.kl * parts.kl +
            weights.mpcl_emotion * parts.mpcl_emotion +
            weights.mpcl_speaker * parts.mpcl_speaker +
            weights.cos_emb_ge * parts.cos_emb_ge + weights.cos_emb_eg * parts.cos_emb_eg +
            weights.cos_content_e * parts.cos_content_e +
            weights.cos_content_g * parts.cos_content_g;
  return r;
}

int cross_entropy_graph(Tape& t, int logits, const std::vector<int>& labels) {
  int n = t.rows(logits);
  int k = t.cols(logits);
  if (n != static_cast<int>(labels.size()))
    throw ShapeMismatchError("cross_entropy: label count differs from rows");
  Matrix onehot(n, k);
  for (int i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= k)
      throw ShapeMismatchError("cross_entropy: label out of range");
    onehot(i, labels[i]) = 1.0;
  }
  int logq = t.log_softmax_rows(logits);
  return t.scale(t.sum_all(t.hadamard(t.constant(onehot), logq)), -1.0 / n);
}

int log_normal_sum_graph(Tape& t, int x, int mean, int logstd) {
  int d = t.sub(x, mean);
  int zn = t.hadamard(d, t.exp_(t.scale(logstd, -1.0)));
  int sq = t.scale(t.hadamard(zn, zn), -0.5);
  int terms = t.sub(sq, logstd);
  int n = t.rows(x) * t.cols(x);
  Matrix base(1, 1, -kLogSqrt2Pi * n);
  return t.add(t.sum_all(terms), t.constant(base));
}

int kl_graph(Tape& t, int z, int post_mean, int post_logstd, int z_p, int flow_logdet,
             int prior_mean, int prior_logstd) {
  int lq = log_normal_sum_graph(t, z, post_mean, post_logstd);
  int lp = t.add(log_normal_sum_graph(t, z_p, prior_mean, prior_logstd), flow_logdet);
  int n = t.rows(z) * t.cols(z);
  return t.scale(t.sub(lq, lp), 1.0 / n);
}

int mse_graph(Tape& t, int predicted, int target) {
  int d = t.sub(predicted, target);
  return t.mean_all(t.hadamard(d, d));
}

}  // namespace dkit
