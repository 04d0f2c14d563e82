#include "dkit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "dkit/losses.hpp"
#include "json.hpp"

namespace dkit {

namespace {

Matrix center_columns(const Matrix& x) {
  Matrix out = x;
  for (int c = 0; c < x.cols; ++c) {
    double mean = 0.0;
    for (int r = 0; r < x.rows; ++r) mean += x(r, c);
    mean /= x.rows;
    for (int r = 0; r < x.rows; ++r) out(r, c) -= mean;
  }
  return out;
}

Matrix one_hot_rows(const std::vector<int>& labels) {
  std::map<int, int> compact;
  for (int l : labels) compact.emplace(l, 0);
  int next = 0;
  for (auto& kv : compact) kv.second = next++;
  Matrix out(static_cast<int>(labels.size()), next);
  for (size_t i = 0; i < labels.size(); ++i)
    out(static_cast<int>(i), compact[labels[i]]) = 1.0;
  return out;
}

std::string format_value(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

double linear_cka(const Matrix& x, const Matrix& y) {
  if (x.rows != y.rows) throw ShapeMismatchError("linear_cka: sample counts differ");
  if (x.rows < 2) throw DegenerateInputError("linear_cka: need at least 2 samples");
  Matrix xc = center_columns(x);
  Matrix yc = center_columns(y);
  // For the linear kernel, centering features centers the Gram, so
  // <HKH, HLH>_F = ||Xc^T Yc||_F^2 without forming n x n matrices.
  Matrix cross = matmul(transpose(xc), yc);
  double num = frob_inner(cross, cross);
  double nx = frob_norm(matmul(transpose(xc), xc));
  double ny = frob_norm(matmul(transpose(yc), yc));
  if (nx == 0.0 || ny == 0.0)
    throw DegenerateInputError("linear_cka: centered Gram is identically zero");
  return num / (nx * ny);
}

Matrix label_kernel(const std::vector<int>& labels) {
  int n = static_cast<int>(labels.size());
  Matrix k(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) k(i, j) = labels[i] == labels[j] ? 1.0 : 0.0;
  return k;
}

double lk_cka(const Matrix& x, const std::vector<int>& labels) {
  if (static_cast<int>(labels.size()) != x.rows)
    throw ShapeMismatchError("lk_cka: label count differs from rows");
  if (x.rows < 3) throw DegenerateInputError("lk_cka: need at least 3 samples");
  std::set<int> distinct(labels.begin(), labels.end());
  if (distinct.size() < 2)
    throw DegenerateInputError("lk_cka: need at least 2 distinct labels");
  // The label kernel is the Gram of the one-hot indicator rows.
  return linear_cka(x, one_hot_rows(labels));
}

PrototypeSet centroid_prototypes(const Matrix& embeddings, const std::vector<int>& labels) {
  if (static_cast<int>(labels.size()) != embeddings.rows)
    throw ShapeMismatchError("centroid_prototypes: label count differs from rows");
  PrototypeSet ps;
  for (int i = 0; i < embeddings.rows; ++i) {
    auto& c = ps.centroids[labels[i]];
    if (c.empty()) c.assign(embeddings.cols, 0.0);
    for (int j = 0; j < embeddings.cols; ++j) c[j] += embeddings(i, j);
    ps.counts[labels[i]] += 1;
  }
  for (auto& kv : ps.centroids) {
    int n = ps.counts[kv.first];
    for (double& v : kv.second) v /= n;
  }
  return ps;
}

std::vector<double> feature_summary(const Matrix& features) {
  int d = features.cols;
  int t = features.rows;
  std::vector<double> out(3 * d, 0.0);
  for (int c = 0; c < d; ++c) {
    double mean = 0.0;
    for (int r = 0; r < t; ++r) mean += features(r, c);
    mean /= t;
    double var = 0.0;
    for (int r = 0; r < t; ++r) {
      double dlt = features(r, c) - mean;
      var += dlt * dlt;
    }
    var /= t;
    double absdiff = 0.0;
    for (int r = 0; r + 1 < t; ++r) absdiff += std::fabs(features(r + 1, c) - features(r, c));
    if (t > 1) absdiff /= (t - 1);
    out[c] = mean;
    out[d + c] = std::sqrt(var);
    out[2 * d + c] = absdiff;
  }
  return out;
}

namespace {

Matrix ridge_fit(const Matrix& x, const Matrix& y, double reg) {
  // minimizes ||X w - y||^2 + reg ||w||^2 per output column
  Matrix xtx = matmul(transpose(x), x);
  for (int i = 0; i < xtx.rows; ++i) xtx(i, i) += reg;
  Matrix xty = matmul(transpose(x), y);
  return solve_linear(xtx, xty);
}

Matrix with_intercept(const std::vector<std::vector<double>>& rows) {
  int n = static_cast<int>(rows.size());
  int p = static_cast<int>(rows[0].size());
  Matrix x(n, p + 1);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < p; ++j) x(i, j) = rows[i][j];
    x(i, p) = 1.0;
  }
  return x;
}

std::vector<double> predict(const Matrix& w, const std::vector<double>& summary) {
  std::vector<double> out(w.cols, 0.0);
  for (int j = 0; j < w.cols; ++j) {
    double s = w(w.rows - 1, j);  // intercept
    for (size_t i = 0; i < summary.size(); ++i) s += w(static_cast<int>(i), j) * summary[i];
    out[j] = s;
  }
  return out;
}

}  // namespace

FactorReadout fit_factor_readout(const Dataset& dataset, double regularization) {
  if (dataset.train_ids.empty()) throw EmptyDatasetError("fit_factor_readout: empty train split");
  std::vector<std::vector<double>> summaries;
  int sf_dim = dataset.spec.speaker_factor_dim;
  Matrix y_spk(static_cast<int>(dataset.train_ids.size()), sf_dim);
  Matrix y_emo(static_cast<int>(dataset.train_ids.size()), 3);
  int row = 0;
  for (int id : dataset.train_ids) {
    const FactorSample& s = dataset.samples[id];
    summaries.push_back(feature_summary(s.features));
    for (int j = 0; j < sf_dim; ++j) y_spk(row, j) = s.speaker_factor[j];
    y_emo(row, 0) = s.emotion_params.frequency;
    y_emo(row, 1) = s.emotion_params.amplitude;
    y_emo(row, 2) = s.emotion_params.offset;
    ++row;
  }
  Matrix x = with_intercept(summaries);
  FactorReadout r;
  r.feature_dim = dataset.spec.feature_dim;
  r.w_speaker = ridge_fit(x, y_spk, regularization);
  r.w_emotion = ridge_fit(x, y_emo, regularization);

  r.emo_mean.assign(3, 0.0);
  r.emo_std.assign(3, 0.0);
  int k = static_cast<int>(dataset.emotion_table.size());
  for (const auto& ep : dataset.emotion_table) {
    r.emo_mean[0] += ep.frequency;
    r.emo_mean[1] += ep.amplitude;
    r.emo_mean[2] += ep.offset;
  }
  for (double& v : r.emo_mean) v /= k;
  for (const auto& ep : dataset.emotion_table) {
    double d0 = ep.frequency - r.emo_mean[0];
    double d1 = ep.amplitude - r.emo_mean[1];
    double d2 = ep.offset - r.emo_mean[2];
    r.emo_std[0] += d0 * d0;
    r.emo_std[1] += d1 * d1;
    r.emo_std[2] += d2 * d2;
  }
  for (double& v : r.emo_std) v = std::max(std::sqrt(v / k), 1e-9);
  return r;
}

std::vector<double> readout_speaker_factor(const FactorReadout& r, const Matrix& features) {
  if (features.cols != r.feature_dim)
    throw ShapeMismatchError("readout: feature dim differs from fitted readout");
  return predict(r.w_speaker, feature_summary(features));
}

std::vector<double> readout_emotion_params(const FactorReadout& r, const Matrix& features) {
  if (features.cols != r.feature_dim)
    throw ShapeMismatchError("readout: feature dim differs from fitted readout");
  return predict(r.w_emotion, feature_summary(features));
}

double emotion_param_similarity(const FactorReadout& r, const std::vector<double>& readout,
                                const EmotionParams& target) {
  std::vector<double> a(3), b(3);
  std::vector<double> tv = {target.frequency, target.amplitude, target.offset};
  for (int i = 0; i < 3; ++i) {
    a[i] = (readout[i] - r.emo_mean[i]) / r.emo_std[i];
    b[i] = (tv[i] - r.emo_mean[i]) / r.emo_std[i];
  }
  return cosine_similarity(a, b);
}

double factor_similarity(const Matrix& generated, const std::vector<double>& target_factor,
                         const FactorReadout& readout) {
  if (target_factor.size() == 3 &&
      static_cast<int>(target_factor.size()) != readout.w_speaker.cols) {
    EmotionParams ep{target_factor[0], target_factor[1], target_factor[2]};
    return emotion_param_similarity(readout, readout_emotion_params(readout, generated), ep);
  }
  return cosine_similarity(readout_speaker_factor(readout, generated), target_factor);
}

double probe_accuracy(const Matrix& embeddings, const std::vector<int>& labels, Rng& rng) {
  int n = embeddings.rows;
  if (static_cast<int>(labels.size()) != n)
    throw ShapeMismatchError("probe_accuracy: label count differs from rows");
  std::map<int, int> compact;
  for (int l : labels) compact.emplace(l, 0);
  if (compact.size() < 2) throw TooFewSamplesError("probe_accuracy: need >= 2 labels");
  int next = 0;
  for (auto& kv : compact) kv.second = next++;
  int k = next;
  std::vector<int> y(n);
  std::vector<int> class_count(k, 0);
  for (int i = 0; i < n; ++i) {
    y[i] = compact[labels[i]];
    ++class_count[y[i]];
  }
  for (int c : class_count)
    if (c < 4) throw TooFewSamplesError("probe_accuracy: need >= 4 samples per label");

  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);

  int d = embeddings.cols;
  int correct = 0;
  const int folds = 5;
  for (int fold = 0; fold < folds; ++fold) {
    std::vector<int> train_idx, test_idx;
    for (int i = 0; i < n; ++i)
      (i % folds == fold ? test_idx : train_idx).push_back(order[i]);

    // z-score by train-fold stats
    std::vector<double> mean(d, 0.0), sd(d, 0.0);
    for (int i : train_idx)
      for (int c = 0; c < d; ++c) mean[c] += embeddings(i, c);
    for (double& v : mean) v /= train_idx.size();
    for (int i : train_idx)
      for (int c = 0; c < d; ++c) {
        double dl = embeddings(i, c) - mean[c];
        sd[c] += dl * dl;
      }
    for (double& v : sd) v = std::max(std::sqrt(v / train_idx.size()), 1e-9);

    auto feat = [&](int i, int c) { return (embeddings(i, c) - mean[c]) / sd[c]; };

    Matrix w(k, d + 1);  // last column is the bias
    const double lr = 0.5;
    const int iters = 200;
    for (int it = 0; it < iters; ++it) {
      Matrix grad(k, d + 1);
      for (int i : train_idx) {
        std::vector<double> logits(k);
        for (int c = 0; c < k; ++c) {
          double s = w(c, d);
          for (int j = 0; j < d; ++j) s += w(c, j) * feat(i, j);
          logits[c] = s;
        }
        std::vector<double> p = softmax(logits, 1.0);
        for (int c = 0; c < k; ++c) {
          double err = p[c] - (y[i] == c ? 1.0 : 0.0);
          for (int j = 0; j < d; ++j) grad(c, j) += err * feat(i, j);
          grad(c, d) += err;
        }
      }
      double inv = 1.0 / train_idx.size();
      for (int idx = 0; idx < w.size(); ++idx)
        w.data[idx] -= lr * (grad.data[idx] * inv + 1e-4 * w.data[idx]);
    }

    for (int i : test_idx) {
      int best = 0;
      double best_s = -1e300;
      for (int c = 0; c < k; ++c) {
        double s = w(c, d);
        for (int j = 0; j < d; ++j) s += w(c, j) * feat(i, j);
        if (s > best_s) {
          best_s = s;
          best = c;
        }
      }
      if (best == y[i]) ++correct;
    }
  }
  return static_cast<double>(correct) / n;
}

FlowProbeTable flow_probe(const ModelState& state, const Dataset& dataset) {
  int n = static_cast<int>(dataset.train_ids.size());
  if (n < 3) throw DegenerateInputError("flow_probe: too few train samples");
  int dz = state.dims.latent_dim;
  std::vector<Matrix> step_means(8, Matrix(n, dz));
  std::vector<int> spk_labels, emo_labels;
  spk_labels.reserve(n);
  emo_labels.reserve(n);

  int row = 0;
  for (int id : dataset.train_ids) {
    const FactorSample& s = dataset.samples[id];
    SampleEmbeddings emb = encode_sample_embeddings(state, s.features);
    Rng rng(derive_seed(dataset.spec.seed, hash_string("flow-probe"), id));
    PosteriorSample ps = posterior_encode(state, s.features, emb.g, emb.e, rng, 0.0);
    FlowTrace trace = flow_trace(state, ps.z, emb.g, emb.e);
    for (int step = 0; step < 4; ++step) {
      const Matrix& latent = trace.forward_steps[step];
      for (int c = 0; c < dz; ++c) {
        double m = 0.0;
        for (int r = 0; r < latent.rows; ++r) m += latent(r, c);
        step_means[step](row, c) = m / latent.rows;
      }
    }
    for (int step = 0; step < 4; ++step) {
      const Matrix& latent = trace.inverse_steps[step];
      for (int c = 0; c < dz; ++c) {
        double m = 0.0;
        for (int r = 0; r < latent.rows; ++r) m += latent(r, c);
        step_means[4 + step](row, c) = m / latent.rows;
      }
    }
    spk_labels.push_back(s.speaker_id);
    emo_labels.push_back(s.emotion_id);
    ++row;
  }

  FlowProbeTable table;
  for (int step = 0; step < 8; ++step) {
    FlowProbeRow r;
    r.flow_step = step + 1;
    r.reverse = step >= 4;
    r.lk_cka_speaker = lk_cka(step_means[step], spk_labels);
    r.lk_cka_emotion = lk_cka(step_means[step], emo_labels);
    table.rows.push_back(r);
  }
  return table;
}

Matrix pca_2d(const Matrix& x) {
  if (x.rows < 2) throw DegenerateInputError("pca_2d: need at least 2 samples");
  Matrix xc = center_columns(x);
  Matrix cov = scale(matmul(transpose(xc), xc), 1.0 / (x.rows - 1));
  EigenResult eig = eigen_symmetric(cov);
  int d = x.cols;
  Matrix v2(d, 2);
  for (int comp = 0; comp < 2; ++comp) {
    int pick = std::min(comp, d - 1);
    // deterministic sign: largest-magnitude loading is positive
    int arg = 0;
    for (int i = 1; i < d; ++i)
      if (std::fabs(eig.vectors(i, pick)) > std::fabs(eig.vectors(arg, pick))) arg = i;
    double sign = eig.vectors(arg, pick) >= 0.0 ? 1.0 : -1.0;
    for (int i = 0; i < d; ++i) v2(i, comp) = sign * eig.vectors(i, pick);
  }
  return matmul(xc, v2);
}

void write_report_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << "metric,config,value,seed\n";
  for (const auto& r : rows)
    os << r.metric << "," << r.config << "," << format_value(r.value) << "," << r.seed
       << "\n";
  if (!os) throw IoError("write failed: " + path);
}

void write_report_json(const std::string& path, const std::vector<MetricRow>& rows,
                       const std::map<std::string, std::string>& meta) {
  nlohmann::json j;
  j["meta"] = meta;
  j["metrics"] = nlohmann::json::array();
  for (const auto& r : rows)
    j["metrics"].push_back(
        {{"metric", r.metric}, {"config", r.config}, {"value", r.value}, {"seed", r.seed}});
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << j.dump(2) << "\n";
  if (!os) throw IoError("write failed: " + path);
}

void write_flow_probe_csv(const std::string& path, const FlowProbeTable& table) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << "flow_step,reverse,lk_cka_speaker,lk_cka_emotion\n";
  for (const auto& r : table.rows)
    os << r.flow_step << "," << (r.reverse ? "true" : "false") << ","
       << format_value(r.lk_cka_speaker) << "," << format_value(r.lk_cka_emotion) << "\n";
  if (!os) throw IoError("write failed: " + path);
}

EmbeddingTable collect_embeddings(const ModelState& state, const Dataset& dataset,
                                  const std::vector<int>& sample_ids) {
  EmbeddingTable t;
  int n = static_cast<int>(sample_ids.size());
  t.g = Matrix(n, state.dims.embed_dim);
  t.e = Matrix(n, state.dims.embed_dim);
  for (int i = 0; i < n; ++i) {
    const FactorSample& s = dataset.samples[sample_ids[i]];
    SampleEmbeddings emb = encode_sample_embeddings(state, s.features);
    for (int c = 0; c < state.dims.embed_dim; ++c) {
      t.g(i, c) = emb.g[c];
      t.e(i, c) = emb.e[c];
    }
    t.speaker_labels.push_back(s.speaker_id);
    t.emotion_labels.push_back(s.emotion_id);
  }
  return t;
}

namespace {

bool probe_feasible(const std::vector<int>& labels) {
  std::map<int, int> counts;
  for (int l : labels) counts[l] += 1;
  if (counts.size() < 2) return false;
  for (const auto& [label, n] : counts)
    if (n < 4) return false;
  return true;
}

}  // namespace

EvalSummary evaluate_model(const ModelState& state, const Dataset& dataset,
                           const FactorReadout& readout, uint64_t seed) {
  EvalSummary out;
  EmbeddingTable table = collect_embeddings(state, dataset, dataset.train_ids);
  out.cka_g_e = linear_cka(table.g, table.e);
  out.lk_cka_speaker = lk_cka(table.g, table.speaker_labels);
  out.lk_cka_emotion = lk_cka(table.e, table.emotion_labels);
  Rng probe_rng(derive_seed(seed, hash_string("probe")));
  // probes need >= 4 samples per class for the 5-fold split; degenerate
  // datasets report 0 here rather than failing the whole evaluation
  if (probe_feasible(table.speaker_labels))
    out.probe_speaker_on_e = probe_accuracy(table.e, table.speaker_labels, probe_rng);
  if (probe_feasible(table.emotion_labels))
    out.probe_emotion_on_g = probe_accuracy(table.g, table.emotion_labels, probe_rng);

  PrototypeSet spk_protos = centroid_prototypes(table.g, table.speaker_labels);
  PrototypeSet emo_protos = centroid_prototypes(table.e, table.emotion_labels);

  const auto& targets = dataset.spec.neutral_only_speakers;
  double secs_sum = 0.0, eecs_sum = 0.0, recon_sum = 0.0;
  int transfer_ok = 0, emotion_ok = 0, n_conv = 0, n_recon = 0;

  for (int id : dataset.heldout_ids) {
    const FactorSample& src = dataset.samples[id];

    // held-out reconstruction with the sample's own references
    SampleEmbeddings own = encode_sample_embeddings(state, src.features);
    Rng rec_rng(derive_seed(seed, hash_string("recon"), id));
    PosteriorSample ps = posterior_encode(state, src.features, own.g, own.e, rec_rng, 0.0);
    recon_sum += reconstruction_loss(decode(state, ps.z, own.g, own.e), src.features);
    ++n_recon;

    // cross-speaker conversion to another neutral-only target
    int tgt_speaker = -1;
    for (int cand : targets)
      if (cand != src.speaker_id) {
        tgt_speaker = cand;
        break;
      }
    if (tgt_speaker < 0 || spk_protos.centroids.find(tgt_speaker) == spk_protos.centroids.end())
      continue;
    auto emo_it = emo_protos.centroids.find(src.emotion_id);
    if (emo_it == emo_protos.centroids.end()) continue;

    // centroids of unit embeddings are shorter than the embeddings
    // themselves; conditioning expects unit norm, so rescale the prototypes
    std::vector<double> g_tgt = l2_normalize(spk_protos.centroids.at(tgt_speaker));
    std::vector<double> e_tgt = l2_normalize(emo_it->second);
    Rng conv_rng(derive_seed(seed, hash_string("convert"), id));
    Matrix converted =
        voice_convert(state, src.features, own.g, own.e, g_tgt, e_tgt, conv_rng, 0.0);

    std::vector<double> spk_readout = readout_speaker_factor(readout, converted);
    double to_target = cosine_similarity(spk_readout, dataset.speaker_factors[tgt_speaker]);
    double to_source = cosine_similarity(spk_readout, dataset.speaker_factors[src.speaker_id]);
    secs_sum += to_target;
    if (to_target > to_source) ++transfer_ok;

    std::vector<double> emo_readout = readout_emotion_params(readout, converted);
    double best_sim = -2.0;
    int best_emo = -1;
    for (size_t k = 0; k < dataset.emotion_table.size(); ++k) {
      double sim = emotion_param_similarity(readout, emo_readout, dataset.emotion_table[k]);
      if (sim > best_sim) {
        best_sim = sim;
        best_emo = static_cast<int>(k);
      }
    }
    eecs_sum +=
        emotion_param_similarity(readout, emo_readout, dataset.emotion_table[src.emotion_id]);
    if (best_emo == src.emotion_id) ++emotion_ok;
    ++n_conv;
  }

  if (n_recon > 0) out.recon_heldout = recon_sum / n_recon;
  if (n_conv > 0) {
    out.secs = secs_sum / n_conv;
    out.eecs = eecs_sum / n_conv;
    out.speaker_transfer_rate = static_cast<double>(transfer_ok) / n_conv;
    out.emotion_match_rate = static_cast<double>(emotion_ok) / n_conv;
  }
  out.n_conversions = n_conv;
  return out;
}

std::vector<MetricRow> summary_rows(const EvalSummary& s, const std::string& config,
                                    uint64_t seed) {
  return {
      {"cka_g_e", config, s.cka_g_e, seed},
      {"lk_cka_speaker", config, s.lk_cka_speaker, seed},
      {"lk_cka_emotion", config, s.lk_cka_emotion, seed},
      {"probe_speaker_on_e", config, s.probe_speaker_on_e, seed},
      {"probe_emotion_on_g", config, s.probe_emotion_on_g, seed},
      {"secs", config, s.secs, seed},
      {"eecs", config, s.eecs, seed},
      {"speaker_transfer_rate", config, s.speaker_transfer_rate, seed},
      {"emotion_match_rate", config, s.emotion_match_rate, seed},
      {"recon_heldout", config, s.recon_heldout, seed},
  };
}

}  // namespace dkit
