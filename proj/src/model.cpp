#include "dkit/model.hpp"

#include <cmath>

namespace dkit {

namespace {

// Shared traversal so parameters(), flatten and the tape binder all agree on
// one stable order.
template <typename StateT, typename F>
void visit_params(StateT& s, F&& f) {
  auto ref_enc = [&](const char* prefix, auto& enc) {
    for (size_t i = 0; i < enc.conv_layers.size(); ++i) {
      std::string base = std::string(prefix) + ".conv" + std::to_string(i);
      f(base + ".w", enc.conv_layers[i].w);
      f(base + ".b", enc.conv_layers[i].b);
    }
    std::string p(prefix);
    f(p + ".gru.w_r", enc.w_r);
    f(p + ".gru.w_u", enc.w_u);
    f(p + ".gru.w_n", enc.w_n);
    f(p + ".gru.u_r", enc.u_r);
    f(p + ".gru.u_u", enc.u_u);
    f(p + ".gru.u_n", enc.u_n);
    f(p + ".gru.b_r", enc.b_r);
    f(p + ".gru.b_u", enc.b_u);
    f(p + ".gru.b_n", enc.b_n);
    f(p + ".proj", enc.output_projection);
  };
  auto linproc = [&](const char* prefix, auto& lp) {
    std::string p(prefix);
    f(p + ".w1", lp.w1);
    f(p + ".b1", lp.b1);
    f(p + ".w2", lp.w2);
    f(p + ".b2", lp.b2);
    f(p + ".w3", lp.w3);
    f(p + ".b3", lp.b3);
  };

  ref_enc("speaker_encoder", s.speaker_encoder);
  ref_enc("emotion_encoder", s.emotion_encoder);
  linproc("phi_linear_g", s.phi_linear_g);
  linproc("phi_linear_e", s.phi_linear_e);
  linproc("phi_conv_g", s.phi_conv_g);
  linproc("phi_conv_e", s.phi_conv_e);
  f("posterior.w1", s.posterior.w1);
  f("posterior.b1", s.posterior.b1);
  f("posterior.w2", s.posterior.w2);
  f("posterior.b2", s.posterior.b2);
  for (size_t k = 0; k < s.flow.size(); ++k) {
    std::string base = "flow" + std::to_string(k);
    f(base + ".w1", s.flow[k].w1);
    f(base + ".b1", s.flow[k].b1);
    f(base + ".ws", s.flow[k].ws);
    f(base + ".bs", s.flow[k].bs);
    f(base + ".wt", s.flow[k].wt);
    f(base + ".bt", s.flow[k].bt);
  }
  f("decoder.w1", s.decoder.w1);
  f("decoder.b1", s.decoder.b1);
  f("decoder.w2", s.decoder.w2);
  f("decoder.b2", s.decoder.b2);
  f("prior.embed", s.prior.embed);
  f("prior.w1", s.prior.w1);
  f("prior.b1", s.prior.b1);
  f("prior.w2", s.prior.w2);
  f("prior.b2", s.prior.b2);
  f("heads.spk_on_g.w", s.heads.spk_on_g_w);
  f("heads.spk_on_g.b", s.heads.spk_on_g_b);
  f("heads.emo_on_e.w", s.heads.emo_on_e_w);
  f("heads.emo_on_e.b", s.heads.emo_on_e_b);
  f("heads.emo_on_g.w", s.heads.emo_on_g_w);
  f("heads.emo_on_g.b", s.heads.emo_on_g_b);
  f("heads.spk_on_e.w", s.heads.spk_on_e_w);
  f("heads.spk_on_e.b", s.heads.spk_on_e_b);
  f("heads.spk_on_zp.w", s.heads.spk_on_zp_w);
  f("heads.spk_on_zp.b", s.heads.spk_on_zp_b);
  f("heads.emo_on_zp.w", s.heads.emo_on_zp_w);
  f("heads.emo_on_zp.b", s.heads.emo_on_zp_b);
}

Matrix fan_in_init(int rows, int cols, int fan_in, Rng& rng) {
  Matrix m(rows, cols);
  double k = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : m.data) v = rng.uniform(-k, k);
  return m;
}

// Plain primitives; loop orders mirror the tape ops so plain and tape
// evaluations agree bit for bit.
Matrix affine_plain(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix out = matmul(x, transpose(w));
  for (int r = 0; r < out.rows; ++r)
    for (int c = 0; c < out.cols; ++c) out(r, c) += b(0, c);
  return out;
}

Matrix relu_plain(Matrix x) {
  for (double& v : x.data) v = v > 0.0 ? v : 0.0;
  return x;
}

Matrix tanh_plain(Matrix x) {
  for (double& v : x.data) v = std::tanh(v);
  return x;
}

Matrix sigmoid_plain(Matrix x) {
  for (double& v : x.data) v = 1.0 / (1.0 + std::exp(-v));
  return x;
}

Matrix conv1d_plain(const Matrix& x, const Matrix& w, const Matrix& b, int kernel,
                    int stride, int pad) {
  int cin = x.cols;
  int cout = w.rows;
  int tout = (x.rows + 2 * pad - kernel) / stride + 1;
  if (tout < 1) throw EmptyInputError("conv1d: output length < 1");
  Matrix out(tout, cout);
  for (int to = 0; to < tout; ++to) {
    int t0 = to * stride - pad;
    for (int co = 0; co < cout; ++co) {
      double s = b(0, co);
      for (int k = 0; k < kernel; ++k) {
        int ti = t0 + k;
        if (ti < 0 || ti >= x.rows) continue;
        const double* wv = &w.data[static_cast<size_t>(co) * w.cols + k * cin];
        const double* xv = &x.data[static_cast<size_t>(ti) * cin];
        for (int ci = 0; ci < cin; ++ci) s += wv[ci] * xv[ci];
      }
      out(to, co) = s;
    }
  }
  return out;
}

Matrix concat_cols_plain(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows, a.cols + b.cols);
  for (int r = 0; r < a.rows; ++r) {
    for (int c = 0; c < a.cols; ++c) out(r, c) = a(r, c);
    for (int c = 0; c < b.cols; ++c) out(r, a.cols + c) = b(r, c);
  }
  return out;
}

Matrix repeat_row_plain(const std::vector<double>& v, int n) {
  Matrix out(n, static_cast<int>(v.size()));
  for (int r = 0; r < n; ++r)
    for (size_t c = 0; c < v.size(); ++c) out(r, static_cast<int>(c)) = v[c];
  return out;
}

// Clamped scale and shift of one coupling block, computed from the kept half.
void coupling_st(const CouplingBlockParams& blk, const Matrix& keep,
                 const std::vector<double>& g, const std::vector<double>& e, Matrix* s,
                 Matrix* t) {
  Matrix cond = concat_cols_plain(concat_cols_plain(keep, repeat_row_plain(g, keep.rows)),
                                  repeat_row_plain(e, keep.rows));
  Matrix h = relu_plain(affine_plain(cond, blk.w1, blk.b1));
  Matrix s_pre = affine_plain(h, blk.ws, blk.bs);
  *s = scale(tanh_plain(scale(s_pre, 0.2)), 5.0);
  *t = affine_plain(h, blk.wt, blk.bt);
}

struct HalfView {
  Matrix first;
  Matrix second;
};

HalfView split_halves(const Matrix& z) {
  int half = z.cols / 2;
  HalfView v;
  v.first = Matrix(z.rows, half);
  v.second = Matrix(z.rows, z.cols - half);
  for (int r = 0; r < z.rows; ++r) {
    for (int c = 0; c < half; ++c) v.first(r, c) = z(r, c);
    for (int c = half; c < z.cols; ++c) v.second(r, c - half) = z(r, c);
  }
  return v;
}

Matrix coupling_forward_block(const ModelState& state, int k, const Matrix& z,
                              const std::vector<double>& g, const std::vector<double>& e,
                              double* logdet) {
  HalfView h = split_halves(z);
  bool even = (k % 2 == 0);
  const Matrix& keep = even ? h.first : h.second;
  const Matrix& change = even ? h.second : h.first;
  Matrix s, t;
  coupling_st(state.flow[k], keep, g, e, &s, &t);
  Matrix changed(change.rows, change.cols);
  for (int r = 0; r < change.rows; ++r)
    for (int c = 0; c < change.cols; ++c) {
      changed(r, c) = change(r, c) * std::exp(s(r, c)) + t(r, c);
      *logdet += s(r, c);
    }
  return even ? concat_cols_plain(keep, changed) : concat_cols_plain(changed, keep);
}

Matrix coupling_inverse_block(const ModelState& state, int k, const Matrix& z,
                              const std::vector<double>& g, const std::vector<double>& e,
                              double* logdet = nullptr) {
  HalfView h = split_halves(z);
  bool even = (k % 2 == 0);
  const Matrix& keep = even ? h.first : h.second;
  const Matrix& changed = even ? h.second : h.first;
  Matrix s, t;
  coupling_st(state.flow[k], keep, g, e, &s, &t);
  Matrix restored(changed.rows, changed.cols);
  for (int r = 0; r < changed.rows; ++r)
    for (int c = 0; c < changed.cols; ++c) {
      restored(r, c) = (changed(r, c) - t(r, c)) * std::exp(-s(r, c));
      if (logdet) *logdet -= s(r, c);
    }
  return even ? concat_cols_plain(keep, restored) : concat_cols_plain(restored, keep);
}

}  // namespace

std::vector<std::pair<std::string, Matrix*>> ModelState::parameters() {
  std::vector<std::pair<std::string, Matrix*>> out;
  visit_params(*this, [&](const std::string& n, Matrix& m) { out.emplace_back(n, &m); });
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> ModelState::parameters() const {
  std::vector<std::pair<std::string, const Matrix*>> out;
  visit_params(*this, [&](const std::string& n, const Matrix& m) { out.emplace_back(n, &m); });
  return out;
}

ModelState init_model(const ModelDims& dims, uint64_t seed) {
  if (dims.latent_dim % 2 != 0) throw InvalidSpecError("init_model: latent_dim must be even");
  Rng rng(derive_seed(seed, hash_string("model-init")));
  ModelState s;
  s.dims = dims;

  auto make_ref = [&](int input_dim) {
    RefEncoderParams p;
    int cin = input_dim;
    for (int i = 0; i < 6; ++i) {
      RefEncoderParams::ConvLayer layer;
      layer.w = fan_in_init(dims.ref_channels, 3 * cin, 3 * cin, rng);
      layer.b = Matrix(1, dims.ref_channels);
      p.conv_layers.push_back(std::move(layer));
      cin = dims.ref_channels;
    }
    int h = dims.hidden, c = dims.ref_channels;
    p.w_r = fan_in_init(h, c, c, rng);
    p.w_u = fan_in_init(h, c, c, rng);
    p.w_n = fan_in_init(h, c, c, rng);
    p.u_r = fan_in_init(h, h, h, rng);
    p.u_u = fan_in_init(h, h, h, rng);
    p.u_n = fan_in_init(h, h, h, rng);
    p.b_r = Matrix(1, h);
    p.b_u = Matrix(1, h);
    p.b_n = Matrix(1, h);
    p.output_projection = fan_in_init(dims.embed_dim, h, h, rng);
    return p;
  };
  s.speaker_encoder = make_ref(dims.feature_dim);
  s.emotion_encoder = make_ref(dims.emotion_input_dim);

  auto make_linproc = [&] {
    LinearProcessorParams p;
    p.w1 = fan_in_init(dims.hidden, dims.embed_dim, dims.embed_dim, rng);
    p.b1 = Matrix(1, dims.hidden);
    p.w2 = fan_in_init(dims.hidden, dims.hidden, dims.hidden, rng);
    p.b2 = Matrix(1, dims.hidden);
    p.w3 = fan_in_init(dims.embed_dim, dims.hidden, dims.hidden, rng);
    p.b3 = Matrix(1, dims.embed_dim);
    return p;
  };
  s.phi_linear_g = make_linproc();
  s.phi_linear_e = make_linproc();

  auto make_convproc = [&] {
    ConvProcessorParams p;
    p.w1 = fan_in_init(dims.hidden, 3 * dims.latent_dim, 3 * dims.latent_dim, rng);
    p.b1 = Matrix(1, dims.hidden);
    p.w2 = fan_in_init(dims.hidden, 3 * dims.hidden, 3 * dims.hidden, rng);
    p.b2 = Matrix(1, dims.hidden);
    p.w3 = fan_in_init(dims.embed_dim, 3 * dims.hidden, 3 * dims.hidden, rng);
    p.b3 = Matrix(1, dims.embed_dim);
    return p;
  };
  s.phi_conv_g = make_convproc();
  s.phi_conv_e = make_convproc();

  int post_in = dims.feature_dim + 2 * dims.embed_dim;
  s.posterior.w1 = fan_in_init(dims.hidden, post_in, post_in, rng);
  s.posterior.b1 = Matrix(1, dims.hidden);
  s.posterior.w2 = fan_in_init(2 * dims.latent_dim, dims.hidden, dims.hidden, rng);
  s.posterior.b2 = Matrix(1, 2 * dims.latent_dim);

  int half = dims.latent_dim / 2;
  int cond_in = half + 2 * dims.embed_dim;
  for (int k = 0; k < 4; ++k) {
    CouplingBlockParams blk;
    blk.w1 = fan_in_init(dims.hidden, cond_in, cond_in, rng);
    blk.b1 = Matrix(1, dims.hidden);
    // scale/shift heads start at zero so the flow is the identity at init
    blk.ws = Matrix(half, dims.hidden);
    blk.bs = Matrix(1, half);
    blk.wt = Matrix(half, dims.hidden);
    blk.bt = Matrix(1, half);
    s.flow.push_back(std::move(blk));
  }

  int dec_in = dims.latent_dim + 2 * dims.embed_dim;
  s.decoder.w1 = fan_in_init(dims.hidden, dec_in, dec_in, rng);
  s.decoder.b1 = Matrix(1, dims.hidden);
  s.decoder.w2 = fan_in_init(dims.feature_dim, dims.hidden, dims.hidden, rng);
  s.decoder.b2 = Matrix(1, dims.feature_dim);

  s.prior.embed = fan_in_init(dims.content_vocab, dims.content_embed_dim,
                              dims.content_embed_dim, rng);
  s.prior.w1 = fan_in_init(dims.hidden, dims.content_embed_dim, dims.content_embed_dim, rng);
  s.prior.b1 = Matrix(1, dims.hidden);
  s.prior.w2 = fan_in_init(2 * dims.latent_dim, dims.hidden, dims.hidden, rng);
  s.prior.b2 = Matrix(1, 2 * dims.latent_dim);

  auto head = [&](int n, int in, Matrix* w, Matrix* b) {
    *w = fan_in_init(n, in, in, rng);
    *b = Matrix(1, n);
  };
  head(dims.n_speakers, dims.embed_dim, &s.heads.spk_on_g_w, &s.heads.spk_on_g_b);
  head(dims.n_emotions, dims.embed_dim, &s.heads.emo_on_e_w, &s.heads.emo_on_e_b);
  head(dims.n_emotions, dims.embed_dim, &s.heads.emo_on_g_w, &s.heads.emo_on_g_b);
  head(dims.n_speakers, dims.embed_dim, &s.heads.spk_on_e_w, &s.heads.spk_on_e_b);
  head(dims.n_speakers, dims.latent_dim, &s.heads.spk_on_zp_w, &s.heads.spk_on_zp_b);
  head(dims.n_emotions, dims.latent_dim, &s.heads.emo_on_zp_w, &s.heads.emo_on_zp_b);
  return s;
}

void randomize_parameters(ModelState& state, Rng& rng, double scale) {
  visit_params(state, [&](const std::string&, Matrix& m) {
    for (double& v : m.data) v = scale * rng.gaussian();
  });
}

std::vector<double> flatten_parameters(const ModelState& state) {
  std::vector<double> out;
  visit_params(state, [&](const std::string&, const Matrix& m) {
    out.insert(out.end(), m.data.begin(), m.data.end());
  });
  return out;
}

void unflatten_parameters(ModelState& state, const std::vector<double>& flat) {
  size_t pos = 0;
  visit_params(state, [&](const std::string&, Matrix& m) {
    if (pos + m.data.size() > flat.size())
      throw ShapeMismatchError("unflatten_parameters: flat vector too short");
    std::copy(flat.begin() + pos, flat.begin() + pos + m.data.size(), m.data.begin());
    pos += m.data.size();
  });
  if (pos != flat.size())
    throw ShapeMismatchError("unflatten_parameters: flat vector length mismatch");
}

// ---------------------------------------------------------------------------
// Plain operations
// ---------------------------------------------------------------------------

Matrix slice_reference(const Matrix& features, Rng& rng) {
  if (features.rows == 0) throw EmptyInputError("slice_reference: empty input");
  int t = features.rows;
  int t_min = (t + 1) / 2;
  int len = rng.uniform_int(t_min, t);
  int start = rng.uniform_int(0, t - len);
  Matrix out(len, features.cols);
  for (int r = 0; r < len; ++r)
    for (int c = 0; c < features.cols; ++c) out(r, c) = features(start + r, c);
  return out;
}

Matrix transform_reference(const Matrix& features, RefTransform mode, Rng& rng) {
  if (mode == RefTransform::kNone) return features;
  int d = features.cols;
  int low = (d + 3) / 4;  // ceil(D/4): the prosody-dominant band
  Matrix work = features;
  if (mode == RefTransform::kTimbrePerturb || mode == RefTransform::kBoth) {
    double f = rng.uniform(0.8, 1.25);
    for (int r = 0; r < work.rows; ++r)
      for (int c = low; c < d; ++c) work(r, c) *= f;
  }
  if (mode == RefTransform::kBandLimit || mode == RefTransform::kBoth) {
    Matrix out(work.rows, low);
    for (int r = 0; r < work.rows; ++r)
      for (int c = 0; c < low; ++c) out(r, c) = work(r, c);
    return out;
  }
  return work;
}

RefTransform parse_ref_transform(const std::string& name) {
  if (name == "none") return RefTransform::kNone;
  if (name == "band_limit") return RefTransform::kBandLimit;
  if (name == "timbre_perturb") return RefTransform::kTimbrePerturb;
  if (name == "both") return RefTransform::kBoth;
  throw ConfigError("unknown reference_transform: " + name);
}

std::string ref_transform_name(RefTransform mode) {
  switch (mode) {
    case RefTransform::kNone: return "none";
    case RefTransform::kBandLimit: return "band_limit";
    case RefTransform::kTimbrePerturb: return "timbre_perturb";
    case RefTransform::kBoth: return "both";
  }
  return "none";
}

std::vector<double> reference_encode(const RefEncoderParams& params, const Matrix& slice) {
  if (slice.rows == 0) throw EmptyInputError("reference_encode: empty slice");
  Matrix x = slice;
  for (const auto& layer : params.conv_layers)
    x = relu_plain(conv1d_plain(x, layer.w, layer.b, 3, 2, 1));

  int h_dim = params.u_r.rows;
  Matrix h(1, h_dim);
  for (int step = 0; step < x.rows; ++step) {
    Matrix xt(1, x.cols);
    for (int c = 0; c < x.cols; ++c) xt(0, c) = x(step, c);
    Matrix r = sigmoid_plain(
        add(affine_plain(xt, params.w_r, params.b_r), matmul(h, transpose(params.u_r))));
    Matrix u = sigmoid_plain(
        add(affine_plain(xt, params.w_u, params.b_u), matmul(h, transpose(params.u_u))));
    Matrix n = tanh_plain(add(affine_plain(xt, params.w_n, params.b_n),
                              hadamard(r, matmul(h, transpose(params.u_n)))));
    Matrix keep = hadamard(u, h);
    Matrix fresh(1, h_dim);
    for (int c = 0; c < h_dim; ++c) fresh(0, c) = (1.0 - u(0, c)) * n(0, c);
    h = add(fresh, keep);
  }
  Matrix emb = matmul(h, transpose(params.output_projection));
  // embeddings are unit-norm everywhere: the losses are scale-invariant
  // anyway, and a norm side-channel would leak nuisance information into
  // the conditioning
  double n2 = 0.0;
  for (double v : emb.data) n2 += v * v;
  double n = std::max(std::sqrt(n2), 1e-12);
  for (double& v : emb.data) v /= n;
  return emb.data;
}

std::vector<double> encode_speaker_reference(const ModelState& state, const Matrix& features) {
  return reference_encode(state.speaker_encoder, features);
}

std::vector<double> encode_emotion_reference(const ModelState& state, const Matrix& features) {
  if (state.dims.emotion_input_dim != state.dims.feature_dim &&
      features.cols == state.dims.feature_dim) {
    Rng unused(0);
    return reference_encode(state.emotion_encoder,
                            transform_reference(features, RefTransform::kBandLimit, unused));
  }
  return reference_encode(state.emotion_encoder, features);
}

SampleEmbeddings encode_sample_embeddings(const ModelState& state, const Matrix& features) {
  SampleEmbeddings out;
  out.g = encode_speaker_reference(state, features);
  out.e = encode_emotion_reference(state, features);
  return out;
}

PosteriorSample posterior_encode(const ModelState& state, const Matrix& features,
                                 const std::vector<double>& g, const std::vector<double>& e,
                                 Rng& rng, double noise_scale) {
  if (features.rows == 0) throw EmptyInputError("posterior_encode: empty features");
  int t = features.rows;
  Matrix x = concat_cols_plain(concat_cols_plain(features, repeat_row_plain(g, t)),
                               repeat_row_plain(e, t));
  Matrix h = relu_plain(affine_plain(x, state.posterior.w1, state.posterior.b1));
  Matrix out = affine_plain(h, state.posterior.w2, state.posterior.b2);
  int dz = state.dims.latent_dim;
  PosteriorSample ps;
  ps.mean = Matrix(t, dz);
  ps.logstd = Matrix(t, dz);
  ps.z = Matrix(t, dz);
  for (int r = 0; r < t; ++r) {
    for (int c = 0; c < dz; ++c) {
      ps.mean(r, c) = out(r, c);
      ps.logstd(r, c) = out(r, dz + c);
      double eps = rng.gaussian();
      ps.z(r, c) = ps.mean(r, c) + noise_scale * std::exp(ps.logstd(r, c)) * eps;
    }
  }
  return ps;
}

FlowResult flow_forward(const ModelState& state, const Matrix& z,
                        const std::vector<double>& g, const std::vector<double>& e) {
  FlowResult res;
  res.z_out = z;
  for (size_t k = 0; k < state.flow.size(); ++k)
    res.z_out = coupling_forward_block(state, static_cast<int>(k), res.z_out, g, e,
                                       &res.logdet);
  if (!res.z_out.all_finite() || !std::isfinite(res.logdet))
    throw NonFiniteError("flow_forward: non-finite output");
  return res;
}

Matrix flow_inverse(const ModelState& state, const Matrix& z_p,
                    const std::vector<double>& g, const std::vector<double>& e) {
  Matrix z = z_p;
  for (int k = static_cast<int>(state.flow.size()) - 1; k >= 0; --k)
    z = coupling_inverse_block(state, k, z, g, e);
  if (!z.all_finite()) throw NonFiniteError("flow_inverse: non-finite output");
  return z;
}

FlowResult flow_inverse_with_logdet(const ModelState& state, const Matrix& z_p,
                                    const std::vector<double>& g,
                                    const std::vector<double>& e) {
  FlowResult res;
  res.z_out = z_p;
  for (int k = static_cast<int>(state.flow.size()) - 1; k >= 0; --k)
    res.z_out = coupling_inverse_block(state, k, res.z_out, g, e, &res.logdet);
  if (!res.z_out.all_finite()) throw NonFiniteError("flow_inverse: non-finite output");
  return res;
}

FlowTrace flow_trace(const ModelState& state, const Matrix& z,
                     const std::vector<double>& g, const std::vector<double>& e) {
  FlowTrace trace;
  Matrix cur = z;
  for (size_t k = 0; k < state.flow.size(); ++k) {
    cur = coupling_forward_block(state, static_cast<int>(k), cur, g, e, &trace.logdet);
    trace.forward_steps.push_back(cur);
  }
  for (int k = static_cast<int>(state.flow.size()) - 1; k >= 0; --k) {
    cur = coupling_inverse_block(state, k, cur, g, e);
    trace.inverse_steps.push_back(cur);
  }
  return trace;
}

Matrix decode(const ModelState& state, const Matrix& z, const std::vector<double>& g,
              const std::vector<double>& e) {
  int t = z.rows;
  Matrix x = concat_cols_plain(concat_cols_plain(z, repeat_row_plain(g, t)),
                               repeat_row_plain(e, t));
  Matrix h = relu_plain(affine_plain(x, state.decoder.w1, state.decoder.b1));
  return affine_plain(h, state.decoder.w2, state.decoder.b2);
}

Matrix voice_convert(const ModelState& state, const Matrix& source_features,
                     const std::vector<double>& g_src, const std::vector<double>& e_src,
                     const std::vector<double>& g_tgt, const std::vector<double>& e_tgt,
                     Rng& rng, double noise_scale) {
  PosteriorSample ps = posterior_encode(state, source_features, g_src, e_src, rng, noise_scale);
  FlowResult fwd = flow_forward(state, ps.z, g_src, e_src);
  Matrix z_hat = flow_inverse(state, fwd.z_out, g_tgt, e_tgt);
  return decode(state, z_hat, g_tgt, e_tgt);
}

// ---------------------------------------------------------------------------
// Tape graphs
// ---------------------------------------------------------------------------

int BoundModel::id(const Matrix& m) const {
  auto it = ids.find(&m);
  if (it == ids.end()) throw InvalidSpecError("BoundModel: parameter not bound");
  return it->second;
}

BoundModel bind_model(Tape& t, const ModelState& state, bool trainable) {
  BoundModel b;
  b.state = &state;
  visit_params(state, [&](const std::string&, const Matrix& m) {
    b.ids[&m] = trainable ? t.leaf(m) : t.constant(m);
  });
  return b;
}

int affine_graph(Tape& t, const BoundModel& b, int x, const Matrix& w, const Matrix& bias) {
  return t.add_rowvec(t.matmul(x, t.transpose(b.id(w))), b.id(bias));
}

int ref_encode_graph(Tape& t, const BoundModel& b, const RefEncoderParams& params,
                     int input) {
  if (t.rows(input) == 0) throw EmptyInputError("ref_encode_graph: empty input");
  int x = input;
  for (const auto& layer : params.conv_layers)
    x = t.relu(t.conv1d(x, b.id(layer.w), b.id(layer.b), 3, 2, 1));

  int h_dim = params.u_r.rows;
  int h = t.constant(Matrix(1, h_dim));
  int steps = t.rows(x);
  for (int step = 0; step < steps; ++step) {
    int xt = t.row(x, step);
    int r = t.sigmoid(t.add(affine_graph(t, b, xt, params.w_r, params.b_r),
                            t.matmul(h, t.transpose(b.id(params.u_r)))));
    int u = t.sigmoid(t.add(affine_graph(t, b, xt, params.w_u, params.b_u),
                            t.matmul(h, t.transpose(b.id(params.u_u)))));
    int n = t.tanh_(t.add(affine_graph(t, b, xt, params.w_n, params.b_n),
                          t.hadamard(r, t.matmul(h, t.transpose(b.id(params.u_n))))));
    int ones = t.constant(Matrix(1, h_dim, 1.0));
    int fresh = t.hadamard(t.sub(ones, u), n);
    h = t.add(fresh, t.hadamard(u, h));
  }
  return t.l2_normalize_rows(t.matmul(h, t.transpose(b.id(params.output_projection))));
}

PosteriorGraph posterior_graph(Tape& t, const BoundModel& b, int features, int g, int e,
                               const Matrix& eps, double noise_scale) {
  const ModelState& s = *b.state;
  int rows = t.rows(features);
  int x = t.concat_cols(t.concat_cols(features, t.repeat_row(g, rows)),
                        t.repeat_row(e, rows));
  int h = t.relu(affine_graph(t, b, x, s.posterior.w1, s.posterior.b1));
  int out = affine_graph(t, b, h, s.posterior.w2, s.posterior.b2);
  int dz = s.dims.latent_dim;
  PosteriorGraph pg;
  pg.mean = t.slice_cols(out, 0, dz);
  pg.logstd = t.slice_cols(out, dz, 2 * dz);
  int noise = t.constant(scale(eps, noise_scale));
  pg.z = t.add(pg.mean, t.hadamard(t.exp_(pg.logstd), noise));
  return pg;
}

FlowGraph flow_forward_graph(Tape& t, const BoundModel& b, int z, int g, int e) {
  const ModelState& s = *b.state;
  int dz = s.dims.latent_dim;
  int half = dz / 2;
  int rows = t.rows(z);
  FlowGraph fg;
  int cur = z;
  for (size_t k = 0; k < s.flow.size(); ++k) {
    const CouplingBlockParams& blk = s.flow[k];
    bool even = (k % 2 == 0);
    int first = t.slice_cols(cur, 0, half);
    int second = t.slice_cols(cur, half, dz);
    int keep = even ? first : second;
    int change = even ? second : first;
    int cond = t.concat_cols(t.concat_cols(keep, t.repeat_row(g, rows)),
                             t.repeat_row(e, rows));
    int hidden = t.relu(affine_graph(t, b, cond, blk.w1, blk.b1));
    int s_pre = affine_graph(t, b, hidden, blk.ws, blk.bs);
    int s_clamped = t.scale(t.tanh_(t.scale(s_pre, 0.2)), 5.0);
    int shift = affine_graph(t, b, hidden, blk.wt, blk.bt);
    int changed = t.add(t.hadamard(change, t.exp_(s_clamped)), shift);
    cur = even ? t.concat_cols(keep, changed) : t.concat_cols(changed, keep);
    fg.block_logdets.push_back(t.sum_all(s_clamped));
  }
  fg.z_out = cur;
  fg.logdet = fg.block_logdets[0];
  for (size_t k = 1; k < fg.block_logdets.size(); ++k)
    fg.logdet = t.add(fg.logdet, fg.block_logdets[k]);
  return fg;
}

int decode_graph(Tape& t, const BoundModel& b, int z, int g, int e) {
  const ModelState& s = *b.state;
  int rows = t.rows(z);
  int x = t.concat_cols(t.concat_cols(z, t.repeat_row(g, rows)), t.repeat_row(e, rows));
  int h = t.relu(affine_graph(t, b, x, s.decoder.w1, s.decoder.b1));
  return affine_graph(t, b, h, s.decoder.w2, s.decoder.b2);
}

PriorGraph prior_graph(Tape& t, const BoundModel& b, const std::vector<int>& tokens) {
  const ModelState& s = *b.state;
  int emb = t.embedding_lookup(b.id(s.prior.embed), tokens);
  int h = t.relu(affine_graph(t, b, emb, s.prior.w1, s.prior.b1));
  int out = affine_graph(t, b, h, s.prior.w2, s.prior.b2);
  int dz = s.dims.latent_dim;
  PriorGraph pg;
  pg.mean = t.slice_cols(out, 0, dz);
  pg.logstd = t.slice_cols(out, dz, 2 * dz);
  return pg;
}

int linear_processor_graph(Tape& t, const BoundModel& b, const LinearProcessorParams& p,
                           int x) {
  int h1 = t.relu(affine_graph(t, b, x, p.w1, p.b1));
  int h2 = t.relu(affine_graph(t, b, h1, p.w2, p.b2));
  return affine_graph(t, b, h2, p.w3, p.b3);
}

int conv_processor_graph(Tape& t, const BoundModel& b, const ConvProcessorParams& p,
                         int zp) {
  int h1 = t.relu(t.conv1d(zp, b.id(p.w1), b.id(p.b1), 3, 1, 1));
  int h2 = t.relu(t.conv1d(h1, b.id(p.w2), b.id(p.b2), 3, 1, 1));
  int h3 = t.conv1d(h2, b.id(p.w3), b.id(p.b3), 3, 1, 1);
  return t.mean_rows(h3);
}

}  // namespace dkit
