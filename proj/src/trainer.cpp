#include "dkit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "dkit/tensor_io.hpp"
#include "json.hpp"

namespace dkit {

using nlohmann::json;

EncoderLoss parse_encoder_loss(const std::string& name) {
  if (name == "mpcl") return EncoderLoss::kMpcl;
  if (name == "ce") return EncoderLoss::kCe;
  throw ConfigError("unknown encoder_loss: " + name);
}

GrlMode parse_grl_mode(const std::string& name) {
  if (name == "none") return GrlMode::kNone;
  if (name == "ce") return GrlMode::kCe;
  if (name == "cosine") return GrlMode::kCosine;
  throw ConfigError("unknown grl_mode: " + name);
}

std::string encoder_loss_name(EncoderLoss v) {
  return v == EncoderLoss::kMpcl ? "mpcl" : "ce";
}

std::string grl_mode_name(GrlMode v) {
  switch (v) {
    case GrlMode::kNone: return "none";
    case GrlMode::kCe: return "ce";
    case GrlMode::kCosine: return "cosine";
  }
  return "none";
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

OptimizerState init_optimizer(const ModelState& state) {
  OptimizerState opt;
  for (const auto& [name, m] : state.parameters()) {
    opt.m.emplace_back(m->rows, m->cols);
    opt.v.emplace_back(m->rows, m->cols);
  }
  return opt;
}

void optimizer_step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads,
                    OptimizerState& opt, double lr, const AdamHyper& hyper) {
  if (params.size() != grads.size() || params.size() != opt.m.size())
    throw ShapeMismatchError("optimizer_step: parameter/gradient/moment counts differ");
  opt.step += 1;
  double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(opt.step));
  double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(opt.step));
  for (size_t p = 0; p < params.size(); ++p) {
    Matrix& theta = *params[p];
    const Matrix& g = grads[p];
    if (!theta.same_shape(g) || !theta.same_shape(opt.m[p]))
      throw ShapeMismatchError("optimizer_step: shape mismatch at parameter " +
                               std::to_string(p));
    Matrix& m = opt.m[p];
    Matrix& v = opt.v[p];
    for (int i = 0; i < theta.size(); ++i) {
      double gi = g.data[i];
      m.data[i] = hyper.beta1 * m.data[i] + (1.0 - hyper.beta1) * gi;
      v.data[i] = hyper.beta2 * v.data[i] + (1.0 - hyper.beta2) * gi * gi;
      double m_hat = m.data[i] / bc1;
      double v_hat = v.data[i] / bc2;
      double pre = theta.data[i];
      theta.data[i] = pre - lr * m_hat / (std::sqrt(v_hat) + hyper.eps) -
                      lr * hyper.weight_decay * pre;
    }
  }
}

double lr_at_epoch(const TrainConfig& config, int64_t epoch) {
  if (epoch < 0) throw InvalidSpecError("lr_at_epoch: epoch must be >= 0");
  return config.lr_initial * std::pow(config.lr_decay_per_epoch, static_cast<double>(epoch));
}

// ---------------------------------------------------------------------------
// Step assembly
// ---------------------------------------------------------------------------

StepData assemble_step(const TrainConfig& config, const Dataset& dataset,
                       const std::vector<int>& batch_ids, const ModelState& state,
                       int64_t step, bool stage2) {
  TrainBatch tb = gather_batch(dataset, batch_ids);
  StepData sd;
  if (stage2 && config.aug.proportion > 0.0) {
    uint64_t aug_seed = config.aug.seed != 0 ? config.aug.seed : config.seed;
    Rng perm_rng(derive_seed(aug_seed, hash_string("permute"), step));
    std::vector<int> assignment = permute_speakers(tb, perm_rng);
    Rng gen_rng(derive_seed(aug_seed, hash_string("generate"), step));
    SyntheticBatch synth = generate_synthetic(state, tb, assignment, gen_rng);
    Rng mix_rng(derive_seed(aug_seed, hash_string("mix"), step));
    sd.mixed = mix_batch(tb, synth, config.aug, mix_rng);
  } else {
    sd.mixed = passthrough_batch(tb);
  }

  int b = sd.mixed.size();
  int dz = config.dims.latent_dim;
  for (int i = 0; i < b; ++i) {
    Rng sr(derive_seed(config.seed, hash_string("spk-slice"), step, i));
    sd.speaker_slices.push_back(slice_reference(sd.mixed.speaker_reference_inputs[i], sr));
    Rng er(derive_seed(config.seed, hash_string("emo-slice"), step, i));
    Matrix emo = slice_reference(sd.mixed.emotion_reference_inputs[i], er);
    Rng tr(derive_seed(config.seed, hash_string("emo-transform"), step, i));
    sd.emotion_slices.push_back(transform_reference(emo, config.reference_transform, tr));
    Rng pr(derive_seed(config.seed, hash_string("posterior-eps"), step, i));
    Matrix eps(sd.mixed.ground_truth_targets[i].rows, dz);
    for (double& v : eps.data) v = pr.gaussian();
    sd.posterior_eps.push_back(std::move(eps));
  }
  return sd;
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

namespace {

int mean_of(Tape& t, const std::vector<int>& scalars) {
  int acc = scalars[0];
  for (size_t i = 1; i < scalars.size(); ++i) acc = t.add(acc, scalars[i]);
  return t.scale(acc, 1.0 / static_cast<double>(scalars.size()));
}

// MPCL over within-batch embeddings; anchors without a positive are dropped
// from the anchor set but stay available as candidates.
int batch_mpcl(Tape& t, const std::vector<int>& row_nodes, const std::vector<int>& labels,
               double temperature) {
  int b = static_cast<int>(row_nodes.size());
  std::vector<int> anchor_rows, anchor_labels, exclude;
  for (int i = 0; i < b; ++i) {
    bool has_positive = false;
    for (int j = 0; j < b && !has_positive; ++j)
      if (j != i && labels[j] == labels[i]) has_positive = true;
    if (has_positive) {
      anchor_rows.push_back(row_nodes[i]);
      anchor_labels.push_back(labels[i]);
      exclude.push_back(i);
    }
  }
  if (anchor_rows.empty()) return t.constant(Matrix(1, 1, 0.0));
  int anchors = t.stack_rows(anchor_rows);
  int candidates = t.stack_rows(row_nodes);
  return mpcl_graph(t, anchors, candidates, anchor_labels, labels, temperature, exclude);
}

int maybe_grl(Tape& t, int x, const ObjectiveOptions& opt) {
  return opt.bypass_grl ? x : t.grl(x, opt.grl_lambda);
}

}  // namespace

ObjectiveResult model_objective(const ModelState& state, const StepData& data,
                                const ObjectiveOptions& options, bool want_grads) {
  const MixedBatch& mixed = data.mixed;
  int b = mixed.size();
  if (b == 0) throw EmptyInputError("model_objective: empty batch");

  Tape t;
  BoundModel bm = bind_model(t, state, want_grads);

  std::vector<int> g_nodes, e_nodes, zp_nodes;
  std::vector<int> recon_terms, kl_terms;
  g_nodes.reserve(b);
  e_nodes.reserve(b);

  for (int i = 0; i < b; ++i) {
    int spk_in = t.constant(data.speaker_slices[i]);
    int emo_in = t.constant(data.emotion_slices[i]);
    int g = ref_encode_graph(t, bm, state.speaker_encoder, spk_in);
    int e = ref_encode_graph(t, bm, state.emotion_encoder, emo_in);
    g_nodes.push_back(g);
    e_nodes.push_back(e);

    int target = t.constant(mixed.ground_truth_targets[i]);
    PosteriorGraph post = posterior_graph(t, bm, target, g, e, data.posterior_eps[i], 1.0);
    FlowGraph flow = flow_forward_graph(t, bm, post.z, g, e);
    zp_nodes.push_back(flow.z_out);
    PriorGraph prior = prior_graph(t, bm, mixed.content_tokens[i]);
    int dec = decode_graph(t, bm, post.z, g, e);

    recon_terms.push_back(mse_graph(t, dec, target));
    kl_terms.push_back(
        kl_graph(t, post.z, post.mean, post.logstd, flow.z_out, flow.logdet, prior.mean,
                 prior.logstd));
  }

  int recon = mean_of(t, recon_terms);
  int kl = mean_of(t, kl_terms);

  // encoder losses (MPCL or the CE baseline)
  int enc_speaker, enc_emotion;
  if (options.encoder_loss == EncoderLoss::kMpcl) {
    enc_speaker = batch_mpcl(t, g_nodes, mixed.speaker_labels, options.mpcl_temperature);
    enc_emotion = batch_mpcl(t, e_nodes, mixed.emotion_labels, options.mpcl_temperature);
  } else {
    int g_stack = t.stack_rows(g_nodes);
    int e_stack = t.stack_rows(e_nodes);
    enc_speaker = cross_entropy_graph(
        t, affine_graph(t, bm, g_stack, state.heads.spk_on_g_w, state.heads.spk_on_g_b),
        mixed.speaker_labels);
    enc_emotion = cross_entropy_graph(
        t, affine_graph(t, bm, e_stack, state.heads.emo_on_e_w, state.heads.emo_on_e_b),
        mixed.emotion_labels);
  }

  // disentanglement terms
  int dis_ge = -1, dis_eg = -1, dis_ze = -1, dis_zg = -1;
  double sign = 0.0;  // contribution sign of the reported value in the objective
  if (options.grl_mode == GrlMode::kCosine) {
    // Processors behind the GRL learn to predict the opposing embedding
    // (objective carries -cos so their descent maximizes the cosine), while
    // the reversed gradient pushes the producing side to erase it.
    sign = -1.0;
    std::vector<int> ge_terms, eg_terms, ze_terms, zg_terms;
    for (int i = 0; i < b; ++i) {
      int target_e = options.frozen_e
                         ? t.constant(Matrix::row_vector((*options.frozen_e)[i]))
                         : t.detach(e_nodes[i]);
      int target_g = options.frozen_g
                         ? t.constant(Matrix::row_vector((*options.frozen_g)[i]))
                         : t.detach(g_nodes[i]);
      int pg = linear_processor_graph(t, bm, state.phi_linear_g,
                                      maybe_grl(t, g_nodes[i], options));
      ge_terms.push_back(t.cosine(pg, target_e));
      int pe = linear_processor_graph(t, bm, state.phi_linear_e,
                                      maybe_grl(t, e_nodes[i], options));
      eg_terms.push_back(t.cosine(pe, target_g));
      int zp_g = maybe_grl(t, zp_nodes[i], options);
      int pce = conv_processor_graph(t, bm, state.phi_conv_e, zp_g);
      ze_terms.push_back(t.cosine(pce, target_e));
      int zp_g2 = maybe_grl(t, zp_nodes[i], options);
      int pcg = conv_processor_graph(t, bm, state.phi_conv_g, zp_g2);
      zg_terms.push_back(t.cosine(pcg, target_g));
    }
    dis_ge = mean_of(t, ge_terms);
    dis_eg = mean_of(t, eg_terms);
    dis_ze = mean_of(t, ze_terms);
    dis_zg = mean_of(t, zg_terms);
  } else if (options.grl_mode == GrlMode::kCe) {
    // label classifiers behind the GRL; minimizing their CE sharpens the
    // adversary and the reversed gradient removes the label information
    sign = 1.0;
    int g_stack = maybe_grl(t, t.stack_rows(g_nodes), options);
    int e_stack = maybe_grl(t, t.stack_rows(e_nodes), options);
    dis_ge = cross_entropy_graph(
        t, affine_graph(t, bm, g_stack, state.heads.emo_on_g_w, state.heads.emo_on_g_b),
        mixed.emotion_labels);
    dis_eg = cross_entropy_graph(
        t, affine_graph(t, bm, e_stack, state.heads.spk_on_e_w, state.heads.spk_on_e_b),
        mixed.speaker_labels);
    std::vector<int> pooled;
    for (int i = 0; i < b; ++i) pooled.push_back(t.mean_rows(zp_nodes[i]));
    int zp_stack_e = maybe_grl(t, t.stack_rows(pooled), options);
    int zp_stack_g = maybe_grl(t, t.stack_rows(pooled), options);
    dis_ze = cross_entropy_graph(
        t,
        affine_graph(t, bm, zp_stack_e, state.heads.emo_on_zp_w, state.heads.emo_on_zp_b),
        mixed.emotion_labels);
    dis_zg = cross_entropy_graph(
        t,
        affine_graph(t, bm, zp_stack_g, state.heads.spk_on_zp_w, state.heads.spk_on_zp_b),
        mixed.speaker_labels);
  }

  const LossWeights& w = options.weights;
  int objective = t.add(t.add(t.scale(recon, w.recon), t.scale(kl, w.kl)),
                        t.add(t.scale(enc_emotion, w.mpcl_emotion),
                              t.scale(enc_speaker, w.mpcl_speaker)));
  if (options.grl_mode != GrlMode::kNone) {
    objective = t.add(objective, t.scale(dis_ge, sign * w.cos_emb_ge));
    objective = t.add(objective, t.scale(dis_eg, sign * w.cos_emb_eg));
    objective = t.add(objective, t.scale(dis_ze, sign * w.cos_content_e));
    objective = t.add(objective, t.scale(dis_zg, sign * w.cos_content_g));
  }

  ObjectiveResult result;
  LossTerms parts;
  parts.recon = t.value(recon)(0, 0);
  parts.kl = t.value(kl)(0, 0);
  parts.mpcl_emotion = t.value(enc_emotion)(0, 0);
  parts.mpcl_speaker = t.value(enc_speaker)(0, 0);
  if (options.grl_mode != GrlMode::kNone) {
    parts.cos_emb_ge = t.value(dis_ge)(0, 0);
    parts.cos_emb_eg = t.value(dis_eg)(0, 0);
    parts.cos_content_e = t.value(dis_ze)(0, 0);
    parts.cos_content_g = t.value(dis_zg)(0, 0);
  }
  result.report = total_loss(parts, w);
  result.objective = t.value(objective)(0, 0);

  if (want_grads) {
    t.backward(objective);
    ModelState& mutable_state = const_cast<ModelState&>(state);
    for (auto& [name, param] : mutable_state.parameters()) {
      const Matrix& g = t.grad(bm.id(*param));
      result.grads.push_back(g.size() == 0 ? Matrix(param->rows, param->cols) : g);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

namespace {

json dims_to_json(const ModelDims& d) {
  return json{{"feature_dim", d.feature_dim},
              {"emotion_input_dim", d.emotion_input_dim},
              {"latent_dim", d.latent_dim},
              {"embed_dim", d.embed_dim},
              {"hidden", d.hidden},
              {"ref_channels", d.ref_channels},
              {"content_vocab", d.content_vocab},
              {"content_embed_dim", d.content_embed_dim},
              {"n_speakers", d.n_speakers},
              {"n_emotions", d.n_emotions}};
}

ModelDims dims_from_json(const json& j) {
  ModelDims d;
  d.feature_dim = j.at("feature_dim").get<int>();
  d.emotion_input_dim = j.at("emotion_input_dim").get<int>();
  d.latent_dim = j.at("latent_dim").get<int>();
  d.embed_dim = j.at("embed_dim").get<int>();
  d.hidden = j.at("hidden").get<int>();
  d.ref_channels = j.at("ref_channels").get<int>();
  d.content_vocab = j.at("content_vocab").get<int>();
  d.content_embed_dim = j.at("content_embed_dim").get<int>();
  d.n_speakers = j.at("n_speakers").get<int>();
  d.n_emotions = j.at("n_emotions").get<int>();
  return d;
}

json weights_to_json(const LossWeights& w) {
  return json{{"recon", w.recon},
              {"kl", w.kl},
              {"mpcl_emotion", w.mpcl_emotion},
              {"mpcl_speaker", w.mpcl_speaker},
              {"cos_emb_ge", w.cos_emb_ge},
              {"cos_emb_eg", w.cos_emb_eg},
              {"cos_content_e", w.cos_content_e},
              {"cos_content_g", w.cos_content_g}};
}

LossWeights weights_from_json(const json& j) {
  LossWeights w;
  w.recon = j.at("recon").get<double>();
  w.kl = j.at("kl").get<double>();
  w.mpcl_emotion = j.at("mpcl_emotion").get<double>();
  w.mpcl_speaker = j.at("mpcl_speaker").get<double>();
  w.cos_emb_ge = j.at("cos_emb_ge").get<double>();
  w.cos_emb_eg = j.at("cos_emb_eg").get<double>();
  w.cos_content_e = j.at("cos_content_e").get<double>();
  w.cos_content_g = j.at("cos_content_g").get<double>();
  return w;
}

json train_config_to_json(const TrainConfig& c) {
  return json{{"lr_initial", c.lr_initial},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"weight_decay", c.weight_decay},
              {"lr_decay_per_epoch", c.lr_decay_per_epoch},
              {"batch_size", c.batch_size},
              {"stage1_steps", c.stage1_steps},
              {"stage2_steps", c.stage2_steps},
              {"stage2_lr", c.stage2_lr},
              {"grl_lambda", c.grl_lambda},
              {"mpcl_temperature", c.mpcl_temperature},
              {"grad_clip_norm", c.grad_clip_norm},
              {"adam_eps", c.adam_eps},
              {"loss_weights", weights_to_json(c.loss_weights)},
              {"aug",
               {{"mode", aug_mode_name(c.aug.mode)},
                {"proportion", c.aug.proportion},
                {"seed", c.aug.seed}}},
              {"seed", c.seed},
              {"log_every", c.log_every},
              {"eval_every", c.eval_every},
              {"encoder_loss", encoder_loss_name(c.encoder_loss)},
              {"grl_mode", grl_mode_name(c.grl_mode)},
              {"reference_transform", ref_transform_name(c.reference_transform)},
              {"dims", dims_to_json(c.dims)}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.lr_initial = j.at("lr_initial").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.lr_decay_per_epoch = j.at("lr_decay_per_epoch").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.stage1_steps = j.at("stage1_steps").get<int>();
  c.stage2_steps = j.at("stage2_steps").get<int>();
  c.stage2_lr = j.at("stage2_lr").get<double>();
  c.grl_lambda = j.at("grl_lambda").get<double>();
  c.mpcl_temperature = j.at("mpcl_temperature").get<double>();
  c.grad_clip_norm = j.at("grad_clip_norm").get<double>();
  c.adam_eps = j.at("adam_eps").get<double>();
  c.loss_weights = weights_from_json(j.at("loss_weights"));
  c.aug.mode = parse_aug_mode(j.at("aug").at("mode").get<std::string>());
  c.aug.proportion = j.at("aug").at("proportion").get<double>();
  c.aug.seed = j.at("aug").at("seed").get<uint64_t>();
  c.seed = j.at("seed").get<uint64_t>();
  c.log_every = j.at("log_every").get<int>();
  c.eval_every = j.at("eval_every").get<int>();
  c.encoder_loss = parse_encoder_loss(j.at("encoder_loss").get<std::string>());
  c.grl_mode = parse_grl_mode(j.at("grl_mode").get<std::string>());
  c.reference_transform = parse_ref_transform(j.at("reference_transform").get<std::string>());
  c.dims = dims_from_json(j.at("dims"));
  return c;
}

constexpr uint32_t kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write("DKC1", 4);
  write_u32(os, kCheckpointVersion);

  json meta;
  meta["config"] = train_config_to_json(ckpt.config);
  meta["next_step"] = ckpt.next_step;
  meta["stage"] = ckpt.stage;
  write_bytes(os, meta.dump());

  std::ostringstream params;
  auto plist = ckpt.model.parameters();
  write_u32(params, static_cast<uint32_t>(plist.size()));
  for (const auto& [name, m] : plist) {
    write_bytes(params, name);
    write_dkt8(params, *m);
  }
  write_bytes(os, params.str());

  std::ostringstream opt;
  write_u64(opt, static_cast<uint64_t>(ckpt.opt.step));
  write_u32(opt, static_cast<uint32_t>(ckpt.opt.m.size()));
  for (size_t i = 0; i < ckpt.opt.m.size(); ++i) {
    write_dkt8(opt, ckpt.opt.m[i]);
    write_dkt8(opt, ckpt.opt.v[i]);
  }
  write_bytes(os, opt.str());

  std::ostringstream rng;
  write_u64(rng, ckpt.rng_state);
  write_bytes(os, rng.str());
  if (!os) throw IoError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "DKC1")
    throw FormatError("checkpoint: bad magic (expected DKC1)");
  uint32_t version = read_u32(is);
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: version " + std::to_string(version) +
                      " unsupported (expected " + std::to_string(kCheckpointVersion) + ")");

  Checkpoint ckpt;
  json meta = json::parse(read_bytes(is));
  ckpt.config = train_config_from_json(meta.at("config"));
  ckpt.next_step = meta.at("next_step").get<int64_t>();
  ckpt.stage = meta.at("stage").get<int>();

  ckpt.model = init_model(ckpt.config.dims, ckpt.config.seed);
  {
    std::istringstream params(read_bytes(is));
    uint32_t count = read_u32(params);
    auto plist = ckpt.model.parameters();
    if (count != plist.size())
      throw FormatError("checkpoint: parameter count mismatch");
    for (auto& [name, m] : plist) {
      std::string stored = read_bytes(params);
      if (stored != name)
        throw FormatError("checkpoint: parameter order mismatch at " + name);
      Matrix loaded = read_dkt8(params);
      if (!loaded.same_shape(*m))
        throw FormatError("checkpoint: parameter shape mismatch at " + name);
      *m = std::move(loaded);
    }
  }
  {
    std::istringstream opt(read_bytes(is));
    ckpt.opt.step = static_cast<int64_t>(read_u64(opt));
    uint32_t count = read_u32(opt);
    for (uint32_t i = 0; i < count; ++i) {
      ckpt.opt.m.push_back(read_dkt8(opt));
      ckpt.opt.v.push_back(read_dkt8(opt));
    }
  }
  {
    std::istringstream rng(read_bytes(is));
    ckpt.rng_state = read_u64(rng);
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {

void clip_gradients(std::vector<Matrix>& grads, double max_norm) {
  double norm2 = 0.0;
  for (const Matrix& g : grads)
    for (double v : g.data) norm2 += v * v;
  double norm = std::sqrt(norm2);
  if (norm > max_norm && norm > 0.0) {
    double f = max_norm / norm;
    for (Matrix& g : grads)
      for (double& v : g.data) v *= f;
  }
}

bool grads_finite(const std::vector<Matrix>& grads) {
  for (const Matrix& g : grads)
    if (!g.all_finite()) return false;
  return true;
}

void push_report(std::vector<HistoryEntry>& hist, int64_t step, int stage,
                 const LossReport& r) {
  auto add = [&](const char* name, double v) {
    hist.push_back({step, stage, name, v});
  };
  add("recon", r.recon);
  add("kl", r.kl);
  add("mpcl_emotion", r.mpcl_emotion);
  add("mpcl_speaker", r.mpcl_speaker);
  add("cos_emb_ge", r.cos_emb_ge);
  add("cos_emb_eg", r.cos_emb_eg);
  add("cos_content_e", r.cos_content_e);
  add("cos_content_g", r.cos_content_g);
  add("total", r.total);
}

}  // namespace

TrainResult train(const TrainConfig& config, const Dataset& dataset,
                  const Checkpoint* resume) {
  TrainResult result;
  ModelState state =
      resume ? resume->model : init_model(config.dims, config.seed);
  OptimizerState opt = resume ? resume->opt : init_optimizer(state);

  BatchStream stream(dataset, config.batch_size,
                     derive_seed(config.seed, hash_string("batches")));
  int64_t total_steps = config.stage1_steps + config.stage2_steps;
  int64_t start_step = resume ? resume->next_step : 0;
  if (start_step > 0) stream.seek(start_step);

  FactorReadout readout = fit_factor_readout(dataset);

  ObjectiveOptions opts;
  opts.encoder_loss = config.encoder_loss;
  opts.grl_mode = config.grl_mode;
  opts.grl_lambda = config.grl_lambda;
  opts.mpcl_temperature = config.mpcl_temperature;
  opts.weights = config.loss_weights;

  auto snapshot = [&](int64_t next_step, int stage) {
    Checkpoint c;
    c.model = state;
    c.opt = opt;
    c.config = config;
    c.next_step = next_step;
    c.stage = stage;
    c.rng_state = derive_seed(config.seed, hash_string("master"), next_step);
    return c;
  };

  Checkpoint last_good = snapshot(start_step, start_step < config.stage1_steps ? 1 : 2);
  result.best = last_good;
  double best_total = std::numeric_limits<double>::infinity();

  AdamHyper hyper{config.beta1, config.beta2, config.weight_decay, config.adam_eps};

  for (int64_t step = start_step; step < total_steps; ++step) {
    bool stage2 = step >= config.stage1_steps;
    int stage = stage2 ? 2 : 1;
    if (stage2 && step == config.stage1_steps) {
      // stage transition: moments reset, schedule restarted at the lower rate
      opt = init_optimizer(state);
    }

    Batch batch = stream.next();
    ObjectiveResult obj;
    try {
      StepData sd = assemble_step(config, dataset, batch.ids, state, step, stage2);
      obj = model_objective(state, sd, opts, true);
    } catch (const NonFiniteTermError&) {
      result.last = last_good;
      result.aborted_non_finite = true;
      return result;
    } catch (const NonFiniteError&) {
      result.last = last_good;
      result.aborted_non_finite = true;
      return result;
    }

    if (!std::isfinite(obj.objective) || !std::isfinite(obj.report.total) ||
        !grads_finite(obj.grads)) {
      result.last = last_good;
      result.aborted_non_finite = true;
      return result;
    }

    clip_gradients(obj.grads, config.grad_clip_norm);

    int64_t steps_into_stage = stage2 ? step - config.stage1_steps : step;
    int64_t epoch = steps_into_stage / stream.batches_per_epoch();
    double base_lr = stage2 ? config.stage2_lr : config.lr_initial;
    double lr = base_lr * std::pow(config.lr_decay_per_epoch, static_cast<double>(epoch));

    std::vector<Matrix*> params;
    for (auto& [name, m] : state.parameters()) params.push_back(m);
    optimizer_step(params, obj.grads, opt, lr, hyper);

    bool params_ok = true;
    for (Matrix* m : params)
      if (!m->all_finite()) {
        params_ok = false;
        break;
      }
    if (!params_ok) {
      result.last = last_good;
      result.aborted_non_finite = true;
      return result;
    }

    last_good = snapshot(step + 1, stage);

    if (config.log_every > 0 && (step % config.log_every == 0 || step + 1 == total_steps)) {
      push_report(result.history, step, stage, obj.report);
      if (obj.report.total < best_total) {
        best_total = obj.report.total;
        result.best = last_good;
      }
    }
    if (config.eval_every > 0 &&
        (step % config.eval_every == config.eval_every - 1 || step + 1 == total_steps)) {
      EvalSummary ev = evaluate_model(state, dataset, readout,
                                      derive_seed(config.seed, hash_string("eval"), step));
      auto add = [&](const char* name, double v) {
        result.history.push_back({step, stage, name, v});
      };
      add("cka_g_e", ev.cka_g_e);
      add("lk_cka_speaker", ev.lk_cka_speaker);
      add("lk_cka_emotion", ev.lk_cka_emotion);
      add("secs", ev.secs);
      add("eecs", ev.eecs);
      add("recon_heldout", ev.recon_heldout);
    }
  }

  result.last = last_good;
  if (best_total == std::numeric_limits<double>::infinity()) result.best = result.last;
  return result;
}

void write_history_csv(const std::string& path, const std::vector<HistoryEntry>& entries) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << "step,stage,metric,value\n";
  char buf[40];
  for (const auto& e : entries) {
    std::snprintf(buf, sizeof(buf), "%.17g", e.value);
    os << e.step << "," << e.stage << "," << e.metric << "," << buf << "\n";
  }
  if (!os) throw IoError("write failed: " + path);
}

}  // namespace dkit
