#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dkit/metrics.hpp"
#include "dkit/model.hpp"
#include "dkit/numerics.hpp"
#include "dkit/synthdata.hpp"
#include "json.hpp"

using namespace dkit;

namespace {

Matrix random_matrix(int r, int c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.data) v = scale * rng.gaussian();
  return m;
}

// random orthogonal matrix from Gram-Schmidt on gaussian columns
Matrix random_orthogonal(int d, Rng& rng) {
  Matrix q = random_matrix(d, d, rng);
  for (int c = 0; c < d; ++c) {
    for (int prev = 0; prev < c; ++prev) {
      double dot = 0.0;
      for (int r = 0; r < d; ++r) dot += q(r, c) * q(r, prev);
      for (int r = 0; r < d; ++r) q(r, c) -= dot * q(r, prev);
    }
    double norm = 0.0;
    for (int r = 0; r < d; ++r) norm += q(r, c) * q(r, c);
    norm = std::sqrt(norm);
    for (int r = 0; r < d; ++r) q(r, c) /= norm;
  }
  return q;
}

}  // namespace

TEST_CASE("cka self-alignment, symmetry, range") {
  Rng rng(101);
  Matrix x = random_matrix(20, 6, rng);
  Matrix y = random_matrix(20, 4, rng);
  CHECK(linear_cka(x, x) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(linear_cka(x, y) == doctest::Approx(linear_cka(y, x)).epsilon(1e-12));
  double v = linear_cka(x, y);
  CHECK(v >= 0.0);
  CHECK(v <= 1.0);
}

TEST_CASE("cka orthogonal and isotropic-scaling invariance") {
  Rng rng(102);
  Matrix x = random_matrix(24, 5, rng);
  Matrix q = random_orthogonal(5, rng);
  Matrix xq = scale(matmul(x, q), 3.7);
  CHECK(std::fabs(linear_cka(x, xq) - 1.0) < 1e-10);

  Matrix y = random_matrix(24, 7, rng);
  double base = linear_cka(x, y);
  Matrix yq = scale(matmul(y, random_orthogonal(7, rng)), 0.2);
  CHECK(std::fabs(linear_cka(x, yq) - base) < 1e-10);
}

TEST_CASE("cka sample-order permutation invariance") {
  Rng rng(103);
  Matrix x = random_matrix(15, 4, rng);
  Matrix y = random_matrix(15, 6, rng);
  double base = linear_cka(x, y);
  std::vector<int> perm(15);
  for (int i = 0; i < 15; ++i) perm[i] = i;
  Rng shuffle_rng(104);
  shuffle_rng.shuffle(perm);
  Matrix xp(15, 4), yp(15, 6);
  for (int i = 0; i < 15; ++i) {
    for (int c = 0; c < 4; ++c) xp(i, c) = x(perm[i], c);
    for (int c = 0; c < 6; ++c) yp(i, c) = y(perm[i], c);
  }
  CHECK(std::fabs(linear_cka(xp, yp) - base) < 1e-12);
}

TEST_CASE("cka n=2 degeneracy returns 1") {
  Rng rng(105);
  Matrix x = random_matrix(2, 5, rng);
  Matrix y = random_matrix(2, 3, rng);
  CHECK(linear_cka(x, y) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("cka degenerate input raises") {
  Matrix constant(5, 3, 2.0);
  Rng rng(106);
  Matrix y = random_matrix(5, 3, rng);
  CHECK_THROWS_AS(linear_cka(constant, y), DegenerateInputError);
}

TEST_CASE("label_kernel values") {
  Matrix k = label_kernel({0, 0, 1});
  CHECK(k(0, 0) == 1.0);
  CHECK(k(0, 1) == 1.0);
  CHECK(k(0, 2) == 0.0);
  CHECK(k(2, 2) == 1.0);

  Matrix ones = label_kernel({5, 5, 5});
  for (double v : ones.data) CHECK(v == 1.0);

  Matrix eye = label_kernel({1, 2, 3});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(eye(i, j) == (i == j ? 1.0 : 0.0));
}

TEST_CASE("lk_cka one-hot representation gives 1") {
  std::vector<int> labels = {0, 1, 2, 0, 1, 2, 0, 1};
  Matrix x(8, 3);
  for (int i = 0; i < 8; ++i) x(i, labels[i]) = 1.0;
  CHECK(lk_cka(x, labels) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("lk_cka equals gram-form cka against the label kernel") {
  Rng rng(107);
  Matrix x = random_matrix(12, 5, rng);
  std::vector<int> labels = {0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2};
  // independent gram-form computation with explicit centering
  int n = 12;
  Matrix k = matmul(x, transpose(x));
  Matrix l = label_kernel(labels);
  auto center = [&](const Matrix& m) {
    Matrix c = m;
    std::vector<double> row_mean(n, 0.0), col_mean(n, 0.0);
    double total = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        row_mean[i] += m(i, j);
        col_mean[j] += m(i, j);
        total += m(i, j);
      }
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        c(i, j) = m(i, j) - row_mean[i] / n - col_mean[j] / n + total / (n * n);
    return c;
  };
  Matrix kc = center(k), lc = center(l);
  double expect = frob_inner(kc, lc) / (frob_norm(kc) * frob_norm(lc));
  CHECK(lk_cka(x, labels) == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("lk_cka relabeling invariance and preconditions") {
  Rng rng(108);
  Matrix x = random_matrix(9, 4, rng);
  std::vector<int> labels = {0, 1, 2, 0, 1, 2, 0, 1, 2};
  std::vector<int> relabeled = {7, 3, 9, 7, 3, 9, 7, 3, 9};
  CHECK(lk_cka(x, labels) == doctest::Approx(lk_cka(x, relabeled)).epsilon(1e-12));

  CHECK_THROWS_AS(lk_cka(x, std::vector<int>(9, 1)), DegenerateInputError);
  Matrix two = random_matrix(2, 4, rng);
  CHECK_THROWS_AS(lk_cka(two, {0, 1}), DegenerateInputError);
}

TEST_CASE("random representations have low lk_cka") {
  // 95th percentile over 100 seeds at n=60, 3 balanced classes stays under 0.2
  std::vector<int> labels(60);
  for (int i = 0; i < 60; ++i) labels[i] = i % 3;
  std::vector<double> values;
  for (int seed = 0; seed < 100; ++seed) {
    Rng rng(derive_seed(109, seed));
    Matrix x = random_matrix(60, 8, rng);
    values.push_back(lk_cka(x, labels));
  }
  std::sort(values.begin(), values.end());
  CHECK(values[94] < 0.2);
}

TEST_CASE("centroid prototypes") {
  Matrix emb = Matrix::from_rows({{1, 0}, {0, 1}, {4, 4}});
  PrototypeSet ps = centroid_prototypes(emb, {0, 0, 1});
  CHECK(ps.centroids[0][0] == doctest::Approx(0.5));
  CHECK(ps.centroids[0][1] == doctest::Approx(0.5));
  CHECK(ps.centroids[1][0] == doctest::Approx(4.0));
  CHECK(ps.counts[0] == 2);
  CHECK(ps.counts[1] == 1);

  // permutation invariance
  Matrix shuffled = Matrix::from_rows({{4, 4}, {1, 0}, {0, 1}});
  PrototypeSet ps2 = centroid_prototypes(shuffled, {1, 0, 0});
  CHECK(ps2.centroids[0] == ps.centroids[0]);
  CHECK(ps2.centroids[1] == ps.centroids[1]);
}

TEST_CASE("centroid prototypes commute with linear maps") {
  Rng rng(110);
  Matrix emb = random_matrix(10, 4, rng);
  std::vector<int> labels = {0, 1, 0, 1, 2, 2, 0, 1, 2, 0};
  Matrix a = random_matrix(4, 3, rng);  // embeddings -> mapped embeddings
  PrototypeSet base = centroid_prototypes(emb, labels);
  PrototypeSet mapped = centroid_prototypes(matmul(emb, a), labels);
  for (const auto& [label, centroid] : base.centroids) {
    std::vector<double> expect(3, 0.0);
    for (int c = 0; c < 3; ++c)
      for (int r = 0; r < 4; ++r) expect[c] += centroid[r] * a(r, c);
    for (int c = 0; c < 3; ++c)
      CHECK(mapped.centroids.at(label)[c] == doctest::Approx(expect[c]).epsilon(1e-12));
  }
}

TEST_CASE("factor_similarity oracle checks") {
  DatasetSpec spec;
  spec.noise_std = 0.1;
  Dataset ds = make_dataset(spec);
  FactorReadout readout = fit_factor_readout(ds);

  // a real sample scores high against its own speaker factor
  const FactorSample& sample = ds.samples[ds.train_ids[0]];
  CHECK(factor_similarity(sample.features, sample.speaker_factor, readout) > 0.9);

  // the readout output itself scores exactly 1
  auto self_readout = readout_speaker_factor(readout, sample.features);
  CHECK(factor_similarity(sample.features, self_readout, readout) ==
        doctest::Approx(1.0).epsilon(1e-12));

  // an orthogonal probe factor scores near zero
  std::vector<double> ortho(self_readout.size(), 0.0);
  ortho[0] = self_readout[1];
  ortho[1] = -self_readout[0];
  CHECK(std::fabs(factor_similarity(sample.features, ortho, readout)) < 0.35);
}

TEST_CASE("probe_accuracy separable and noise baselines") {
  // one-hot embeddings are perfectly separable
  std::vector<int> labels;
  Matrix onehot(30, 3);
  for (int i = 0; i < 30; ++i) {
    labels.push_back(i % 3);
    onehot(i, i % 3) = 1.0;
  }
  Rng rng(111);
  CHECK(probe_accuracy(onehot, labels, rng) == doctest::Approx(1.0));

  // pure noise stays near chance
  Rng noise_rng(112);
  Matrix noise = random_matrix(300, 8, noise_rng);
  std::vector<int> noise_labels(300);
  for (int i = 0; i < 300; ++i) noise_labels[i] = i % 3;
  Rng probe_rng(113);
  double acc = probe_accuracy(noise, noise_labels, probe_rng);
  CHECK(std::fabs(acc - 1.0 / 3.0) < 0.1);

  // duplicated feature columns barely move the accuracy
  Matrix doubled(300, 16);
  for (int i = 0; i < 300; ++i)
    for (int c = 0; c < 8; ++c) {
      doubled(i, c) = noise(i, c);
      doubled(i, 8 + c) = noise(i, c);
    }
  Rng probe_rng2(113);
  double acc2 = probe_accuracy(doubled, noise_labels, probe_rng2);
  CHECK(std::fabs(acc - acc2) <= 0.02);

  // preconditions
  Rng r(114);
  CHECK_THROWS_AS(probe_accuracy(onehot, std::vector<int>(30, 0), r), TooFewSamplesError);
  Matrix tiny = random_matrix(5, 2, r);
  CHECK_THROWS_AS(probe_accuracy(tiny, {0, 0, 0, 1, 1}, r), TooFewSamplesError);
}

TEST_CASE("flow_probe layout and identity-flow constancy") {
  DatasetSpec spec;
  spec.n_speakers = 3;
  spec.n_emotions = 3;
  spec.samples_per_cell = 4;
  spec.feature_dim = 8;
  spec.speaker_factor_dim = 3;
  spec.seq_len_min = 8;
  spec.seq_len_max = 12;
  spec.neutral_only_speakers = {};
  spec.seed = 115;
  Dataset ds = make_dataset(spec);

  ModelDims dims;
  dims.feature_dim = 8;
  dims.emotion_input_dim = 8;
  dims.latent_dim = 4;
  dims.embed_dim = 4;
  dims.hidden = 8;
  dims.ref_channels = 8;
  dims.content_vocab = spec.content_vocab;
  dims.content_embed_dim = 4;
  dims.n_speakers = 3;
  dims.n_emotions = 3;
  ModelState state = init_model(dims, 116);

  FlowProbeTable table = flow_probe(state, ds);
  REQUIRE(table.rows.size() == 8);
  for (int i = 0; i < 8; ++i) {
    CHECK(table.rows[i].flow_step == i + 1);
    CHECK(table.rows[i].reverse == (i >= 4));
    CHECK(table.rows[i].lk_cka_speaker >= 0.0);
    CHECK(table.rows[i].lk_cka_speaker <= 1.0);
    CHECK(table.rows[i].lk_cka_emotion >= 0.0);
    CHECK(table.rows[i].lk_cka_emotion <= 1.0);
  }
  // the flow is the identity at init, so every step sees the same latents
  for (int i = 1; i < 8; ++i) {
    CHECK(table.rows[i].lk_cka_speaker ==
          doctest::Approx(table.rows[0].lk_cka_speaker).epsilon(1e-12));
    CHECK(table.rows[i].lk_cka_emotion ==
          doctest::Approx(table.rows[0].lk_cka_emotion).epsilon(1e-12));
  }
}

TEST_CASE("pca_2d ordering and determinism") {
  Rng rng(117);
  Matrix x(40, 5);
  for (int i = 0; i < 40; ++i) {
    double t = rng.gaussian();
    double s = rng.gaussian();
    x(i, 0) = 3.0 * t;
    x(i, 1) = 1.0 * s;
    x(i, 2) = 0.1 * rng.gaussian();
    x(i, 3) = 0.1 * rng.gaussian();
    x(i, 4) = 0.1 * rng.gaussian();
  }
  Matrix coords = pca_2d(x);
  CHECK(coords.rows == 40);
  CHECK(coords.cols == 2);
  double var0 = 0.0, var1 = 0.0;
  for (int i = 0; i < 40; ++i) {
    var0 += coords(i, 0) * coords(i, 0);
    var1 += coords(i, 1) * coords(i, 1);
  }
  CHECK(var0 >= var1);
  CHECK(pca_2d(x) == coords);
}

TEST_CASE("report csv and json mirrors agree") {
  std::vector<MetricRow> rows = {{"cka_g_e", "mpcl+cosine", 0.123456789012345, 7},
                                 {"secs", "mpcl+cosine", -0.25, 7}};
  std::string dir = "/tmp/dkit_report_test";
  std::filesystem::create_directories(dir);
  std::string csv = dir + "/report.csv";
  std::string js = dir + "/report.json";
  write_report_csv(csv, rows);
  write_report_json(js, rows, {{"tool", "dkit"}});

  std::ifstream is(csv);
  std::string header;
  std::getline(is, header);
  CHECK(header == "metric,config,value,seed");
  std::ifstream jstream(js);
  nlohmann::json j = nlohmann::json::parse(jstream);
  REQUIRE(j.at("metrics").size() == rows.size());
  int line_no = 0;
  std::string line;
  while (std::getline(is, line)) {
    std::stringstream ss(line);
    std::string metric, config, value, seed;
    std::getline(ss, metric, ',');
    std::getline(ss, config, ',');
    std::getline(ss, value, ',');
    std::getline(ss, seed, ',');
    CHECK(metric == j.at("metrics")[line_no].at("metric").get<std::string>());
    CHECK(std::stod(value) == j.at("metrics")[line_no].at("value").get<double>());
    ++line_no;
  }
  CHECK(line_no == 2);
  std::filesystem::remove_all(dir);
}

TEST_CASE("flow probe csv layout") {
  FlowProbeTable table;
  for (int i = 0; i < 8; ++i)
    table.rows.push_back({i + 1, i >= 4, 0.5, 0.25});
  std::string path = "/tmp/dkit_probe_test.csv";
  write_flow_probe_csv(path, table);
  std::ifstream is(path);
  std::string header;
  std::getline(is, header);
  CHECK(header == "flow_step,reverse,lk_cka_speaker,lk_cka_emotion");
  int count = 0;
  std::string line;
  while (std::getline(is, line)) ++count;
  CHECK(count == 8);
  std::filesystem::remove(path);
}
