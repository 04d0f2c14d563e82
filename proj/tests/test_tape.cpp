#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>

#include "dkit/numerics.hpp"
#include "dkit/tape.hpp"

using namespace dkit;

namespace {

// Generic finite-difference harness: `build` maps leaf ids to an output node;
// the scalar under test is sum(W .* output) for a fixed random W, so every
// output entry carries a distinct gradient.
double fd_check(const std::function<int(Tape&, const std::vector<int>&)>& build,
                const std::vector<Matrix>& inputs, uint64_t seed = 99) {
  std::vector<double> x0;
  for (const Matrix& m : inputs) x0.insert(x0.end(), m.data.begin(), m.data.end());

  Matrix weights;  // fixed after the first forward pass
  Rng wrng(seed);

  ValueGradFn f = [&](const std::vector<double>& x) {
    Tape t;
    std::vector<int> ids;
    size_t pos = 0;
    for (const Matrix& proto : inputs) {
      Matrix m = proto;
      std::copy(x.begin() + pos, x.begin() + pos + m.size(), m.data.begin());
      pos += m.size();
      ids.push_back(t.leaf(m));
    }
    int out = build(t, ids);
    if (weights.size() == 0) {
      weights = Matrix(t.rows(out), t.cols(out));
      for (double& w : weights.data) w = wrng.gaussian();
    }
    int scalar = t.sum_all(t.hadamard(out, t.constant(weights)));
    t.backward(scalar);
    std::vector<double> grad;
    for (int id : ids) {
      const Matrix& g = t.grad(id);
      if (g.size() == 0) {
        const Matrix& v = t.value(id);
        grad.insert(grad.end(), static_cast<size_t>(v.size()), 0.0);
      } else {
        grad.insert(grad.end(), g.data.begin(), g.data.end());
      }
    }
    return std::make_pair(t.value(scalar)(0, 0), grad);
  };

  return grad_check(f, x0, 1e-5).max_rel_error;
}

Matrix random_matrix(int r, int c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.data) v = scale * rng.gaussian();
  return m;
}

}  // namespace

TEST_CASE("elementwise and structural ops match finite differences") {
  Rng rng(5);
  Matrix a = random_matrix(3, 4, rng);
  Matrix b = random_matrix(3, 4, rng);
  Matrix v = random_matrix(1, 4, rng);

  CHECK(fd_check([](Tape& t, const std::vector<int>& id) { return t.add(id[0], id[1]); },
                 {a, b}) < 1e-5);
  CHECK(fd_check([](Tape& t, const std::vector<int>& id) { return t.sub(id[0], id[1]); },
                 {a, b}) < 1e-5);
  CHECK(fd_check(
            [](Tape& t, const std::vector<int>& id) { return t.hadamard(id[0], id[1]); },
            {a, b}) < 1e-5);
  CHECK(fd_check([](Tape& t, const std::vector<int>& id) { return t.scale(id[0], -2.5); },
                 {a}) < 1e-5);
  CHECK(fd_check(
            [](Tape& t, const std::vector<int>& id) { return t.add_rowvec(id[0], id[1]); },
            {a, v}) < 1e-5);
  CHECK(fd_check(
            [](Tape& t, const std::vector<int>& id) { return t.concat_cols(id[0], id[1]); },
            {a, b}) < 1e-5);
  CHECK(fd_check([](Tape& t, const std::vector<int>& id) { return t.slice_cols(id[0], 1, 3); },
                 {a}) < 1e-5);
  CHECK(fd_check([](Tape& t, const std::vector<int>& id) { return t.row(id[0], 2); }, {a}) <
        1e-7);
  CHECK(fd_check([](Tape& t, const std::vector<int>& id) { return t.repeat_row(id[0], 5); },
                 {v}) < 1e-5);
  CHECK(fd_check([](Tape& t, const std::vector<int>& id) { return t.mean_rows(id[0]); },
                 {a}) < 1e-5);
  CHECK(fd_check([](Tape& t, const std::vector<int>& id) { return t.transpose(id[0]); },
                 {a}) < 1e-5);
  CHECK(fd_check(
            [](Tape& t, const std::vector<int>& id) {
              return t.stack_rows({t.row(id[0], 0), t.row(id[0], 2), id[1]});
            },
            {a, v}) < 1e-5);
}

TEST_CASE("matmul gradients") {
  Rng rng(6);
  Matrix a = random_matrix(3, 5, rng);
  Matrix b = random_matrix(5, 2, rng);
  CHECK(fd_check([](Tape& t, const std::vector<int>& id) { return t.matmul(id[0], id[1]); },
                 {a, b}) < 1e-5);
}

TEST_CASE("nonlinearity gradients") {
  Rng rng(8);
  Matrix a = random_matrix(4, 3, rng, 0.8);
  CHECK(fd_check([](Tape& t, const std::vector<int>& id) { return t.tanh_(id[0]); }, {a}) <
        1e-6);
  CHECK(fd_check([](Tape& t, const std::vector<int>& id) { return t.sigmoid(id[0]); }, {a}) <
        1e-6);
  CHECK(fd_check([](Tape& t, const std::vector<int>& id) { return t.exp_(id[0]); }, {a}) <
        1e-6);

  Matrix pos = random_matrix(4, 3, rng, 0.3);
  for (double& x : pos.data) x = std::fabs(x) + 0.5;
  CHECK(fd_check([](Tape& t, const std::vector<int>& id) { return t.log_(id[0]); }, {pos}) <
        1e-6);
  CHECK(fd_check([](Tape& t, const std::vector<int>& id) { return t.sqrt_(id[0]); }, {pos}) <
        1e-6);

  // keep relu inputs away from the kink
  Matrix away = random_matrix(4, 3, rng);
  for (double& x : away.data)
    if (std::fabs(x) < 0.05) x = 0.1;
  CHECK(fd_check([](Tape& t, const std::vector<int>& id) { return t.relu(id[0]); }, {away}) <
        1e-6);
}

TEST_CASE("log_softmax_rows gradients and overflow safety") {
  Rng rng(9);
  Matrix a = random_matrix(4, 6, rng, 2.0);
  CHECK(fd_check(
            [](Tape& t, const std::vector<int>& id) { return t.log_softmax_rows(id[0]); },
            {a}) < 1e-5);

  Tape t;
  int x = t.constant(Matrix::from_rows({{1000.0, 999.0}}));
  int ls = t.log_softmax_rows(x);
  CHECK(std::exp(t.value(ls)(0, 0)) == doctest::Approx(0.731059).epsilon(1e-5));
}

TEST_CASE("div and cosine gradients") {
  Rng rng(10);
  Matrix a = random_matrix(1, 8, rng);
  Matrix b = random_matrix(1, 8, rng);
  CHECK(fd_check([](Tape& t, const std::vector<int>& id) { return t.cosine(id[0], id[1]); },
                 {a, b}) < 1e-5);

  Matrix s1 = random_matrix(1, 1, rng);
  Matrix s2(1, 1, 2.7);
  CHECK(fd_check([](Tape& t, const std::vector<int>& id) { return t.div_(id[0], id[1]); },
                 {s1, s2}) < 1e-5);
}

TEST_CASE("conv1d gradients across strides") {
  Rng rng(12);
  Matrix x = random_matrix(7, 3, rng);
  Matrix w = random_matrix(4, 9, rng, 0.5);  // 4 out channels, kernel 3 * cin 3
  Matrix b = random_matrix(1, 4, rng, 0.1);
  CHECK(fd_check(
            [](Tape& t, const std::vector<int>& id) {
              return t.conv1d(id[0], id[1], id[2], 3, 2, 1);
            },
            {x, w, b}) < 1e-5);
  CHECK(fd_check(
            [](Tape& t, const std::vector<int>& id) {
              return t.conv1d(id[0], id[1], id[2], 3, 1, 1);
            },
            {x, w, b}) < 1e-5);
}

TEST_CASE("conv1d output length is ceil(T/2) with stride 2 pad 1") {
  Rng rng(14);
  Matrix w = random_matrix(2, 6, rng);
  Matrix b(1, 2);
  for (int t_in : {1, 2, 3, 5, 12, 47, 48}) {
    Tape t;
    Matrix x = random_matrix(t_in, 2, rng);
    int out = t.conv1d(t.constant(x), t.constant(w), t.constant(b), 3, 2, 1);
    CHECK(t.rows(out) == (t_in + 1) / 2);
  }
}

TEST_CASE("embedding_lookup gradients scatter into the table") {
  Rng rng(15);
  Matrix table = random_matrix(5, 3, rng);
  std::vector<int> tokens = {1, 3, 3, 0};
  CHECK(fd_check(
            [&](Tape& t, const std::vector<int>& id) {
              return t.embedding_lookup(id[0], tokens);
            },
            {table}) < 1e-5);
}

TEST_CASE("l2_normalize_rows gradients and unit norms") {
  Rng rng(16);
  Matrix a = random_matrix(4, 6, rng);
  CHECK(fd_check(
            [](Tape& t, const std::vector<int>& id) { return t.l2_normalize_rows(id[0]); },
            {a}) < 1e-5);

  Tape t;
  int n = t.l2_normalize_rows(t.constant(a));
  for (int r = 0; r < 4; ++r) {
    double s = 0.0;
    for (int c = 0; c < 6; ++c) s += t.value(n)(r, c) * t.value(n)(r, c);
    CHECK(std::sqrt(s) == doctest::Approx(1.0));
  }
}

TEST_CASE("grl is identity forward and scales gradients by -lambda") {
  Rng rng(18);
  Matrix a = random_matrix(2, 3, rng);
  double lambda = 1.7;

  Tape t;
  int x = t.leaf(a);
  int g = t.grl(x, lambda);
  for (int i = 0; i < a.size(); ++i) CHECK(t.value(g).data[i] == a.data[i]);

  int s = t.sum_all(t.hadamard(g, g));
  t.backward(s);
  Matrix with_grl = t.grad(x);

  Tape t2;
  int x2 = t2.leaf(a);
  int s2 = t2.sum_all(t2.hadamard(x2, x2));
  t2.backward(s2);
  Matrix without = t2.grad(x2);

  for (int i = 0; i < a.size(); ++i)
    CHECK(with_grl.data[i] == doctest::Approx(-lambda * without.data[i]).epsilon(1e-12));
}

TEST_CASE("detach stops gradients") {
  Rng rng(19);
  Matrix a = random_matrix(1, 4, rng);
  Tape t;
  int x = t.leaf(a);
  int d = t.detach(x);
  int s = t.sum_all(t.hadamard(d, d));
  t.backward(s);
  CHECK(t.grad(x).size() == 0);  // nothing flowed back
}

TEST_CASE("gradients accumulate across fan-out") {
  Matrix a(1, 1, 3.0);
  Tape t;
  int x = t.leaf(a);
  int y = t.add(x, x);  // y = 2x
  int s = t.sum_all(y);
  t.backward(s);
  CHECK(t.grad(x)(0, 0) == doctest::Approx(2.0));
}

TEST_CASE("a recurrent composite matches finite differences") {
  Rng rng(21);
  Matrix x = random_matrix(3, 4, rng, 0.5);  // sequence input
  Matrix wr = random_matrix(5, 4, rng, 0.4);
  Matrix ur = random_matrix(5, 5, rng, 0.4);
  Matrix wn = random_matrix(5, 4, rng, 0.4);
  Matrix un = random_matrix(5, 5, rng, 0.4);

  auto build = [](Tape& t, const std::vector<int>& id) {
    int h = t.constant(Matrix(1, 5));
    int ones = t.constant(Matrix(1, 5, 1.0));
    for (int step = 0; step < 3; ++step) {
      int xt = t.row(id[0], step);
      int r = t.sigmoid(t.add(t.matmul(xt, t.transpose(id[1])),
                              t.matmul(h, t.transpose(id[2]))));
      int n = t.tanh_(t.add(t.matmul(xt, t.transpose(id[3])),
                            t.hadamard(r, t.matmul(h, t.transpose(id[4])))));
      int u = t.sigmoid(t.matmul(xt, t.transpose(id[1])));
      h = t.add(t.hadamard(t.sub(ones, u), n), t.hadamard(u, h));
    }
    return h;
  };
  CHECK(fd_check(build, {x, wr, ur, wn, un}) < 1e-5);
}
