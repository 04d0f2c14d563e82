#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "dkit/numerics.hpp"

using namespace dkit;

TEST_CASE("l2_normalize basic values") {
  auto v = l2_normalize({3.0, 4.0});
  CHECK(v[0] == doctest::Approx(0.6));
  CHECK(v[1] == doctest::Approx(0.8));

  auto unit = l2_normalize({1.0, 0.0, 0.0});
  CHECK(unit[0] == doctest::Approx(1.0));
  CHECK(unit[1] == doctest::Approx(0.0));

  CHECK_THROWS_AS(l2_normalize({0.0, 0.0}), ZeroNormError);
}

TEST_CASE("l2_normalize is idempotent") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> v(8);
    for (double& x : v) x = rng.gaussian() * rng.uniform(0.1, 10.0);
    auto n1 = l2_normalize(v);
    auto n2 = l2_normalize(n1);
    for (size_t i = 0; i < v.size(); ++i) CHECK(std::fabs(n1[i] - n2[i]) < 1e-12);
  }
}

TEST_CASE("cosine_similarity values and scale invariance") {
  CHECK(cosine_similarity({1, 0}, {0, 1}) == doctest::Approx(0.0));
  CHECK(cosine_similarity({1, 1}, {2, 2}) == doctest::Approx(1.0));
  CHECK(cosine_similarity({1, 0}, {-1, 0}) == doctest::Approx(-1.0));
  CHECK_THROWS_AS(cosine_similarity({0, 0}, {1, 0}), ZeroNormError);

  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> a(6), b(6);
    for (double& x : a) x = rng.gaussian();
    for (double& x : b) x = rng.gaussian();
    double alpha = rng.uniform(0.01, 50.0);
    double beta = rng.uniform(0.01, 50.0);
    std::vector<double> sa = a, sb = b;
    for (double& x : sa) x *= alpha;
    for (double& x : sb) x *= beta;
    CHECK(std::fabs(cosine_similarity(a, b) - cosine_similarity(sa, sb)) < 1e-12);
  }
}

TEST_CASE("softmax values") {
  auto p = softmax({0.0, 0.0}, 1.0);
  CHECK(p[0] == doctest::Approx(0.5));
  CHECK(p[1] == doctest::Approx(0.5));

  auto q = softmax({1.0, 0.0}, 0.5);
  CHECK(q[0] == doctest::Approx(0.880797).epsilon(1e-5));
  CHECK(q[1] == doctest::Approx(0.119203).epsilon(1e-5));

  auto big = softmax({1000.0, 999.0}, 1.0);
  CHECK(big[0] == doctest::Approx(0.731059).epsilon(1e-5));
  CHECK(big[1] == doctest::Approx(0.268941).epsilon(1e-5));

  CHECK_THROWS_AS(softmax({1.0, 2.0}, 0.0), NonPositiveTemperatureError);
  CHECK_THROWS_AS(softmax({1.0, 2.0}, -1.0), NonPositiveTemperatureError);
}

TEST_CASE("softmax shift invariance and normalization") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> logits(5);
    for (double& x : logits) x = rng.gaussian() * 3.0;
    double tau = rng.uniform(0.05, 4.0);
    double c = rng.uniform(-100.0, 100.0);
    auto p = softmax(logits, tau);
    std::vector<double> shifted = logits;
    for (double& x : shifted) x += c;
    auto ps = softmax(shifted, tau);
    double sum = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
      CHECK(std::fabs(p[i] - ps[i]) < 1e-12);
      CHECK(p[i] > 0.0);
      CHECK(p[i] < 1.0);
      sum += p[i];
    }
    CHECK(std::fabs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("grad_check on a quadratic") {
  ValueGradFn f = [](const std::vector<double>& x) {
    return std::make_pair(x[0] * x[0], std::vector<double>{2.0 * x[0]});
  };
  GradCheckReport r = grad_check(f, {3.0}, 1e-5);
  CHECK(r.max_rel_error < 1e-6);
  CHECK(r.analytic == doctest::Approx(6.0));

  ValueGradFn bad = [](const std::vector<double>& x) {
    return std::make_pair(x[0] * x[0], std::vector<double>{2.5 * x[0]});
  };
  GradCheckReport rb = grad_check(bad, {3.0}, 1e-5);
  CHECK(rb.max_rel_error > 0.1);
  CHECK(rb.worst_coordinate == 0);
}

TEST_CASE("grad_check rejects non-finite values") {
  ValueGradFn f = [](const std::vector<double>&) {
    return std::make_pair(std::nan(""), std::vector<double>{0.0});
  };
  CHECK_THROWS_AS(grad_check(f, {1.0}, 1e-5), NonFiniteValueError);
}

TEST_CASE("matmul known product and shape errors") {
  Matrix a = Matrix::from_rows({{1, 2, 3}, {4, 5, 6}});
  Matrix b = Matrix::from_rows({{7, 8}, {9, 10}, {11, 12}});
  Matrix c = matmul(a, b);
  CHECK(c(0, 0) == doctest::Approx(58));
  CHECK(c(0, 1) == doctest::Approx(64));
  CHECK(c(1, 0) == doctest::Approx(139));
  CHECK(c(1, 1) == doctest::Approx(154));

  CHECK_THROWS_AS(matmul(a, a), ShapeMismatchError);
  CHECK_THROWS_AS(add(a, b), ShapeMismatchError);
}

TEST_CASE("solve_linear recovers a known solution") {
  Rng rng(17);
  int n = 6;
  Matrix a(n, n);
  for (double& v : a.data) v = rng.gaussian();
  for (int i = 0; i < n; ++i) a(i, i) += 5.0;  // keep it comfortably nonsingular
  Matrix x_true(n, 2);
  for (double& v : x_true.data) v = rng.gaussian();
  Matrix b = matmul(a, x_true);
  Matrix x = solve_linear(a, b);
  CHECK(max_abs(sub(x, x_true)) < 1e-9);
}

TEST_CASE("eigen_symmetric on a known 2x2") {
  Matrix a = Matrix::from_rows({{2, 1}, {1, 2}});
  EigenResult e = eigen_symmetric(a);
  CHECK(e.values[0] == doctest::Approx(3.0));
  CHECK(e.values[1] == doctest::Approx(1.0));
  for (int j = 0; j < 2; ++j) {
    double av0 = a(0, 0) * e.vectors(0, j) + a(0, 1) * e.vectors(1, j);
    double av1 = a(1, 0) * e.vectors(0, j) + a(1, 1) * e.vectors(1, j);
    CHECK(av0 == doctest::Approx(e.values[j] * e.vectors(0, j)));
    CHECK(av1 == doctest::Approx(e.values[j] * e.vectors(1, j)));
  }
}

TEST_CASE("rng determinism and rough gaussian moments") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng g(43);
  double mean = 0.0, var = 0.0;
  const int n = 20000;
  std::vector<double> xs(n);
  for (double& x : xs) x = g.gaussian();
  for (double x : xs) mean += x;
  mean /= n;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= n;
  CHECK(std::fabs(mean) < 0.03);
  CHECK(std::fabs(var - 1.0) < 0.05);
}

TEST_CASE("derive_seed is stable and spreads") {
  CHECK(derive_seed(1, 2, 3) == derive_seed(1, 2, 3));
  CHECK(derive_seed(1, 2, 3) != derive_seed(1, 2, 4));
  CHECK(derive_seed(1, 2) != derive_seed(2, 1));
  CHECK(hash_string("abc") == hash_string("abc"));
  CHECK(hash_string("abc") != hash_string("abd"));
}
