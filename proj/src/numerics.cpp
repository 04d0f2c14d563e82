#include "dkit/numerics.hpp"

#include <algorithm>
#include <cmath>

namespace dkit {

bool Matrix::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& rows_in) {
  if (rows_in.empty()) return Matrix();
  Matrix m(static_cast<int>(rows_in.size()), static_cast<int>(rows_in[0].size()));
  for (int r = 0; r < m.rows; ++r) {
    if (static_cast<int>(rows_in[r].size()) != m.cols)
      throw ShapeMismatchError("from_rows: ragged input");
    for (int c = 0; c < m.cols; ++c) m(r, c) = rows_in[r][c];
  }
  return m;
}

Matrix Matrix::row_vector(const std::vector<double>& v) {
  Matrix m(1, static_cast<int>(v.size()));
  m.data = v;
  return m;
}

bool operator==(const Matrix& a, const Matrix& b) {
  return a.rows == b.rows && a.cols == b.cols && a.data == b.data;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) throw ShapeMismatchError("matmul: inner dimensions differ");
  Matrix out(a.rows, b.cols);
  for (int i = 0; i < a.rows; ++i) {
    const double* arow = &a.data[static_cast<size_t>(i) * a.cols];
    double* orow = &out.data[static_cast<size_t>(i) * b.cols];
    for (int k = 0; k < a.cols; ++k) {
      double aik = arow[k];
      if (aik == 0.0) continue;
      const double* brow = &b.data[static_cast<size_t>(k) * b.cols];
      for (int j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols, a.rows);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < a.cols; ++j) out(j, i) = a(i, j);
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeMismatchError("add: shapes differ");
  Matrix out = a;
  for (int i = 0; i < out.size(); ++i) out.data[i] += b.data[i];
  return out;
}

Matrix sub(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeMismatchError("sub: shapes differ");
  Matrix out = a;
  for (int i = 0; i < out.size(); ++i) out.data[i] -= b.data[i];
  return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeMismatchError("hadamard: shapes differ");
  Matrix out = a;
  for (int i = 0; i < out.size(); ++i) out.data[i] *= b.data[i];
  return out;
}

Matrix scale(const Matrix& a, double s) {
  Matrix out = a;
  for (double& v : out.data) v *= s;
  return out;
}

double frob_inner(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeMismatchError("frob_inner: shapes differ");
  double s = 0.0;
  for (int i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

double frob_norm(const Matrix& a) { return std::sqrt(frob_inner(a, a)); }

double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.data) m = std::max(m, std::fabs(v));
  return m;
}

Matrix solve_linear(Matrix a, Matrix b) {
  if (a.rows != a.cols) throw ShapeMismatchError("solve_linear: A must be square");
  if (a.rows != b.rows) throw ShapeMismatchError("solve_linear: A and B row counts differ");
  int n = a.rows;
  for (int col = 0; col < n; ++col) {
    int pivot = col;
    for (int r = col + 1; r < n; ++r)
      if (std::fabs(a(r, col)) > std::fabs(a(pivot, col))) pivot = r;
    if (std::fabs(a(pivot, col)) < 1e-300)
      throw DegenerateInputError("solve_linear: singular matrix");
    if (pivot != col) {
      for (int c = 0; c < n; ++c) std::swap(a(col, c), a(pivot, c));
      for (int c = 0; c < b.cols; ++c) std::swap(b(col, c), b(pivot, c));
    }
    double inv = 1.0 / a(col, col);
    for (int r = col + 1; r < n; ++r) {
      double f = a(r, col) * inv;
      if (f == 0.0) continue;
      for (int c = col; c < n; ++c) a(r, c) -= f * a(col, c);
      for (int c = 0; c < b.cols; ++c) b(r, c) -= f * b(col, c);
    }
  }
  Matrix x(n, b.cols);
  for (int r = n - 1; r >= 0; --r) {
    for (int c = 0; c < b.cols; ++c) {
      double s = b(r, c);
      for (int k = r + 1; k < n; ++k) s -= a(r, k) * x(k, c);
      x(r, c) = s / a(r, r);
    }
  }
  return x;
}

EigenResult eigen_symmetric(Matrix a) {
  if (a.rows != a.cols) throw ShapeMismatchError("eigen_symmetric: not square");
  int n = a.rows;
  Matrix v(n, n);
  for (int i = 0; i < n; ++i) v(i, i) = 1.0;

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off < 1e-24) break;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        if (std::fabs(a(p, q)) < 1e-300) continue;
        double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        double t = (theta >= 0 ? 1.0 : -1.0) /
                   (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        double cth = 1.0 / std::sqrt(t * t + 1.0);
        double sth = t * cth;
        for (int k = 0; k < n; ++k) {
          double akp = a(k, p), akq = a(k, q);
          a(k, p) = cth * akp - sth * akq;
          a(k, q) = sth * akp + cth * akq;
        }
        for (int k = 0; k < n; ++k) {
          double apk = a(p, k), aqk = a(q, k);
          a(p, k) = cth * apk - sth * aqk;
          a(q, k) = sth * apk + cth * aqk;
        }
        for (int k = 0; k < n; ++k) {
          double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = cth * vkp - sth * vkq;
          v(k, q) = sth * vkp + cth * vkq;
        }
      }
    }
  }

  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](int x, int y) { return a(x, x) > a(y, y); });

  EigenResult res;
  res.values.resize(n);
  res.vectors = Matrix(n, n);
  for (int j = 0; j < n; ++j) {
    res.values[j] = a(order[j], order[j]);
    for (int i = 0; i < n; ++i) res.vectors(i, j) = v(i, order[j]);
  }
  return res;
}

uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b, uint64_t c) {
  auto mix = [](uint64_t h, uint64_t x) {
    h ^= x + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    Rng r(h);
    return r.next_u64();
  };
  uint64_t h = mix(seed, a);
  h = mix(h, b);
  h = mix(h, c);
  return h;
}

uint64_t hash_string(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<double> l2_normalize(const std::vector<double>& v) {
  double n2 = 0.0;
  for (double x : v) n2 += x * x;
  double n = std::sqrt(n2);
  if (n < 1e-12) throw ZeroNormError("l2_normalize: vector norm below 1e-12");
  std::vector<double> out(v.size());
  for (size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
  return out;
}

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeMismatchError("cosine_similarity: lengths differ");
  double na = 0.0, nb = 0.0, d = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    na += a[i] * a[i];
    nb += b[i] * b[i];
    d += a[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < 1e-12 || nb < 1e-12) throw ZeroNormError("cosine_similarity: zero-norm argument");
  return d / (na * nb);
}

std::vector<double> softmax(const std::vector<double>& logits, double temperature) {
  if (temperature <= 0.0)
    throw NonPositiveTemperatureError("softmax: temperature must be > 0");
  if (logits.empty()) throw EmptyInputError("softmax: empty logits");
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  std::vector<double> out(logits.size());
  double z = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp((logits[i] - m) / temperature);
    z += out[i];
  }
  for (double& v : out) v /= z;
  return out;
}

GradCheckReport grad_check(const ValueGradFn& f, const std::vector<double>& x, double step) {
  if (step <= 0.0) throw InvalidSpecError("grad_check: step must be > 0");
  auto [value, analytic] = f(x);
  if (!std::isfinite(value)) throw NonFiniteValueError("grad_check: non-finite value at x");
  if (analytic.size() != x.size())
    throw ShapeMismatchError("grad_check: gradient length differs from x");
  for (double g : analytic) {
    if (!std::isfinite(g)) throw NonFiniteValueError("grad_check: non-finite gradient at x");
  }

  GradCheckReport report;
  std::vector<double> xp = x;
  for (size_t i = 0; i < x.size(); ++i) {
    xp[i] = x[i] + step;
    double fp = f(xp).first;
    xp[i] = x[i] - step;
    double fm = f(xp).first;
    xp[i] = x[i];
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NonFiniteValueError("grad_check: non-finite value near x");
    double numeric = (fp - fm) / (2.0 * step);
    double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-8});
    double rel = std::fabs(analytic[i] - numeric) / denom;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_coordinate = static_cast<int>(i);
      report.analytic = analytic[i];
      report.numeric = numeric;
    }
  }
  return report;
}

}  // namespace dkit
