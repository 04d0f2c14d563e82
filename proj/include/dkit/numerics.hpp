#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dkit {

// ---------------------------------------------------------------------------
// Errors. Each named failure mode from the module contracts gets its own type
// so callers and tests can distinguish them.
// ---------------------------------------------------------------------------

struct ZeroNormError : std::runtime_error {
  explicit ZeroNormError(const std::string& m) : std::runtime_error(m) {}
};
struct NonPositiveTemperatureError : std::runtime_error {
  explicit NonPositiveTemperatureError(const std::string& m) : std::runtime_error(m) {}
};
struct ShapeMismatchError : std::runtime_error {
  explicit ShapeMismatchError(const std::string& m) : std::runtime_error(m) {}
};
struct NonFiniteValueError : std::runtime_error {
  explicit NonFiniteValueError(const std::string& m) : std::runtime_error(m) {}
};
struct NoPositiveError : std::runtime_error {
  explicit NoPositiveError(const std::string& m) : std::runtime_error(m) {}
};
struct NonFiniteTermError : std::runtime_error {
  explicit NonFiniteTermError(const std::string& m) : std::runtime_error(m) {}
};
struct EmptyInputError : std::runtime_error {
  explicit EmptyInputError(const std::string& m) : std::runtime_error(m) {}
};
struct NonFiniteError : std::runtime_error {
  explicit NonFiniteError(const std::string& m) : std::runtime_error(m) {}
};
struct InvalidSpecError : std::runtime_error {
  explicit InvalidSpecError(const std::string& m) : std::runtime_error(m) {}
};
struct EmptyDatasetError : std::runtime_error {
  explicit EmptyDatasetError(const std::string& m) : std::runtime_error(m) {}
};
struct InvalidProportionError : std::runtime_error {
  explicit InvalidProportionError(const std::string& m) : std::runtime_error(m) {}
};
struct TooFewSamplesError : std::runtime_error {
  explicit TooFewSamplesError(const std::string& m) : std::runtime_error(m) {}
};
struct DegenerateInputError : std::runtime_error {
  explicit DegenerateInputError(const std::string& m) : std::runtime_error(m) {}
};
struct IoError : std::runtime_error {
  explicit IoError(const std::string& m) : std::runtime_error(m) {}
};
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& m) : std::runtime_error(m) {}
};
struct NonFiniteLossError : std::runtime_error {
  explicit NonFiniteLossError(const std::string& m) : std::runtime_error(m) {}
};
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

// ---------------------------------------------------------------------------
// Matrix: dense row-major float64. All training math runs in float64 so the
// finite-difference harness has precision headroom.
// ---------------------------------------------------------------------------

struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c, double fill = 0.0)
      : rows(r), cols(c), data(static_cast<size_t>(r) * static_cast<size_t>(c), fill) {}

  double& operator()(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

  int size() const { return rows * cols; }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
  bool all_finite() const;

  static Matrix from_rows(const std::vector<std::vector<double>>& rows_in);
  static Matrix row_vector(const std::vector<double>& v);
};

bool operator==(const Matrix& a, const Matrix& b);

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
double frob_inner(const Matrix& a, const Matrix& b);
double frob_norm(const Matrix& a);
double max_abs(const Matrix& a);

/// Solves A X = B with partial-pivot Gaussian elimination. A is n x n.
Matrix solve_linear(Matrix a, Matrix b);

/// Eigen decomposition of a symmetric matrix via cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and the matching eigenvectors
/// as columns of `vectors`.
struct EigenResult {
  std::vector<double> values;
  Matrix vectors;
};
EigenResult eigen_symmetric(Matrix a);

// ---------------------------------------------------------------------------
// Rng: splitmix64 stream. Deliberately self-contained so the draw sequence is
// identical across platforms and the 8-byte state serializes into checkpoints.
// ---------------------------------------------------------------------------

struct Rng {
  uint64_t state = 0;

  Rng() = default;
  explicit Rng(uint64_t seed) : state(seed) {}

  uint64_t next_u64() {
    state += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi], inclusive.
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
  }

  /// Standard normal via Box-Muller. Draws two uniforms per call and keeps
  /// no cached spare, so the state alone reproduces the stream.
  double gaussian() {
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      int j = uniform_int(0, i);
      std::swap(v[i], v[static_cast<size_t>(j)]);
    }
  }
};

/// Stable seed derivation for per-step / per-sample substreams.
uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0);
uint64_t hash_string(const std::string& s);

// ---------------------------------------------------------------------------
// Vector primitives used by the losses.
// ---------------------------------------------------------------------------

/// Throws ZeroNormError when the Euclidean norm is below 1e-12.
std::vector<double> l2_normalize(const std::vector<double>& v);

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);

/// Temperature softmax with max subtraction; invariant to adding a constant
/// to all logits.
std::vector<double> softmax(const std::vector<double>& logits, double temperature);

// ---------------------------------------------------------------------------
// Finite-difference gradient checking. Every differentiable operation in the
// repo is validated against this harness.
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_error = 0.0;
  int worst_coordinate = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// f returns (value, analytic gradient) at a parameter vector. The harness
/// compares the analytic gradient against central differences per coordinate;
/// the relative-error denominator is floored at 1e-8.
using ValueGradFn =
    std::function<std::pair<double, std::vector<double>>(const std::vector<double>&)>;

GradCheckReport grad_check(const ValueGradFn& f, const std::vector<double>& x, double step);

}  // namespace dkit
