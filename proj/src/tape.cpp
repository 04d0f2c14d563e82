#include "dkit/tape.hpp"

#include <cmath>

namespace dkit {

namespace {

void accumulate(Matrix& into, const Matrix& g) {
  if (into.size() == 0) {
    into = g;
    return;
  }
  for (int i = 0; i < into.size(); ++i) into.data[i] += g.data[i];
}

}  // namespace

int Tape::push(Matrix value, bool requires_grad_flag, std::vector<int> parents,
               std::function<void(Tape&, int)> back) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad_flag;
  n.parents = std::move(parents);
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

bool Tape::any_requires(const std::vector<int>& ids) const {
  for (int id : ids)
    if (nodes_[id].requires_grad) return true;
  return false;
}

int Tape::leaf(const Matrix& m) { return push(m, true, {}, nullptr); }
int Tape::constant(const Matrix& m) { return push(m, false, {}, nullptr); }

void Tape::backward(int root) {
  if (nodes_[root].value.size() != 1)
    throw ShapeMismatchError("backward: root must be 1x1");
  for (Node& n : nodes_) n.grad = Matrix();
  nodes_[root].grad = Matrix(1, 1, 1.0);
  for (int id = root; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.size() == 0 || !n.back) continue;
    n.back(*this, id);
  }
}

int Tape::add(int a, int b) {
  Matrix v = dkit::add(nodes_[a].value, nodes_[b].value);
  bool req = any_requires({a, b});
  return push(std::move(v), req, {a, b}, [a, b](Tape& t, int self) {
    const Matrix& g = t.nodes_[self].grad;
    if (t.nodes_[a].requires_grad) accumulate(t.grad_ref(a), g);
    if (t.nodes_[b].requires_grad) accumulate(t.grad_ref(b), g);
  });
}

int Tape::sub(int a, int b) {
  Matrix v = dkit::sub(nodes_[a].value, nodes_[b].value);
  bool req = any_requires({a, b});
  return push(std::move(v), req, {a, b}, [a, b](Tape& t, int self) {
    const Matrix& g = t.nodes_[self].grad;
    if (t.nodes_[a].requires_grad) accumulate(t.grad_ref(a), g);
    if (t.nodes_[b].requires_grad) accumulate(t.grad_ref(b), dkit::scale(g, -1.0));
  });
}

int Tape::hadamard(int a, int b) {
  Matrix v = dkit::hadamard(nodes_[a].value, nodes_[b].value);
  bool req = any_requires({a, b});
  return push(std::move(v), req, {a, b}, [a, b](Tape& t, int self) {
    const Matrix& g = t.nodes_[self].grad;
    if (t.nodes_[a].requires_grad)
      accumulate(t.grad_ref(a), dkit::hadamard(g, t.nodes_[b].value));
    if (t.nodes_[b].requires_grad)
      accumulate(t.grad_ref(b), dkit::hadamard(g, t.nodes_[a].value));
  });
}

int Tape::scale(int a, double s) {
  Matrix v = dkit::scale(nodes_[a].value, s);
  bool req = nodes_[a].requires_grad;
  return push(std::move(v), req, {a}, [a, s](Tape& t, int self) {
    accumulate(t.grad_ref(a), dkit::scale(t.nodes_[self].grad, s));
  });
}

int Tape::add_rowvec(int a, int v) {
  const Matrix& A = nodes_[a].value;
  const Matrix& V = nodes_[v].value;
  if (V.rows != 1 || V.cols != A.cols)
    throw ShapeMismatchError("add_rowvec: v must be 1 x cols(a)");
  Matrix out = A;
  for (int r = 0; r < A.rows; ++r)
    for (int c = 0; c < A.cols; ++c) out(r, c) += V(0, c);
  bool req = any_requires({a, v});
  return push(std::move(out), req, {a, v}, [a, v](Tape& t, int self) {
    const Matrix& g = t.nodes_[self].grad;
    if (t.nodes_[a].requires_grad) accumulate(t.grad_ref(a), g);
    if (t.nodes_[v].requires_grad) {
      Matrix gv(1, g.cols);
      for (int r = 0; r < g.rows; ++r)
        for (int c = 0; c < g.cols; ++c) gv(0, c) += g(r, c);
      accumulate(t.grad_ref(v), gv);
    }
  });
}

int Tape::matmul(int a, int b) {
  Matrix v = dkit::matmul(nodes_[a].value, nodes_[b].value);
  bool req = any_requires({a, b});
  return push(std::move(v), req, {a, b}, [a, b](Tape& t, int self) {
    const Matrix& g = t.nodes_[self].grad;
    if (t.nodes_[a].requires_grad)
      accumulate(t.grad_ref(a), dkit::matmul(g, dkit::transpose(t.nodes_[b].value)));
    if (t.nodes_[b].requires_grad)
      accumulate(t.grad_ref(b), dkit::matmul(dkit::transpose(t.nodes_[a].value), g));
  });
}

int Tape::transpose(int a) {
  Matrix v = dkit::transpose(nodes_[a].value);
  bool req = nodes_[a].requires_grad;
  return push(std::move(v), req, {a}, [a](Tape& t, int self) {
    accumulate(t.grad_ref(a), dkit::transpose(t.nodes_[self].grad));
  });
}

int Tape::concat_cols(int a, int b) {
  const Matrix& A = nodes_[a].value;
  const Matrix& B = nodes_[b].value;
  if (A.rows != B.rows) throw ShapeMismatchError("concat_cols: row counts differ");
  Matrix out(A.rows, A.cols + B.cols);
  for (int r = 0; r < A.rows; ++r) {
    for (int c = 0; c < A.cols; ++c) out(r, c) = A(r, c);
    for (int c = 0; c < B.cols; ++c) out(r, A.cols + c) = B(r, c);
  }
  bool req = any_requires({a, b});
  int ac = A.cols;
  return push(std::move(out), req, {a, b}, [a, b, ac](Tape& t, int self) {
    const Matrix& g = t.nodes_[self].grad;
    if (t.nodes_[a].requires_grad) {
      Matrix ga(g.rows, ac);
      for (int r = 0; r < g.rows; ++r)
        for (int c = 0; c < ac; ++c) ga(r, c) = g(r, c);
      accumulate(t.grad_ref(a), ga);
    }
    if (t.nodes_[b].requires_grad) {
      Matrix gb(g.rows, g.cols - ac);
      for (int r = 0; r < g.rows; ++r)
        for (int c = ac; c < g.cols; ++c) gb(r, c - ac) = g(r, c);
      accumulate(t.grad_ref(b), gb);
    }
  });
}

int Tape::stack_rows(const std::vector<int>& row_ids) {
  if (row_ids.empty()) throw EmptyInputError("stack_rows: no rows");
  int cols = nodes_[row_ids[0]].value.cols;
  Matrix out(static_cast<int>(row_ids.size()), cols);
  for (size_t r = 0; r < row_ids.size(); ++r) {
    const Matrix& v = nodes_[row_ids[r]].value;
    if (v.rows != 1 || v.cols != cols)
      throw ShapeMismatchError("stack_rows: inputs must be equal-length row vectors");
    for (int c = 0; c < cols; ++c) out(static_cast<int>(r), c) = v(0, c);
  }
  bool req = any_requires(row_ids);
  std::vector<int> parents = row_ids;
  return push(std::move(out), req, parents, [row_ids](Tape& t, int self) {
    const Matrix& g = t.nodes_[self].grad;
    for (size_t r = 0; r < row_ids.size(); ++r) {
      if (!t.nodes_[row_ids[r]].requires_grad) continue;
      Matrix gr(1, g.cols);
      for (int c = 0; c < g.cols; ++c) gr(0, c) = g(static_cast<int>(r), c);
      accumulate(t.grad_ref(row_ids[r]), gr);
    }
  });
}

int Tape::slice_cols(int a, int c0, int c1) {
  const Matrix& A = nodes_[a].value;
  if (c0 < 0 || c1 > A.cols || c0 >= c1)
    throw ShapeMismatchError("slice_cols: bad range");
  Matrix out(A.rows, c1 - c0);
  for (int r = 0; r < A.rows; ++r)
    for (int c = c0; c < c1; ++c) out(r, c - c0) = A(r, c);
  bool req = nodes_[a].requires_grad;
  return push(std::move(out), req, {a}, [a, c0](Tape& t, int self) {
    const Matrix& g = t.nodes_[self].grad;
    Matrix ga(t.nodes_[a].value.rows, t.nodes_[a].value.cols);
    for (int r = 0; r < g.rows; ++r)
      for (int c = 0; c < g.cols; ++c) ga(r, c0 + c) = g(r, c);
    accumulate(t.grad_ref(a), ga);
  });
}

int Tape::row(int a, int r) {
  const Matrix& A = nodes_[a].value;
  Matrix out(1, A.cols);
  for (int c = 0; c < A.cols; ++c) out(0, c) = A(r, c);
  bool req = nodes_[a].requires_grad;
  return push(std::move(out), req, {a}, [a, r](Tape& t, int self) {
    const Matrix& g = t.nodes_[self].grad;
    Matrix ga(t.nodes_[a].value.rows, t.nodes_[a].value.cols);
    for (int c = 0; c < g.cols; ++c) ga(r, c) = g(0, c);
    accumulate(t.grad_ref(a), ga);
  });
}

int Tape::repeat_row(int v, int n) {
  const Matrix& V = nodes_[v].value;
  if (V.rows != 1) throw ShapeMismatchError("repeat_row: input must be a row vector");
  Matrix out(n, V.cols);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < V.cols; ++c) out(r, c) = V(0, c);
  bool req = nodes_[v].requires_grad;
  return push(std::move(out), req, {v}, [v](Tape& t, int self) {
    const Matrix& g = t.nodes_[self].grad;
    Matrix gv(1, g.cols);
    for (int r = 0; r < g.rows; ++r)
      for (int c = 0; c < g.cols; ++c) gv(0, c) += g(r, c);
    accumulate(t.grad_ref(v), gv);
  });
}

int Tape::mean_rows(int a) {
  const Matrix& A = nodes_[a].value;
  if (A.rows == 0) throw EmptyInputError("mean_rows: empty input");
  Matrix out(1, A.cols);
  for (int r = 0; r < A.rows; ++r)
    for (int c = 0; c < A.cols; ++c) out(0, c) += A(r, c);
  for (int c = 0; c < A.cols; ++c) out(0, c) /= A.rows;
  bool req = nodes_[a].requires_grad;
  return push(std::move(out), req, {a}, [a](Tape& t, int self) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& A = t.nodes_[a].value;
    Matrix ga(A.rows, A.cols);
    for (int r = 0; r < A.rows; ++r)
      for (int c = 0; c < A.cols; ++c) ga(r, c) = g(0, c) / A.rows;
    accumulate(t.grad_ref(a), ga);
  });
}

int Tape::sum_all(int a) {
  const Matrix& A = nodes_[a].value;
  double s = 0.0;
  for (double x : A.data) s += x;
  bool req = nodes_[a].requires_grad;
  return push(Matrix(1, 1, s), req, {a}, [a](Tape& t, int self) {
    double g = t.nodes_[self].grad(0, 0);
    const Matrix& A = t.nodes_[a].value;
    accumulate(t.grad_ref(a), Matrix(A.rows, A.cols, g));
  });
}

int Tape::mean_all(int a) {
  int n = nodes_[a].value.size();
  if (n == 0) throw EmptyInputError("mean_all: empty input");
  return scale(sum_all(a), 1.0 / n);
}

int Tape::relu(int a) {
  Matrix v = nodes_[a].value;
  for (double& x : v.data) x = x > 0.0 ? x : 0.0;
  bool req = nodes_[a].requires_grad;
  return push(std::move(v), req, {a}, [a](Tape& t, int self) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& A = t.nodes_[a].value;
    Matrix ga = g;
    for (int i = 0; i < ga.size(); ++i)
      if (A.data[i] <= 0.0) ga.data[i] = 0.0;
    accumulate(t.grad_ref(a), ga);
  });
}

int Tape::tanh_(int a) {
  Matrix v = nodes_[a].value;
  for (double& x : v.data) x = std::tanh(x);
  bool req = nodes_[a].requires_grad;
  return push(std::move(v), req, {a}, [a](Tape& t, int self) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& y = t.nodes_[self].value;
    Matrix ga = g;
    for (int i = 0; i < ga.size(); ++i) ga.data[i] *= 1.0 - y.data[i] * y.data[i];
    accumulate(t.grad_ref(a), ga);
  });
}

int Tape::sigmoid(int a) {
  Matrix v = nodes_[a].value;
  for (double& x : v.data) x = 1.0 / (1.0 + std::exp(-x));
  bool req = nodes_[a].requires_grad;
  return push(std::move(v), req, {a}, [a](Tape& t, int self) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& y = t.nodes_[self].value;
    Matrix ga = g;
    for (int i = 0; i < ga.size(); ++i) ga.data[i] *= y.data[i] * (1.0 - y.data[i]);
    accumulate(t.grad_ref(a), ga);
  });
}

int Tape::exp_(int a) {
  Matrix v = nodes_[a].value;
  for (double& x : v.data) x = std::exp(x);
  bool req = nodes_[a].requires_grad;
  return push(std::move(v), req, {a}, [a](Tape& t, int self) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& y = t.nodes_[self].value;
    accumulate(t.grad_ref(a), dkit::hadamard(g, y));
  });
}

int Tape::log_(int a) {
  Matrix v = nodes_[a].value;
  for (double& x : v.data) x = std::log(x);
  bool req = nodes_[a].requires_grad;
  return push(std::move(v), req, {a}, [a](Tape& t, int self) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& A = t.nodes_[a].value;
    Matrix ga = g;
    for (int i = 0; i < ga.size(); ++i) ga.data[i] /= A.data[i];
    accumulate(t.grad_ref(a), ga);
  });
}

int Tape::sqrt_(int a) {
  Matrix v = nodes_[a].value;
  for (double& x : v.data) x = std::sqrt(x);
  bool req = nodes_[a].requires_grad;
  return push(std::move(v), req, {a}, [a](Tape& t, int self) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& y = t.nodes_[self].value;
    Matrix ga = g;
    for (int i = 0; i < ga.size(); ++i) ga.data[i] *= 0.5 / y.data[i];
    accumulate(t.grad_ref(a), ga);
  });
}

int Tape::log_softmax_rows(int a) {
  const Matrix& A = nodes_[a].value;
  Matrix v(A.rows, A.cols);
  for (int r = 0; r < A.rows; ++r) {
    double m = A(r, 0);
    for (int c = 1; c < A.cols; ++c) m = std::max(m, A(r, c));
    double z = 0.0;
    for (int c = 0; c < A.cols; ++c) z += std::exp(A(r, c) - m);
    double lz = m + std::log(z);
    for (int c = 0; c < A.cols; ++c) v(r, c) = A(r, c) - lz;
  }
  bool req = nodes_[a].requires_grad;
  return push(std::move(v), req, {a}, [a](Tape& t, int self) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& y = t.nodes_[self].value;  // log-probs
    Matrix ga(g.rows, g.cols);
    for (int r = 0; r < g.rows; ++r) {
      double gsum = 0.0;
      for (int c = 0; c < g.cols; ++c) gsum += g(r, c);
      for (int c = 0; c < g.cols; ++c)
        ga(r, c) = g(r, c) - std::exp(y(r, c)) * gsum;
    }
    accumulate(t.grad_ref(a), ga);
  });
}

int Tape::div_(int a, int b) {
  Matrix v = nodes_[a].value;
  const Matrix& B = nodes_[b].value;
  if (!v.same_shape(B)) throw ShapeMismatchError("div: shapes differ");
  for (int i = 0; i < v.size(); ++i) v.data[i] /= B.data[i];
  bool req = any_requires({a, b});
  return push(std::move(v), req, {a, b}, [a, b](Tape& t, int self) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& B = t.nodes_[b].value;
    const Matrix& y = t.nodes_[self].value;
    if (t.nodes_[a].requires_grad) {
      Matrix ga = g;
      for (int i = 0; i < ga.size(); ++i) ga.data[i] /= B.data[i];
      accumulate(t.grad_ref(a), ga);
    }
    if (t.nodes_[b].requires_grad) {
      Matrix gb = g;
      for (int i = 0; i < gb.size(); ++i) gb.data[i] *= -y.data[i] / B.data[i];
      accumulate(t.grad_ref(b), gb);
    }
  });
}

int Tape::grl(int a, double lambda) {
  Matrix v = nodes_[a].value;
  bool req = nodes_[a].requires_grad;
  return push(std::move(v), req, {a}, [a, lambda](Tape& t, int self) {
    accumulate(t.grad_ref(a), dkit::scale(t.nodes_[self].grad, -lambda));
  });
}

int Tape::detach(int a) { return constant(nodes_[a].value); }

int Tape::conv1d(int x, int w, int b, int kernel, int stride, int pad) {
  const Matrix& X = nodes_[x].value;
  const Matrix& W = nodes_[w].value;
  const Matrix& B = nodes_[b].value;
  int cin = X.cols;
  int cout = W.rows;
  if (W.cols != kernel * cin) throw ShapeMismatchError("conv1d: weight width != k*cin");
  if (B.rows != 1 || B.cols != cout) throw ShapeMismatchError("conv1d: bad bias shape");
  int tout = (X.rows + 2 * pad - kernel) / stride + 1;
  if (tout < 1) throw EmptyInputError("conv1d: output length < 1");
  Matrix out(tout, cout);
  for (int to = 0; to < tout; ++to) {
    int t0 = to * stride - pad;
    for (int co = 0; co < cout; ++co) {
      double s = B(0, co);
      for (int k = 0; k < kernel; ++k) {
        int ti = t0 + k;
        if (ti < 0 || ti >= X.rows) continue;
        const double* wv = &W.data[static_cast<size_t>(co) * W.cols + k * cin];
        const double* xv = &X.data[static_cast<size_t>(ti) * cin];
        for (int ci = 0; ci < cin; ++ci) s += wv[ci] * xv[ci];
      }
      out(to, co) = s;
    }
  }
  bool req = any_requires({x, w, b});
  return push(std::move(out), req, {x, w, b},
              [x, w, b, kernel, stride, pad](Tape& t, int self) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& X = t.nodes_[x].value;
    const Matrix& W = t.nodes_[w].value;
    int cin = X.cols;
    bool need_x = t.nodes_[x].requires_grad;
    bool need_w = t.nodes_[w].requires_grad;
    bool need_b = t.nodes_[b].requires_grad;
    Matrix gx(X.rows, X.cols);
    Matrix gw(W.rows, W.cols);
    Matrix gb(1, W.rows);
    for (int to = 0; to < g.rows; ++to) {
      int t0 = to * stride - pad;
      for (int co = 0; co < g.cols; ++co) {
        double gv = g(to, co);
        if (gv == 0.0) continue;
        if (need_b) gb(0, co) += gv;
        for (int k = 0; k < kernel; ++k) {
          int ti = t0 + k;
          if (ti < 0 || ti >= X.rows) continue;
          for (int ci = 0; ci < cin; ++ci) {
            if (need_w) gw(co, k * cin + ci) += gv * X(ti, ci);
            if (need_x) gx(ti, ci) += gv * W(co, k * cin + ci);
          }
        }
      }
    }
    if (need_x) accumulate(t.grad_ref(x), gx);
    if (need_w) accumulate(t.grad_ref(w), gw);
    if (need_b) accumulate(t.grad_ref(b), gb);
  });
}

int Tape::embedding_lookup(int table, const std::vector<int>& tokens) {
  const Matrix& T = nodes_[table].value;
  Matrix out(static_cast<int>(tokens.size()), T.cols);
  for (size_t r = 0; r < tokens.size(); ++r) {
    if (tokens[r] < 0 || tokens[r] >= T.rows)
      throw ShapeMismatchError("embedding_lookup: token out of range");
    for (int c = 0; c < T.cols; ++c) out(static_cast<int>(r), c) = T(tokens[r], c);
  }
  bool req = nodes_[table].requires_grad;
  return push(std::move(out), req, {table}, [table, tokens](Tape& t, int self) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& T = t.nodes_[table].value;
    Matrix gt(T.rows, T.cols);
    for (size_t r = 0; r < tokens.size(); ++r)
      for (int c = 0; c < T.cols; ++c) gt(tokens[r], c) += g(static_cast<int>(r), c);
    accumulate(t.grad_ref(table), gt);
  });
}

int Tape::l2_normalize_rows(int a) {
  const Matrix& A = nodes_[a].value;
  Matrix v(A.rows, A.cols);
  std::vector<double> norms(A.rows);
  for (int r = 0; r < A.rows; ++r) {
    double n2 = 0.0;
    for (int c = 0; c < A.cols; ++c) n2 += A(r, c) * A(r, c);
    // floored so a collapsed row yields a zero direction with finite
    // gradients instead of aborting a training step
    double n = std::max(std::sqrt(n2), 1e-12);
    norms[r] = n;
    for (int c = 0; c < A.cols; ++c) v(r, c) = A(r, c) / n;
  }
  bool req = nodes_[a].requires_grad;
  return push(std::move(v), req, {a}, [a, norms](Tape& t, int self) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& y = t.nodes_[self].value;  // normalized rows
    Matrix ga(g.rows, g.cols);
    for (int r = 0; r < g.rows; ++r) {
      double dot = 0.0;
      for (int c = 0; c < g.cols; ++c) dot += g(r, c) * y(r, c);
      for (int c = 0; c < g.cols; ++c)
        ga(r, c) = (g(r, c) - dot * y(r, c)) / norms[r];
    }
    accumulate(t.grad_ref(a), ga);
  });
}

int Tape::cosine(int a, int b) {
  if (rows(a) != 1 || rows(b) != 1 || cols(a) != cols(b))
    throw ShapeMismatchError("cosine: expects two equal-length row vectors");
  // dot of floored-normalized rows; degenerate inputs give 0, not a throw
  int an = l2_normalize_rows(a);
  int bn = l2_normalize_rows(b);
  return sum_all(hadamard(an, bn));
}

}  // namespace dkit
