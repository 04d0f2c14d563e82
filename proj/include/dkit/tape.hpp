#pragma once

#include <vector>

#include "dkit/numerics.hpp"

namespace dkit {

/// Reverse-mode tape over Matrix values. Nodes are appended in evaluation
/// order, so reverse iteration is a valid topological order for backward.
/// A fresh tape is built per training step; ids index into the node list.
///
/// Only the operations the loss and model contracts require are provided;
/// there is no broadcasting beyond the explicit row-repeat / row-bias ops.
class Tape {
 public:
  /// Tracked leaf (parameters and inputs whose gradients are wanted).
  int leaf(const Matrix& m);
  /// Untracked value; backward never propagates into it.
  int constant(const Matrix& m);

  const Matrix& value(int id) const { return nodes_[id].value; }
  const Matrix& grad(int id) const { return nodes_[id].grad; }
  int rows(int id) const { return nodes_[id].value.rows; }
  int cols(int id) const { return nodes_[id].value.cols; }

  /// Seeds d(root)/d(root) = 1 (root must be 1x1) and accumulates gradients
  /// into every tracked node.
  void backward(int root);

  // elementwise / structural
  int add(int a, int b);
  int sub(int a, int b);
  int hadamard(int a, int b);
  int scale(int a, double s);
  int add_rowvec(int a, int v);   // v is 1 x cols, broadcast over rows
  int matmul(int a, int b);
  int transpose(int a);
  int concat_cols(int a, int b);
  int stack_rows(const std::vector<int>& row_ids);  // each 1 x d
  int slice_cols(int a, int c0, int c1);  // half-open [c0, c1)
  int row(int a, int r);
  int repeat_row(int v, int n);
  int mean_rows(int a);  // 1 x cols
  int sum_all(int a);    // 1 x 1
  int mean_all(int a);   // 1 x 1

  // nonlinearities
  int relu(int a);
  int tanh_(int a);
  int sigmoid(int a);
  int exp_(int a);
  int log_(int a);
  int sqrt_(int a);
  int log_softmax_rows(int a);

  // scalar (1x1) arithmetic
  int div_(int a, int b);  // elementwise; used for 1x1 ratios

  /// Identity forward; multiplies the upstream gradient by -lambda on the
  /// backward pass.
  int grl(int a, double lambda);
  /// Stops gradient flow; value is copied.
  int detach(int a);

  /// 1-D convolution over time. x is T x Cin, weight is Cout x (k*Cin),
  /// bias 1 x Cout. Output is ceil((T + 2*pad - k + 1) / stride) rows, with
  /// out-of-range taps treated as zero.
  int conv1d(int x, int w, int b, int kernel, int stride, int pad);

  /// Gathers rows of an embedding table; backward scatter-adds.
  int embedding_lookup(int table, const std::vector<int>& tokens);

  /// Rows l2-normalized; gradient flows through the normalization.
  int l2_normalize_rows(int a);

  /// cos(a, b) for two 1 x d row vectors, as a 1 x 1 node.
  int cosine(int a, int b);

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::vector<int> parents;
    std::function<void(Tape&, int)> back;  // (tape, self id)
  };

  int push(Matrix value, bool requires_grad_flag, std::vector<int> parents,
           std::function<void(Tape&, int)> back);
  bool any_requires(const std::vector<int>& ids) const;
  Matrix& grad_ref(int id) { return nodes_[id].grad; }

  std::vector<Node> nodes_;
};

}  // namespace dkit
