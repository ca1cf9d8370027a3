#pragma once

#include <functional>
#include <vector>

#include "structdgp/linalg.hpp"

/// Minimal reverse-mode differentiation over dense matrices. Every node holds
/// an Eigen matrix; column vectors carry per-row quantities of a batch so that
/// small per-datapoint algebra vectorises over the batch.
namespace sdgp::ad {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  explicit operator bool() const { return valid(); }
  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  // Receives the node's incoming gradient and its own id.
  using Backward = std::function<void(Tape&, const Matrix&, int)>;

  /// Leaf whose gradient is tracked.
  Var variable(Matrix value);
  /// Leaf without gradient.
  Var constant(Matrix value);
  Var constant_scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

  const Matrix& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  bool requires_grad(int id) const {
    return nodes_[static_cast<size_t>(id)].requires_grad;
  }

  /// Seeds d(output)/d(output) = 1 for a 1x1 output and propagates.
  void backward(Var output);
  /// Gradient of the last backward() output; zeros if the node was unused.
  Matrix gradient(Var v) const;

  /// Adds `g` to the gradient of node `id` (ignored for constants).
  void accumulate(int id, const Matrix& g);

  int push(Matrix value, bool requires_grad, Backward backward);
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

// Elementwise arithmetic (equal shapes).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
/// acc + a .* b
Var add_prod(Var acc, Var a, Var b);
/// acc - a .* b
Var sub_prod(Var acc, Var a, Var b);
Var neg(Var a);
Var scale(Var a, double c);
Var add_constant(Var a, const Matrix& c);
Var shift(Var a, double c);
Var sqrt(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
/// 1x1 `s` repeated into a rows x cols matrix.
Var broadcast(Var s, Index rows, Index cols);

// Reductions to 1x1.
Var sum(Var a);
Var sum_squares(Var a);
Var trace(Var a);
/// sum_i log a_ii
Var log_diag_sum(Var a);

/// op(a) * op(b)
Var matmul(Var a, Var b, bool transpose_a = false, bool transpose_b = false);
/// Column sums of a .* b as a column vector.
Var col_dot(Var a, Var b);
/// diag(A^T B C) = column sums of A .* (B C), as a column vector.
Var diag_quad(Var a, Var b, Var c);

Var column(Var a, Index j);
/// Columns side by side.
Var hcat(const std::vector<Var>& cols);

/// Squared-exponential kernel matrix between the rows of x1 and x2 with
/// log lengthscales (d x 1) and log variance (1x1).
Var rbf(Var x1, Var x2, Var log_lengthscales, Var log_variance);

/// Lower Cholesky factor of a + jitter I. The jitter escalates by 10x up to
/// kMaxJitter when factorisation fails; it is treated as a constant.
Var cholesky(Var a, double jitter = 0.0);
/// L^{-1} B or L^{-T} B for lower-triangular L.
Var tri_solve(Var l, Var b, bool transpose = false);
/// Lower-triangular factor from an unconstrained square matrix: strict lower
/// part copied, diagonal exponentiated, upper part ignored.
Var lower_from_param(Var theta);

}  // namespace sdgp::ad
