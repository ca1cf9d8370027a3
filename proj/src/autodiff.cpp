#include "structdgp/autodiff.hpp"

#include <cmath>
#include <string>

#include "structdgp/kernel.hpp"

namespace sdgp::ad {

const Matrix& Var::value() const { return tape_->value(id_); }

Var Tape::variable(Matrix value) {
  return Var(this, push(std::move(value), true, nullptr));
}

Var Tape::constant(Matrix value) {
  return Var(this, push(std::move(value), false, nullptr));
}

int Tape::push(Matrix value, bool requires_grad, Backward backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::accumulate(int id, const Matrix& g) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var output) {
  if (output.rows() != 1 || output.cols() != 1) {
    throw DimensionMismatch("backward: output must be a scalar");
  }
  for (Node& n : nodes_) n.grad.resize(0, 0);
  accumulate(output.id(), Matrix::Ones(1, 1));
  for (int id = output.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad || !n.backward || n.grad.size() == 0) continue;
    // Parents always have smaller ids, so this node's gradient is final.
    n.backward(*this, n.grad, id);
  }
}

Matrix Tape::gradient(Var v) const {
  const Node& n = nodes_[static_cast<size_t>(v.id())];
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

namespace {

bool needs(Var v) { return v.tape()->requires_grad(v.id()); }

bool any_grad(std::initializer_list<Var> vs) {
  for (const Var& v : vs) {
    if (needs(v)) return true;
  }
  return false;
}

void same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionMismatch(std::string(op) + ": shape mismatch (" +
                            std::to_string(a.rows()) + "x" +
                            std::to_string(a.cols()) + " vs " +
                            std::to_string(b.rows()) + "x" +
                            std::to_string(b.cols()) + ")");
  }
}

Var make(Var like, Matrix value, bool grad, Tape::Backward fn) {
  Tape& t = *like.tape();
  return Var(&t, t.push(std::move(value), grad, std::move(fn)));
}

// Strict lower part plus half the diagonal.
Matrix phi(const Matrix& x) {
  Matrix out = x.triangularView<Eigen::Lower>();
  out.diagonal() *= 0.5;
  return out;
}

}  // namespace

Var add(Var a, Var b) {
  same_shape(a, b, "add");
  const int ia = a.id(), ib = b.id();
  return make(a, a.value() + b.value(), any_grad({a, b}),
              [ia, ib](Tape& tp, const Matrix& g, int) {
                tp.accumulate(ia, g);
                tp.accumulate(ib, g);
              });
}

Var sub(Var a, Var b) {
  same_shape(a, b, "sub");
  const int ia = a.id(), ib = b.id();
  return make(a, a.value() - b.value(), any_grad({a, b}),
              [ia, ib](Tape& tp, const Matrix& g, int) {
                tp.accumulate(ia, g);
                if (tp.requires_grad(ib)) tp.accumulate(ib, -g);
              });
}

Var mul(Var a, Var b) {
  same_shape(a, b, "mul");
  const int ia = a.id(), ib = b.id();
  return make(a, a.value().cwiseProduct(b.value()), any_grad({a, b}),
              [ia, ib](Tape& tp, const Matrix& g, int) {
                if (tp.requires_grad(ia))
                  tp.accumulate(ia, g.cwiseProduct(tp.value(ib)));
                if (tp.requires_grad(ib))
                  tp.accumulate(ib, g.cwiseProduct(tp.value(ia)));
              });
}

Var div(Var a, Var b) {
  same_shape(a, b, "div");
  const int ia = a.id(), ib = b.id();
  return make(a, a.value().cwiseQuotient(b.value()), any_grad({a, b}),
              [ia, ib](Tape& tp, const Matrix& g, int self) {
                const Matrix ga = g.cwiseQuotient(tp.value(ib));
                if (tp.requires_grad(ib))
                  tp.accumulate(ib, -ga.cwiseProduct(tp.value(self)));
                tp.accumulate(ia, ga);
              });
}

Var add_prod(Var acc, Var a, Var b) {
  same_shape(a, b, "add_prod");
  same_shape(acc, a, "add_prod");
  const int ic = acc.id(), ia = a.id(), ib = b.id();
  return make(acc, acc.value() + a.value().cwiseProduct(b.value()),
              any_grad({acc, a, b}),
              [ic, ia, ib](Tape& tp, const Matrix& g, int) {
                tp.accumulate(ic, g);
                if (tp.requires_grad(ia))
                  tp.accumulate(ia, g.cwiseProduct(tp.value(ib)));
                if (tp.requires_grad(ib))
                  tp.accumulate(ib, g.cwiseProduct(tp.value(ia)));
              });
}

Var sub_prod(Var acc, Var a, Var b) {
  same_shape(a, b, "sub_prod");
  same_shape(acc, a, "sub_prod");
  const int ic = acc.id(), ia = a.id(), ib = b.id();
  return make(acc, acc.value() - a.value().cwiseProduct(b.value()),
              any_grad({acc, a, b}),
              [ic, ia, ib](Tape& tp, const Matrix& g, int) {
                tp.accumulate(ic, g);
                if (tp.requires_grad(ia))
                  tp.accumulate(ia, -g.cwiseProduct(tp.value(ib)));
                if (tp.requires_grad(ib))
                  tp.accumulate(ib, -g.cwiseProduct(tp.value(ia)));
              });
}

Var neg(Var a) { return scale(a, -1.0); }

Var scale(Var a, double c) {
  const int ia = a.id();
  return make(a, c * a.value(), needs(a),
              [ia, c](Tape& tp, const Matrix& g, int) { tp.accumulate(ia, c * g); });
}

Var add_constant(Var a, const Matrix& c) {
  if (c.rows() != a.rows() || c.cols() != a.cols()) {
    throw DimensionMismatch("add_constant: shape mismatch");
  }
  const int ia = a.id();
  return make(a, a.value() + c, needs(a),
              [ia](Tape& tp, const Matrix& g, int) { tp.accumulate(ia, g); });
}

Var shift(Var a, double c) {
  const int ia = a.id();
  return make(a, (a.value().array() + c).matrix(), needs(a),
              [ia](Tape& tp, const Matrix& g, int) { tp.accumulate(ia, g); });
}

Var sqrt(Var a) {
  const int ia = a.id();
  return make(a, a.value().cwiseSqrt(), needs(a),
              [ia](Tape& tp, const Matrix& g, int self) {
                tp.accumulate(ia, (0.5 * g.array() / tp.value(self).array()).matrix());
              });
}

Var exp(Var a) {
  const int ia = a.id();
  return make(a, a.value().array().exp().matrix(), needs(a),
              [ia](Tape& tp, const Matrix& g, int self) {
                tp.accumulate(ia, g.cwiseProduct(tp.value(self)));
              });
}

Var log(Var a) {
  const int ia = a.id();
  return make(a, a.value().array().log().matrix(), needs(a),
              [ia](Tape& tp, const Matrix& g, int) {
                tp.accumulate(ia, g.cwiseQuotient(tp.value(ia)));
              });
}

Var square(Var a) {
  const int ia = a.id();
  return make(a, a.value().cwiseAbs2(), needs(a),
              [ia](Tape& tp, const Matrix& g, int) {
                tp.accumulate(ia, 2.0 * g.cwiseProduct(tp.value(ia)));
              });
}

Var broadcast(Var s, Index rows, Index cols) {
  if (s.rows() != 1 || s.cols() != 1) {
    throw DimensionMismatch("broadcast: argument must be 1x1");
  }
  const int is = s.id();
  return make(s, Matrix::Constant(rows, cols, s.scalar()), needs(s),
              [is](Tape& tp, const Matrix& g, int) {
                tp.accumulate(is, Matrix::Constant(1, 1, g.sum()));
              });
}

Var sum(Var a) {
  const int ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return make(a, Matrix::Constant(1, 1, a.value().sum()), needs(a),
              [ia, r, c](Tape& tp, const Matrix& g, int) {
                tp.accumulate(ia, Matrix::Constant(r, c, g(0, 0)));
              });
}

Var sum_squares(Var a) {
  const int ia = a.id();
  return make(a, Matrix::Constant(1, 1, a.value().squaredNorm()), needs(a),
              [ia](Tape& tp, const Matrix& g, int) {
                tp.accumulate(ia, 2.0 * g(0, 0) * tp.value(ia));
              });
}

Var trace(Var a) {
  if (a.rows() != a.cols()) throw DimensionMismatch("trace: matrix not square");
  const int ia = a.id();
  const Index n = a.rows();
  return make(a, Matrix::Constant(1, 1, a.value().trace()), needs(a),
              [ia, n](Tape& tp, const Matrix& g, int) {
                tp.accumulate(ia, g(0, 0) * Matrix::Identity(n, n));
              });
}

Var log_diag_sum(Var a) {
  if (a.rows() != a.cols()) {
    throw DimensionMismatch("log_diag_sum: matrix not square");
  }
  const int ia = a.id();
  return make(a, Matrix::Constant(1, 1, a.value().diagonal().array().log().sum()),
              needs(a), [ia](Tape& tp, const Matrix& g, int) {
                const Matrix& v = tp.value(ia);
                Matrix out = Matrix::Zero(v.rows(), v.cols());
                out.diagonal() = g(0, 0) * v.diagonal().cwiseInverse();
                tp.accumulate(ia, out);
              });
}

Var matmul(Var a, Var b, bool ta, bool tb) {
  const Index inner_a = ta ? a.rows() : a.cols();
  const Index inner_b = tb ? b.cols() : b.rows();
  if (inner_a != inner_b) throw DimensionMismatch("matmul: inner dimensions");
  Matrix out;
  if (!ta && !tb) out.noalias() = a.value() * b.value();
  if (ta && !tb) out.noalias() = a.value().transpose() * b.value();
  if (!ta && tb) out.noalias() = a.value() * b.value().transpose();
  if (ta && tb) out.noalias() = a.value().transpose() * b.value().transpose();
  const int ia = a.id(), ib = b.id();
  return make(a, std::move(out), any_grad({a, b}),
              [ia, ib, ta, tb](Tape& tp, const Matrix& g, int) {
                const Matrix& av = tp.value(ia);
                const Matrix& bv = tp.value(ib);
                if (tp.requires_grad(ia)) {
                  // d op(A) = G op(B)^T
                  Matrix dop = tb ? Matrix(g * bv) : Matrix(g * bv.transpose());
                  tp.accumulate(ia, ta ? Matrix(dop.transpose()) : dop);
                }
                if (tp.requires_grad(ib)) {
                  // d op(B) = op(A)^T G
                  Matrix dop = ta ? Matrix(av * g) : Matrix(av.transpose() * g);
                  tp.accumulate(ib, tb ? Matrix(dop.transpose()) : dop);
                }
              });
}

Var col_dot(Var a, Var b) {
  same_shape(a, b, "col_dot");
  const int ia = a.id(), ib = b.id();
  Matrix out = a.value().cwiseProduct(b.value()).colwise().sum().transpose();
  return make(a, std::move(out), any_grad({a, b}),
              [ia, ib](Tape& tp, const Matrix& g, int) {
                const auto gr = g.col(0).transpose().array();
                if (tp.requires_grad(ia))
                  tp.accumulate(ia, (tp.value(ib).array().rowwise() * gr).matrix());
                if (tp.requires_grad(ib))
                  tp.accumulate(ib, (tp.value(ia).array().rowwise() * gr).matrix());
              });
}

Var diag_quad(Var a, Var b, Var c) {
  if (b.rows() != a.rows() || b.cols() != c.rows() || a.cols() != c.cols()) {
    throw DimensionMismatch("diag_quad: shapes");
  }
  const int ia = a.id(), ib = b.id(), ic = c.id();
  Matrix bc;
  bc.noalias() = b.value() * c.value();
  Matrix out = a.value().cwiseProduct(bc).colwise().sum().transpose();
  return make(a, std::move(out), any_grad({a, b, c}),
              [ia, ib, ic](Tape& tp, const Matrix& g, int) {
                const auto gr = g.col(0).transpose().array();
                const Matrix& av = tp.value(ia);
                const Matrix& bv = tp.value(ib);
                const Matrix& cv = tp.value(ic);
                if (tp.requires_grad(ia)) {
                  Matrix bcg;
                  bcg.noalias() = bv * cv;
                  bcg.array().rowwise() *= gr;
                  tp.accumulate(ia, bcg);
                }
                if (!tp.requires_grad(ib) && !tp.requires_grad(ic)) return;
                Matrix ag = (av.array().rowwise() * gr).matrix();
                if (tp.requires_grad(ib)) {
                  Matrix gb;
                  gb.noalias() = ag * cv.transpose();
                  tp.accumulate(ib, gb);
                }
                if (tp.requires_grad(ic)) {
                  Matrix gc;
                  gc.noalias() = bv.transpose() * ag;
                  tp.accumulate(ic, gc);
                }
              });
}

Var column(Var a, Index j) {
  if (j < 0 || j >= a.cols()) throw IndexOutOfRange("column: index");
  const int ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return make(a, a.value().col(j), needs(a),
              [ia, j, r, c](Tape& tp, const Matrix& g, int) {
                Matrix out = Matrix::Zero(r, c);
                out.col(j) = g.col(0);
                tp.accumulate(ia, out);
              });
}

Var hcat(const std::vector<Var>& cols) {
  if (cols.empty()) throw DimensionMismatch("hcat: no inputs");
  const Index r = cols.front().rows();
  Index total = 0;
  bool grad = false;
  for (const Var& v : cols) {
    if (v.rows() != r) throw DimensionMismatch("hcat: row counts differ");
    total += v.cols();
    grad = grad || needs(v);
  }
  Matrix out(r, total);
  std::vector<std::pair<int, Index>> parts;
  Index at = 0;
  for (const Var& v : cols) {
    out.middleCols(at, v.cols()) = v.value();
    parts.emplace_back(v.id(), v.cols());
    at += v.cols();
  }
  return make(cols.front(), std::move(out), grad,
              [parts](Tape& tp, const Matrix& g, int) {
                Index off = 0;
                for (const auto& [id, w] : parts) {
                  if (tp.requires_grad(id)) tp.accumulate(id, g.middleCols(off, w));
                  off += w;
                }
              });
}

Var rbf(Var x1, Var x2, Var log_ls, Var log_var) {
  if (x1.cols() != x2.cols() || log_ls.rows() != x1.cols() || log_ls.cols() != 1 ||
      log_var.rows() != 1 || log_var.cols() != 1) {
    throw DimensionMismatch("rbf: shapes");
  }
  KernelParams kp;
  kp.log_lengthscales = log_ls.value().col(0);
  kp.log_variance = log_var.scalar();
  Matrix k = kmat(kp, x1.value(), x2.value());
  const int i1 = x1.id(), i2 = x2.id(), il = log_ls.id(), iv = log_var.id();
  return make(x1, std::move(k), any_grad({x1, x2, log_ls, log_var}),
              [i1, i2, il, iv](Tape& tp, const Matrix& g, int self) {
                const Matrix gk = g.cwiseProduct(tp.value(self));
                if (tp.requires_grad(iv))
                  tp.accumulate(iv, Matrix::Constant(1, 1, gk.sum()));
                const Matrix& a = tp.value(i1);
                const Matrix& b = tp.value(i2);
                const Eigen::ArrayXd inv_l2 =
                    (-2.0 * tp.value(il).col(0).array()).exp();
                const Vector rs = gk.rowwise().sum();
                const Vector cs = gk.colwise().sum().transpose();
                Matrix gb;
                gb.noalias() = gk * b;        // n1 x d
                Matrix gta;
                gta.noalias() = gk.transpose() * a;  // n2 x d
                if (tp.requires_grad(i1)) {
                  Matrix d1 = gb - rs.asDiagonal() * a;
                  d1.array().rowwise() *= inv_l2.transpose();
                  tp.accumulate(i1, d1);
                }
                if (tp.requires_grad(i2)) {
                  Matrix d2 = gta - cs.asDiagonal() * b;
                  d2.array().rowwise() *= inv_l2.transpose();
                  tp.accumulate(i2, d2);
                }
                if (tp.requires_grad(il)) {
                  const Eigen::ArrayXd t1 =
                      (a.array().square().colwise() * rs.array()).colwise().sum().transpose();
                  const Eigen::ArrayXd t2 =
                      (b.array().square().colwise() * cs.array()).colwise().sum().transpose();
                  const Eigen::ArrayXd t3 =
                      a.cwiseProduct(gb).colwise().sum().transpose().array();
                  tp.accumulate(il, ((t1 + t2 - 2.0 * t3) * inv_l2).matrix());
                }
              });
}

Var cholesky(Var a, double jitter) {
  auto [chol, used] = cholesky_escalating(a.value(), jitter);
  (void)used;
  const int ia = a.id();
  return make(a, chol.matrix(), needs(a),
              [ia](Tape& tp, const Matrix& g, int self) {
                const Matrix& l = tp.value(self);
                const auto lt = l.transpose().triangularView<Eigen::Upper>();
                Matrix lbar = g.triangularView<Eigen::Lower>();
                Matrix p = phi(l.transpose() * lbar);
                // S = L^{-T} P L^{-1}
                Matrix s = lt.solve(p);
                s = lt.solve(Matrix(s.transpose())).transpose();
                tp.accumulate(ia, 0.5 * (s + s.transpose()));
              });
}

Var tri_solve(Var l, Var b, bool transpose) {
  if (l.rows() != l.cols() || l.rows() != b.rows()) {
    throw DimensionMismatch("tri_solve: shapes");
  }
  const auto lv = l.value().triangularView<Eigen::Lower>();
  Matrix x = transpose ? Matrix(l.value().transpose().triangularView<Eigen::Upper>().solve(b.value()))
                       : Matrix(lv.solve(b.value()));
  const int il = l.id(), ib = b.id();
  return make(l, std::move(x), any_grad({l, b}),
              [il, ib, transpose](Tape& tp, const Matrix& g, int self) {
                const Matrix& lm = tp.value(il);
                const Matrix& x2 = tp.value(self);
                Matrix bbar =
                    transpose
                        ? Matrix(lm.triangularView<Eigen::Lower>().solve(g))
                        : Matrix(lm.transpose().triangularView<Eigen::Upper>().solve(g));
                if (tp.requires_grad(il)) {
                  Matrix gl = transpose ? Matrix(x2 * bbar.transpose())
                                        : Matrix(bbar * x2.transpose());
                  tp.accumulate(il, -Matrix(gl.triangularView<Eigen::Lower>()));
                }
                if (tp.requires_grad(ib)) tp.accumulate(ib, bbar);
              });
}

Var lower_from_param(Var theta) {
  if (theta.rows() != theta.cols()) {
    throw DimensionMismatch("lower_from_param: matrix not square");
  }
  Matrix l = theta.value().triangularView<Eigen::StrictlyLower>();
  l.diagonal() = theta.value().diagonal().array().exp().matrix();
  const int it = theta.id();
  return make(theta, std::move(l), needs(theta),
              [it](Tape& tp, const Matrix& g, int self) {
                Matrix out = g.triangularView<Eigen::StrictlyLower>();
                out.diagonal() = g.diagonal().cwiseProduct(tp.value(self).diagonal());
                tp.accumulate(it, out);
              });
}

}  // namespace sdgp::ad
