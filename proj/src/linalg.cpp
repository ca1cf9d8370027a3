#include "structdgp/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

namespace sdgp {

LowerTriangular::LowerTriangular(Matrix m) {
  if (m.rows() != m.cols()) {
    throw DimensionMismatch("LowerTriangular: matrix must be square");
  }
  for (Index i = 0; i < m.rows(); ++i) {
    if (!(m(i, i) > 0.0)) {
      throw NotPositiveDefinite("LowerTriangular: diagonal entry " +
                                std::to_string(i) + " is not positive");
    }
  }
  m.triangularView<Eigen::StrictlyUpper>().setZero();
  m_ = std::move(m);
}

Matrix LowerTriangular::product() const {
  Matrix out = Matrix::Zero(dim(), dim());
  out.selfadjointView<Eigen::Lower>().rankUpdate(m_);
  return out.selfadjointView<Eigen::Lower>();
}

bool is_symmetric(const Matrix& a, double rel_tol) {
  if (a.rows() != a.cols()) return false;
  const double scale = std::max(a.norm(), 1e-300);
  return (a - a.transpose()).norm() <= rel_tol * scale;
}

LowerTriangular cholesky(const Matrix& a, double jitter) {
  if (a.rows() != a.cols()) {
    throw DimensionMismatch("cholesky: matrix is not square");
  }
  if (!is_symmetric(a)) {
    throw DimensionMismatch("cholesky: matrix is not symmetric");
  }
  if (jitter < 0.0) {
    throw Error("cholesky: jitter must be non-negative");
  }
  Matrix shifted = a;
  shifted.diagonal().array() += jitter;
  Eigen::LLT<Matrix> llt(shifted);
  if (llt.info() != Eigen::Success || !llt.matrixLLT().allFinite()) {
    throw NotPositiveDefinite("cholesky: non-positive pivot (jitter " +
                              std::to_string(jitter) + ")");
  }
  Matrix l = llt.matrixL();
  if ((l.diagonal().array() <= 0.0).any()) {
    throw NotPositiveDefinite("cholesky: zero pivot");
  }
  return LowerTriangular(std::move(l));
}

std::pair<LowerTriangular, double> cholesky_escalating(const Matrix& a,
                                                       double jitter) {
  double current = jitter;
  for (;;) {
    try {
      return {cholesky(a, current), current};
    } catch (const NotPositiveDefinite&) {
      if (current >= kMaxJitter) throw;
      current = current > 0.0 ? std::min(current * 10.0, kMaxJitter)
                              : kDefaultJitter;
    }
  }
}

Matrix tri_solve(const LowerTriangular& l, const Matrix& b,
                 Transpose transpose) {
  if (l.dim() != b.rows()) {
    throw DimensionMismatch("tri_solve: factor has " + std::to_string(l.dim()) +
                            " rows, right-hand side has " +
                            std::to_string(b.rows()));
  }
  if (transpose == Transpose::No) {
    return l.view().solve(b);
  }
  return l.matrix().transpose().triangularView<Eigen::Upper>().solve(b);
}

Matrix chol_solve(const LowerTriangular& l, const Matrix& b) {
  return tri_solve(l, tri_solve(l, b), Transpose::Yes);
}

LowerTriangular block_chol_update(const LowerTriangular& l_prev,
                                  const Matrix& s_cross, const Matrix& s_new,
                                  double jitter) {
  const Index p = l_prev.dim();
  const Index q = s_new.rows();
  if (s_new.cols() != q || s_cross.rows() != p || s_cross.cols() != q) {
    throw DimensionMismatch("block_chol_update: inconsistent block shapes");
  }
  // A = L_prev, L_prev B^T = S_cross, C C^T = S_new - B B^T.
  const Matrix bt = p > 0 ? tri_solve(l_prev, s_cross) : Matrix(0, q);
  Matrix schur = s_new;
  if (p > 0) schur.noalias() -= bt.transpose() * bt;
  schur = 0.5 * (schur + schur.transpose());
  const LowerTriangular c = cholesky(schur, jitter);

  Matrix out = Matrix::Zero(p + q, p + q);
  out.topLeftCorner(p, p) = l_prev.matrix();
  out.bottomLeftCorner(q, p) = bt.transpose();
  out.bottomRightCorner(q, q) = c.matrix();
  return LowerTriangular(std::move(out));
}

std::pair<GaussianMoments, ConditionalMap> gaussian_condition(
    const GaussianMoments& joint, Index split_index) {
  const Index n = joint.dim();
  if (joint.cov.rows() != n || joint.cov.cols() != n) {
    throw DimensionMismatch("gaussian_condition: covariance shape");
  }
  if (split_index <= 0 || split_index >= n) {
    throw IndexOutOfRange("gaussian_condition: split index out of range");
  }
  const Index k = split_index;
  const Index m = n - k;
  GaussianMoments marginal{joint.mean.head(k), joint.cov.topLeftCorner(k, k)};

  const LowerTriangular la = cholesky_escalating(marginal.cov, 0.0).first;
  const Matrix c = joint.cov.topRightCorner(k, m);
  // gain = C^T A^{-1}
  const Matrix gain = chol_solve(la, c).transpose();
  const Matrix w = tri_solve(la, c);

  ConditionalMap cond;
  cond.gain = gain;
  cond.offset = joint.mean.tail(m) - gain * marginal.mean;
  cond.cov = joint.cov.bottomRightCorner(m, m) - w.transpose() * w;
  cond.cov = 0.5 * (cond.cov + cond.cov.transpose());
  return {std::move(marginal), std::move(cond)};
}

GaussianMoments gaussian_propagate(const Vector& offset, const Matrix& gain,
                                   const Matrix& noise_cov,
                                   const GaussianMoments& input) {
  if (gain.cols() != input.dim() || input.cov.rows() != input.dim() ||
      offset.size() != gain.rows() || noise_cov.rows() != gain.rows() ||
      noise_cov.cols() != gain.rows()) {
    throw DimensionMismatch("gaussian_propagate: inconsistent shapes");
  }
  GaussianMoments out;
  out.mean = offset + gain * input.mean;
  out.cov = noise_cov + gain * input.cov * gain.transpose();
  return out;
}

Vector diag_of_product(const Matrix& c, const Matrix& b, const Matrix& a) {
  if (b.cols() != a.rows() || c.rows() != b.rows() || c.cols() != a.cols()) {
    throw DimensionMismatch("diag_of_product: C^T B A is not square");
  }
  const Matrix ba = b * a;
  return c.cwiseProduct(ba).colwise().sum().transpose();
}

Matrix pca_map(const Matrix& x, Index d_out) {
  const Index d_in = x.cols();
  Matrix w = Matrix::Zero(d_in, d_out);
  if (x.rows() == 0 || d_in == 0 || d_out == 0) return w;

  const RowVector mean = x.colwise().mean();
  const Matrix centered = x.rowwise() - mean;
  const Matrix cov =
      centered.transpose() * centered / static_cast<double>(x.rows());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);

  std::vector<Index> order(static_cast<size_t>(d_in));
  std::iota(order.begin(), order.end(), Index{0});
  const Vector& values = eig.eigenvalues();
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return values(a) > values(b); });

  const double top = std::max(values.maxCoeff(), 0.0);
  const double floor = 1e-12 * std::max(1.0, top);
  for (Index j = 0; j < std::min(d_in, d_out); ++j) {
    const Index src = order[static_cast<size_t>(j)];
    if (values(src) <= floor) continue;
    Vector col = eig.eigenvectors().col(src);
    Index arg = 0;
    col.cwiseAbs().maxCoeff(&arg);
    if (col(arg) < 0.0) col = -col;
    w.col(j) = col;
  }
  return w;
}

}  // namespace sdgp
