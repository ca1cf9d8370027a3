#pragma once

#include <utility>

#include <Eigen/Dense>

#include "structdgp/error.hpp"

namespace sdgp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;

inline constexpr double kDefaultJitter = 1e-6;
inline constexpr double kMaxJitter = 1e-2;
inline constexpr double kSymmetryTolerance = 1e-8;

/// Square lower-triangular matrix with a strictly positive diagonal.
class LowerTriangular {
 public:
  LowerTriangular() = default;

  /// Takes the lower triangle of `m`; throws if the diagonal is not positive.
  explicit LowerTriangular(Matrix m);

  Index dim() const { return m_.rows(); }
  const Matrix& matrix() const { return m_; }
  Eigen::TriangularView<const Matrix, Eigen::Lower> view() const {
    return m_.triangularView<Eigen::Lower>();
  }

  /// L * L^T.
  Matrix product() const;

  static LowerTriangular identity(Index n) {
    return LowerTriangular(Matrix::Identity(n, n));
  }

 private:
  Matrix m_;
};

struct GaussianMoments {
  Vector mean;
  Matrix cov;

  Index dim() const { return mean.size(); }
};

/// Affine Gaussian map y | x ~ N(offset + gain * x, cov).
struct ConditionalMap {
  Vector offset;
  Matrix gain;
  Matrix cov;
};

enum class Transpose { No, Yes };

bool is_symmetric(const Matrix& a, double rel_tol = kSymmetryTolerance);

/// Factor of A + jitter*I. Throws NotPositiveDefinite on a non-positive pivot.
LowerTriangular cholesky(const Matrix& a, double jitter = 0.0);

/// Like cholesky(), but on failure retries with jitter multiplied by 10 until
/// kMaxJitter. Returns the factor together with the jitter that succeeded.
std::pair<LowerTriangular, double> cholesky_escalating(
    const Matrix& a, double jitter = kDefaultJitter);

/// Solves L X = B, or L^T X = B when transposed.
Matrix tri_solve(const LowerTriangular& l, const Matrix& b,
                 Transpose transpose = Transpose::No);

/// Solves (L L^T) X = B.
Matrix chol_solve(const LowerTriangular& l, const Matrix& b);

/// Extends the factor of the top-left block to the factor of
///   [ L_prev L_prev^T   S_cross ]
///   [ S_cross^T         S_new   ]
/// without refactoring the top-left block.
LowerTriangular block_chol_update(const LowerTriangular& l_prev,
                                  const Matrix& s_cross, const Matrix& s_new,
                                  double jitter = 0.0);

/// Splits a joint Gaussian at `split_index` into the marginal of the leading
/// block x and the conditional map for y | x.
std::pair<GaussianMoments, ConditionalMap> gaussian_condition(
    const GaussianMoments& joint, Index split_index);

/// Moments of offset + gain * x + noise with x ~ input, noise ~ N(0, noise_cov).
GaussianMoments gaussian_propagate(const Vector& offset, const Matrix& gain,
                                   const Matrix& noise_cov,
                                   const GaussianMoments& input);

/// diag(C^T B A) as column sums of C .* (B A).
Vector diag_of_product(const Matrix& c, const Matrix& b, const Matrix& a);

/// D_in x d_out projection onto the leading principal directions of the rows
/// of `x`. Columns are sign-fixed so that their largest-magnitude entry is
/// positive. Directions beyond D_in or with no variance are zero columns.
Matrix pca_map(const Matrix& x, Index d_out);

}  // namespace sdgp
