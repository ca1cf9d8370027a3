#pragma once

#include "structdgp/linalg.hpp"

namespace sdgp {

/// Squared-exponential kernel with one lengthscale per input dimension.
/// Parameters live on the log scale so that optimizers work unconstrained.
struct KernelParams {
  Vector log_lengthscales;
  double log_variance = 0.0;

  static KernelParams with_dim(Index dim, double lengthscale = 1.0,
                               double variance = 1.0);

  Index dim() const { return log_lengthscales.size(); }
  Vector lengthscales() const { return log_lengthscales.array().exp(); }
  double variance() const;
};

/// K(X, X2) with entries variance * exp(-0.5 * sum_d (x_d - x2_d)^2 / l_d^2).
Matrix kmat(const KernelParams& params, const Matrix& x, const Matrix& x2);

/// Inducing-point conditional quantities for the rows of X:
///   ktilde = K_XM K_MM^{-1}              (N x M)
///   kdiag  = diag(K_XX - K_XM K_MM^{-1} K_MX)
struct ConditionalTerms {
  Matrix ktilde;
  Vector kdiag;
};

ConditionalTerms conditional_terms(const KernelParams& params, const Matrix& z,
                                   const Matrix& x, double jitter);

/// Same as above with a precomputed factor of K_MM + jitter*I.
ConditionalTerms conditional_terms(const KernelParams& params, const Matrix& z,
                                   const LowerTriangular& kmm_chol,
                                   const Matrix& x);

/// Factor of K_MM + jitter*I, escalating the jitter when needed.
LowerTriangular kmm_cholesky(const KernelParams& params, const Matrix& z,
                             double jitter);

}  // namespace sdgp
