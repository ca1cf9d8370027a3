#include "structdgp/kernel.hpp"

#include <cmath>
#include <string>

namespace sdgp {

KernelParams KernelParams::with_dim(Index dim, double lengthscale,
                                    double variance) {
  KernelParams p;
  p.log_lengthscales = Vector::Constant(dim, std::log(lengthscale));
  p.log_variance = std::log(variance);
  return p;
}

double KernelParams::variance() const { return std::exp(log_variance); }

Matrix kmat(const KernelParams& params, const Matrix& x, const Matrix& x2) {
  if (x.cols() != params.dim() || x2.cols() != params.dim()) {
    throw DimensionMismatch("kmat: inputs have " + std::to_string(x.cols()) +
                            "/" + std::to_string(x2.cols()) +
                            " columns, kernel expects " +
                            std::to_string(params.dim()));
  }
  const RowVector inv_ls = (-params.log_lengthscales.array()).exp().matrix().transpose();
  const Matrix xs = x.array().rowwise() * inv_ls.array();
  const Matrix x2s = x2.array().rowwise() * inv_ls.array();
  const Vector n1 = xs.rowwise().squaredNorm();
  const Vector n2 = x2s.rowwise().squaredNorm();
  Matrix sq = -2.0 * xs * x2s.transpose();
  sq.colwise() += n1;
  sq.rowwise() += n2.transpose();
  // Clamp tiny negative distances from cancellation.
  sq = sq.cwiseMax(0.0);
  return params.variance() * (-0.5 * sq.array()).exp().matrix();
}

LowerTriangular kmm_cholesky(const KernelParams& params, const Matrix& z,
                             double jitter) {
  return cholesky_escalating(kmat(params, z, z), jitter).first;
}

ConditionalTerms conditional_terms(const KernelParams& params, const Matrix& z,
                                   const LowerTriangular& kmm_chol,
                                   const Matrix& x) {
  if (kmm_chol.dim() != z.rows()) {
    throw DimensionMismatch("conditional_terms: factor does not match Z");
  }
  const Matrix kmx = kmat(params, z, x);
  const Matrix v = tri_solve(kmm_chol, kmx);
  ConditionalTerms out;
  out.ktilde = tri_solve(kmm_chol, v, Transpose::Yes).transpose();
  out.kdiag = (params.variance() - v.colwise().squaredNorm().array())
                  .matrix()
                  .transpose();
  return out;
}

ConditionalTerms conditional_terms(const KernelParams& params, const Matrix& z,
                                   const Matrix& x, double jitter) {
  return conditional_terms(params, z, cholesky(kmat(params, z, z), jitter), x);
}

}  // namespace sdgp
