#pragma once

#include <cstdint>

#include "structdgp/model.hpp"
#include "structdgp/training.hpp"

/// Brute-force reference computations used to validate the main path. They
/// favour directness over speed.
namespace sdgp::oracle {

struct McMoments {
  Vector mean;
  Matrix cov;
  Vector mean_se;
  Matrix cov_se;
  double ess = 0.0;
};

/// Moments of q(f_n^l | f_n^{1:l-1} = fixed) estimated by sampling
/// f_M ~ q(f_M), weighting each draw by the prior-conditional density of the
/// fixed outputs of layers 0..l-1 and averaging the layer-l conditional
/// moments under the self-normalised weights. `fixed` stacks the outputs of
/// the earlier layers GP by GP. Throws TooLarge for T*M > 32 and
/// DegenerateWeights when the effective sample size drops below 100.
McMoments mc_layer_conditional(const DGPModel& model, const RowVector& x,
                               const Vector& fixed, int l, long long n_samples,
                               Rng& rng);

/// Exact log marginal likelihood of a single-layer GP with Gaussian noise.
double exact_gp_lml(const Matrix& x, const Vector& y, const KernelParams& kernel,
                    double noise);

/// The analytic-estimator ELBO computed with the densified factor, explicit
/// joint tilde matrices and a fresh dense factorisation per layer. Uses the
/// same noise streams as elbo(). Throws TooLarge for T*M > 64.
double dense_reference_elbo(const DGPModel& model, const Batch& batch,
                            const ElboOptions& opt);

/// Mean-field ELBO written directly from the independent per-GP marginals.
/// Only valid for mean-field factors.
double mean_field_reference_elbo(const DGPModel& model, const Batch& batch,
                                 const ElboOptions& opt);

/// Dense KL between N(mu, S_M) and the block-diagonal prior.
double dense_kl(const DGPModel& model);

/// Per-layer posterior moments along one path computed densely; the path is
/// driven by the same noise as final_layer_posterior.
std::vector<LayerPosterior> dense_layer_posteriors(const DGPModel& model,
                                                   const RowVector& x, Rng& rng);

}  // namespace sdgp::oracle
