#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "structdgp/kernel.hpp"
#include "structdgp/linalg.hpp"
#include "structdgp/rng.hpp"
#include "structdgp/variational.hpp"

namespace sdgp {

/// Per-layer prior parameters. `mean_map` is the fixed D_l x T_l linear map
/// added to the layer output before it feeds the next layer; it is empty for
/// the output layer.
struct LayerParams {
  KernelParams kernel;
  Matrix inducing;
  Matrix mean_map;
};

/// Deep GP with a structured Gaussian posterior over all inducing outputs.
struct DGPModel {
  Architecture arch;
  std::vector<LayerParams> layers;
  double log_noise = 0.0;
  VariationalFactor factor;
  double jitter = kDefaultJitter;

  Structure structure() const { return factor.structure(); }
  double noise() const;
  const LayerParams& layer(int l) const { return layers.at(static_cast<size_t>(l)); }
  LayerParams& layer(int l) { return layers.at(static_cast<size_t>(l)); }

  /// Throws on inconsistent shapes.
  void validate() const;
};

/// Quantities shared by every datapoint of one evaluation: K_MM factors per
/// layer and the S_M blocks needed by the recursion. The model must outlive
/// this object.
class PreparedModel {
 public:
  explicit PreparedModel(const DGPModel& model);

  const DGPModel& model() const { return *model_; }
  const Architecture& arch() const { return model_->arch; }
  const LowerTriangular& kmm_chol(int l) const {
    return kmm_chol_.at(static_cast<size_t>(l));
  }
  const Matrix& kmm(int l) const { return kmm_.at(static_cast<size_t>(l)); }

  /// (S_M)_{g,gp} for gp <= g, or nullptr when structurally zero.
  const Matrix* cov_block(int g, int gp) const;

 private:
  const DGPModel* model_;
  std::vector<Matrix> kmm_;
  std::vector<LowerTriangular> kmm_chol_;
  std::vector<std::optional<Matrix>> cov_blocks_;
};

/// Moments of q(f_n^l | f_n^{1:l-1}).
struct LayerPosterior {
  Vector mu_hat;
  Matrix sigma_hat;
};

/// Terms of the layer currently being processed.
struct PendingLayer {
  int layer = -1;
  RowVector ktilde;
  double kdiag = 0.0;
  Vector mu_tilde;
  Matrix s_cross;  // T_l x P, blocks S~^{l,1:l-1}
  Matrix s_self;   // T_l x T_l, block S~^{l,l}
};

/// Per-datapoint accumulator of the layer recursion. After completing layers
/// 0..l-1 it holds their K~ rows, mu~, the accumulated S~ and its running
/// Cholesky factor, and the sampled outputs.
struct LayerState {
  RowVector input;                  // kernel input of the next layer
  int completed = 0;
  std::vector<RowVector> ktilde;    // one row per completed layer
  std::vector<double> kdiag;
  Vector mu_tilde;                  // stacked mu~ of completed layers
  Vector samples;                   // stacked f_n of completed layers
  Matrix s_tilde;                   // accumulated S~^{1:l,1:l}
  Matrix running_chol;              // its Cholesky factor
  PendingLayer pending;

  static LayerState start(const RowVector& x);
  Index conditioning_dim() const { return samples.size(); }
};

inline constexpr double kSampleJitter = 1e-10;

/// mu~ for layer l: entry t is K~ row . mu_M^{l,t}.
Vector mu_tilde(const DGPModel& model, int l, const RowVector& ktilde_row);

/// Computes K~ row, k~ diag, mu~ and the S~^{l,1:l} blocks of layer l from the
/// state's current input and stores them in `state.pending`. Structurally
/// zero blocks are left at zero without being evaluated.
void enter_layer(const PreparedModel& prep, int l, LayerState& state);

/// S~^{l,1:l-1} (T_l x P) and S~^{l,l} (T_l x T_l) given K~ rows of layers
/// 0..l (the last one taken from `ktilde_row`).
void s_tilde_blocks(const PreparedModel& prep, int l, const LayerState& state,
                    const RowVector& ktilde_row, double kdiag, Matrix& s_cross,
                    Matrix& s_self);

/// mu^ and Sigma^ of layer l from the pending terms and the running factor.
LayerPosterior layer_posterior(const PreparedModel& prep, int l,
                               const LayerState& state);

/// Runs one layer: enter_layer, layer_posterior, f = mu^ + chol(Sigma^) eps,
/// running factor update and next-layer input. `eps` has T_l entries.
LayerPosterior sample_layer(const PreparedModel& prep, int l,
                            LayerState& state, const Vector& eps);
LayerPosterior sample_layer(const PreparedModel& prep, int l,
                            LayerState& state, Rng& rng);

/// Samples layers 0..L-2 and returns the analytic posterior of the output
/// layer for one path.
LayerPosterior final_layer_posterior(const PreparedModel& prep,
                                     const RowVector& x, Rng& rng);

/// R_test independent paths for x_star; each entry is the output layer's
/// (mu^, Sigma^) without likelihood noise. Path r uses the stream keyed by
/// (seed, key, r).
std::vector<GaussianMoments> predict(const DGPModel& model,
                                     const RowVector& x_star, int r_test,
                                     std::uint64_t seed, std::uint64_t key = 0);
std::vector<GaussianMoments> predict(const PreparedModel& prep,
                                     const RowVector& x_star, int r_test,
                                     std::uint64_t seed, std::uint64_t key = 0);

}  // namespace sdgp
