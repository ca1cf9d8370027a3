#include "structdgp/model.hpp"

#include <cmath>
#include <string>

namespace sdgp {

double DGPModel::noise() const { return std::exp(log_noise); }

void DGPModel::validate() const {
  arch.validate();
  if (static_cast<int>(layers.size()) != arch.layers()) {
    throw DimensionMismatch("model: one LayerParams per layer required");
  }
  for (int l = 0; l < arch.layers(); ++l) {
    const LayerParams& p = layer(l);
    const int d = arch.layer_input_dim(l);
    if (p.kernel.dim() != d) {
      throw DimensionMismatch("model: kernel dimension of layer " +
                              std::to_string(l));
    }
    if (p.inducing.rows() != arch.inducing || p.inducing.cols() != d) {
      throw DimensionMismatch("model: inducing inputs of layer " +
                              std::to_string(l));
    }
    if (l + 1 < arch.layers() &&
        (p.mean_map.rows() != d || p.mean_map.cols() != arch.width(l))) {
      throw DimensionMismatch("model: mean map of layer " + std::to_string(l));
    }
  }
  if (factor.arch().widths != arch.widths ||
      factor.arch().inducing != arch.inducing) {
    throw DimensionMismatch("model: factor architecture differs");
  }
}

PreparedModel::PreparedModel(const DGPModel& model) : model_(&model) {
  const Architecture& a = model.arch;
  for (int l = 0; l < a.layers(); ++l) {
    const LayerParams& p = model.layer(l);
    Matrix k = kmat(p.kernel, p.inducing, p.inducing);
    auto [chol, used] = cholesky_escalating(k, model.jitter);
    k.diagonal().array() += used;
    kmm_.push_back(std::move(k));
    kmm_chol_.push_back(std::move(chol));
  }
  const int t_total = a.total_gps();
  cov_blocks_.resize(static_cast<size_t>(t_total) * t_total);
  for (int g = 0; g < t_total; ++g) {
    for (int gp = 0; gp <= g; ++gp) {
      if (covariance_block_nonzero(model.factor, g, gp)) {
        cov_blocks_[static_cast<size_t>(g) * t_total + gp] =
            reconstruct_gp_block(model.factor, g, gp);
      }
    }
  }
}

const Matrix* PreparedModel::cov_block(int g, int gp) const {
  const int t_total = arch().total_gps();
  const auto& slot = cov_blocks_.at(static_cast<size_t>(g) * t_total + gp);
  return slot ? &*slot : nullptr;
}

LayerState LayerState::start(const RowVector& x) {
  LayerState s;
  s.input = x;
  s.mu_tilde.resize(0);
  s.samples.resize(0);
  s.s_tilde.resize(0, 0);
  s.running_chol.resize(0, 0);
  return s;
}

Vector mu_tilde(const DGPModel& model, int l, const RowVector& ktilde_row) {
  const Architecture& a = model.arch;
  Vector out(a.width(l));
  for (int t = 0; t < a.width(l); ++t) {
    out(t) = ktilde_row.dot(model.factor.mu_block(a.gp_index(l, t)));
  }
  return out;
}

void s_tilde_blocks(const PreparedModel& prep, int l, const LayerState& state,
                    const RowVector& ktilde_row, double kdiag, Matrix& s_cross,
                    Matrix& s_self) {
  const Architecture& a = prep.arch();
  const int tl = a.width(l);
  const Index p = state.conditioning_dim();
  s_cross = Matrix::Zero(tl, p);
  s_self = Matrix::Zero(tl, tl);

  for (int t = 0; t < tl; ++t) {
    const int g = a.gp_index(l, t);
    // Cross-layer blocks K~^l (S_M^{l,l'})_{t,t'} K~^{l'}^T.
    Index col = 0;
    for (int lp = 0; lp < l; ++lp) {
      const RowVector& kp = state.ktilde.at(static_cast<size_t>(lp));
      for (int tp = 0; tp < a.width(lp); ++tp, ++col) {
        const Matrix* s = prep.cov_block(g, a.gp_index(lp, tp));
        if (s) s_cross(t, col) = ktilde_row * (*s) * kp.transpose();
      }
    }
    for (int tp = 0; tp <= t; ++tp) {
      const Matrix* s = prep.cov_block(g, a.gp_index(l, tp));
      if (!s) continue;
      const double v = ktilde_row * (*s) * ktilde_row.transpose();
      if (tp == t) {
        s_self(t, t) = kdiag + v;
      } else {
        s_self(t, tp) = v;
        s_self(tp, t) = v;
      }
    }
  }
}

void enter_layer(const PreparedModel& prep, int l, LayerState& state) {
  const DGPModel& model = prep.model();
  if (l != state.completed) {
    throw IndexOutOfRange("enter_layer: state has completed " +
                          std::to_string(state.completed) + " layers, not " +
                          std::to_string(l));
  }
  const LayerParams& p = model.layer(l);
  ConditionalTerms terms =
      conditional_terms(p.kernel, p.inducing, prep.kmm_chol(l), state.input);
  PendingLayer& pend = state.pending;
  pend.layer = l;
  pend.ktilde = terms.ktilde.row(0);
  pend.kdiag = terms.kdiag(0);
  pend.mu_tilde = mu_tilde(model, l, pend.ktilde);
  s_tilde_blocks(prep, l, state, pend.ktilde, pend.kdiag, pend.s_cross,
                 pend.s_self);
}

namespace {

bool needs_conditioning(const PreparedModel& prep, const LayerState& state) {
  return state.conditioning_dim() > 0 &&
         prep.model().structure() != Structure::MeanField;
}

}  // namespace

LayerPosterior layer_posterior(const PreparedModel& prep, int l,
                               const LayerState& state) {
  const PendingLayer& pend = state.pending;
  if (pend.layer != l) {
    throw IndexOutOfRange("layer_posterior: layer terms have not been computed");
  }
  LayerPosterior post;
  post.mu_hat = pend.mu_tilde;
  post.sigma_hat = pend.s_self;
  if (!needs_conditioning(prep, state)) return post;

  const auto lrun = state.running_chol.triangularView<Eigen::Lower>();
  const Matrix v = lrun.solve(pend.s_cross.transpose());
  const Vector w = lrun.solve(state.samples - state.mu_tilde);
  post.mu_hat.noalias() += v.transpose() * w;
  post.sigma_hat.noalias() -= v.transpose() * v;
  return post;
}

LayerPosterior sample_layer(const PreparedModel& prep, int l,
                            LayerState& state, const Vector& eps) {
  const DGPModel& model = prep.model();
  const Architecture& a = model.arch;
  const int tl = a.width(l);
  if (eps.size() != tl) {
    throw DimensionMismatch("sample_layer: eps must have one entry per GP");
  }
  enter_layer(prep, l, state);
  LayerPosterior post = layer_posterior(prep, l, state);
  const PendingLayer& pend = state.pending;

  const Index p = state.conditioning_dim();
  const LowerTriangular prev =
      p > 0 ? LowerTriangular(state.running_chol) : LowerTriangular(Matrix(0, 0));
  Matrix cross = pend.s_cross.transpose();
  const LowerTriangular updated =
      block_chol_update(prev, cross, pend.s_self, kSampleJitter);
  const Matrix c = updated.matrix().bottomRightCorner(tl, tl);
  const Vector f = post.mu_hat + c.triangularView<Eigen::Lower>() * eps;

  Matrix s_new(p + tl, p + tl);
  s_new.topLeftCorner(p, p) = state.s_tilde;
  s_new.topRightCorner(p, tl) = cross;
  s_new.bottomLeftCorner(tl, p) = pend.s_cross;
  s_new.bottomRightCorner(tl, tl) = pend.s_self;
  state.s_tilde = std::move(s_new);
  state.running_chol = updated.matrix();

  Vector mt(p + tl), fs(p + tl);
  mt << state.mu_tilde, pend.mu_tilde;
  fs << state.samples, f;
  state.mu_tilde = std::move(mt);
  state.samples = std::move(fs);
  state.ktilde.push_back(pend.ktilde);
  state.kdiag.push_back(pend.kdiag);
  if (l + 1 < a.layers()) {
    state.input = state.input * model.layer(l).mean_map + f.transpose();
  }
  state.completed = l + 1;
  state.pending = PendingLayer{};
  return post;
}

LayerPosterior sample_layer(const PreparedModel& prep, int l,
                            LayerState& state, Rng& rng) {
  return sample_layer(prep, l, state, rng.normal_vector(prep.arch().width(l)));
}

LayerPosterior final_layer_posterior(const PreparedModel& prep,
                                     const RowVector& x, Rng& rng) {
  const int L = prep.arch().layers();
  LayerState state = LayerState::start(x);
  for (int l = 0; l + 1 < L; ++l) sample_layer(prep, l, state, rng);
  enter_layer(prep, L - 1, state);
  return layer_posterior(prep, L - 1, state);
}

std::vector<GaussianMoments> predict(const PreparedModel& prep,
                                     const RowVector& x_star, int r_test,
                                     std::uint64_t seed, std::uint64_t key) {
  if (r_test < 1) throw Error("predict: R_test must be >= 1");
  std::vector<GaussianMoments> out;
  out.reserve(static_cast<size_t>(r_test));
  for (int r = 0; r < r_test; ++r) {
    Rng rng(seed, key, static_cast<std::uint64_t>(r), StreamTag::LayerNoise);
    LayerPosterior post = final_layer_posterior(prep, x_star, rng);
    out.push_back({std::move(post.mu_hat), std::move(post.sigma_hat)});
  }
  return out;
}

std::vector<GaussianMoments> predict(const DGPModel& model,
                                     const RowVector& x_star, int r_test,
                                     std::uint64_t seed, std::uint64_t key) {
  const PreparedModel prep(model);
  return predict(prep, x_star, r_test, seed, key);
}

}  // namespace sdgp
