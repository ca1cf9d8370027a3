#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "structdgp/model.hpp"

namespace sdgp {

/// Rows of a dataset together with their global keys; the key selects the
/// noise stream of each datapoint so results do not depend on batch order.
struct Batch {
  Matrix x;
  Vector y;
  std::vector<std::uint64_t> keys;

  Index size() const { return x.rows(); }
  static Batch full(const Matrix& x, const Vector& y);
  static Batch rows(const Matrix& x, const Vector& y,
                    const std::vector<Index>& idx);
  void validate() const;
};

enum class Estimator {
  Analytic,         // all inducing outputs marginalised per datapoint
  SampledInducing,  // one f_M draw per path pushed through the conditionals
};

struct ElboOptions {
  int samples = 5;            // R
  std::uint64_t seed = 0;
  Index total_size = 0;       // N used for rescaling; 0 means the batch size
  Estimator estimator = Estimator::Analytic;
  int threads = 1;            // row-wise evaluation only; 0 = environment
};

struct ElboTerms {
  double value = 0.0;
  double expected_log_lik = 0.0;  // sum over the batch, rescaled to N
  double kl = 0.0;
};

/// E_{N(f; mu, var)} log N(y | f, noise).
double expected_log_lik(double y, double mu, double var, double noise);
double expected_log_lik(double y, const LayerPosterior& post, double noise);

/// KL[q(f_M) || prod p(f_M^{l,t})], evaluated blockwise from the factor.
double kl_term(const PreparedModel& prep);
double kl_term(const DGPModel& model);

/// Stochastic ELBO evaluated datapoint by datapoint (reference path).
ElboTerms elbo(const DGPModel& model, const Batch& batch, const ElboOptions& opt);
double elbo_sampled_fm(const DGPModel& model, const Batch& batch,
                       ElboOptions opt);

/// Sum over paths r of the expected log-likelihood of one datapoint.
double datapoint_log_lik(const PreparedModel& prep, const RowVector& x, double y,
                         std::uint64_t key, const ElboOptions& opt);

// Parameter vector ---------------------------------------------------------

enum class ParamGroup { Kernel, Inducing, Noise, VariationalMean, VariationalFactor };
std::string_view to_string(ParamGroup g);

struct ParamSegment {
  ParamGroup group;
  int index;      // layer for kernel/inducing, GP for means, pattern entry for blocks
  Index offset;
  Index size;
};

struct TrainableGroups {
  bool kernel = true;
  bool inducing = true;
  bool noise = true;
  bool variational = true;

  bool contains(ParamGroup g) const;
};

/// Order: per layer log lengthscales then log variance; per layer inducing
/// inputs (column-major); log noise; mu_M; factor blocks in pattern order.
/// Diagonal blocks contribute their lower triangle column by column with the
/// diagonal on the log scale; other blocks all M*M entries column-major.
struct ParamLayout {
  std::vector<ParamSegment> segments;
  Index size = 0;

  Vector mask(const TrainableGroups& groups) const;
  std::vector<Index> indices(ParamGroup g) const;
};

ParamLayout param_layout(const DGPModel& model);
Vector flatten(const DGPModel& model);
void unflatten(DGPModel& model, const Vector& theta);

// Gradients ----------------------------------------------------------------

struct ElboGradient {
  ElboTerms terms;
  Vector gradient;  // d ELBO / d theta in flatten() order
};

/// ELBO and its exact gradient for the same noise draws as elbo(); all
/// datapoints and paths are processed together.
ElboGradient elbo_and_gradient(const DGPModel& model, const Batch& batch,
                               const ElboOptions& opt);

/// Central differences (f(t + h e_i) - f(t - h e_i)) / 2h with
/// h = step * max(1, |t_i|). `coords` restricts the evaluated entries; the
/// others are left at zero.
Vector fd_gradient(const std::function<double(const Vector&)>& f,
                   const Vector& theta, double step = 1e-5,
                   const std::vector<Index>* coords = nullptr);

/// fd_gradient of elbo() with common random numbers (fixed seed).
Vector fd_gradient(const DGPModel& model, const Batch& batch,
                   const ElboOptions& opt, double step = 1e-5,
                   const std::vector<Index>* coords = nullptr);

// Optimisation -------------------------------------------------------------

class Adam {
 public:
  explicit Adam(Index dim, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);
  /// One ascent step on `theta` along `grad`, restricted to mask != 0.
  void step(Vector& theta, const Vector& grad, double lr,
            const Vector* mask = nullptr);
  long long steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  Vector m_, v_;
  long long t_ = 0;
};

struct TrainConfig {
  int iterations = 20000;
  int minibatch = 512;
  int samples = 5;
  double learning_rate = 0.005;
  int decay_steps = 1000;
  double decay_rate = 0.98;
  std::optional<double> jitter;        // overrides the model jitter when set
  double validation_fraction = 0.10;   // 0 disables early stopping
  int strip_length = 500;
  int early_stop_strips = 5;
  int validation_samples = 5;
  std::uint64_t seed = 0;
  Estimator estimator = Estimator::Analytic;
  TrainableGroups trainable;
  int log_every = 100;

  double lr_at(long long t) const;
  void validate() const;
};

struct TrainRecord {
  int iteration = 0;
  double elbo = 0.0;
  double lr = 0.0;
  std::optional<double> val_tll;
  double wall_ms = 0.0;
};

struct TrainResult {
  std::vector<TrainRecord> history;
  int iterations_run = 0;
  bool stopped_early = false;
  std::optional<double> best_val_tll;
  double wall_ms = 0.0;
};

/// Called after every iteration; return false to stop.
using TrainCallback =
    std::function<bool(int iteration, const DGPModel& model, double elbo)>;

/// Adam with exponentially decaying learning rate on minibatch ELBO
/// gradients. With a validation split, tll is checked at the end of each
/// strip; training stops after `early_stop_strips` consecutive decreases and
/// the best-validation parameters are restored.
TrainResult train(DGPModel& model, const Matrix& x, const Vector& y,
                  const TrainConfig& config, std::ostream* history = nullptr,
                  const TrainCallback& callback = {});

void write_history_line(std::ostream& out, const TrainRecord& rec);

// Prediction ---------------------------------------------------------------

/// log (1/R) sum_r N(y | mu_r, var_r + noise) over the predict() paths.
double log_predictive_density(const std::vector<GaussianMoments>& paths,
                              double y, double noise);

/// Mean log predictive density over the rows of (x, y), normalised units.
double mean_log_predictive(const DGPModel& model, const Matrix& x,
                           const Vector& y, int r_test, std::uint64_t seed,
                           int threads = 1);

}  // namespace sdgp
