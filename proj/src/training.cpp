#include "structdgp/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>

#include <json.hpp>

#include "structdgp/parallel.hpp"

namespace sdgp {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now() - t0)
      .count();
}

}  // namespace

Batch Batch::full(const Matrix& x, const Vector& y) {
  Batch b;
  b.x = x;
  b.y = y;
  b.keys.resize(static_cast<size_t>(x.rows()));
  std::iota(b.keys.begin(), b.keys.end(), std::uint64_t{0});
  b.validate();
  return b;
}

Batch Batch::rows(const Matrix& x, const Vector& y,
                  const std::vector<Index>& idx) {
  Batch b;
  b.x.resize(static_cast<Index>(idx.size()), x.cols());
  b.y.resize(static_cast<Index>(idx.size()));
  for (size_t i = 0; i < idx.size(); ++i) {
    const Index r = idx[i];
    if (r < 0 || r >= x.rows()) throw IndexOutOfRange("Batch::rows: row index");
    b.x.row(static_cast<Index>(i)) = x.row(r);
    b.y(static_cast<Index>(i)) = y(r);
    b.keys.push_back(static_cast<std::uint64_t>(r));
  }
  b.validate();
  return b;
}

void Batch::validate() const {
  if (x.rows() == 0) throw Error("batch is empty");
  if (y.size() != x.rows() || static_cast<Index>(keys.size()) != x.rows()) {
    throw DimensionMismatch("batch: x, y and keys disagree in length");
  }
}

double expected_log_lik(double y, double mu, double var, double noise) {
  const double r = y - mu;
  return -0.5 * (kLog2Pi + std::log(noise)) - (r * r + var) / (2.0 * noise);
}

double expected_log_lik(double y, const LayerPosterior& post, double noise) {
  if (post.mu_hat.size() != 1) {
    throw DimensionMismatch("expected_log_lik: output layer must have one GP");
  }
  return expected_log_lik(y, post.mu_hat(0), post.sigma_hat(0, 0), noise);
}

double kl_term(const PreparedModel& prep) {
  const DGPModel& model = prep.model();
  const Architecture& a = model.arch;
  const VariationalFactor& f = model.factor;
  double trace = 0.0, quad = 0.0, logdet_p = 0.0;
  for (int l = 0; l < a.layers(); ++l) {
    logdet_p += a.width(l) * 2.0 *
                prep.kmm_chol(l).matrix().diagonal().array().log().sum();
  }
  for (int g = 0; g < a.total_gps(); ++g) {
    const LowerTriangular& lk = prep.kmm_chol(a.layer_of(g));
    quad += tri_solve(lk, Matrix(f.mu_block(g))).squaredNorm();
    for (int k : f.row_pattern(g)) {
      Matrix blk = f.block(g, k);
      if (k == g) blk.triangularView<Eigen::StrictlyUpper>().setZero();
      trace += tri_solve(lk, blk).squaredNorm();
    }
  }
  const double tm = static_cast<double>(f.dim());
  return 0.5 * (trace + quad - tm + logdet_p - logdet(f));
}

double kl_term(const DGPModel& model) { return kl_term(PreparedModel(model)); }

namespace {

double sampled_path_log_lik(const PreparedModel& prep, const RowVector& x,
                            double y, std::uint64_t key, std::uint64_t r,
                            std::uint64_t seed) {
  const DGPModel& model = prep.model();
  const Architecture& a = model.arch;
  const VariationalFactor& f = model.factor;
  const Index m = a.inducing;
  Rng layer_rng(seed, key, r, StreamTag::LayerNoise);
  Rng fm_rng(seed, key, r, StreamTag::InducingNoise);
  const Vector eps_m = fm_rng.normal_vector(f.dim());
  Vector fm = f.mu();
  for (int g = 0; g < a.total_gps(); ++g) {
    for (int k : f.row_pattern(g)) {
      const auto blk = f.block(g, k);
      const auto e = eps_m.segment(static_cast<Index>(k) * m, m);
      if (k == g) {
        fm.segment(static_cast<Index>(g) * m, m).noalias() +=
            blk.triangularView<Eigen::Lower>() * e;
      } else {
        fm.segment(static_cast<Index>(g) * m, m).noalias() += blk * e;
      }
    }
  }
  RowVector h = x;
  for (int l = 0; l < a.layers(); ++l) {
    const LayerParams& p = model.layer(l);
    const ConditionalTerms terms =
        conditional_terms(p.kernel, p.inducing, prep.kmm_chol(l), h);
    const int tl = a.width(l);
    Vector mean(tl);
    for (int t = 0; t < tl; ++t) {
      mean(t) = terms.ktilde.row(0).dot(
          fm.segment(static_cast<Index>(a.gp_index(l, t)) * m, m));
    }
    const double kd = terms.kdiag(0);
    if (l + 1 == a.layers()) {
      return expected_log_lik(y, mean(0), kd, model.noise());
    }
    const Vector eps = layer_rng.normal_vector(tl);
    const Vector fl = mean + std::sqrt(kd + kSampleJitter) * eps;
    h = h * p.mean_map + fl.transpose();
  }
  return 0.0;
}

}  // namespace

double datapoint_log_lik(const PreparedModel& prep, const RowVector& x, double y,
                         std::uint64_t key, const ElboOptions& opt) {
  double acc = 0.0;
  const double noise = prep.model().noise();
  for (int r = 0; r < opt.samples; ++r) {
    const auto rr = static_cast<std::uint64_t>(r);
    if (opt.estimator == Estimator::Analytic) {
      Rng rng(opt.seed, key, rr, StreamTag::LayerNoise);
      acc += expected_log_lik(y, final_layer_posterior(prep, x, rng), noise);
    } else {
      acc += sampled_path_log_lik(prep, x, y, key, rr, opt.seed);
    }
  }
  return acc;
}

ElboTerms elbo(const DGPModel& model, const Batch& batch, const ElboOptions& opt) {
  batch.validate();
  if (opt.samples < 1) throw Error("elbo: R must be >= 1");
  const PreparedModel prep(model);
  const Index b = batch.size();
  std::vector<double> per_row(static_cast<size_t>(b));
  parallel_for(b, worker_count(opt.threads), [&](Index i) {
    per_row[static_cast<size_t>(i)] =
        datapoint_log_lik(prep, batch.x.row(i), batch.y(i),
                          batch.keys[static_cast<size_t>(i)], opt);
  });
  double total = 0.0;
  for (double v : per_row) total += v;
  const double n_total =
      static_cast<double>(opt.total_size > 0 ? opt.total_size : b);
  ElboTerms out;
  out.expected_log_lik = n_total / (static_cast<double>(b) * opt.samples) * total;
  out.kl = kl_term(prep);
  out.value = out.expected_log_lik - out.kl;
  return out;
}

double elbo_sampled_fm(const DGPModel& model, const Batch& batch,
                       ElboOptions opt) {
  opt.estimator = Estimator::SampledInducing;
  return elbo(model, batch, opt).value;
}

std::string_view to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::Kernel:
      return "kernel";
    case ParamGroup::Inducing:
      return "inducing";
    case ParamGroup::Noise:
      return "noise";
    case ParamGroup::VariationalMean:
      return "variational_mean";
    case ParamGroup::VariationalFactor:
      return "variational_factor";
  }
  return "unknown";
}

bool TrainableGroups::contains(ParamGroup g) const {
  switch (g) {
    case ParamGroup::Kernel:
      return kernel;
    case ParamGroup::Inducing:
      return inducing;
    case ParamGroup::Noise:
      return noise;
    case ParamGroup::VariationalMean:
    case ParamGroup::VariationalFactor:
      return variational;
  }
  return false;
}

Vector ParamLayout::mask(const TrainableGroups& groups) const {
  Vector out = Vector::Zero(size);
  for (const ParamSegment& s : segments) {
    if (groups.contains(s.group)) out.segment(s.offset, s.size).setOnes();
  }
  return out;
}

std::vector<Index> ParamLayout::indices(ParamGroup g) const {
  std::vector<Index> out;
  for (const ParamSegment& s : segments) {
    if (s.group != g) continue;
    for (Index i = 0; i < s.size; ++i) out.push_back(s.offset + i);
  }
  return out;
}

ParamLayout param_layout(const DGPModel& model) {
  const Architecture& a = model.arch;
  const Index m = a.inducing;
  ParamLayout out;
  auto add = [&](ParamGroup g, int index, Index size) {
    out.segments.push_back({g, index, out.size, size});
    out.size += size;
  };
  for (int l = 0; l < a.layers(); ++l) {
    add(ParamGroup::Kernel, l, a.layer_input_dim(l) + 1);
  }
  for (int l = 0; l < a.layers(); ++l) {
    add(ParamGroup::Inducing, l, m * a.layer_input_dim(l));
  }
  add(ParamGroup::Noise, 0, 1);
  for (int g = 0; g < a.total_gps(); ++g) add(ParamGroup::VariationalMean, g, m);
  const auto& pattern = model.factor.pattern();
  for (size_t i = 0; i < pattern.size(); ++i) {
    const bool diag = pattern[i].row == pattern[i].col;
    add(ParamGroup::VariationalFactor, static_cast<int>(i),
        diag ? m * (m + 1) / 2 : m * m);
  }
  return out;
}

Vector flatten(const DGPModel& model) {
  const ParamLayout layout = param_layout(model);
  const Architecture& a = model.arch;
  const Index m = a.inducing;
  Vector theta(layout.size);
  Index at = 0;
  for (int l = 0; l < a.layers(); ++l) {
    const KernelParams& k = model.layer(l).kernel;
    theta.segment(at, k.dim()) = k.log_lengthscales;
    at += k.dim();
    theta(at++) = k.log_variance;
  }
  for (int l = 0; l < a.layers(); ++l) {
    const Matrix& z = model.layer(l).inducing;
    theta.segment(at, z.size()) = z.reshaped();
    at += z.size();
  }
  theta(at++) = model.log_noise;
  theta.segment(at, model.factor.mu().size()) = model.factor.mu();
  at += model.factor.mu().size();
  for (const BlockId& b : model.factor.pattern()) {
    const auto blk = model.factor.block(b.row, b.col);
    if (b.row == b.col) {
      for (Index j = 0; j < m; ++j) {
        theta(at++) = std::log(blk(j, j));
        for (Index i = j + 1; i < m; ++i) theta(at++) = blk(i, j);
      }
    } else {
      theta.segment(at, m * m) = blk.reshaped();
      at += m * m;
    }
  }
  return theta;
}

void unflatten(DGPModel& model, const Vector& theta) {
  const ParamLayout layout = param_layout(model);
  if (theta.size() != layout.size) {
    throw DimensionMismatch("unflatten: expected " + std::to_string(layout.size) +
                            " values, got " + std::to_string(theta.size()));
  }
  const Architecture& a = model.arch;
  const Index m = a.inducing;
  Index at = 0;
  for (int l = 0; l < a.layers(); ++l) {
    KernelParams& k = model.layer(l).kernel;
    k.log_lengthscales = theta.segment(at, k.dim());
    at += k.dim();
    k.log_variance = theta(at++);
  }
  for (int l = 0; l < a.layers(); ++l) {
    Matrix& z = model.layer(l).inducing;
    z = theta.segment(at, z.size()).reshaped(z.rows(), z.cols());
    at += z.size();
  }
  model.log_noise = theta(at++);
  model.factor.mu() = theta.segment(at, model.factor.mu().size());
  at += model.factor.mu().size();
  for (const BlockId& b : model.factor.pattern()) {
    auto blk = model.factor.block(b.row, b.col);
    if (b.row == b.col) {
      blk.setZero();
      for (Index j = 0; j < m; ++j) {
        blk(j, j) = std::exp(theta(at++));
        for (Index i = j + 1; i < m; ++i) blk(i, j) = theta(at++);
      }
    } else {
      blk = theta.segment(at, m * m).reshaped(m, m);
      at += m * m;
    }
  }
}

Vector fd_gradient(const std::function<double(const Vector&)>& f,
                   const Vector& theta, double step,
                   const std::vector<Index>* coords) {
  Vector grad = Vector::Zero(theta.size());
  Vector work = theta;
  auto one = [&](Index i) {
    const double h = step * std::max(1.0, std::abs(theta(i)));
    work(i) = theta(i) + h;
    const double up = f(work);
    work(i) = theta(i) - h;
    const double down = f(work);
    work(i) = theta(i);
    grad(i) = (up - down) / (2.0 * h);
  };
  if (coords) {
    for (Index i : *coords) one(i);
  } else {
    for (Index i = 0; i < theta.size(); ++i) one(i);
  }
  return grad;
}

Vector fd_gradient(const DGPModel& model, const Batch& batch,
                   const ElboOptions& opt, double step,
                   const std::vector<Index>* coords) {
  DGPModel work = model;
  auto f = [&](const Vector& theta) {
    unflatten(work, theta);
    return elbo(work, batch, opt).value;
  };
  return fd_gradient(f, flatten(model), step, coords);
}

Adam::Adam(Index dim, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps), m_(Vector::Zero(dim)),
      v_(Vector::Zero(dim)) {}

void Adam::step(Vector& theta, const Vector& grad, double lr, const Vector* mask) {
  if (grad.size() != m_.size() || theta.size() != m_.size()) {
    throw DimensionMismatch("Adam::step: dimension");
  }
  ++t_;
  m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
  v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  Vector delta =
      (lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_)).matrix();
  if (mask) delta = delta.cwiseProduct(*mask);
  theta += delta;
}

double TrainConfig::lr_at(long long t) const {
  return learning_rate *
         std::pow(decay_rate, static_cast<double>(t) / static_cast<double>(decay_steps));
}

void TrainConfig::validate() const {
  if (iterations < 0) throw Error("train: iterations must be >= 0");
  if (minibatch < 1 || samples < 1 || validation_samples < 1) {
    throw Error("train: minibatch and sample counts must be >= 1");
  }
  if (!(learning_rate > 0.0) || decay_steps < 1 || !(decay_rate > 0.0)) {
    throw Error("train: learning-rate schedule must be positive");
  }
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw Error("train: validation fraction must lie in [0, 1)");
  }
  if (strip_length < 1 || early_stop_strips < 1 || log_every < 1) {
    throw Error("train: strip length, patience and log interval must be >= 1");
  }
  if (jitter && !(*jitter > 0.0)) throw Error("train: jitter must be positive");
}

void write_history_line(std::ostream& out, const TrainRecord& rec) {
  nlohmann::json j;
  j["iteration"] = rec.iteration;
  j["elbo"] = rec.elbo;
  j["lr"] = rec.lr;
  j["val_tll"] = rec.val_tll ? nlohmann::json(*rec.val_tll) : nlohmann::json(nullptr);
  j["wall_ms"] = rec.wall_ms;
  out << j.dump() << '\n';
}

TrainResult train(DGPModel& model, const Matrix& x, const Vector& y,
                  const TrainConfig& config, std::ostream* history,
                  const TrainCallback& callback) {
  config.validate();
  model.validate();
  if (x.rows() != y.size()) throw DimensionMismatch("train: x and y lengths");
  TrainResult result;
  if (config.iterations == 0) return result;
  if (config.jitter) model.jitter = *config.jitter;

  const auto t0 = std::chrono::steady_clock::now();
  const Index n = x.rows();
  std::vector<Index> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::vector<Index> train_rows = order, val_rows;
  if (config.validation_fraction > 0.0 && n >= 10) {
    Rng split_rng(config.seed, 0, 0, StreamTag::Training);
    std::shuffle(order.begin(), order.end(), split_rng.engine());
    const auto n_val = static_cast<size_t>(std::max<double>(
        1.0, std::round(config.validation_fraction * static_cast<double>(n))));
    val_rows.assign(order.begin(), order.begin() + static_cast<long>(n_val));
    train_rows.assign(order.begin() + static_cast<long>(n_val), order.end());
    std::sort(train_rows.begin(), train_rows.end());
  }
  Matrix x_val(static_cast<Index>(val_rows.size()), x.cols());
  Vector y_val(static_cast<Index>(val_rows.size()));
  for (size_t i = 0; i < val_rows.size(); ++i) {
    x_val.row(static_cast<Index>(i)) = x.row(val_rows[i]);
    y_val(static_cast<Index>(i)) = y(val_rows[i]);
  }
  const Index n_train = static_cast<Index>(train_rows.size());

  const ParamLayout layout = param_layout(model);
  const Vector mask = layout.mask(config.trainable);
  Vector theta = flatten(model);
  Adam adam(theta.size());
  std::optional<Vector> best_theta;
  std::optional<double> prev_val;
  int decreases = 0;

  for (int it = 0; it < config.iterations; ++it) {
    std::vector<Index> rows;
    if (config.minibatch >= n_train) {
      rows = train_rows;
    } else {
      Rng batch_rng(config.seed, static_cast<std::uint64_t>(it), 1,
                    StreamTag::Training);
      std::vector<Index> pool = train_rows;
      for (int i = 0; i < config.minibatch; ++i) {
        std::uniform_int_distribution<Index> pick(i, n_train - 1);
        std::swap(pool[static_cast<size_t>(i)],
                  pool[static_cast<size_t>(pick(batch_rng.engine()))]);
      }
      rows.assign(pool.begin(), pool.begin() + config.minibatch);
    }
    const Batch batch = Batch::rows(x, y, rows);
    ElboOptions opt;
    opt.samples = config.samples;
    opt.seed = stream_seed(config.seed, static_cast<std::uint64_t>(it), 2,
                           StreamTag::Training);
    opt.total_size = n_train;
    opt.estimator = config.estimator;
    const ElboGradient eg = elbo_and_gradient(model, batch, opt);
    if (!std::isfinite(eg.terms.value) || !eg.gradient.allFinite()) {
      throw NumericalFailure(
          "train: non-finite ELBO or gradient at iteration " + std::to_string(it) +
          " (elbo " + std::to_string(eg.terms.value) + ", kl " +
          std::to_string(eg.terms.kl) + ", noise " + std::to_string(model.noise()) +
          ")");
    }
    const double lr = config.lr_at(it);
    adam.step(theta, eg.gradient, lr, &mask);
    unflatten(model, theta);
    result.iterations_run = it + 1;

    TrainRecord rec;
    rec.iteration = it;
    rec.elbo = eg.terms.value;
    rec.lr = lr;
    bool stop = false;
    if (!val_rows.empty() && (it + 1) % config.strip_length == 0) {
      const double v = mean_log_predictive(model, x_val, y_val,
                                           config.validation_samples, config.seed);
      rec.val_tll = v;
      if (!result.best_val_tll || v > *result.best_val_tll) {
        result.best_val_tll = v;
        best_theta = theta;
      }
      decreases = (prev_val && v < *prev_val) ? decreases + 1 : 0;
      prev_val = v;
      if (decreases >= config.early_stop_strips) {
        stop = true;
        result.stopped_early = true;
      }
    }
    rec.wall_ms = elapsed_ms(t0);
    if (it % config.log_every == 0 || rec.val_tll || stop ||
        it + 1 == config.iterations) {
      result.history.push_back(rec);
      if (history) write_history_line(*history, rec);
    }
    if (callback && !callback(it, model, eg.terms.value)) stop = true;
    if (stop) break;
  }
  if (best_theta) unflatten(model, *best_theta);
  result.wall_ms = elapsed_ms(t0);
  return result;
}

double log_predictive_density(const std::vector<GaussianMoments>& paths,
                              double y, double noise) {
  if (paths.empty()) throw Error("log_predictive_density: no paths");
  std::vector<double> logs;
  logs.reserve(paths.size());
  for (const GaussianMoments& p : paths) {
    const double var = p.cov(0, 0) + noise;
    const double r = y - p.mean(0);
    logs.push_back(-0.5 * (kLog2Pi + std::log(var) + r * r / var));
  }
  const double mx = *std::max_element(logs.begin(), logs.end());
  double acc = 0.0;
  for (double v : logs) acc += std::exp(v - mx);
  return mx + std::log(acc / static_cast<double>(paths.size()));
}

double mean_log_predictive(const DGPModel& model, const Matrix& x,
                           const Vector& y, int r_test, std::uint64_t seed,
                           int threads) {
  const PreparedModel prep(model);
  std::vector<double> lpd(static_cast<size_t>(x.rows()));
  parallel_for(x.rows(), worker_count(threads), [&](Index i) {
    const auto paths =
        predict(prep, x.row(i), r_test, seed, static_cast<std::uint64_t>(i));
    lpd[static_cast<size_t>(i)] = log_predictive_density(paths, y(i), model.noise());
  });
  double acc = 0.0;
  for (double v : lpd) acc += v;
  return acc / static_cast<double>(x.rows());
}

}  // namespace sdgp
