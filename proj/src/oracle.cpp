#include "structdgp/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace sdgp::oracle {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

double log_normal(double x, double mean, double var) {
  const double r = x - mean;
  return -0.5 * (kLog2Pi + std::log(var) + r * r / var);
}

// K_MM plus the jitter the main path ends up using.
Matrix prior_kmm(const DGPModel& model, int l) {
  const LayerParams& p = model.layer(l);
  Matrix k = kmat(p.kernel, p.inducing, p.inducing);
  const double used = cholesky_escalating(k, model.jitter).second;
  k.diagonal().array() += used;
  return k;
}

struct DenseConditional {
  RowVector ktilde;
  double kdiag;
};

DenseConditional dense_conditional(const LayerParams& p, const Matrix& kmm,
                                   const RowVector& h) {
  const Matrix kxm = kmat(p.kernel, h, p.inducing);
  const Eigen::LLT<Matrix> llt(kmm);
  DenseConditional out;
  out.ktilde = llt.solve(kxm.transpose()).transpose();
  out.kdiag = kmat(p.kernel, h, h)(0, 0) - (out.ktilde * kxm.transpose())(0, 0);
  return out;
}

}  // namespace

McMoments mc_layer_conditional(const DGPModel& model, const RowVector& x,
                               const Vector& fixed, int l, long long n_samples,
                               Rng& rng) {
  const Architecture& a = model.arch;
  const VariationalFactor& f = model.factor;
  if (f.dim() > 32) {
    throw TooLarge("mc_layer_conditional: T*M = " + std::to_string(f.dim()) +
                   " exceeds 32");
  }
  if (n_samples < 10000) throw Error("mc_layer_conditional: need >= 1e4 samples");
  if (l < 0 || l >= a.layers()) throw IndexOutOfRange("mc_layer_conditional: layer");
  if (fixed.size() != a.gp_offset(l)) {
    throw DimensionMismatch("mc_layer_conditional: need one fixed output per earlier GP");
  }
  const Index m = a.inducing;

  // With the earlier outputs fixed, every layer input is deterministic.
  std::vector<DenseConditional> cond;
  RowVector h = x;
  for (int lp = 0; lp <= l; ++lp) {
    cond.push_back(dense_conditional(model.layer(lp), prior_kmm(model, lp), h));
    if (lp < l) {
      const Vector fl = fixed.segment(a.gp_offset(lp), a.width(lp));
      h = h * model.layer(lp).mean_map + fl.transpose();
    }
  }

  const Matrix ls = densify(f).factor;
  const int tl = a.width(l);
  const auto n = static_cast<Index>(n_samples);
  Vector logw(n);
  Matrix means(n, tl);
  for (Index s = 0; s < n; ++s) {
    const Vector fm = f.mu() + ls * rng.normal_vector(f.dim());
    double lw = 0.0;
    for (int lp = 0; lp < l; ++lp) {
      const DenseConditional& c = cond[static_cast<size_t>(lp)];
      for (int t = 0; t < a.width(lp); ++t) {
        const int g = a.gp_index(lp, t);
        lw += log_normal(fixed(g), c.ktilde.dot(fm.segment(g * m, m)), c.kdiag);
      }
    }
    logw(s) = lw;
    for (int t = 0; t < tl; ++t) {
      const int g = a.gp_index(l, t);
      means(s, t) = cond.back().ktilde.dot(fm.segment(g * m, m));
    }
  }

  const double mx = logw.maxCoeff();
  Vector w = (logw.array() - mx).exp().matrix();
  w /= w.sum();
  McMoments out;
  out.ess = 1.0 / w.squaredNorm();
  if (out.ess < 100.0) {
    throw DegenerateWeights("mc_layer_conditional: effective sample size " +
                            std::to_string(out.ess));
  }
  const Vector w2 = w.cwiseAbs2();
  out.mean = means.transpose() * w;
  const Matrix centered = means.rowwise() - out.mean.transpose();
  out.mean_se = (w2.transpose() * centered.cwiseAbs2()).transpose().cwiseSqrt();
  out.cov.resize(tl, tl);
  out.cov_se.resize(tl, tl);
  for (int i = 0; i < tl; ++i) {
    for (int j = 0; j < tl; ++j) {
      const Vector c = centered.col(i).cwiseProduct(centered.col(j));
      const double est = w.dot(c);
      out.cov(i, j) = est + (i == j ? cond.back().kdiag : 0.0);
      out.cov_se(i, j) = std::sqrt(w2.dot((c.array() - est).square().matrix()));
    }
  }
  return out;
}

double exact_gp_lml(const Matrix& x, const Vector& y, const KernelParams& kernel,
                    double noise) {
  if (x.rows() != y.size()) throw DimensionMismatch("exact_gp_lml: x and y lengths");
  Matrix k = kmat(kernel, x, x);
  k.diagonal().array() += noise;
  const LowerTriangular l = cholesky(k);
  const Vector alpha = tri_solve(l, y);
  return -0.5 * alpha.squaredNorm() - l.matrix().diagonal().array().log().sum() -
         0.5 * static_cast<double>(y.size()) * kLog2Pi;
}

std::vector<LayerPosterior> dense_layer_posteriors(const DGPModel& model,
                                                   const RowVector& x, Rng& rng) {
  const Architecture& a = model.arch;
  const VariationalFactor& f = model.factor;
  const Index m = a.inducing;
  const Index tm = f.dim();
  const Matrix s = densify(f).covariance;
  const Vector& mu = f.mu();

  std::vector<LayerPosterior> out;
  Matrix kcal(0, tm);   // stacked selection of K~ rows, one per GP so far
  Vector kd_all(0);
  Vector samples(0);
  RowVector h = x;
  for (int l = 0; l < a.layers(); ++l) {
    const int tl = a.width(l);
    const DenseConditional c = dense_conditional(model.layer(l), prior_kmm(model, l), h);
    const Index p = kcal.rows();
    Matrix grown = Matrix::Zero(p + tl, tm);
    grown.topRows(p) = kcal;
    Vector kd(p + tl);
    kd << kd_all, Vector::Constant(tl, c.kdiag);
    for (int t = 0; t < tl; ++t) {
      grown.row(p + t).segment(a.gp_index(l, t) * m, m) = c.ktilde;
    }
    kcal = std::move(grown);
    kd_all = std::move(kd);

    Matrix st = kcal * s * kcal.transpose();
    st.diagonal() += kd_all;
    const Vector mt = kcal * mu;

    LayerPosterior post;
    post.mu_hat = mt.tail(tl);
    post.sigma_hat = st.bottomRightCorner(tl, tl);
    if (p > 0) {
      const Eigen::LLT<Matrix> prev(st.topLeftCorner(p, p));
      const Matrix cross = st.topRightCorner(p, tl);
      post.mu_hat += cross.transpose() * prev.solve(samples - mt.head(p));
      post.sigma_hat -= cross.transpose() * prev.solve(cross);
    }
    out.push_back(post);
    if (l + 1 == a.layers()) break;

    Matrix jittered = post.sigma_hat;
    jittered.diagonal().array() += kSampleJitter;
    const Eigen::LLT<Matrix> chol(jittered);
    const Vector fl = post.mu_hat + Matrix(chol.matrixL()) * rng.normal_vector(tl);
    Vector grown_samples(p + tl);
    grown_samples << samples, fl;
    samples = std::move(grown_samples);
    h = h * model.layer(l).mean_map + fl.transpose();
  }
  return out;
}

double dense_kl(const DGPModel& model) {
  const Architecture& a = model.arch;
  const VariationalFactor& f = model.factor;
  const Index m = a.inducing;
  const Index tm = f.dim();
  Matrix prior = Matrix::Zero(tm, tm);
  for (int l = 0; l < a.layers(); ++l) {
    const Matrix k = prior_kmm(model, l);
    for (int t = 0; t < a.width(l); ++t) {
      prior.block(a.gp_index(l, t) * m, a.gp_index(l, t) * m, m, m) = k;
    }
  }
  const DenseFactor d = densify(f);
  const Eigen::LLT<Matrix> p(prior);
  const Matrix pl = p.matrixL();
  const double trace = p.solve(d.covariance).trace();
  const double quad = f.mu().dot(p.solve(f.mu()));
  const double logdet_p = 2.0 * pl.diagonal().array().log().sum();
  const double logdet_s = 2.0 * d.factor.diagonal().array().abs().log().sum();
  return 0.5 * (trace + quad - static_cast<double>(tm) + logdet_p - logdet_s);
}

double dense_reference_elbo(const DGPModel& model, const Batch& batch,
                            const ElboOptions& opt) {
  if (model.factor.dim() > 64) {
    throw TooLarge("dense_reference_elbo: T*M = " +
                   std::to_string(model.factor.dim()) + " exceeds 64");
  }
  batch.validate();
  double total = 0.0;
  for (Index i = 0; i < batch.size(); ++i) {
    for (int r = 0; r < opt.samples; ++r) {
      Rng rng(opt.seed, batch.keys[static_cast<size_t>(i)],
              static_cast<std::uint64_t>(r), StreamTag::LayerNoise);
      const auto posts = dense_layer_posteriors(model, batch.x.row(i), rng);
      total += expected_log_lik(batch.y(i), posts.back(), model.noise());
    }
  }
  const double n_total =
      static_cast<double>(opt.total_size > 0 ? opt.total_size : batch.size());
  return n_total / static_cast<double>(batch.size() * opt.samples) * total -
         dense_kl(model);
}

namespace {

// Squared-exponential kernel written out entry by entry.
double se(const KernelParams& k, const RowVector& a, const RowVector& b) {
  double d2 = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    const double ls = std::exp(k.log_lengthscales(i));
    const double r = (a(i) - b(i)) / ls;
    d2 += r * r;
  }
  return std::exp(k.log_variance) * std::exp(-0.5 * d2);
}

}  // namespace

double mean_field_reference_elbo(const DGPModel& model, const Batch& batch,
                                 const ElboOptions& opt) {
  const Architecture& a = model.arch;
  const VariationalFactor& f = model.factor;
  if (f.structure() != Structure::MeanField) {
    throw Error("mean_field_reference_elbo: factor is not mean-field");
  }
  const Index m = a.inducing;
  const int L = a.layers();

  std::vector<Matrix> kmm(static_cast<size_t>(L));
  std::vector<Eigen::LDLT<Matrix>> kinv;
  for (int l = 0; l < L; ++l) {
    const LayerParams& p = model.layer(l);
    Matrix k(m, m);
    for (Index i = 0; i < m; ++i)
      for (Index j = 0; j < m; ++j) k(i, j) = se(p.kernel, p.inducing.row(i), p.inducing.row(j));
    k.diagonal().array() += cholesky_escalating(k, model.jitter).second;
    kmm[static_cast<size_t>(l)] = k;
    kinv.emplace_back(k);
  }
  std::vector<Matrix> cov;
  for (int g = 0; g < a.total_gps(); ++g) {
    const Matrix lg = f.block(g, g).triangularView<Eigen::Lower>();
    cov.push_back(lg * lg.transpose());
  }

  double kl = 0.0;
  for (int g = 0; g < a.total_gps(); ++g) {
    const int l = a.layer_of(g);
    const auto& ki = kinv[static_cast<size_t>(l)];
    const Vector mu = f.mu_block(g);
    const Matrix& sg = cov[static_cast<size_t>(g)];
    kl += 0.5 * (ki.solve(sg).trace() + mu.dot(ki.solve(mu)) - static_cast<double>(m) +
                 ki.vectorD().array().log().sum() -
                 2.0 * f.block(g, g).diagonal().array().log().sum());
  }

  double total = 0.0;
  for (Index n = 0; n < batch.size(); ++n) {
    for (int r = 0; r < opt.samples; ++r) {
      Rng rng(opt.seed, batch.keys[static_cast<size_t>(n)],
              static_cast<std::uint64_t>(r), StreamTag::LayerNoise);
      RowVector h = batch.x.row(n);
      for (int l = 0; l < L; ++l) {
        const LayerParams& p = model.layer(l);
        Vector kxm(m);
        for (Index j = 0; j < m; ++j) kxm(j) = se(p.kernel, h, p.inducing.row(j));
        const auto& ki = kinv[static_cast<size_t>(l)];
        const Vector kt = ki.solve(kxm);
        const double kd = se(p.kernel, h, h) - kt.dot(kxm);
        const int tl = a.width(l);
        Vector mean(tl), var(tl);
        for (int t = 0; t < tl; ++t) {
          const int g = a.gp_index(l, t);
          mean(t) = kt.dot(f.mu_block(g));
          var(t) = kd + kt.dot(cov[static_cast<size_t>(g)] * kt);
        }
        if (l + 1 == L) {
          total += expected_log_lik(batch.y(n), mean(0), var(0), model.noise());
          break;
        }
        const Vector eps = rng.normal_vector(tl);
        const Vector fl = mean + (var.array() + kSampleJitter).sqrt().matrix().cwiseProduct(eps);
        h = h * p.mean_map + fl.transpose();
      }
    }
  }
  const double n_total =
      static_cast<double>(opt.total_size > 0 ? opt.total_size : batch.size());
  return n_total / static_cast<double>(batch.size() * opt.samples) * total - kl;
}

}  // namespace sdgp::oracle
