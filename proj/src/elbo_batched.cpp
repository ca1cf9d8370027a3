#include <cmath>

#include "structdgp/autodiff.hpp"
#include "structdgp/training.hpp"

namespace sdgp {

namespace {

using ad::Tape;
using ad::Var;

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// Null entries stand for structural zeros and are skipped.
Var plus(Var acc, Var x) { return acc ? ad::add(acc, x) : x; }
Var plus_prod(Var acc, Var a, Var b) {
  return acc ? ad::add_prod(acc, a, b) : ad::mul(a, b);
}
Var minus_prod(Var acc, Var a, Var b) {
  return acc ? ad::sub_prod(acc, a, b) : ad::neg(ad::mul(a, b));
}

struct Graph {
  const DGPModel& model;
  const Architecture& arch;
  const VariationalFactor& factor;
  Tape tape;
  Index rows = 0;  // batch size times R

  std::vector<Var> log_ls, log_var, z, mu, block_param, block;
  Var log_noise;
  std::vector<Var> kmm_chol;
  std::vector<int> block_slot;  // (g, k) -> pattern index or -1

  explicit Graph(const DGPModel& m)
      : model(m), arch(m.arch), factor(m.factor) {}

  int slot(int g, int k) const {
    return block_slot[static_cast<size_t>(g) * arch.total_gps() + k];
  }

  void build_leaves() {
    const int L = arch.layers();
    for (int l = 0; l < L; ++l) {
      const LayerParams& p = model.layer(l);
      log_ls.push_back(tape.variable(p.kernel.log_lengthscales));
      log_var.push_back(tape.variable(Matrix::Constant(1, 1, p.kernel.log_variance)));
    }
    for (int l = 0; l < L; ++l) z.push_back(tape.variable(model.layer(l).inducing));
    log_noise = tape.variable(Matrix::Constant(1, 1, model.log_noise));
    for (int g = 0; g < arch.total_gps(); ++g) {
      mu.push_back(tape.variable(Matrix(factor.mu_block(g))));
    }
    const int t_total = arch.total_gps();
    block_slot.assign(static_cast<size_t>(t_total) * t_total, -1);
    const auto& pattern = factor.pattern();
    for (size_t i = 0; i < pattern.size(); ++i) {
      const BlockId& b = pattern[i];
      block_slot[static_cast<size_t>(b.row) * t_total + b.col] = static_cast<int>(i);
      Matrix value = factor.block(b.row, b.col);
      if (b.row == b.col) {
        value.triangularView<Eigen::StrictlyUpper>().setZero();
        value.diagonal() = value.diagonal().array().log().matrix();
        Var theta = tape.variable(std::move(value));
        block_param.push_back(theta);
        block.push_back(ad::lower_from_param(theta));
      } else {
        Var raw = tape.variable(std::move(value));
        block_param.push_back(raw);
        block.push_back(raw);
      }
    }
    for (int l = 0; l < L; ++l) {
      Var k = ad::rbf(z[static_cast<size_t>(l)], z[static_cast<size_t>(l)],
                      log_ls[static_cast<size_t>(l)], log_var[static_cast<size_t>(l)]);
      kmm_chol.push_back(ad::cholesky(k, model.jitter));
    }
  }

  Var kl() {
    Var trace, quad, logdet_s, logdet_p;
    for (int l = 0; l < arch.layers(); ++l) {
      logdet_p = plus(logdet_p, ad::scale(ad::log_diag_sum(kmm_chol[static_cast<size_t>(l)]),
                                          2.0 * arch.width(l)));
    }
    for (int g = 0; g < arch.total_gps(); ++g) {
      Var lk = kmm_chol[static_cast<size_t>(arch.layer_of(g))];
      quad = plus(quad, ad::sum_squares(ad::tri_solve(lk, mu[static_cast<size_t>(g)])));
      for (int k : factor.row_pattern(g)) {
        const int s = slot(g, k);
        trace = plus(trace, ad::sum_squares(ad::tri_solve(lk, block[static_cast<size_t>(s)])));
        if (k == g) {
          logdet_s = plus(logdet_s, ad::scale(ad::trace(block_param[static_cast<size_t>(s)]), 2.0));
        }
      }
    }
    Var total = ad::sub(ad::add(ad::add(trace, quad), logdet_p), logdet_s);
    return ad::scale(ad::shift(total, -static_cast<double>(factor.dim())), 0.5);
  }

  // K~^T (M x rows) and k~diag (rows x 1) for layer l at inputs h.
  std::pair<Var, Var> conditional(int l, Var h) {
    const auto ul = static_cast<size_t>(l);
    Var kmn = ad::rbf(z[ul], h, log_ls[ul], log_var[ul]);
    Var v = ad::tri_solve(kmm_chol[ul], kmn);
    Var kt = ad::tri_solve(kmm_chol[ul], v, true);
    Var kd = ad::sub(ad::broadcast(ad::exp(log_var[ul]), rows, 1), ad::col_dot(v, v));
    return {kt, kd};
  }
};

struct Noise {
  std::vector<Matrix> layer;  // per hidden layer, rows x T_l
  Matrix inducing;            // (T*M) x rows, sampled estimator only
};

Noise draw_noise(const DGPModel& model, const Batch& batch, const ElboOptions& opt) {
  const Architecture& a = model.arch;
  const int L = a.layers();
  const Index rows = batch.size() * opt.samples;
  Noise n;
  for (int l = 0; l + 1 < L; ++l) n.layer.emplace_back(rows, a.width(l));
  if (opt.estimator == Estimator::SampledInducing) {
    n.inducing.resize(model.factor.dim(), rows);
  }
  for (Index b = 0; b < batch.size(); ++b) {
    const std::uint64_t key = batch.keys[static_cast<size_t>(b)];
    for (int r = 0; r < opt.samples; ++r) {
      const Index i = b * opt.samples + r;
      const auto rr = static_cast<std::uint64_t>(r);
      Rng rng(opt.seed, key, rr, StreamTag::LayerNoise);
      for (int l = 0; l + 1 < L; ++l) {
        for (int t = 0; t < a.width(l); ++t) n.layer[static_cast<size_t>(l)](i, t) = rng.normal();
      }
      if (opt.estimator == Estimator::SampledInducing) {
        Rng fm(opt.seed, key, rr, StreamTag::InducingNoise);
        n.inducing.col(i) = fm.normal_vector(model.factor.dim());
      }
    }
  }
  return n;
}

// Final-layer mean and variance per row, all f_M marginalised.
std::pair<Var, Var> analytic_output(Graph& gr, Var h, const Noise& noise) {
  const Architecture& a = gr.arch;
  const VariationalFactor& f = gr.factor;
  const int L = a.layers();
  const bool coupled = f.structure() != Structure::MeanField;
  std::vector<Var> q(f.pattern().size());  // L_gk^T K~^T per pattern block

  // Running state over conditioning variables p = global GP index.
  std::vector<Var> run_resid;
  std::vector<std::vector<Var>> run_chol;

  auto s_tilde = [&](int g, int gp) {
    Var acc;
    const auto& rg = f.row_pattern(g);
    const auto& rgp = f.row_pattern(gp);
    size_t i = 0, j = 0;
    while (i < rg.size() && j < rgp.size()) {
      if (rg[i] == rgp[j]) {
        Var qa = q[static_cast<size_t>(gr.slot(g, rg[i]))];
        Var qb = q[static_cast<size_t>(gr.slot(gp, rgp[j]))];
        acc = plus(acc, ad::col_dot(qa, qb));
        ++i;
        ++j;
      } else if (rg[i] < rgp[j]) {
        ++i;
      } else {
        ++j;
      }
    }
    return acc;
  };

  for (int l = 0; l < L; ++l) {
    const int tl = a.width(l);
    const int off = a.gp_offset(l);
    const size_t p_dim = static_cast<size_t>(off);
    auto [kt, kd] = gr.conditional(l, h);
    std::vector<Var> mu_t(static_cast<size_t>(tl));
    for (int t = 0; t < tl; ++t) {
      const int g = off + t;
      for (int k : f.row_pattern(g)) {
        const int s = gr.slot(g, k);
        q[static_cast<size_t>(s)] = ad::matmul(gr.block[static_cast<size_t>(s)], kt, true, false);
      }
      mu_t[static_cast<size_t>(t)] = ad::matmul(kt, gr.mu[static_cast<size_t>(g)], true, false);
    }

    // Sigma[t][t'] for t' <= t, starting from S~^{ll}.
    std::vector<std::vector<Var>> sigma(static_cast<size_t>(tl));
    std::vector<Var> mu_hat = mu_t;
    for (int t = 0; t < tl; ++t) {
      for (int tp = 0; tp <= t; ++tp) {
        Var s = s_tilde(off + t, off + tp);
        if (tp == t) s = plus(s, kd);
        sigma[static_cast<size_t>(t)].push_back(s);
      }
    }

    std::vector<std::vector<Var>> v(static_cast<size_t>(tl),
                                    std::vector<Var>(p_dim));
    if (coupled && p_dim > 0) {
      // w = Lrun^{-1} (f - mu~), v_t = Lrun^{-1} S~^{1:l-1, (l,t)}.
      std::vector<Var> w(p_dim);
      for (size_t p = 0; p < p_dim; ++p) {
        Var acc = run_resid[p];
        for (size_t j = 0; j < p; ++j) {
          if (run_chol[p][j] && w[j]) acc = minus_prod(acc, run_chol[p][j], w[j]);
        }
        w[p] = ad::div(acc, run_chol[p][p]);
      }
      for (int t = 0; t < tl; ++t) {
        auto& vt = v[static_cast<size_t>(t)];
        for (size_t p = 0; p < p_dim; ++p) {
          Var acc = s_tilde(off + t, static_cast<int>(p));
          for (size_t j = 0; j < p; ++j) {
            if (run_chol[p][j] && vt[j]) acc = minus_prod(acc, run_chol[p][j], vt[j]);
          }
          if (acc) vt[p] = ad::div(acc, run_chol[p][p]);
        }
        for (size_t p = 0; p < p_dim; ++p) {
          if (vt[p]) mu_hat[static_cast<size_t>(t)] = plus_prod(mu_hat[static_cast<size_t>(t)], vt[p], w[p]);
        }
      }
      for (int t = 0; t < tl; ++t) {
        for (int tp = 0; tp <= t; ++tp) {
          Var& s = sigma[static_cast<size_t>(t)][static_cast<size_t>(tp)];
          for (size_t p = 0; p < p_dim; ++p) {
            Var a1 = v[static_cast<size_t>(t)][p];
            Var a2 = v[static_cast<size_t>(tp)][p];
            if (a1 && a2) s = minus_prod(s, a1, a2);
          }
        }
      }
    }

    if (l + 1 == L) return {mu_hat[0], sigma[0][0]};

    // C = chol(Sigma + jitter) row by row, f = mu^ + C eps.
    std::vector<std::vector<Var>> c(static_cast<size_t>(tl));
    const Matrix& eps = noise.layer[static_cast<size_t>(l)];
    std::vector<Var> eps_t, f_t;
    for (int t = 0; t < tl; ++t) eps_t.push_back(gr.tape.constant(eps.col(t)));
    for (int t = 0; t < tl; ++t) {
      auto& ct = c[static_cast<size_t>(t)];
      ct.resize(static_cast<size_t>(t) + 1);
      for (int tp = 0; tp < t; ++tp) {
        Var acc = sigma[static_cast<size_t>(t)][static_cast<size_t>(tp)];
        for (int j = 0; j < tp; ++j) {
          Var a1 = ct[static_cast<size_t>(j)];
          Var a2 = c[static_cast<size_t>(tp)][static_cast<size_t>(j)];
          if (a1 && a2) acc = minus_prod(acc, a1, a2);
        }
        if (acc) ct[static_cast<size_t>(tp)] = ad::div(acc, c[static_cast<size_t>(tp)][static_cast<size_t>(tp)]);
      }
      Var d = ad::shift(sigma[static_cast<size_t>(t)][static_cast<size_t>(t)], kSampleJitter);
      for (int j = 0; j < t; ++j) {
        Var a1 = ct[static_cast<size_t>(j)];
        if (a1) d = minus_prod(d, a1, a1);
      }
      ct[static_cast<size_t>(t)] = ad::sqrt(d);
      Var ft = mu_hat[static_cast<size_t>(t)];
      for (int j = 0; j <= t; ++j) {
        if (ct[static_cast<size_t>(j)]) ft = ad::add_prod(ft, ct[static_cast<size_t>(j)], eps_t[static_cast<size_t>(j)]);
      }
      f_t.push_back(ft);
    }

    if (coupled) {
      for (int t = 0; t < tl; ++t) {
        run_resid.push_back(ad::sub(f_t[static_cast<size_t>(t)], mu_t[static_cast<size_t>(t)]));
        std::vector<Var> row = v[static_cast<size_t>(t)];
        for (int tp = 0; tp <= t; ++tp) row.push_back(c[static_cast<size_t>(t)][static_cast<size_t>(tp)]);
        run_chol.push_back(std::move(row));
      }
    }
    Var w_map = gr.tape.constant(gr.model.layer(l).mean_map);
    h = ad::add(ad::matmul(h, w_map), ad::hcat(f_t));
  }
  return {};
}

// Final-layer mean and variance per row given one f_M draw per row.
std::pair<Var, Var> sampled_output(Graph& gr, Var h, const Noise& noise) {
  const Architecture& a = gr.arch;
  const VariationalFactor& f = gr.factor;
  const Index m = a.inducing;
  const int L = a.layers();
  Var ones = gr.tape.constant(Matrix::Ones(1, gr.rows));
  std::vector<Var> fm;
  for (int g = 0; g < a.total_gps(); ++g) {
    Var acc = ad::matmul(gr.mu[static_cast<size_t>(g)], ones);
    for (int k : f.row_pattern(g)) {
      Var e = gr.tape.constant(noise.inducing.middleRows(static_cast<Index>(k) * m, m));
      acc = ad::add(acc, ad::matmul(gr.block[static_cast<size_t>(gr.slot(g, k))], e));
    }
    fm.push_back(acc);
  }
  for (int l = 0; l < L; ++l) {
    auto [kt, kd] = gr.conditional(l, h);
    const int off = a.gp_offset(l);
    if (l + 1 == L) return {ad::col_dot(kt, fm[static_cast<size_t>(off)]), kd};
    Var sd = ad::sqrt(ad::shift(kd, kSampleJitter));
    std::vector<Var> f_t;
    for (int t = 0; t < a.width(l); ++t) {
      Var mean = ad::col_dot(kt, fm[static_cast<size_t>(off + t)]);
      Var eps = gr.tape.constant(noise.layer[static_cast<size_t>(l)].col(t));
      f_t.push_back(ad::add_prod(mean, sd, eps));
    }
    Var w_map = gr.tape.constant(gr.model.layer(l).mean_map);
    h = ad::add(ad::matmul(h, w_map), ad::hcat(f_t));
  }
  return {};
}

}  // namespace

ElboGradient elbo_and_gradient(const DGPModel& model, const Batch& batch,
                               const ElboOptions& opt) {
  batch.validate();
  if (opt.samples < 1) throw Error("elbo_and_gradient: R must be >= 1");
  if (model.arch.widths.back() != 1) {
    throw DimensionMismatch("elbo_and_gradient: output layer must have one GP");
  }
  const Architecture& a = model.arch;
  const Index b = batch.size();
  const Index rows = b * opt.samples;

  Graph gr(model);
  gr.rows = rows;
  gr.build_leaves();
  const Noise noise = draw_noise(model, batch, opt);

  Matrix h0(rows, batch.x.cols());
  Matrix ycol(rows, 1);
  for (Index i = 0; i < b; ++i) {
    for (int r = 0; r < opt.samples; ++r) {
      h0.row(i * opt.samples + r) = batch.x.row(i);
      ycol(i * opt.samples + r, 0) = batch.y(i);
    }
  }
  Var h = gr.tape.constant(std::move(h0));
  auto [mu_out, var_out] = opt.estimator == Estimator::Analytic
                               ? analytic_output(gr, h, noise)
                               : sampled_output(gr, h, noise);

  Var y = gr.tape.constant(std::move(ycol));
  Var sq = ad::sum(ad::add(ad::square(ad::sub(y, mu_out)), var_out));
  const double nr = static_cast<double>(rows);
  Var ell = ad::add(ad::scale(gr.log_noise, -0.5 * nr),
                    ad::scale(ad::mul(sq, ad::exp(ad::neg(gr.log_noise))), -0.5));
  ell = ad::shift(ell, -0.5 * nr * kLog2Pi);
  const double n_total = static_cast<double>(opt.total_size > 0 ? opt.total_size : b);
  Var ell_scaled = ad::scale(ell, n_total / nr);
  Var kl = gr.kl();
  Var objective = ad::sub(ell_scaled, kl);
  gr.tape.backward(objective);

  ElboGradient out;
  out.terms.value = objective.scalar();
  out.terms.expected_log_lik = ell_scaled.scalar();
  out.terms.kl = kl.scalar();

  const ParamLayout layout = param_layout(model);
  out.gradient.resize(layout.size);
  Index at = 0;
  auto put = [&](const Matrix& g) {
    out.gradient.segment(at, g.size()) = g.reshaped();
    at += g.size();
  };
  for (int l = 0; l < a.layers(); ++l) {
    put(gr.tape.gradient(gr.log_ls[static_cast<size_t>(l)]));
    put(gr.tape.gradient(gr.log_var[static_cast<size_t>(l)]));
  }
  for (int l = 0; l < a.layers(); ++l) put(gr.tape.gradient(gr.z[static_cast<size_t>(l)]));
  put(gr.tape.gradient(gr.log_noise));
  for (int g = 0; g < a.total_gps(); ++g) put(gr.tape.gradient(gr.mu[static_cast<size_t>(g)]));
  const Index m = a.inducing;
  const auto& pattern = model.factor.pattern();
  for (size_t i = 0; i < pattern.size(); ++i) {
    const Matrix g = gr.tape.gradient(gr.block_param[i]);
    if (pattern[i].row == pattern[i].col) {
      for (Index j = 0; j < m; ++j) {
        for (Index r = j; r < m; ++r) out.gradient(at++) = g(r, j);
      }
    } else {
      put(g);
    }
  }
  return out;
}

}  // namespace sdgp
