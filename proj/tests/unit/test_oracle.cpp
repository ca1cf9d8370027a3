#include <doctest.h>

#include <cmath>
#include <numbers>

#include "structdgp/oracle.hpp"
#include "support/random_models.hpp"

using namespace sdgp;
using sdgp::testing::random_batch;
using sdgp::testing::random_model;
using sdgp::testing::random_normal;
using sdgp::testing::rel_diff;

namespace {

const Structure kAll[] = {Structure::MeanField, Structure::StripesAndArrow,
                          Structure::FullyCoupled};

struct Analytic {
  LayerPosterior post;
  Vector fixed;
};

// Samples layers before l, then returns the analytic conditional of layer l.
Analytic analytic_conditional(const DGPModel& m, const RowVector& x, int l, Rng& rng) {
  const PreparedModel prep(m);
  LayerState st = LayerState::start(x);
  for (int lp = 0; lp < l; ++lp) sample_layer(prep, lp, st, rng);
  enter_layer(prep, l, st);
  return {layer_posterior(prep, l, st), st.samples};
}

// Small enough posterior spread, and inputs away from the inducing points, so
// that importance weights stay healthy.
sdgp::testing::RandomModelOptions oracle_options() {
  sdgp::testing::RandomModelOptions opt;
  opt.factor_scale = 0.3;
  opt.coupling = 0.15;
  return opt;
}

void check_within_3se(const oracle::McMoments& mc, const LayerPosterior& post) {
  for (Index i = 0; i < post.mu_hat.size(); ++i) {
    CHECK(std::abs(mc.mean(i) - post.mu_hat(i)) <= 3.0 * mc.mean_se(i));
    for (Index j = 0; j <= i; ++j) {
      CHECK(std::abs(mc.cov(i, j) - post.sigma_hat(i, j)) <= 3.0 * mc.cov_se(i, j));
    }
  }
}

}  // namespace

TEST_CASE("oracle without conditioning is plain Monte Carlo") {
  const Architecture a = Architecture::uniform(2, 2, 2, 4);
  const DGPModel m = random_model(a, Structure::FullyCoupled, 1);
  Rng rng(1);
  const RowVector x = random_normal(rng, 1, 2);
  const Analytic an = analytic_conditional(m, x, 0, rng);
  const oracle::McMoments mc = oracle::mc_layer_conditional(m, x, Vector(0), 0, 100000, rng);
  CHECK(mc.ess == doctest::Approx(100000.0));
  check_within_3se(mc, an.post);
}

TEST_CASE("oracle agrees with the mean-field conditional") {
  const Architecture a = Architecture::uniform(2, 2, 2, 4);
  const DGPModel m = random_model(a, Structure::MeanField, 2, oracle_options());
  Rng rng(2);
  const RowVector x = random_normal(rng, 1, 2, 2.0);
  const Analytic an = analytic_conditional(m, x, 1, rng);
  const oracle::McMoments mc = oracle::mc_layer_conditional(m, x, an.fixed, 1, 100000, rng);
  check_within_3se(mc, an.post);
}

TEST_CASE("oracle agrees with the coupled conditional at the second layer") {
  for (Structure s : {Structure::StripesAndArrow, Structure::FullyCoupled}) {
    const Architecture a = Architecture::uniform(2, 2, 2, 4);
    const DGPModel m = random_model(a, s, 3, oracle_options());
    Rng rng(3);
    const RowVector x = random_normal(rng, 1, 2, 2.0);
    const Analytic an = analytic_conditional(m, x, 1, rng);
    const oracle::McMoments mc = oracle::mc_layer_conditional(m, x, an.fixed, 1, 100000, rng);
    CHECK(mc.ess > 1000.0);
    check_within_3se(mc, an.post);
  }
}

TEST_CASE("oracle guards") {
  Rng rng(4);
  const DGPModel big = random_model(Architecture::uniform(2, 3, 3, 5), Structure::MeanField, 4);
  CHECK_THROWS_AS(oracle::mc_layer_conditional(big, RowVector::Zero(2), Vector(0), 0, 10000, rng),
                  TooLarge);
  const DGPModel m = random_model(Architecture::uniform(2, 2, 2, 4), Structure::MeanField, 4);
  CHECK_THROWS_AS(oracle::mc_layer_conditional(m, RowVector::Zero(2), Vector(0), 0, 100, rng),
                  Error);
  CHECK_THROWS_AS(oracle::mc_layer_conditional(m, RowVector::Zero(2), Vector(1), 1, 10000, rng),
                  DimensionMismatch);
  // Conditioning values far in the tails leave almost no effective samples.
  sdgp::testing::RandomModelOptions tight;
  tight.factor_scale = 0.05;
  tight.coupling = 0.01;
  const DGPModel t = random_model(Architecture::uniform(1, 2, 1, 4), Structure::FullyCoupled, 5, tight);
  Matrix x(1, 1);
  x << 0.0;
  t.validate();
  const Vector far = Vector::Constant(1, 1e3);
  CHECK_THROWS_AS(oracle::mc_layer_conditional(t, x, far, 1, 10000, rng), DegenerateWeights);
}

TEST_CASE("dense reference ELBO matches the main path") {
  for (Structure s : kAll) {
    for (int rep = 0; rep < 50; ++rep) {
      const int L = 1 + rep % 3;
      const Architecture a = Architecture::uniform(2, L, 1 + rep % 2, 3);
      const DGPModel m = random_model(a, s, 200 + rep);
      const Batch b = random_batch(a, 4, 200 + rep);
      ElboOptions o;
      o.samples = 2;
      o.seed = static_cast<std::uint64_t>(rep);
      const double main = elbo(m, b, o).value;
      CHECK(std::abs(main - oracle::dense_reference_elbo(m, b, o)) <
            1e-8 * std::max(1.0, std::abs(main)));
      if (s == Structure::MeanField) {
        CHECK(std::abs(main - oracle::mean_field_reference_elbo(m, b, o)) <
              1e-10 * std::max(1.0, std::abs(main)));
      }
    }
  }
  const DGPModel big = random_model(Architecture::uniform(2, 3, 4, 8), Structure::MeanField, 9);
  CHECK_THROWS_AS(oracle::dense_reference_elbo(big, random_batch(big.arch, 2, 1), {}), TooLarge);
}

TEST_CASE("zero-variance factor reduces to mean propagation") {
  const Architecture a = Architecture::uniform(2, 3, 2, 3);
  sdgp::testing::RandomModelOptions opt;
  opt.factor_scale = 1e-9;
  opt.coupling = 0.0;
  const DGPModel m = random_model(a, Structure::FullyCoupled, 10, opt);
  const Batch b = random_batch(a, 5, 10);
  ElboOptions o;
  o.seed = 2;
  CHECK(rel_diff(elbo(m, b, o).value, oracle::dense_reference_elbo(m, b, o)) < 1e-8);
}

TEST_CASE("dense layer posteriors follow the same path") {
  for (Structure s : kAll) {
    const Architecture a = Architecture::uniform(2, 3, 2, 3);
    const DGPModel m = random_model(a, s, 11);
    Rng xr(11);
    const RowVector x = random_normal(xr, 1, 2);
    Rng r1(5, 0, 0, StreamTag::LayerNoise), r2(5, 0, 0, StreamTag::LayerNoise);
    const std::vector<LayerPosterior> dense = oracle::dense_layer_posteriors(m, x, r1);
    const LayerPosterior last = final_layer_posterior(PreparedModel(m), x, r2);
    REQUIRE(dense.size() == 3);
    CHECK(std::abs(dense.back().mu_hat(0) - last.mu_hat(0)) < 1e-9);
    CHECK(std::abs(dense.back().sigma_hat(0, 0) - last.sigma_hat(0, 0)) < 1e-9);
  }
}

TEST_CASE("exact GP marginal likelihood") {
  Matrix x(1, 1);
  x << 0.4;
  CHECK(oracle::exact_gp_lml(x, Vector::Zero(1), KernelParams::with_dim(1), 0.0) ==
        doctest::Approx(-0.5 * std::log(2 * std::numbers::pi)).epsilon(1e-14));

  // Two points against a quadrature of p(y) = E_u N(y | L u, noise I).
  Matrix x2(2, 1);
  x2 << -0.3, 0.5;
  Vector y(2);
  y << 0.2, -0.4;
  KernelParams k = KernelParams::with_dim(1, 0.8, 1.3);
  const double noise = 0.2;
  const Matrix l = cholesky(kmat(k, x2, x2)).matrix();
  const double h = 0.01;
  double acc = 0;
  for (double u1 = -9; u1 <= 9; u1 += h) {
    for (double u2 = -9; u2 <= 9; u2 += h) {
      const double f1 = l(0, 0) * u1, f2 = l(1, 0) * u1 + l(1, 1) * u2;
      const double r1 = y(0) - f1, r2 = y(1) - f2;
      acc += std::exp(-0.5 * (u1 * u1 + u2 * u2) - (r1 * r1 + r2 * r2) / (2 * noise));
    }
  }
  const double p = acc * h * h / (2 * std::numbers::pi) / (2 * std::numbers::pi * noise);
  CHECK(std::abs(oracle::exact_gp_lml(x2, y, k, noise) - std::log(p)) < 1e-6);
}
