#include <doctest.h>

#include <cmath>

#include "structdgp/linalg.hpp"
#include "support/random_models.hpp"

using namespace sdgp;
using sdgp::testing::random_normal;
using sdgp::testing::random_spd;

namespace {

double rel_fro(const Matrix& a, const Matrix& b) {
  return (a - b).norm() / std::max(b.norm(), 1e-300);
}

}  // namespace

TEST_CASE("cholesky of the identity is the identity") {
  const LowerTriangular l = cholesky(Matrix::Identity(3, 3));
  CHECK((l.matrix() - Matrix::Identity(3, 3)).norm() == 0.0);
}

TEST_CASE("cholesky of a hand-expanded 2x2") {
  Matrix a(2, 2);
  a << 4, 2, 2, 3;
  const LowerTriangular l = cholesky(a);
  CHECK(l.matrix()(0, 0) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(l.matrix()(0, 1) == 0.0);
  CHECK(l.matrix()(1, 0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(l.matrix()(1, 1) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
}

TEST_CASE("cholesky reconstructs random SPD matrices") {
  Rng rng(11);
  for (int rep = 0; rep < 20; ++rep) {
    const Matrix a = random_spd(rng, 8);
    const LowerTriangular l = cholesky(a);
    CHECK(rel_fro(l.product(), a) < 1e-10);
    CHECK((l.matrix().triangularView<Eigen::StrictlyUpper>().toDenseMatrix().norm()) == 0.0);
  }
}

TEST_CASE("cholesky rejects bad input") {
  Matrix a(2, 2);
  a << 1, 2, 2, 1;
  CHECK_THROWS_AS(cholesky(a), NotPositiveDefinite);
  Matrix asym(2, 2);
  asym << 1, 0.5, 0.0, 1;
  CHECK_THROWS_AS(cholesky(asym), DimensionMismatch);
  CHECK_THROWS_AS(cholesky(Matrix::Zero(2, 3)), DimensionMismatch);
  CHECK_THROWS_AS(cholesky(Matrix::Identity(2, 2), -1.0), Error);
}

TEST_CASE("escalating jitter rescues a singular matrix") {
  const Matrix ones = Matrix::Ones(3, 3);
  auto [l, jitter] = cholesky_escalating(ones, 0.0);
  CHECK(jitter >= kDefaultJitter);
  CHECK(jitter <= kMaxJitter);
  Matrix shifted = ones;
  shifted.diagonal().array() += jitter;
  CHECK(rel_fro(l.product(), shifted) < 1e-10);

  Matrix neg = -Matrix::Identity(2, 2);
  CHECK_THROWS_AS(cholesky_escalating(neg), NotPositiveDefinite);
}

TEST_CASE("tri_solve examples") {
  Rng r3(3);
  const Matrix b = random_normal(r3, 4, 2);
  CHECK((tri_solve(LowerTriangular::identity(4), b) - b).norm() == 0.0);

  Matrix a(2, 2);
  a << 4, 2, 2, 3;
  const LowerTriangular l = cholesky(a);
  Matrix rhs(2, 1);
  rhs << 2, 1;
  const Matrix x = tri_solve(l, rhs);
  CHECK(x(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(std::abs(x(1, 0)) < 1e-15);

  Rng rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const LowerTriangular lr(sdgp::testing::random_lower(rng, 7, 0.5, 2.0, 1.0));
    const Matrix br = random_normal(rng, 7, 3);
    const Matrix xn = tri_solve(lr, br);
    CHECK((lr.matrix() * xn - br).norm() < 1e-10 * br.norm());
    const Matrix xt = tri_solve(lr, br, Transpose::Yes);
    CHECK((lr.matrix().transpose() * xt - br).norm() < 1e-10 * br.norm());
    const Matrix xs = chol_solve(lr, br);
    CHECK((lr.product() * xs - br).norm() < 1e-9 * br.norm());
  }
  CHECK_THROWS_AS(tri_solve(l, Matrix::Zero(3, 1)), DimensionMismatch);
}

TEST_CASE("block_chol_update trivial identity case") {
  const LowerTriangular l =
      block_chol_update(LowerTriangular::identity(2), Matrix::Zero(2, 1),
                        Matrix::Identity(1, 1));
  CHECK((l.matrix() - Matrix::Identity(3, 3)).norm() == 0.0);
}

TEST_CASE("block_chol_update matches the full factorisation") {
  Rng rng(2024);
  for (int rep = 0; rep < 200; ++rep) {
    const Index p = 1 + static_cast<Index>(rep % 6);
    const Index q = 1 + static_cast<Index>((rep / 6) % 4);
    const Matrix full = random_spd(rng, p + q);
    const LowerTriangular top = cholesky(full.topLeftCorner(p, p));
    const LowerTriangular upd = block_chol_update(
        top, full.topRightCorner(p, q), full.bottomRightCorner(q, q));
    const LowerTriangular ref = cholesky(full);
    CHECK(rel_fro(upd.matrix(), ref.matrix()) < 1e-8);
  }
}

TEST_CASE("block_chol_update with a cross column copied from the top block") {
  Rng rng(8);
  const Matrix a = random_spd(rng, 4);
  Matrix full(5, 5);
  full.topLeftCorner(4, 4) = a;
  full.topRightCorner(4, 1) = a.col(2);
  full.bottomLeftCorner(1, 4) = a.col(2).transpose();
  full(4, 4) = a(2, 2) + 0.3;
  const LowerTriangular upd = block_chol_update(
      cholesky(a), full.topRightCorner(4, 1), full.bottomRightCorner(1, 1));
  CHECK(upd.dim() == 5);
  CHECK(rel_fro(upd.product(), full) < 1e-10);
}

TEST_CASE("block_chol_update reports a failing Schur complement") {
  Matrix full(2, 2);
  full << 1, 1, 1, 1;
  CHECK_THROWS_AS(block_chol_update(LowerTriangular::identity(1),
                                    full.topRightCorner(1, 1),
                                    full.bottomRightCorner(1, 1) * 0.5),
                  NotPositiveDefinite);
}

TEST_CASE("gaussian_condition examples") {
  SUBCASE("scalar formula") {
    GaussianMoments joint{Vector::Zero(2), Matrix(2, 2)};
    joint.cov << 1, 0.5, 0.5, 1;
    auto [marg, cond] = gaussian_condition(joint, 1);
    Vector x(1);
    x << 1.0;
    const Vector mean = cond.offset + cond.gain * x;
    CHECK(mean(0) == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(cond.cov(0, 0) == doctest::Approx(0.75).epsilon(1e-14));
    CHECK(marg.cov(0, 0) == 1.0);
  }
  SUBCASE("independence") {
    Rng rng(4);
    GaussianMoments joint{random_normal(rng, 5, 1), Matrix::Zero(5, 5)};
    joint.cov.topLeftCorner(2, 2) = random_spd(rng, 2);
    const Matrix b = random_spd(rng, 3);
    joint.cov.bottomRightCorner(3, 3) = b;
    auto [marg, cond] = gaussian_condition(joint, 2);
    CHECK(cond.gain.norm() == 0.0);
    CHECK((cond.cov - b).norm() < 1e-14);
  }
  SUBCASE("bad split index") {
    GaussianMoments joint{Vector::Zero(2), Matrix::Identity(2, 2)};
    CHECK_THROWS_AS(gaussian_condition(joint, 0), IndexOutOfRange);
    CHECK_THROWS_AS(gaussian_condition(joint, 2), IndexOutOfRange);
  }
}

TEST_CASE("gaussian_condition agrees with conditional samples") {
  Rng rng(77);
  GaussianMoments joint{random_normal(rng, 3, 1), random_spd(rng, 3)};
  auto [marg, cond] = gaussian_condition(joint, 1);
  // Joint draws shifted onto x = x0 (pathwise conditioning).
  const double x0 = marg.mean(0) + 0.7;
  const LowerTriangular lj = cholesky(joint.cov);
  const long long n = 1000000;
  Vector sum = Vector::Zero(2);
  Matrix sum2 = Matrix::Zero(2, 2);
  for (long long i = 0; i < n; ++i) {
    const Vector z = joint.mean + lj.matrix() * rng.normal_vector(3);
    const double a = joint.cov(0, 0);
    const Vector y = z.tail(2) + joint.cov.block(1, 0, 2, 1) / a * (x0 - z(0));
    sum += y;
    sum2 += y * y.transpose();
  }
  const Vector mean = sum / static_cast<double>(n);
  const Matrix cov = sum2 / static_cast<double>(n) - mean * mean.transpose();
  Vector x(1);
  x << x0;
  const Vector expect = cond.offset + cond.gain * x;
  for (Index i = 0; i < 2; ++i) {
    const double se = std::sqrt(cond.cov(i, i) / static_cast<double>(n));
    CHECK(std::abs(mean(i) - expect(i)) < 3.0 * se);
    const double se_var = cond.cov(i, i) * std::sqrt(2.0 / static_cast<double>(n));
    CHECK(std::abs(cov(i, i) - cond.cov(i, i)) < 3.0 * se_var);
  }
}

TEST_CASE("gaussian_propagate examples") {
  Rng rng(9);
  GaussianMoments in{random_normal(rng, 3, 1), random_spd(rng, 3)};
  const GaussianMoments same = gaussian_propagate(
      Vector::Zero(3), Matrix::Identity(3, 3), Matrix::Zero(3, 3), in);
  CHECK((same.mean - in.mean).norm() == 0.0);
  CHECK((same.cov - in.cov).norm() == 0.0);

  GaussianMoments scalar{Vector::Ones(1), Matrix::Ones(1, 1)};
  Vector off(1);
  off << 0.25;
  const GaussianMoments out = gaussian_propagate(
      off, 2.0 * Matrix::Identity(1, 1), 3.0 * Matrix::Identity(1, 1), scalar);
  CHECK(out.mean(0) == doctest::Approx(2.25));
  CHECK(out.cov(0, 0) == doctest::Approx(7.0));

  CHECK_THROWS_AS(gaussian_propagate(Vector::Zero(2), Matrix::Identity(2, 3),
                                     Matrix::Zero(2, 2), scalar),
                  DimensionMismatch);
}

TEST_CASE("gaussian_propagate agrees with sampled composition") {
  Rng rng(10);
  GaussianMoments in{random_normal(rng, 2, 1), random_spd(rng, 2)};
  const Vector off = random_normal(rng, 2, 1);
  const Matrix gain = random_normal(rng, 2, 2);
  const Matrix noise = random_spd(rng, 2);
  const GaussianMoments out = gaussian_propagate(off, gain, noise, in);
  const LowerTriangular li = cholesky(in.cov), ln = cholesky(noise);
  const long long n = 200000;
  Vector sum = Vector::Zero(2);
  for (long long i = 0; i < n; ++i) {
    const Vector x = in.mean + li.matrix() * rng.normal_vector(2);
    sum += off + gain * x + ln.matrix() * rng.normal_vector(2);
  }
  const Vector mean = sum / static_cast<double>(n);
  for (Index i = 0; i < 2; ++i) {
    CHECK(std::abs(mean(i) - out.mean(i)) <
          3.0 * std::sqrt(out.cov(i, i) / static_cast<double>(n)));
  }
}

TEST_CASE("conditioning then propagating recovers the joint") {
  Rng rng(12);
  for (int rep = 0; rep < 20; ++rep) {
    GaussianMoments joint{random_normal(rng, 5, 1), random_spd(rng, 5)};
    auto [marg, cond] = gaussian_condition(joint, 2);
    const GaussianMoments y = gaussian_propagate(cond.offset, cond.gain, cond.cov, marg);
    CHECK((y.mean - joint.mean.tail(3)).norm() < 1e-10 * (1 + joint.mean.norm()));
    CHECK(rel_fro(y.cov, joint.cov.bottomRightCorner(3, 3)) < 1e-10);
  }
}

TEST_CASE("diag_of_product") {
  Rng rng(13);
  const Matrix b = random_normal(rng, 4, 4);
  const Matrix id = Matrix::Identity(4, 4);
  CHECK((diag_of_product(id, b, id) - b.diagonal()).norm() == 0.0);
  CHECK(diag_of_product(random_normal(rng, 5, 3), Matrix::Zero(5, 5),
                        random_normal(rng, 5, 3))
            .norm() == 0.0);
  for (int rep = 0; rep < 200; ++rep) {
    const Index r = 1 + rep % 7, k = 1 + (rep / 7) % 5, c = 1 + (rep / 35) % 6;
    const Matrix cm = random_normal(rng, r, c);
    const Matrix bm = random_normal(rng, r, k);
    const Matrix am = random_normal(rng, k, c);
    const Vector dense = (cm.transpose() * bm * am).diagonal();
    const Vector fast = diag_of_product(cm, bm, am);
    CHECK((fast - dense).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, dense.cwiseAbs().maxCoeff()));
  }
  CHECK_THROWS_AS(diag_of_product(Matrix::Zero(3, 2), Matrix::Zero(3, 3),
                                  Matrix::Zero(3, 3)),
                  DimensionMismatch);
}

TEST_CASE("pca_map") {
  Rng rng(14);
  SUBCASE("leading axis") {
    Matrix x(2000, 2);
    for (Index i = 0; i < x.rows(); ++i) {
      x(i, 0) = std::sqrt(3.0) * rng.normal();
      x(i, 1) = rng.normal();
    }
    const Matrix w = pca_map(x, 1);
    CHECK(std::abs(w(0, 0)) > 0.99);
    CHECK(w(0, 0) > 0.0);
  }
  SUBCASE("complete basis is orthogonal") {
    const Matrix x = random_normal(rng, 300, 3) * random_normal(rng, 3, 3);
    const Matrix w = pca_map(x, 3);
    CHECK((w.transpose() * w - Matrix::Identity(3, 3)).norm() < 1e-8);
    for (Index j = 0; j < 3; ++j) {
      Index arg = 0;
      w.col(j).cwiseAbs().maxCoeff(&arg);
      CHECK(w(arg, j) > 0.0);
    }
  }
  SUBCASE("padding") {
    const Matrix w = pca_map(random_normal(rng, 50, 2), 5);
    CHECK(w.rows() == 2);
    CHECK(w.rightCols(3).norm() == 0.0);
    CHECK(w.leftCols(2).colwise().norm().minCoeff() == doctest::Approx(1.0));
  }
  SUBCASE("constant data") {
    CHECK(pca_map(Matrix::Ones(10, 3), 2).norm() == 0.0);
  }
}

TEST_CASE("lower triangular validation") {
  Matrix m = Matrix::Identity(2, 2);
  m(1, 1) = 0.0;
  CHECK_THROWS_AS(LowerTriangular{m}, NotPositiveDefinite);
  Matrix up = Matrix::Identity(2, 2);
  up(0, 1) = 5.0;
  CHECK(LowerTriangular(up).matrix()(0, 1) == 0.0);
}
