#include <doctest.h>

#include <cmath>
#include <sstream>

#include "structdgp/variational.hpp"
#include "support/random_models.hpp"

using namespace sdgp;
using sdgp::testing::random_model;
using sdgp::testing::random_normal;

namespace {

const Structure kAll[] = {Structure::MeanField, Structure::StripesAndArrow,
                          Structure::FullyCoupled};

VariationalFactor random_factor(const Architecture& arch, Structure s,
                                std::uint64_t seed) {
  return random_model(arch, s, seed).factor;
}

// Whether GP block (g, gp) of S_M may be non-zero, derived from the
// definitions rather than from the library.
bool expected_cov_nonzero(const Architecture& a, Structure s, int g, int gp) {
  if (g == gp || s == Structure::FullyCoupled) return true;
  if (s == Structure::MeanField) return false;
  const int out = a.total_gps() - 1;
  if (g == out || gp == out) return true;
  return a.position_of(g) == a.position_of(gp);
}

}  // namespace

TEST_CASE("architecture indexing") {
  const Architecture a = Architecture::uniform(3, 3, 2, 4);
  CHECK(a.total_gps() == 5);
  CHECK(a.gp_offset(2) == 4);
  CHECK(a.layer_of(3) == 1);
  CHECK(a.position_of(3) == 1);
  CHECK(a.layer_input_dim(0) == 3);
  CHECK(a.layer_input_dim(2) == 2);
  CHECK(a.hidden_width() == 2);
  CHECK_THROWS_AS(a.layer_of(5), IndexOutOfRange);
  Architecture bad = a;
  bad.inducing = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("structure names") {
  for (Structure s : kAll) CHECK(parse_structure(to_string(s)) == s);
  CHECK(parse_structure("fully-coupled") == Structure::FullyCoupled);
  CHECK_THROWS_AS(parse_structure("banded"), Error);
}

TEST_CASE("storage sizes of the stripes-and-arrow factor") {
  for (int L = 2; L <= 5; ++L) {
    const int tau = 3;
    const VariationalFactor f(Architecture::uniform(2, L, tau, 2),
                              Structure::StripesAndArrow);
    CHECK(f.diag_blocks().size() == static_cast<size_t>(tau * (L - 1) + 1));
    CHECK(f.stripe_blocks().size() == static_cast<size_t>(tau * (L - 2) * (L - 1) / 2));
    CHECK(f.arrow_blocks().size() == static_cast<size_t>(tau * (L - 1)));
  }
  Architecture uneven;
  uneven.input_dim = 2;
  uneven.inducing = 2;
  uneven.widths = {2, 3, 1};
  CHECK_THROWS_AS(VariationalFactor(uneven, Structure::StripesAndArrow), Error);
  uneven.widths = {2, 2, 2};
  CHECK_THROWS_AS(VariationalFactor(uneven, Structure::StripesAndArrow), Error);
}

TEST_CASE("structural zeros are not addressable") {
  const Architecture a = Architecture::uniform(2, 3, 2, 3);
  const VariationalFactor mf(a, Structure::MeanField);
  CHECK_FALSE(mf.has_block(1, 0));
  CHECK_THROWS_AS(mf.block(1, 0), IndexOutOfRange);
  const VariationalFactor star(a, Structure::StripesAndArrow);
  CHECK(star.has_block(2, 0));   // stripe, position 0
  CHECK_FALSE(star.has_block(3, 0));
  CHECK(star.has_block(4, 3));   // arrow
  CHECK_FALSE(star.has_block(0, 2));  // upper triangle
}

TEST_CASE("densify pattern matches the declared structure") {
  const Architecture a = Architecture::uniform(2, 4, 2, 3);
  const Index m = a.inducing;
  for (Structure s : kAll) {
    const VariationalFactor f = random_factor(a, s, 5);
    const DenseFactor d = densify(f);
    for (int g = 0; g < a.total_gps(); ++g) {
      for (int gp = 0; gp < a.total_gps(); ++gp) {
        const double lnorm = d.factor.block(g * m, gp * m, m, m).norm();
        CHECK((lnorm > 0.0) == (gp <= g && f.has_block(g, gp)));
        const double snorm = d.covariance.block(g * m, gp * m, m, m).norm();
        CHECK((snorm > 0.0) == expected_cov_nonzero(a, s, g, gp));
        CHECK(covariance_block_nonzero(f, g, gp) == expected_cov_nonzero(a, s, g, gp));
      }
    }
  }
}

TEST_CASE("densify of identity mean-field is the identity") {
  const VariationalFactor f(Architecture::uniform(2, 3, 2, 3), Structure::MeanField);
  const DenseFactor d = densify(f);
  CHECK((d.factor - Matrix::Identity(15, 15)).norm() == 0.0);
  CHECK((d.covariance - Matrix::Identity(15, 15)).norm() == 0.0);
}

TEST_CASE("fully-coupled densify round trip is lossless") {
  const VariationalFactor f = random_factor(Architecture::uniform(2, 3, 2, 3),
                                            Structure::FullyCoupled, 3);
  const Matrix d = densify(f).factor;
  CHECK(d.triangularView<Eigen::StrictlyUpper>().toDenseMatrix().norm() == 0.0);
  for (const BlockId& b : f.pattern()) {
    Matrix stored = f.block(b.row, b.col);
    if (b.row == b.col) stored = stored.triangularView<Eigen::Lower>();
    CHECK((d.block(3 * b.row, 3 * b.col, 3, 3) - stored).norm() == 0.0);
  }
}

TEST_CASE("reconstruct_block agrees with densify") {
  for (int L : {2, 3, 4}) {
    const Architecture a = Architecture::uniform(2, L, 2, 3);
    const Index m = a.inducing;
    for (Structure s : kAll) {
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const VariationalFactor f = random_factor(a, s, 100 * seed + L);
        const Matrix sm = densify(f).covariance;
        for (int l = 0; l < L; ++l) {
          for (int lp = 0; lp < L; ++lp) {
            for (int t = 0; t < a.width(l); ++t) {
              for (int tp = 0; tp < a.width(lp); ++tp) {
                const int g = a.gp_index(l, t), gp = a.gp_index(lp, tp);
                const Matrix blk = reconstruct_block(f, l, lp, t, tp);
                CHECK((blk - sm.block(g * m, gp * m, m, m)).cwiseAbs().maxCoeff() < 1e-10);
              }
            }
          }
        }
      }
    }
  }
}

TEST_CASE("reconstruct_block special cases") {
  const Architecture a = Architecture::uniform(2, 3, 2, 3);
  const VariationalFactor mf = random_factor(a, Structure::MeanField, 1);
  const Matrix l0 = mf.block(1, 1).triangularView<Eigen::Lower>();
  CHECK((reconstruct_block(mf, 0, 0, 1, 1) - l0 * l0.transpose()).norm() < 1e-14);
  CHECK(reconstruct_block(mf, 1, 0, 0, 0).norm() == 0.0);
  CHECK_THROWS_AS(reconstruct_block(mf, 3, 0, 0, 0), IndexOutOfRange);

  // Fully coupled S^{21} = L^{20} (L^{10})^T + L^{21} (L^{11})^T for width 1.
  const Architecture chain = Architecture::uniform(1, 3, 1, 2);
  const VariationalFactor fc = random_factor(chain, Structure::FullyCoupled, 2);
  const Matrix d = densify(fc).factor;
  auto blk = [&](int i, int j) { return Matrix(d.block(2 * i, 2 * j, 2, 2)); };
  const Matrix expect = blk(2, 0) * blk(1, 0).transpose() + blk(2, 1) * blk(1, 1).transpose();
  CHECK((reconstruct_block(fc, 2, 1, 0, 0) - expect).norm() < 1e-12);
}

TEST_CASE("cholesky of a stripes-and-arrow covariance keeps the pattern") {
  for (int L : {3, 4}) {
    const Architecture a = Architecture::uniform(2, L, 3, 3);
    const Index m = a.inducing;
    const VariationalFactor f = random_factor(a, Structure::StripesAndArrow, 40 + L);
    const DenseFactor d = densify(f);
    const Matrix l = cholesky(d.covariance).matrix();
    CHECK((l - d.factor).cwiseAbs().maxCoeff() < 1e-8);
    for (int g = 0; g < a.total_gps(); ++g) {
      for (int gp = 0; gp < g; ++gp) {
        if (!f.has_block(g, gp)) {
          CHECK(l.block(g * m, gp * m, m, m).cwiseAbs().maxCoeff() < 1e-9);
        }
      }
    }
  }
}

TEST_CASE("logdet") {
  const Architecture a = Architecture::uniform(2, 3, 2, 3);
  CHECK(logdet(VariationalFactor(a, Structure::StripesAndArrow)) == 0.0);
  for (Structure s : kAll) {
    VariationalFactor f = random_factor(a, s, 9);
    const double dense = std::log(densify(f).covariance.determinant());
    CHECK(std::abs(logdet(f) - dense) < 1e-8);
    if (s != Structure::FullyCoupled) {
      const double before = logdet(f);
      f.block(2, 2).diagonal() *= 3.0;
      CHECK(logdet(f) - before == doctest::Approx(2.0 * 3 * std::log(3.0)).epsilon(1e-12));
    }
  }
}

TEST_CASE("nonzero counts") {
  CHECK(nonzero_count(Structure::MeanField, 5, 3, 128) == 180224);
  CHECK(nonzero_count(Structure::FullyCoupled, 5, 3, 128) == 1982464);
  CHECK(nonzero_count(Structure::MeanField, 1, 1, 7) == 49);
  // 11 diagonal, 5 stripe and 10 arrow blocks, off-diagonal ones counted twice.
  CHECK(nonzero_count(Structure::StripesAndArrow, 5, 3, 128) == 41LL * 128 * 128);
}

TEST_CASE("nonzero counts agree with a pattern scan") {
  for (Structure s : kAll) {
    for (int L : {2, 3, 4}) {
      for (int tau : {1, 2, 3}) {
        const Architecture a = Architecture::uniform(2, L, tau, 2);
        const Matrix sm = densify(random_factor(a, s, 7 * L + tau)).covariance;
        const long long scanned = (sm.array() != 0.0).count();
        CHECK(scanned == nonzero_count(s, tau, L, 2));
      }
    }
  }
}

TEST_CASE("init_factor") {
  const Architecture a = Architecture::uniform(2, 3, 2, 4);
  Rng rng(3);
  std::vector<KernelParams> kernels;
  std::vector<Matrix> z;
  for (int l = 0; l < 3; ++l) {
    kernels.push_back(KernelParams::with_dim(a.layer_input_dim(l), 1.0, 1.5));
    z.push_back(random_normal(rng, 4, a.layer_input_dim(l)));
  }
  for (Structure s : kAll) {
    const VariationalFactor f = init_factor(a, s, kernels, z, 1e-6);
    CHECK(f.mu().norm() == 0.0);
    const Matrix sm = densify(f).covariance;
    for (int g = 0; g < 5; ++g) {
      for (int gp = 0; gp < 5; ++gp) {
        if (g != gp) CHECK(sm.block(4 * g, 4 * gp, 4, 4).norm() == 0.0);
      }
    }
    // Hidden inducing variances start near 1e-5 times the kernel variance.
    CHECK(sm(0, 0) == doctest::Approx(1e-5 * (1.5 + 1e-6)).epsilon(1e-10));
    Matrix kout = kmat(kernels[2], z[2], z[2]);
    kout.diagonal().array() += 1e-6;
    CHECK((sm.bottomRightCorner(4, 4) - kout).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("restructure copies shared blocks") {
  const Architecture a = Architecture::uniform(2, 3, 2, 3);
  const VariationalFactor mf = random_factor(a, Structure::MeanField, 4);
  const VariationalFactor fc = to_fully_coupled(mf);
  CHECK((densify(fc).factor - densify(mf).factor).norm() == 0.0);
  CHECK((fc.mu() - mf.mu()).norm() == 0.0);
  const VariationalFactor star = random_factor(a, Structure::StripesAndArrow, 4);
  const VariationalFactor back = restructure(star, Structure::MeanField);
  for (int g = 0; g < a.total_gps(); ++g) {
    CHECK((back.block(g, g) - star.block(g, g)).norm() == 0.0);
  }
}

TEST_CASE("validate rejects non-positive pivots") {
  VariationalFactor f(Architecture::uniform(2, 2, 2, 3), Structure::MeanField);
  CHECK_NOTHROW(f.validate());
  f.block(1, 1)(2, 2) = -1.0;
  CHECK_THROWS(f.validate());
}

TEST_CASE("log-absolute covariance export") {
  const Architecture a = Architecture::uniform(2, 3, 2, 2);
  const Index m = a.inducing;
  for (Structure s : {Structure::MeanField, Structure::StripesAndArrow}) {
    const VariationalFactor f = random_factor(a, s, 12);
    std::stringstream out;
    export_log_abs_covariance(f, out);
    const Matrix sm = densify(f).covariance;
    Matrix parsed(sm.rows(), sm.cols());
    std::string line;
    for (Index i = 0; i < sm.rows(); ++i) {
      REQUIRE(std::getline(out, line));
      std::stringstream row(line);
      std::string cell;
      for (Index j = 0; j < sm.cols(); ++j) {
        REQUIRE(std::getline(row, cell, ','));
        parsed(i, j) = std::stod(cell);
      }
    }
    for (int g = 0; g < a.total_gps(); ++g) {
      for (int gp = 0; gp < a.total_gps(); ++gp) {
        const Matrix blk = parsed.block(g * m, gp * m, m, m);
        if (!expected_cov_nonzero(a, s, g, gp)) {
          CHECK((blk.array() == kLogAbsClamp).all());
        }
      }
    }
    for (Index i = 0; i < sm.rows(); ++i) {
      for (Index j = 0; j < sm.cols(); ++j) {
        if (parsed(i, j) > kLogAbsClamp) {
          CHECK(std::exp(parsed(i, j)) ==
                doctest::Approx(std::abs(sm(i, j))).epsilon(1e-6));
        }
      }
    }
  }
}
