#include <doctest.h>

#include <cmath>
#include <functional>

#include "structdgp/autodiff.hpp"
#include "structdgp/kernel.hpp"
#include "structdgp/training.hpp"
#include "support/random_models.hpp"

using namespace sdgp;
using sdgp::testing::random_normal;

namespace {

using Build = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

struct Shape {
  Index rows, cols;
};

// Compares reverse-mode gradients of sum(W .* build(inputs)) against central
// differences for every input entry.
double max_grad_error(const std::vector<Shape>& shapes, const Build& build,
                      std::uint64_t seed, double positive_shift = 0.0) {
  Rng rng(seed);
  std::vector<Matrix> values;
  Index total = 0;
  for (const Shape& s : shapes) {
    values.push_back(random_normal(rng, s.rows, s.cols).array() + positive_shift);
    total += s.rows * s.cols;
  }
  Matrix weights;
  auto evaluate = [&](const std::vector<Matrix>& vals, std::vector<Matrix>* grads) {
    ad::Tape tape;
    std::vector<ad::Var> leaves;
    for (const Matrix& v : vals) leaves.push_back(tape.variable(v));
    const ad::Var out = build(tape, leaves);
    if (weights.size() == 0) {
      Rng wr(seed + 1);
      weights = random_normal(wr, out.rows(), out.cols());
    }
    const ad::Var loss = ad::sum(ad::mul(out, tape.constant(weights)));
    if (grads) {
      tape.backward(loss);
      for (const ad::Var& l : leaves) grads->push_back(tape.gradient(l));
    }
    return loss.scalar();
  };
  std::vector<Matrix> grads;
  evaluate(values, &grads);

  Vector theta(total), analytic(total);
  Index k = 0;
  for (size_t i = 0; i < values.size(); ++i) {
    for (Index j = 0; j < values[i].size(); ++j, ++k) {
      theta(k) = values[i].data()[j];
      analytic(k) = grads[i].data()[j];
    }
  }
  auto unpack = [&](const Vector& t) {
    std::vector<Matrix> out = values;
    Index p = 0;
    for (Matrix& m : out)
      for (Index j = 0; j < m.size(); ++j) m.data()[j] = t(p++);
    return out;
  };
  const Vector fd = fd_gradient([&](const Vector& t) { return evaluate(unpack(t), nullptr); },
                                theta, 1e-6);
  return (fd - analytic).cwiseAbs().maxCoeff() / std::max(1.0, fd.cwiseAbs().maxCoeff());
}

ad::Var spd(ad::Tape& t, ad::Var x) {
  const Index n = x.rows();
  return ad::add_constant(ad::matmul(x, x, false, true),
                          static_cast<double>(n) * Matrix::Identity(n, n));
}

}  // namespace

TEST_CASE("elementwise op gradients") {
  const std::vector<Shape> two = {{3, 2}, {3, 2}};
  CHECK(max_grad_error(two, [](ad::Tape&, auto& v) { return ad::add(v[0], v[1]); }, 1) < 1e-8);
  CHECK(max_grad_error(two, [](ad::Tape&, auto& v) { return ad::sub(v[0], v[1]); }, 2) < 1e-8);
  CHECK(max_grad_error(two, [](ad::Tape&, auto& v) { return ad::mul(v[0], v[1]); }, 3) < 1e-8);
  CHECK(max_grad_error(two, [](ad::Tape&, auto& v) { return ad::div(v[0], v[1]); }, 4, 3.0) < 1e-7);
  const std::vector<Shape> three = {{2, 2}, {2, 2}, {2, 2}};
  CHECK(max_grad_error(three, [](ad::Tape&, auto& v) { return ad::add_prod(v[0], v[1], v[2]); }, 5) < 1e-8);
  CHECK(max_grad_error(three, [](ad::Tape&, auto& v) { return ad::sub_prod(v[0], v[1], v[2]); }, 6) < 1e-8);
  const std::vector<Shape> one = {{4, 3}};
  CHECK(max_grad_error(one, [](ad::Tape&, auto& v) { return ad::neg(v[0]); }, 7) < 1e-8);
  CHECK(max_grad_error(one, [](ad::Tape&, auto& v) { return ad::scale(v[0], -2.5); }, 8) < 1e-8);
  CHECK(max_grad_error(one, [](ad::Tape&, auto& v) { return ad::shift(v[0], 0.7); }, 9) < 1e-8);
  CHECK(max_grad_error(one, [](ad::Tape&, auto& v) { return ad::add_constant(v[0], Matrix::Ones(4, 3)); }, 10) < 1e-8);
  CHECK(max_grad_error(one, [](ad::Tape&, auto& v) { return ad::sqrt(v[0]); }, 11, 4.0) < 1e-7);
  CHECK(max_grad_error(one, [](ad::Tape&, auto& v) { return ad::exp(v[0]); }, 12) < 1e-7);
  CHECK(max_grad_error(one, [](ad::Tape&, auto& v) { return ad::log(v[0]); }, 13, 4.0) < 1e-7);
  CHECK(max_grad_error(one, [](ad::Tape&, auto& v) { return ad::square(v[0]); }, 14) < 1e-8);
}

TEST_CASE("reduction and shape op gradients") {
  const std::vector<Shape> sq = {{4, 4}};
  CHECK(max_grad_error(sq, [](ad::Tape&, auto& v) { return ad::sum(v[0]); }, 20) < 1e-8);
  CHECK(max_grad_error(sq, [](ad::Tape&, auto& v) { return ad::sum_squares(v[0]); }, 21) < 1e-8);
  CHECK(max_grad_error(sq, [](ad::Tape&, auto& v) { return ad::trace(v[0]); }, 22) < 1e-8);
  CHECK(max_grad_error(sq, [](ad::Tape&, auto& v) { return ad::log_diag_sum(v[0]); }, 23, 4.0) < 1e-7);
  CHECK(max_grad_error({{1, 1}}, [](ad::Tape&, auto& v) { return ad::broadcast(v[0], 3, 2); }, 24) < 1e-8);
  CHECK(max_grad_error({{3, 4}}, [](ad::Tape&, auto& v) { return ad::column(v[0], 2); }, 25) < 1e-8);
  CHECK(max_grad_error({{3, 1}, {3, 1}}, [](ad::Tape&, auto& v) { return ad::hcat({v[1], v[0], v[1]}); }, 26) < 1e-8);
  CHECK(max_grad_error({{3, 4}, {3, 4}}, [](ad::Tape&, auto& v) { return ad::col_dot(v[0], v[1]); }, 27) < 1e-8);
  CHECK(max_grad_error({{3, 2}, {3, 4}, {4, 2}},
                       [](ad::Tape&, auto& v) { return ad::diag_quad(v[0], v[1], v[2]); }, 28) < 1e-8);
}

TEST_CASE("matmul gradients in every transpose mode") {
  CHECK(max_grad_error({{3, 4}, {4, 2}}, [](ad::Tape&, auto& v) { return ad::matmul(v[0], v[1]); }, 30) < 1e-8);
  CHECK(max_grad_error({{4, 3}, {4, 2}}, [](ad::Tape&, auto& v) { return ad::matmul(v[0], v[1], true); }, 31) < 1e-8);
  CHECK(max_grad_error({{3, 4}, {2, 4}}, [](ad::Tape&, auto& v) { return ad::matmul(v[0], v[1], false, true); }, 32) < 1e-8);
  CHECK(max_grad_error({{4, 3}, {2, 4}}, [](ad::Tape&, auto& v) { return ad::matmul(v[0], v[1], true, true); }, 33) < 1e-8);
}

TEST_CASE("kernel gradients") {
  const Build k = [](ad::Tape&, auto& v) { return ad::rbf(v[0], v[1], v[2], v[3]); };
  CHECK(max_grad_error({{4, 2}, {3, 2}, {2, 1}, {1, 1}}, k, 40) < 1e-7);
  // Same input on both sides.
  const Build kself = [](ad::Tape&, auto& v) { return ad::rbf(v[0], v[0], v[1], v[2]); };
  CHECK(max_grad_error({{4, 3}, {3, 1}, {1, 1}}, kself, 41) < 1e-7);

  ad::Tape tape;
  Rng rng(42);
  const Matrix x = random_normal(rng, 3, 2);
  KernelParams p = KernelParams::with_dim(2);
  p.log_lengthscales << 0.1, -0.3;
  p.log_variance = 0.4;
  const ad::Var kv = ad::rbf(tape.constant(x), tape.constant(x),
                             tape.constant(p.log_lengthscales),
                             tape.constant_scalar(p.log_variance));
  CHECK((kv.value() - kmat(p, x, x)).norm() == 0.0);
}

TEST_CASE("factorisation gradients") {
  const Build chol = [](ad::Tape& t, auto& v) { return ad::cholesky(spd(t, v[0])); };
  CHECK(max_grad_error({{4, 4}}, chol, 50) < 1e-7);
  const Build solve = [](ad::Tape& t, auto& v) {
    return ad::tri_solve(ad::cholesky(spd(t, v[0])), v[1]);
  };
  CHECK(max_grad_error({{3, 3}, {3, 2}}, solve, 51) < 1e-7);
  const Build solve_t = [](ad::Tape& t, auto& v) {
    return ad::tri_solve(ad::cholesky(spd(t, v[0])), v[1], true);
  };
  CHECK(max_grad_error({{3, 3}, {3, 2}}, solve_t, 52) < 1e-7);
  const Build lower = [](ad::Tape&, auto& v) { return ad::lower_from_param(v[0]); };
  CHECK(max_grad_error({{4, 4}}, lower, 53) < 1e-7);
  const Build logdet = [](ad::Tape& t, auto& v) {
    return ad::log_diag_sum(ad::cholesky(spd(t, v[0])));
  };
  CHECK(max_grad_error({{4, 4}}, logdet, 54) < 1e-7);
}

TEST_CASE("tape bookkeeping") {
  ad::Tape tape;
  const ad::Var a = tape.variable(Matrix::Constant(1, 1, 2.0));
  const ad::Var c = tape.constant_scalar(5.0);
  const ad::Var unused = tape.variable(Matrix::Ones(2, 2));
  const ad::Var y = ad::mul(ad::mul(a, a), c);
  tape.backward(y);
  CHECK(tape.gradient(a)(0, 0) == doctest::Approx(20.0));
  CHECK(tape.gradient(unused).norm() == 0.0);
  CHECK(tape.gradient(unused).rows() == 2);
  CHECK_FALSE(tape.requires_grad(c.id()));
  CHECK_THROWS(tape.backward(unused));
  CHECK_THROWS(ad::add(a, unused));
}

TEST_CASE("finite differences are exact for quadratics") {
  Rng rng(60);
  const Matrix a = sdgp::testing::random_spd(rng, 5);
  const Vector theta = random_normal(rng, 5, 1);
  const Vector g = fd_gradient([&](const Vector& t) { return t.dot(a * t); }, theta);
  const Vector exact = 2.0 * a * theta;
  CHECK((g - exact).norm() / exact.norm() < 1e-6);

  const std::vector<Index> coords = {1, 3};
  const Vector partial = fd_gradient([&](const Vector& t) { return t.dot(a * t); }, theta,
                                     1e-5, &coords);
  CHECK(partial(0) == 0.0);
  CHECK(partial(3) == doctest::Approx(exact(3)).epsilon(1e-6));
}
