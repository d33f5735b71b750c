#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>

#include "cmsf/ops.hpp"
#include "cmsf/optim.hpp"
#include "cmsf/tape.hpp"
#include "oracles.hpp"

using namespace cmsf;

namespace {

using UnaryOp = std::function<Var(Tape&, Var)>;

// Scalar probe: sum(op(x) * w) for a fixed random weighting w.
double probe_value(const UnaryOp& op, const Matrix& x, const Matrix& w) {
  Tape t;
  const Var y = op(t, t.parameter(x));
  return t.value(sum(t, hadamard(t, y, t.constant(w))))(0, 0);
}

Matrix probe_grad(const UnaryOp& op, const Matrix& x, const Matrix& w) {
  Tape t;
  const Var p = t.parameter(x);
  const Var loss = sum(t, hadamard(t, op(t, p), t.constant(w)));
  t.backward(loss);
  return t.grad(p);
}

void check_op_gradient(const UnaryOp& op, const Matrix& x, std::size_t out_rows, std::size_t out_cols,
                       std::mt19937_64& rng) {
  const Matrix w = oracle::random_matrix(out_rows, out_cols, rng);
  const Matrix analytic = probe_grad(op, x, w);
  const Matrix numeric = oracle::fd_gradient([&](const Matrix& m) { return probe_value(op, m, w); }, x);
  CHECK(oracle::max_rel_error(analytic, numeric) < 1e-4);
}

}  // namespace

TEST_SUITE("matrix") {
  TEST_CASE("constructor checks data length") {
    CHECK_THROWS_AS(Matrix(2, 2, std::vector<double>{1, 2, 3}), std::invalid_argument);
    const Matrix m(2, 3, 7.0);
    CHECK(m.rows() == 2);
    CHECK(m.cols() == 3);
    CHECK(m(1, 2) == 7.0);
  }

  TEST_CASE("from_rows rejects ragged input") {
    CHECK_THROWS_AS(Matrix::from_rows({{1, 2}, {3}}), std::invalid_argument);
  }

  TEST_CASE("require_same_shape names both shapes") {
    try {
      require_same_shape(Matrix(2, 3), Matrix(3, 2), "probe");
      FAIL("expected a throw");
    } catch (const std::invalid_argument& e) {
      const std::string msg = e.what();
      CHECK(msg.find("2x3") != std::string::npos);
      CHECK(msg.find("3x2") != std::string::npos);
    }
  }
}

TEST_SUITE("matmul") {
  TEST_CASE("identity times M is M") {
    std::mt19937_64 rng(1);
    const Matrix m = oracle::random_matrix(3, 4, rng);
    CHECK(matmul(Matrix::identity(3), m) == m);
    CHECK(matmul(m, Matrix::identity(4)) == m);
  }

  TEST_CASE("direct arithmetic") {
    const Matrix c = matmul(Matrix::from_rows({{1, 2}, {3, 4}}), Matrix::from_rows({{0}, {1}}));
    CHECK(c == Matrix::from_rows({{2}, {4}}));
  }

  TEST_CASE("matches the naive triple loop") {
    std::mt19937_64 rng(2);
    const Matrix a = oracle::random_matrix(6, 5, rng), b = oracle::random_matrix(5, 4, rng);
    CHECK(distance(matmul(a, b), oracle::naive_matmul(a, b)) < 1e-12);
    CHECK(distance(matmul_bt(a, transpose(b)), oracle::naive_matmul(a, b)) < 1e-12);
    CHECK(distance(matmul_at(transpose(a), b), oracle::naive_matmul(a, b)) < 1e-12);
  }

  TEST_CASE("shape mismatch names both shapes") {
    try {
      matmul(Matrix(2, 3), Matrix(2, 3));
      FAIL("expected a throw");
    } catch (const std::invalid_argument& e) {
      CHECK(std::string(e.what()).find("2x3 x 2x3") != std::string::npos);
    }
  }

  TEST_CASE("gradient of sum(a*b) w.r.t. a is ones * b^T") {
    std::mt19937_64 rng(3);
    const Matrix a = oracle::random_matrix(5, 7, rng), b = oracle::random_matrix(7, 3, rng);
    Tape t;
    const Var va = t.parameter(a);
    const Var vb = t.parameter(b);
    t.backward(sum(t, matmul(t, va, vb)));
    const Matrix expected = oracle::naive_matmul(Matrix(5, 3, 1.0), transpose(b));
    CHECK(distance(t.grad(va), expected) < 1e-12);
    const Matrix numeric = oracle::fd_gradient(
        [&](const Matrix& m) {
          const Matrix prod = oracle::naive_matmul(m, b);
          double s = 0.0;
          for (double x : prod.values()) s += x;
          return s;
        },
        a);
    CHECK(oracle::max_rel_error(t.grad(va), numeric) < 1e-4);
  }

  TEST_CASE("gradient w.r.t. both operands matches finite differences") {
    std::mt19937_64 rng(4);
    const Matrix a = oracle::random_matrix(4, 3, rng), b = oracle::random_matrix(3, 5, rng);
    check_op_gradient([&](Tape& t, Var x) { return matmul(t, x, t.constant(b)); }, a, 4, 5, rng);
    check_op_gradient([&](Tape& t, Var x) { return matmul(t, t.constant(a), x); }, b, 4, 5, rng);
  }
}

TEST_SUITE("elementwise ops") {
  TEST_CASE("relu definition") {
    CHECK(relu(Matrix::from_rows({{-1, 0, 2}})) == Matrix::from_rows({{0, 0, 2}}));
  }

  TEST_CASE("add_bias broadcasts a row") {
    const Matrix out = add_bias(Matrix::from_rows({{1, 2}, {3, 4}}), Matrix::from_rows({{10, 20}}));
    CHECK(out == Matrix::from_rows({{11, 22}, {13, 24}}));
    CHECK_THROWS_AS(add_bias(Matrix(2, 2), Matrix(1, 3)), std::invalid_argument);
  }

  TEST_CASE("relu, add_bias, hadamard, scale gradients") {
    std::mt19937_64 rng(5);
    Matrix x = oracle::random_matrix(4, 6, rng);
    for (auto& v : x.values()) v += v > 0 ? 0.1 : -0.1;  // keep away from the kink
    check_op_gradient([](Tape& t, Var v) { return relu(t, v); }, x, 4, 6, rng);
    const Matrix bias = oracle::random_matrix(1, 6, rng);
    check_op_gradient([&](Tape& t, Var v) { return add_bias(t, v, t.constant(bias)); }, x, 4, 6, rng);
    check_op_gradient([&](Tape& t, Var v) { return add_bias(t, t.constant(x), v); }, bias, 4, 6, rng);
    const Matrix other = oracle::random_matrix(4, 6, rng);
    check_op_gradient([&](Tape& t, Var v) { return hadamard(t, v, t.constant(other)); }, x, 4, 6, rng);
    check_op_gradient([](Tape& t, Var v) { return scale(t, v, -2.5); }, x, 4, 6, rng);
  }
}

TEST_SUITE("batch_norm_1d") {
  TEST_CASE("training output columns have mean 0 and variance 1 before the affine step") {
    std::mt19937_64 rng(6);
    const Matrix x = oracle::random_matrix(16, 5, rng, -3.0, 5.0);
    Tape t;
    BatchNormState st(5);
    const Var y = batch_norm_1d(t, t.constant(x), t.constant(Matrix(1, 5, 1.0)), t.constant(Matrix(1, 5, 0.0)), st);
    const Matrix& out = t.value(y);
    for (std::size_t c = 0; c < 5; ++c) {
      double m = 0.0, v = 0.0;
      for (std::size_t r = 0; r < 16; ++r) m += out(r, c);
      m /= 16.0;
      for (std::size_t r = 0; r < 16; ++r) v += (out(r, c) - m) * (out(r, c) - m);
      v /= 16.0;
      CHECK(std::fabs(m) < 1e-12);
      CHECK(v == doctest::Approx(1.0).epsilon(1e-4));  // eps = 1e-5 shrinks it slightly
    }
  }

  TEST_CASE("batch of one is rejected in training mode") {
    Tape t;
    BatchNormState st(3);
    CHECK_THROWS_AS(batch_norm_1d(t, t.constant(Matrix(1, 3)), t.constant(Matrix(1, 3, 1.0)),
                                  t.constant(Matrix(1, 3)), st),
                    std::invalid_argument);
  }

  TEST_CASE("running statistics follow momentum 0.9 with the unbiased variance") {
    const Matrix x = Matrix::from_rows({{1.0}, {3.0}});
    Tape t;
    BatchNormState st(1);
    batch_norm_1d(t, t.constant(x), t.constant(Matrix(1, 1, 1.0)), t.constant(Matrix(1, 1, 0.0)), st);
    CHECK(st.running_mean(0, 0) == doctest::Approx(0.9 * 0.0 + 0.1 * 2.0));
    CHECK(st.running_var(0, 0) == doctest::Approx(0.9 * 1.0 + 0.1 * 2.0));
    const Matrix e = batch_norm_1d_eval(Matrix::from_rows({{1.2}}), Matrix(1, 1, 1.0), Matrix(1, 1, 0.0), st);
    CHECK(e(0, 0) == doctest::Approx((1.2 - 0.2) / std::sqrt(1.1 + 1e-5)));
  }

  TEST_CASE("gradient w.r.t. input, gamma and beta matches finite differences") {
    std::mt19937_64 rng(7);
    const Matrix x = oracle::random_matrix(6, 4, rng, -2.0, 2.0);
    const Matrix gamma = oracle::random_matrix(1, 4, rng, 0.5, 1.5);
    const Matrix beta = oracle::random_matrix(1, 4, rng);
    auto bn = [](Tape& t, Var in, Var g, Var b) {
      BatchNormState st(4);
      return batch_norm_1d(t, in, g, b, st);
    };
    check_op_gradient([&](Tape& t, Var v) { return bn(t, v, t.constant(gamma), t.constant(beta)); }, x, 6, 4, rng);
    check_op_gradient([&](Tape& t, Var v) { return bn(t, t.constant(x), v, t.constant(beta)); }, gamma, 6, 4, rng);
    check_op_gradient([&](Tape& t, Var v) { return bn(t, t.constant(x), t.constant(gamma), v); }, beta, 6, 4, rng);
  }
}

TEST_SUITE("l2_row_normalize") {
  TEST_CASE("examples") {
    const Matrix out = l2_row_normalize(Matrix::from_rows({{3, 4}}));
    CHECK(out(0, 0) == doctest::Approx(0.6));
    CHECK(out(0, 1) == doctest::Approx(0.8));
    const Matrix unit = Matrix::from_rows({{0.6, 0.8}, {1.0, 0.0}});
    CHECK(distance(l2_row_normalize(unit), unit) < 1e-15);
  }

  TEST_CASE("degenerate row is reported by index") {
    try {
      l2_row_normalize(Matrix::from_rows({{1, 0}, {0, 0}}));
      FAIL("expected a throw");
    } catch (const std::domain_error& e) {
      CHECK(std::string(e.what()).find("row 1") != std::string::npos);
    }
    CHECK_THROWS_AS(l2_row_normalize(Matrix(1, 2, 1.0), 0.0), std::invalid_argument);
  }

  TEST_CASE("idempotent") {
    std::mt19937_64 rng(8);
    const Matrix x = oracle::random_matrix(10, 6, rng);
    const Matrix once = l2_row_normalize(x);
    CHECK(distance(l2_row_normalize(once), once) < 1e-12);
    for (std::size_t r = 0; r < once.rows(); ++r) CHECK(squared_norm(once.row(r)) == doctest::Approx(1.0));
  }

  TEST_CASE("gradient matches finite differences") {
    std::mt19937_64 rng(9);
    const Matrix x = oracle::random_matrix(5, 4, rng);
    check_op_gradient([](Tape& t, Var v) { return l2_row_normalize(t, v); }, x, 5, 4, rng);
  }
}

TEST_SUITE("tape") {
  TEST_CASE("sum gives ones, half squared norm gives theta") {
    std::mt19937_64 rng(10);
    const Matrix theta = oracle::random_matrix(3, 4, rng);
    Tape t;
    const Var p = t.parameter(theta);
    t.backward(sum(t, p));
    CHECK(t.grad(p) == Matrix(3, 4, 1.0));

    Tape t2;
    const Var q = t2.parameter(theta);
    t2.backward(scale(t2, sum(t2, hadamard(t2, q, q)), 0.5));
    CHECK(distance(t2.grad(q), theta) < 1e-15);
  }

  TEST_CASE("non-scalar loss is rejected") {
    Tape t;
    const Var p = t.parameter(Matrix(2, 2, 1.0));
    CHECK_THROWS_AS(t.backward(p), std::invalid_argument);
  }

  TEST_CASE("grad before backward is an error") {
    Tape t;
    const Var p = t.parameter(Matrix(1, 1, 1.0));
    CHECK_THROWS_AS(t.grad(p), std::logic_error);
  }

  TEST_CASE("unreached parameters get zero gradient") {
    Tape t;
    const Var used = t.parameter(Matrix(2, 2, 1.0));
    const Var unused = t.parameter(Matrix(2, 2, 5.0));
    const Var loss = sum(t, used);
    scale(t, unused, 3.0);  // recorded after the loss; never replayed into it
    t.backward(loss);
    CHECK(t.grad(unused) == Matrix(2, 2, 0.0));
  }

  TEST_CASE("mean_row_loss averages rows and scales the callback gradient") {
    Tape t;
    const Var x = t.parameter(Matrix::from_rows({{1, 2}, {3, 4}}));
    const Var loss = mean_row_loss(t, x, [](std::size_t, std::span<const double> row, std::span<double> g) {
      g[0] = 2.0 * row[0];
      g[1] = 0.0;
      return row[0] * row[0];
    });
    CHECK(t.value(loss)(0, 0) == doctest::Approx((1.0 + 9.0) / 2.0));
    t.backward(loss);
    CHECK(t.grad(x) == Matrix::from_rows({{1.0, 0.0}, {3.0, 0.0}}));
  }

  TEST_CASE("backward is deterministic and repeatable") {
    std::mt19937_64 rng(11);
    const Matrix a = oracle::random_matrix(8, 6, rng), w = oracle::random_matrix(6, 3, rng);
    auto run = [&] {
      Tape t;
      const Var p = t.parameter(w);
      BatchNormState st(3);
      const Var h = batch_norm_1d(t, matmul(t, t.constant(a), p), t.constant(Matrix(1, 3, 1.0)),
                                  t.constant(Matrix(1, 3)), st);
      const Var loss = sum(t, l2_row_normalize(t, relu(t, h)));
      t.backward(loss);
      Matrix g1 = t.grad(p);
      t.backward(loss);
      CHECK(t.grad(p) == g1);
      return g1;
    };
    CHECK(run() == run());
  }

  TEST_CASE("ops keep finite inputs finite") {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 20; ++trial) {
      const Matrix x = oracle::random_matrix(4, 5, rng, -50.0, 50.0);
      Tape t;
      BatchNormState st(5);
      const Var p = t.parameter(x);
      const Var y = l2_row_normalize(t, batch_norm_1d(t, relu(t, p), t.constant(Matrix(1, 5, 1.0)),
                                                      t.constant(Matrix(1, 5, 0.1)), st));
      t.backward(sum(t, y));
      CHECK(t.value(y).all_finite());
      CHECK(t.grad(p).all_finite());
    }
  }
}

TEST_SUITE("optimizer") {
  TEST_CASE("plain SGD when momentum and decay are zero") {
    OptimizerState st{0.1, 0.0, 0.0, {}};
    Matrix p = Matrix::from_rows({{1.0, -2.0}});
    const Matrix g = Matrix::from_rows({{0.5, 0.25}});
    Matrix* params[] = {&p};
    sgd_step(st, params, std::span<const Matrix>(&g, 1), 0.1);
    CHECK(p(0, 0) == doctest::Approx(0.95));
    CHECK(p(0, 1) == doctest::Approx(-2.025));
  }

  TEST_CASE("zero gradient, no decay, zero velocity leaves params unchanged") {
    OptimizerState st{0.1, 0.9, 0.0, {}};
    Matrix p = Matrix::from_rows({{1.0, 2.0}});
    const Matrix g(1, 2, 0.0);
    Matrix* params[] = {&p};
    sgd_step(st, params, std::span<const Matrix>(&g, 1), 0.1);
    CHECK(p == Matrix::from_rows({{1.0, 2.0}}));
  }

  TEST_CASE("two momentum steps follow the hand-unrolled recurrence") {
    const double lr = 0.05, m = 0.9, wd = 1e-4;
    OptimizerState st{lr, m, wd, {}};
    Matrix p = Matrix::from_rows({{0.3}});
    const Matrix g1 = Matrix::from_rows({{0.7}}), g2 = Matrix::from_rows({{-0.2}});
    Matrix* params[] = {&p};
    sgd_step(st, params, std::span<const Matrix>(&g1, 1), lr);
    sgd_step(st, params, std::span<const Matrix>(&g2, 1), lr);
    double theta = 0.3, v = 0.0;
    v = m * v + 0.7 + wd * theta;
    theta -= lr * v;
    v = m * v - 0.2 + wd * theta;
    theta -= lr * v;
    CHECK(p(0, 0) == doctest::Approx(theta).epsilon(1e-14));
    REQUIRE(st.velocity.size() == 1);
    CHECK(st.velocity[0].same_shape(p));
  }

  TEST_CASE("shape mismatch is rejected") {
    OptimizerState st;
    Matrix p(2, 2);
    const Matrix g(2, 3);
    Matrix* params[] = {&p};
    CHECK_THROWS_AS(sgd_step(st, params, std::span<const Matrix>(&g, 1), 0.1), std::invalid_argument);
  }
}

TEST_SUITE("schedules") {
  TEST_CASE("cosine endpoints and midpoint") {
    CHECK(cosine_lr(0, 100, 0.05) == doctest::Approx(0.05));
    CHECK(cosine_lr(100, 100, 0.05) == doctest::Approx(0.0));
    CHECK(cosine_lr(50, 100, 0.05) == doctest::Approx(0.025));
    CHECK_THROWS_AS(cosine_lr(101, 100, 0.05), std::invalid_argument);
    CHECK_THROWS_AS(cosine_lr(0, 0, 0.05), std::invalid_argument);
  }

  TEST_CASE("cosine is non-increasing") {
    for (std::size_t t = 1; t <= 200; ++t) CHECK(cosine_lr(t, 200, 1.0) <= cosine_lr(t - 1, 200, 1.0));
  }

  TEST_CASE("step schedule decays at each milestone") {
    const std::vector<std::size_t> ms{15, 30};
    CHECK(step_lr(0, ms, 0.1) == doctest::Approx(0.1));
    CHECK(step_lr(15, ms, 0.1) == doctest::Approx(0.01));
    CHECK(step_lr(39, ms, 0.1) == doctest::Approx(0.001));
  }
}
