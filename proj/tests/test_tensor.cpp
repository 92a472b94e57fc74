#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "vigor/adam.hpp"
#include "vigor/gradcheck.hpp"
#include "vigor/rng.hpp"
#include "vigor/tensor.hpp"

using namespace vigor;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = scale * rng.normal();
  return m;
}

Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

void expect_near(const Matrix& a, const Matrix& b, double tol) {
  ASSERT_EQ(a.rows(), b.rows());
  ASSERT_EQ(a.cols(), b.cols());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "at " << i;
}

// Weighted sum so every output element carries a distinct gradient.
Var weighted_sum(Var x, Rng& rng) {
  Tape& t = x.tape();
  return sum(hadamard(x, t.constant(random_matrix(x.rows(), x.cols(), rng))));
}

}  // namespace

TEST(Matrix, MatmulMatchesTripleLoop) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.index(6), k = 1 + rng.index(6), n = 1 + rng.index(6);
    const Matrix a = random_matrix(m, k, rng), b = random_matrix(k, n, rng);
    Tape t;
    expect_near(matmul(t.constant(a), t.constant(b)).value(), naive_matmul(a, b), 1e-12);
    Matrix bt(n, k);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < n; ++j) bt(j, i) = b(i, j);
    expect_near(matmul_nt(t.constant(a), t.constant(bt)).value(), naive_matmul(a, b), 1e-12);
  }
}

TEST(Matrix, ShapeMismatchThrows) {
  Tape t;
  EXPECT_THROW(matmul(t.constant(Matrix(2, 3)), t.constant(Matrix(2, 3))), DimensionError);
  EXPECT_THROW(add(t.constant(Matrix(2, 3)), t.constant(Matrix(3, 2))), DimensionError);
}

TEST(Ops, SoftmaxMatchesScalarFormula) {
  Rng rng(2);
  const Matrix x = random_matrix(3, 5, rng, 3.0);
  Tape t;
  const Matrix s = row_softmax(t.constant(x)).value();
  const Matrix ls = log_softmax_rows(t.constant(x)).value();
  for (std::size_t r = 0; r < 3; ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < 5; ++c) z += std::exp(x(r, c));
    double total = 0.0;
    for (std::size_t c = 0; c < 5; ++c) {
      EXPECT_NEAR(s(r, c), std::exp(x(r, c)) / z, 1e-14);
      EXPECT_NEAR(ls(r, c), x(r, c) - std::log(z), 1e-12);
      total += s(r, c);
    }
    EXPECT_NEAR(total, 1.0, 1e-14);
  }
}

TEST(Ops, SoftmaxIsStableForLargeLogits) {
  Tape t;
  const Matrix s = row_softmax(t.constant(Matrix::row_vector({1000.0, 1000.0}))).value();
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
}

TEST(Ops, SoftmaxRejectsNaN) {
  Tape t;
  EXPECT_THROW(row_softmax(t.constant(Matrix::row_vector({0.0, std::nan("")}))), NumericError);
}

TEST(Ops, LayerNormMatchesScalarFormula) {
  Rng rng(3);
  const Matrix x = random_matrix(4, 6, rng, 2.0);
  const Matrix g = random_matrix(1, 6, rng), b = random_matrix(1, 6, rng);
  Tape t;
  const Matrix y = layer_norm(t.constant(x), t.constant(g), t.constant(b)).value();
  for (std::size_t r = 0; r < 4; ++r) {
    double mu = 0.0, var = 0.0;
    for (std::size_t c = 0; c < 6; ++c) mu += x(r, c) / 6.0;
    for (std::size_t c = 0; c < 6; ++c) var += (x(r, c) - mu) * (x(r, c) - mu) / 6.0;
    for (std::size_t c = 0; c < 6; ++c) {
      EXPECT_NEAR(y(r, c), g[c] * (x(r, c) - mu) / std::sqrt(var + kLayerNormEps) + b[c], 1e-12);
    }
  }
}

TEST(Ops, SegmentMaxPicksPerSegmentMaximum) {
  Tape t;
  const Matrix x = Matrix::from_rows({{1, 5}, {3, 2}, {-1, -4}, {0, -7}, {2, 2}});
  const Matrix m = segment_max_rows(t.constant(x), {0, 2, 5}).value();
  EXPECT_EQ(m, Matrix::from_rows({{3, 5}, {2, 2}}));
  EXPECT_THROW(segment_max_rows(t.constant(x), {0, 2, 4}), DimensionError);
}

TEST(Ops, ConcatAndSliceRoundTrip) {
  Rng rng(4);
  const Matrix a = random_matrix(2, 3, rng), b = random_matrix(4, 3, rng);
  Tape t;
  const Var c = concat_rows(t.constant(a), t.constant(b));
  EXPECT_EQ(slice_rows(c, 0, 2).value(), a);
  EXPECT_EQ(slice_rows(c, 2, 4).value(), b);
  const Var d = concat_cols(t.constant(a), t.constant(random_matrix(2, 2, rng)));
  EXPECT_EQ(slice_cols(d, 0, 3).value(), a);
}

TEST(Tape, BackwardNeedsScalar) {
  Tape t;
  Parameter p{"p", Matrix(2, 2, 1.0)};
  EXPECT_THROW(t.backward(t.param(p)), ContractError);
}

TEST(Tape, GradientsAccumulateAcrossTapes) {
  Parameter p{"p", Matrix::row_vector({2.0, -1.0})};
  for (int i = 0; i < 2; ++i) {
    Tape t;
    const Var x = t.param(p);
    t.backward(sum(hadamard(x, x)));
  }
  EXPECT_DOUBLE_EQ(p.grad[0], 8.0);
  EXPECT_DOUBLE_EQ(p.grad[1], -4.0);
}

TEST(Tape, ReusedParameterSharesOneLeaf) {
  Parameter p{"p", Matrix::scalar(3.0)};
  Tape t;
  const Var y = hadamard(t.param(p), t.param(p));
  t.backward(y);
  EXPECT_DOUBLE_EQ(p.grad[0], 6.0);
}

TEST(Tape, NoGradModeLeavesGradsUntouched) {
  Parameter p{"p", Matrix::scalar(3.0)};
  Tape t;
  t.set_grad_enabled(false);
  const Var y = scale(t.param(p), 2.0);
  EXPECT_DOUBLE_EQ(y.item(), 6.0);
  t.backward(y);
  EXPECT_DOUBLE_EQ(p.grad[0], 0.0);
}

// Every differentiable op against central differences.
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  Rng rng(100 + GetParam());
  Parameter a{"a", random_matrix(3, 4, rng)};
  Parameter b{"b", random_matrix(4, 2, rng)};
  Parameter c{"c", random_matrix(3, 4, rng)};
  Parameter row{"row", random_matrix(1, 4, rng)};
  Parameter col{"col", random_matrix(3, 1, rng)};
  std::vector<Parameter*> params{&a, &b, &c, &row, &col};
  const std::uint64_t wseed = rng.next();

  auto fn = [&](Tape& t) {
    Rng w(wseed);
    const Var A = t.param(a), B = t.param(b), C = t.param(c), R = t.param(row), S = t.param(col);
    switch (GetParam()) {
      case 0: return weighted_sum(matmul(A, B), w);
      case 1: return weighted_sum(matmul_nt(A, C), w);
      case 2: return weighted_sum(transpose(A), w);
      case 3: return weighted_sum(add(A, C), w);
      case 4: return weighted_sum(sub(A, C), w);
      case 5: return weighted_sum(hadamard(A, C), w);
      case 6: return weighted_sum(add_row(A, R), w);
      case 7: return weighted_sum(scale_rows(A, S), w);
      case 8: return weighted_sum(softplus(A), w);
      case 9: return weighted_sum(row_softmax(A), w);
      case 10: return weighted_sum(log_softmax_rows(A), w);
      case 11: return weighted_sum(layer_norm(A, R, R), w);
      case 12: return weighted_sum(concat_rows(A, C), w);
      case 13: return weighted_sum(concat_cols(A, C), w);
      case 14: return weighted_sum(slice_cols(slice_rows(A, 1, 2), 1, 3), w);
      case 15: return weighted_sum(gather_rows(A, {2, 0, 2}), w);
      case 16: return weighted_sum(segment_max_rows(A, {0, 1, 3}), w);
      case 17: return weighted_sum(mean_rows(A), w);
      case 18: return mean(hadamard(A, C));
      case 19: return pick(hadamard(A, A), 1, 2);
      default: return weighted_sum(relu(A), w);
    }
  };
  const GradCheckReport report = grad_check(params, fn, 1e-6);
  EXPECT_FALSE(report.non_finite.has_value());
  EXPECT_LE(report.max_rel_err, 1e-6) << "worst " << report.worst_param;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range(0, 21));

TEST(GradCheck, ConstantFunctionGivesEmptyReport) {
  const GradCheckReport r = grad_check({}, [](Tape& t) { return t.constant(Matrix::scalar(1.0)); });
  EXPECT_TRUE(r.empty());
  EXPECT_TRUE(r.passed(1e-4));
}

TEST(GradCheck, DetectsWrongGradient) {
  Parameter p{"p", Matrix::scalar(1.5)};
  std::vector<Parameter*> params{&p};
  // An op whose recorded backward is off by a factor of two.
  auto fn = [&](Tape& t) {
    const Var x = t.param(p);
    const std::size_t ix = x.id();
    return t.record(Matrix::scalar(x.item() * x.item()), {x}, [ix](Tape& tp, std::size_t self) {
      tp.grad(ix)[0] += 4.0 * tp.value(ix)[0] * tp.grad(self)[0];
    });
  };
  const GradCheckReport r = grad_check(params, fn);
  EXPECT_NEAR(r.max_rel_err, 1.0 / 3.0, 1e-6);
  EXPECT_FALSE(r.passed(1e-4));
  EXPECT_EQ(r.worst_param, "p");
}

TEST(GradCheck, FlagsNonFiniteGradient) {
  Parameter p{"sqrt_at_zero", Matrix::scalar(0.0)};
  std::vector<Parameter*> params{&p};
  auto fn = [&](Tape& t) {
    const Var x = t.param(p);
    const std::size_t ix = x.id();
    return t.record(Matrix::scalar(std::sqrt(std::abs(x.item()))), {x}, [ix](Tape& tp, std::size_t self) {
      tp.grad(ix)[0] += tp.grad(self)[0] / (2.0 * std::sqrt(std::abs(tp.value(ix)[0])));
    });
  };
  const GradCheckReport r = grad_check(params, fn);
  ASSERT_TRUE(r.non_finite.has_value());
  EXPECT_EQ(*r.non_finite, "sqrt_at_zero");
  EXPECT_FALSE(r.passed(1e-4));
}

TEST(GradCheck, RelativeErrorDefinition) {
  EXPECT_DOUBLE_EQ(relative_error(1.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(1.0, 3.0), 0.5);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 1e-12), 1e-4);
}

TEST(GradCheck, LadderStepsOverAKink) {
  // |x - 1e-6| near x = 0: any step above 1e-6 crosses the kink.
  Parameter p{"p", Matrix::scalar(0.0)};
  std::vector<Parameter*> params{&p};
  auto fn = [&](Tape& t) {
    const Var x = t.param(p);
    const Var shifted = add(x, t.constant(Matrix::scalar(-1e-6)));
    return add(relu(shifted), relu(scale(shifted, -1.0)));
  };
  EXPECT_GT(grad_check(params, fn, GradCheckOptions{1e-3, FiniteDifference::kCentral}).max_rel_err, 0.1);
  GradCheckOptions ladder{1e-3, FiniteDifference::kLadder};
  ladder.ladder_steps = 6;
  EXPECT_LE(grad_check(params, fn, ladder).max_rel_err, 1e-8);
}

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
  Parameter p{"p", Matrix::row_vector({1.0, -2.0, 0.5})};
  p.grad = Matrix::row_vector({0.3, -4.0, 0.0});
  std::vector<Parameter*> params{&p};
  AdamState state;
  adam_step(params, state, AdamConfig{0.1});
  // m_hat = g and v_hat = g^2 after one step.
  EXPECT_NEAR(p.value[0], 1.0 - 0.1 * 0.3 / (0.3 + 1e-8), 1e-15);
  EXPECT_NEAR(p.value[1], -2.0 + 0.1 * 4.0 / (4.0 + 1e-8), 1e-15);
  EXPECT_DOUBLE_EQ(p.value[2], 0.5);
  EXPECT_EQ(state.step, 1u);
}

TEST(Adam, SecondStepMatchesRecurrence) {
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Parameter p{"p", Matrix::scalar(1.0)};
  p.grad[0] = 0.5;
  std::vector<Parameter*> params{&p};
  AdamState state;
  adam_step(params, state, AdamConfig{lr});
  p.grad[0] = -0.25;
  const double before = p.value[0];
  adam_step(params, state, AdamConfig{lr});
  const double m = b1 * (1 - b1) * 0.5 + (1 - b1) * -0.25;
  const double v = b2 * (1 - b2) * 0.25 + (1 - b2) * 0.0625;
  const double expected = before - lr * (m / (1 - b1 * b1)) / (std::sqrt(v / (1 - b2 * b2)) + eps);
  EXPECT_NEAR(p.value[0], expected, 1e-15);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next();
    EXPECT_EQ(x, b.next());
    differs = differs || x != c.next();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, StateRoundTrip) {
  Rng a(7);
  for (int i = 0; i < 10; ++i) a.next();
  Rng b(0);
  b.restore(a.state());
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next(), b.next());
  EXPECT_THROW(b.restore("not a state"), IoError);
}

TEST(Rng, IndexIsInRangeAndCoversAll) {
  Rng r(9);
  std::vector<int> seen(7, 0);
  for (int i = 0; i < 7000; ++i) ++seen.at(r.index(7));
  for (int n : seen) EXPECT_GT(n, 800);
  EXPECT_THROW(r.index(0), ContractError);
}
