#include <gtest/gtest.h>

#include <cmath>

#include "avm/gradcheck.hpp"
#include "avm/gradsuite.hpp"
#include "avm/losses.hpp"
#include "avm/ops.hpp"
#include "oracles.hpp"

using namespace avm;

namespace {

Tensor64 random64(Shape shape, std::uint64_t seed, bool requires_grad = false) {
  const auto n = shape_numel(shape);
  return Tensor64(std::move(shape), oracle::random_values(n, seed), requires_grad);
}

template <typename S>
std::vector<S> values(const BasicTensor<S>& t) {
  return {t.data().begin(), t.data().end()};
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<float>(5)), ShapeError);
  EXPECT_THROW(Tensor({2, 0}, {}), ShapeError);
  const Tensor t({2, 3}, std::vector<float>(6, 1.0f));
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.dim(1), 3u);
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Tensor eye({2, 2}, {1, 0, 0, 1});
  const Tensor x({2, 2}, {0.5f, -2, 3, 7});
  EXPECT_EQ(values(matmul(eye, x)), values(x));
}

TEST(Matmul, HandEvaluatedProduct) {
  const Tensor a({2, 2}, {1, 2, 3, 4});
  const Tensor b({2, 1}, {1, 1});
  const auto c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(values(c), (std::vector<float>{3, 7}));
}

TEST(Matmul, AgreesWithNaiveProduct) {
  const auto a = random64({7, 5}, 1), b = random64({5, 3}, 2);
  const auto c = matmul(a, b);
  const auto want = oracle::matmul(oracle::to_matrix(a.data(), 7, 5), oracle::to_matrix(b.data(), 5, 3));
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(c.at(i, j), static_cast<double>(want[i][j]), 1e-12);
}

TEST(Matmul, RowResultDoesNotDependOnItsPosition) {
  // Same input row placed at every third position of batches of many sizes.
  const auto probe = oracle::random_values(100, 3);
  const auto w = oracle::random_values(100 * 37, 4);
  const Tensor b({100, 37}, std::vector<float>(w.begin(), w.end()));
  std::vector<float> reference;
  for (std::size_t m = 1; m <= 70; ++m) {
    auto rows = oracle::random_values(m * 100, 100 + m);
    for (std::size_t i = 0; i < m; i += 3) std::copy(probe.begin(), probe.end(), rows.begin() + i * 100);
    const auto c = matmul(Tensor({m, 100}, std::vector<float>(rows.begin(), rows.end())), b);
    if (reference.empty()) reference.assign(c.data().begin(), c.data().begin() + 37);
    for (std::size_t i = 0; i < m; i += 3) {
      const std::vector<float> row(c.data().begin() + i * 37, c.data().begin() + (i + 1) * 37);
      ASSERT_EQ(row, reference) << "m=" << m << " row=" << i;
    }
  }
}

TEST(Matmul, MismatchNamesBothShapes) {
  const Tensor a({2, 3}, std::vector<float>(6)), b({4, 5}, std::vector<float>(20));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(shape_str(a.shape())), std::string::npos) << msg;
    EXPECT_NE(msg.find(shape_str(b.shape())), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  const auto b = random64({4, 3}, 3);
  const double err = finite_diff_check([&](const Tensor64& a) { return sum(matmul(a, b)); }, random64({2, 4}, 4));
  EXPECT_LT(err, 1e-4);
}

TEST(Matmul, BackwardRules) {
  auto a = random64({3, 4}, 5, true), b = random64({4, 2}, 6, true);
  const auto dc = random64({3, 2}, 7);
  sum(mul(matmul(a, b), dc)).backward();
  // dA = dC B^T, dB = A^T dC
  const auto da = oracle::matmul(oracle::to_matrix(dc.data(), 3, 2), oracle::transposed(oracle::to_matrix(b.data(), 4, 2)));
  const auto db = oracle::matmul(oracle::transposed(oracle::to_matrix(a.data(), 3, 4)), oracle::to_matrix(dc.data(), 3, 2));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(a.grad()[i * 4 + j], static_cast<double>(da[i][j]), 1e-12);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(b.grad()[i * 2 + j], static_cast<double>(db[i][j]), 1e-12);
}

TEST(Relu, ClampsNegatives) {
  EXPECT_EQ(values(relu(Tensor({3}, {-1, 0, 2}))), (std::vector<float>{0, 0, 2}));
}

TEST(Relu, AllNegativeGivesZeroOutputAndGradient) {
  Tensor x({4}, {-1, -2, -0.5f, -3}, true);
  const auto y = relu(x);
  for (auto v : y.data()) EXPECT_EQ(v, 0.0f);
  sum(y).backward();
  for (auto g : x.grad()) EXPECT_EQ(g, 0.0f);
}

TEST(Relu, SubgradientAtZeroIsZero) {
  Tensor x({1}, {0.0f}, true);
  sum(relu(x)).backward();
  EXPECT_EQ(x.grad()[0], 0.0f);
}

TEST(Relu, FiniteDifferencesAwayFromZero) {
  auto x = random64({3, 4}, 8);
  for (auto& v : x.mutable_data()) v += v >= 0 ? 0.1 : -0.1;
  EXPECT_LT(finite_diff_check([](const Tensor64& t) { return sum(square(relu(t))); }, x), 1e-4);
}

TEST(Softmax, ConstantRowIsUniform) {
  for (float tau : {0.07f, 1.0f, 5.0f}) {
    const auto p = softmax_rows(Tensor({1, 3}, {2.5f, 2.5f, 2.5f}), tau);
    for (auto v : p.data()) EXPECT_NEAR(v, 1.0f / 3.0f, 1e-7f);
  }
}

TEST(Softmax, TwoElementRow) {
  const auto p = softmax_rows(Tensor64({1, 2}, {1.0, 0.0}), 1.0);
  EXPECT_NEAR(p.data()[0], std::exp(1.0) / (std::exp(1.0) + 1.0), 1e-12);
  EXPECT_NEAR(p.data()[0], 0.7311, 1e-4);
  EXPECT_NEAR(p.data()[1], 0.2689, 1e-4);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  const auto p = softmax_rows(Tensor({1, 2}, {1000.0f, 0.0f}), 1.0f);
  EXPECT_TRUE(std::isfinite(p.data()[0]));
  EXPECT_NEAR(p.data()[0], 1.0f, 1e-6f);
  EXPECT_NEAR(p.data()[1], 0.0f, 1e-6f);
}

TEST(Softmax, NonPositiveTemperatureRejected) {
  const Tensor x({1, 2}, {1, 2});
  EXPECT_THROW(softmax_rows(x, 0.0f), ParameterError);
  EXPECT_THROW(softmax_rows(x, -1.0f), ParameterError);
  EXPECT_THROW(log_softmax_rows(x, 0.0f), ParameterError);
}

TEST(Softmax, RowsSumToOneForFiniteInputs) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const double spread = seed % 2 ? 1.0 : 300.0;
    auto raw = oracle::random_values(6 * 9, seed, -spread, spread);
    const Tensor x({6, 9}, std::vector<float>(raw.begin(), raw.end()));
    const auto p = softmax_rows(x, seed % 3 ? 1.0f : 0.07f);
    for (std::size_t r = 0; r < 6; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 9; ++c) s += p.at(r, c);
      EXPECT_NEAR(s, 1.0, 1e-6) << "seed " << seed << " row " << r;
    }
  }
}

TEST(Reduce, MeanOverTime) {
  EXPECT_EQ(values(reduce(Tensor({2, 2}, {1, 3, 3, 5}), Reduction::mean)), (std::vector<float>{2, 4}));
}

TEST(Reduce, MaxOfConstantSequence) {
  const Tensor x({3, 2}, {4, -1, 4, -1, 4, -1});
  EXPECT_EQ(values(reduce(x, Reduction::max)), (std::vector<float>{4, -1}));
}

TEST(Reduce, PopulationStandardDeviation) {
  EXPECT_EQ(values(reduce(Tensor({2, 1}, {0, 2}), Reduction::std)), (std::vector<float>{1}));
}

TEST(Reduce, StdNeedsTwoFrames) {
  EXPECT_THROW(reduce(Tensor({1, 3}, {1, 2, 3}), Reduction::std), DegenerateInputError);
  EXPECT_NO_THROW(reduce(Tensor({1, 3}, {1, 2, 3}), Reduction::mean));
}

TEST(Reduce, PoolTimeMatchesPerClipReduce) {
  const auto x = random64({3 * 4, 5}, 9);
  for (auto kind : {Reduction::mean, Reduction::std, Reduction::max}) {
    const auto pooled = pool_time(x, 4, kind);
    for (std::size_t n = 0; n < 3; ++n) {
      const auto one = reduce(select_rows(x, {4 * n, 4 * n + 1, 4 * n + 2, 4 * n + 3}), kind);
      for (std::size_t c = 0; c < 5; ++c) EXPECT_DOUBLE_EQ(pooled.at(n, c), one.data()[c]);
    }
  }
}

TEST(L2Normalize, ThreeFourFive) {
  const auto y = l2_normalize_rows(Tensor({1, 2}, {3, 4}));
  EXPECT_NEAR(y.data()[0], 0.6f, 1e-7f);
  EXPECT_NEAR(y.data()[1], 0.8f, 1e-7f);
}

TEST(L2Normalize, UnitVectorUnchanged) {
  const Tensor x({1, 3}, {0, 1, 0});
  EXPECT_EQ(values(l2_normalize_rows(x)), values(x));
}

TEST(L2Normalize, RandomRowsBecomeUnitAndIdempotent) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto raw = oracle::random_values(8 * 16, seed, -10, 10);
    const Tensor x({8, 16}, std::vector<float>(raw.begin(), raw.end()));
    const auto y = l2_normalize_rows(x);
    const auto z = l2_normalize_rows(y);
    for (std::size_t r = 0; r < 8; ++r) {
      double n = 0;
      for (std::size_t c = 0; c < 16; ++c) n += double(y.at(r, c)) * y.at(r, c);
      EXPECT_NEAR(std::sqrt(n), 1.0, 1e-6);
      for (std::size_t c = 0; c < 16; ++c) EXPECT_NEAR(z.at(r, c), y.at(r, c), 1e-6);
    }
  }
}

TEST(L2Normalize, TinyRowsPassThrough) {
  const Tensor x({2, 2}, {0, 0, 3, 4});
  const auto y = l2_normalize_rows(x);
  EXPECT_EQ(y.at(0, 0), 0.0f);
  EXPECT_EQ(y.at(0, 1), 0.0f);
  EXPECT_NEAR(y.at(1, 1), 0.8f, 1e-7f);
}

TEST(Dropout, ZeroProbabilityIsIdentity) {
  Rng rng(1);
  const Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(values(dropout(x, 0.0, true, rng)), values(x));
  EXPECT_EQ(values(dropout(x, 0.0, false, rng)), values(x));
}

TEST(Dropout, EvalModeIsIdentity) {
  Rng rng(1);
  const Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(values(dropout(x, 0.5, false, rng)), values(x));
}

TEST(Dropout, SurvivorsAreScaledAndMeanPreserved) {
  Rng rng(123);
  const std::size_t n = 100000;
  const Tensor x({n}, std::vector<float>(n, 1.0f));
  const auto y = dropout(x, 0.5, true, rng);
  std::size_t survivors = 0;
  double total = 0;
  for (auto v : y.data()) {
    if (v != 0.0f) {
      ++survivors;
      EXPECT_EQ(v, 2.0f);
    }
    total += v;
  }
  EXPECT_NEAR(static_cast<double>(survivors) / n, 0.5, 0.01);
  EXPECT_NEAR(total / n, 1.0, 0.02);
}

TEST(Dropout, ProbabilityOneRejected) {
  Rng rng(1);
  const Tensor x({2}, {1, 2});
  EXPECT_THROW(dropout(x, 1.0, true, rng), ParameterError);
  EXPECT_THROW(dropout(x, -0.1, true, rng), ParameterError);
}

TEST(Dropout, SameSeedSameMask) {
  Rng a(99), b(99);
  const Tensor x({1000}, std::vector<float>(1000, 1.0f));
  EXPECT_EQ(values(dropout(x, 0.3, true, a)), values(dropout(x, 0.3, true, b)));
}

TEST(Backward, SumGivesOnes) {
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  sum(x).backward();
  for (auto g : x.grad()) EXPECT_EQ(g, 1.0f);
}

TEST(Backward, SumOfSquares) {
  Tensor x({2}, {1, 2}, true);
  sum(square(x)).backward();
  EXPECT_EQ(values(Tensor({2}, {x.grad()[0], x.grad()[1]})), (std::vector<float>{2, 4}));
}

TEST(Backward, NonScalarRejected) {
  Tensor x({2}, {1, 2}, true);
  EXPECT_THROW(square(x).backward(), ShapeError);
}

TEST(Backward, RepeatedCallsAccumulateUntilReset) {
  Tensor x({2}, {1, 2}, true);
  const auto loss = sum(square(x));
  loss.backward();
  sum(square(x)).backward();
  EXPECT_EQ(x.grad()[0], 4.0f);
  EXPECT_EQ(x.grad()[1], 8.0f);
  x.zero_grad();
  EXPECT_EQ(x.grad()[0], 0.0f);
}

TEST(Backward, FanOutAccumulates) {
  Tensor64 x({3}, {0.5, -1.0, 2.0}, true);
  const auto y = add(mul(x, x), scale(x, 3.0));  // x used three times
  sum(y).backward();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2 * x.data()[i] + 3);
}

TEST(Backward, LinearityOverSummedLosses) {
  auto x = random64({4, 3}, 10, true);
  const auto w = random64({3, 5}, 11);
  auto f = [&] { return sum(square(matmul(x, w))); };
  auto g = [&] { return mean(tanh(x)); };
  add(f(), g()).backward();
  const std::vector<double> together(x.grad().begin(), x.grad().end());
  x.zero_grad();
  f().backward();
  g().backward();
  for (std::size_t i = 0; i < together.size(); ++i) EXPECT_NEAR(together[i], x.grad()[i], 1e-6);
}

TEST(Backward, EveryRequiresGradLeafReached) {
  Tensor a({2, 2}, {1, 2, 3, 4}, true), b({2, 2}, {0, 1, 1, 0}, true), c({2}, {1, 1}, true);
  const Tensor frozen({2, 2}, {1, 1, 1, 1});
  sum(add_row(add(matmul(a, b), frozen), c)).backward();
  EXPECT_TRUE(a.has_grad());
  EXPECT_TRUE(b.has_grad());
  EXPECT_TRUE(c.has_grad());
  EXPECT_FALSE(frozen.has_grad());
  EXPECT_EQ(a.grad().size(), a.numel());
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor x({2}, {1, 2}, true);
  Tensor y;
  {
    NoGradGuard guard;
    y = square(x);
  }
  EXPECT_FALSE(y.requires_grad());
}

TEST(Determinism, RepeatedForwardIsBitIdentical) {
  auto run = [] {
    Rng rng(5);
    const auto x = random64({6, 8}, 12);
    const auto w = random64({8, 4}, 13);
    return values(softmax_rows(dropout(matmul(x, w), 0.2, true, rng), 0.5));
  };
  EXPECT_EQ(run(), run());
}

TEST(FiniteDiff, LinearFunctionIsExact) {
  const auto w = random64({3, 4}, 14);
  EXPECT_LT(finite_diff_check([&](const Tensor64& x) { return sum(mul(x, w)); }, random64({3, 4}, 15)), 1e-8);
}

TEST(FiniteDiff, InfoNceOnRandomBatch) {
  const double err =
      finite_diff_check([](const Tensor64& s) { return infonce_loss(s, 1.0, true); }, random64({4, 4}, 16));
  EXPECT_LT(err, 1e-4);
}

TEST(FiniteDiff, NonScalarFunctionRejected) {
  EXPECT_THROW(finite_diff_check([](const Tensor64& x) { return square(x); }, random64({2}, 17)), ShapeError);
}

TEST(FiniteDiff, DetectsAWrongGradient) {
  // The square term is cut from the graph, so its gradient goes missing.
  const auto x = random64({5}, 18);
  const double err = finite_diff_check(
      [](const Tensor64& t) {
        auto detached = t.detach();
        return add(sum(t), sum(square(detached)));
      },
      x);
  EXPECT_GT(err, 1e-2);
}

TEST(GradientSuite, EveryPrimitiveAndCompositePasses) {
  const auto results = run_gradient_suite(7);
  std::size_t composites = 0;
  for (const auto& r : results) {
    EXPECT_TRUE(r.passed()) << r.name << " error " << r.error << " >= " << r.tolerance << " at " << r.worst;
    EXPECT_EQ(r.tolerance, r.composite ? 1e-3 : 1e-4) << r.name;
    composites += r.composite;
  }
  EXPECT_GE(composites, 7u);
  EXPECT_GE(results.size() - composites, 20u);
}
