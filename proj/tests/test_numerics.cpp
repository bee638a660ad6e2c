#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "hiddentask/autodiff.hpp"
#include "hiddentask/errors.hpp"
#include "support.hpp"

namespace ht = hiddentask;
using ht::Tape;
using ht::Tensor;
using ht::Var;
using ht::testing::gradient_error;

TEST(Tensor, ConstructorRejectsWrongValueCount) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ht::DimensionError);
}

TEST(Tensor, RowsAndGather) {
  const Tensor m = Tensor::matrix({{1, 2}, {3, 4}, {5, 6}});
  EXPECT_EQ(m.rows(1, 3), Tensor::matrix({{3, 4}, {5, 6}}));
  const std::vector<std::size_t> idx{2, 0};
  EXPECT_EQ(ht::gather_rows(m, idx), Tensor::matrix({{5, 6}, {1, 2}}));
  EXPECT_THROW(m.rows(2, 4), ht::ContractError);
}

TEST(Primitives, AddComponentwise) {
  Tape t;
  Var r = ht::ops::add(t.constant(Tensor::vector({1, 2})), t.constant(Tensor::vector({3, 4})));
  EXPECT_EQ(r.value(), Tensor::vector({4, 6}));
}

TEST(Primitives, ShapeMismatchNamesBothShapes) {
  Tape t;
  try {
    ht::ops::add(t.constant(Tensor::vector({1, 2})), t.constant(Tensor::vector({1, 2, 3})));
    FAIL();
  } catch (const ht::DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[3]"), std::string::npos);
  }
}

TEST(Primitives, MatmulIdentity) {
  Tape t;
  const Tensor b = Tensor::matrix({{5, 6}, {7, 8}});
  Var r = ht::ops::matmul(t.constant(Tensor::matrix({{1, 0}, {0, 1}})), t.constant(b));
  EXPECT_EQ(r.value(), b);
}

TEST(Primitives, StdOfConstantIsZero) {
  Tape t;
  EXPECT_EQ(ht::ops::std_all(t.constant(Tensor::vector({2, 2, 2, 2}))).value().item(), 0.0);
}

TEST(Primitives, ConvIdentityKernel) {
  Tape t;
  Tensor w({1, 1, 3, 3});
  w[4] = 1.0;
  const Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  Var y = ht::ops::conv2d(t.constant(x), t.constant(w), t.constant(Tensor::vector({0.5})));
  EXPECT_EQ(y.value(), Tensor({1, 1, 2, 2}, {1.5, 2.5, 3.5, 4.5}));
}

TEST(Backward, SquareAtThree) {
  Tape t;
  Var x = t.leaf(Tensor::scalar(3.0));
  EXPECT_DOUBLE_EQ(t.backward(ht::ops::mul(x, x))[x].item(), 6.0);
}

TEST(Backward, ReluSubgradient) {
  Tape t;
  Var x = t.leaf(Tensor::vector({-1, 2, 0}));
  EXPECT_EQ(t.backward(ht::ops::sum(ht::ops::relu(x)))[x], Tensor::vector({0, 1, 0}));
}

TEST(Backward, CrossEntropyAtUniformLogits) {
  Tape t;
  Var z = t.leaf(Tensor::matrix({{0, 0}}));
  const std::vector<std::size_t> y{0};
  const Tensor g = t.backward(ht::ops::sum(ht::ops::softmax_cross_entropy(z, y)))[z];
  EXPECT_NEAR(g[0], -0.5, 1e-15);
  EXPECT_NEAR(g[1], 0.5, 1e-15);
}

TEST(Backward, NonScalarOutputRejected) {
  Tape t;
  Var x = t.leaf(Tensor::vector({1, 2}));
  EXPECT_THROW(t.backward(x), ht::ContractError);
}

TEST(Backward, TapeIsConsumed) {
  Tape t;
  Var x = t.leaf(Tensor::scalar(2.0));
  Var y = ht::ops::square(x);
  t.backward(y);
  EXPECT_TRUE(t.consumed());
  EXPECT_THROW(t.backward(y), ht::ContractError);
  EXPECT_THROW(ht::ops::square(x), ht::ContractError);
}

TEST(Backward, UnreachedLeafGetsZero) {
  Tape t;
  Var x = t.leaf(Tensor::vector({1, 2}));
  Var unused = t.leaf(Tensor::vector({3, 4, 5}));
  const auto g = t.backward(ht::ops::sum(x));
  EXPECT_EQ(g[unused], Tensor({3}));
}

// Reference values computed by hand: sigma = sqrt(1.25), grad = (x - mean) / (n sigma).
TEST(Backward, StdGradientFrozen) {
  Tape t;
  Var x = t.leaf(Tensor::vector({1, 2, 3, 4}));
  const Tensor g = t.backward(ht::ops::std_all(x))[x];
  const double expected[] = {-0.33541019662496846, -0.11180339887498948, 0.11180339887498948, 0.33541019662496846};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(g[i], expected[i], 1e-15);
}

TEST(Backward, CrossEntropyGradientFrozen) {
  Tape t;
  Var z = t.leaf(Tensor::matrix({{1, 2, 3}}));
  const std::vector<std::size_t> y{2};
  const Tensor g = t.backward(ht::ops::sum(ht::ops::softmax_cross_entropy(z, y)))[z];
  EXPECT_NEAR(g[0], 0.09003057317038046, 1e-15);
  EXPECT_NEAR(g[1], 0.24472847105479764, 1e-15);
  EXPECT_NEAR(g[2], -0.3347590442251781, 1e-15);
}

TEST(Backward, NormGradientAtOriginIsZero) {
  Tape t;
  Var x = t.leaf(Tensor::vector({0, 0}));
  EXPECT_EQ(t.backward(ht::ops::l2_norm(x))[x], Tensor::vector({0, 0}));
  Tape u;
  Var y = u.leaf(Tensor::vector({3, 4}));
  EXPECT_EQ(u.backward(ht::ops::l2_norm(y))[y], Tensor::vector({0.6, 0.8}));
}

TEST(Backward, DeterministicReplay) {
  std::mt19937_64 rng(3);
  const Tensor x = ht::testing::random_tensor(rng, {4, 5});
  const Tensor w = ht::testing::random_tensor(rng, {5, 3});
  auto graph = [&](Tape& t, Var v) {
    return ht::ops::std_all(ht::ops::relu(ht::ops::matmul(v, t.constant(w))));
  };
  EXPECT_EQ(ht::testing::tape_gradient(graph, x), ht::testing::tape_gradient(graph, x));
}

TEST(FiniteDiff, Square) {
  const Tensor g = ht::finite_diff_gradient([](const Tensor& x) { return x[0] * x[0]; }, Tensor::scalar(3.0));
  EXPECT_NEAR(g.item(), 6.0, 1e-8);
}

TEST(FiniteDiff, SumIsAllOnes) {
  std::mt19937_64 rng(1);
  const Tensor x = ht::testing::random_tensor(rng, {7});
  const Tensor g = ht::finite_diff_gradient(
      [](const Tensor& v) {
        double s = 0.0;
        for (double e : v.values()) s += e;
        return s;
      },
      x);
  for (double v : g.values()) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(Sign, Values) {
  EXPECT_EQ(ht::sign(Tensor::vector({-0.3, 0, 5})), Tensor::vector({-1, 0, 1}));
  EXPECT_EQ(ht::sign(Tensor({3})), Tensor({3}));
  std::mt19937_64 rng(2);
  const Tensor t = ht::testing::random_tensor(rng, {50});
  EXPECT_EQ(ht::sign(ht::sign(t)), ht::sign(t));
}

TEST(Clip, Values) {
  EXPECT_EQ(ht::clip(Tensor::vector({-3, 100, 300}), 0, 255), Tensor::vector({0, 100, 255}));
  std::mt19937_64 rng(4);
  const Tensor t = ht::testing::random_tensor(rng, {50}, -500, 500);
  EXPECT_EQ(ht::clip(t, -1e300, 1e300), t);
  EXPECT_EQ(ht::clip(ht::clip(t, 0, 255), 0, 255), ht::clip(t, 0, 255));
  EXPECT_THROW(ht::clip(t, 1, 0), ht::ContractError);
}

struct GradCase {
  const char* name;
  ht::Shape shape;
  double lo, hi;
  ht::testing::ScalarGraph graph;
};

class PrimitiveGradients : public ::testing::TestWithParam<int> {};

std::vector<GradCase> gradient_cases() {
  std::mt19937_64 rng(11);
  const Tensor w = ht::testing::random_tensor(rng, {4, 3});
  const Tensor other = ht::testing::random_tensor(rng, {3, 4});
  const Tensor kernel = ht::testing::random_tensor(rng, {2, 2, 3, 3});
  const Tensor kbias = ht::testing::random_tensor(rng, {2});
  const Tensor bias = ht::testing::random_tensor(rng, {4});
  const Tensor probe = ht::testing::random_tensor(rng, {3, 4});
  auto weighted = [probe](Tape& t, Var v) { return ht::ops::sum(ht::ops::mul(v, t.constant(probe))); };
  using namespace ht::ops;
  return {
      {"add", {3, 4}, -1, 1, [=](Tape& t, Var x) { return weighted(t, add(x, t.constant(other))); }},
      {"sub", {3, 4}, -1, 1, [=](Tape& t, Var x) { return weighted(t, sub(t.constant(other), x)); }},
      {"mul", {3, 4}, -1, 1, [=](Tape& t, Var x) { return weighted(t, mul(x, x)); }},
      {"scale", {3, 4}, -1, 1, [=](Tape& t, Var x) { return weighted(t, scale(x, -2.5)); }},
      {"add_row_vector", {4}, -1, 1,
       [=](Tape& t, Var b) { return weighted(t, add_row_vector(t.constant(other), b)); }},
      {"matmul_left", {3, 4}, -1, 1, [=](Tape& t, Var x) { return ht::ops::sum(square(matmul(x, t.constant(w)))); }},
      {"matmul_right", {4, 3}, -1, 1,
       [=](Tape& t, Var x) { return ht::ops::sum(square(matmul(t.constant(other), x))); }},
      {"conv2d_input", {2, 2, 4, 4}, -1, 1,
       [=](Tape& t, Var x) { return ht::ops::sum(square(conv2d(x, t.constant(kernel), t.constant(kbias)))); }},
      {"conv2d_kernel", {2, 2, 3, 3}, -1, 1,
       [=](Tape& t, Var k) {
         Tensor x({1, 2, 4, 4});
         for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::sin(0.7 * static_cast<double>(i));
         return ht::ops::sum(square(conv2d(t.constant(x), k, t.constant(kbias))));
       }},
      {"avg_pool2d", {1, 2, 4, 4}, -1, 1, [=](Tape&, Var x) { return ht::ops::sum(square(avg_pool2d(x, 2))); }},
      {"relu", {3, 4}, -1, 1, [=](Tape& t, Var x) { return weighted(t, relu(x)); }},
      {"softmax", {3, 4}, -2, 2, [=](Tape& t, Var x) { return weighted(t, softmax(x)); }},
      {"log", {3, 4}, 0.5, 3, [=](Tape& t, Var x) { return weighted(t, ht::ops::log(x)); }},
      {"sqrt", {3, 4}, 0.5, 3, [=](Tape& t, Var x) { return weighted(t, ht::ops::sqrt(x)); }},
      {"mean", {3, 4}, -1, 1, [=](Tape&, Var x) { return mean(square(x)); }},
      {"std_all", {3, 4}, -1, 1, [=](Tape&, Var x) { return std_all(x); }},
      {"l2_norm", {3, 4}, -1, 1, [=](Tape&, Var x) { return l2_norm(x); }},
      {"row_sum", {3, 4}, -1, 1, [=](Tape&, Var x) { return ht::ops::sum(square(row_sum(x))); }},
      {"row_l2_norm", {3, 4}, -1, 1, [=](Tape&, Var x) { return ht::ops::sum(square(row_l2_norm(x))); }},
      {"row_std", {3, 4}, -1, 1, [=](Tape&, Var x) { return ht::ops::sum(square(row_std(x))); }},
      {"softmax_cross_entropy", {3, 4}, -3, 3,
       [=](Tape&, Var x) {
         const std::vector<std::size_t> y{0, 3, 1};
         return ht::ops::sum(softmax_cross_entropy(x, y));
       }},
  };
}

TEST(PrimitiveGradientsSuite, MatchFiniteDifferences) {
  std::mt19937_64 rng(99);
  for (const auto& c : gradient_cases()) {
    for (int trial = 0; trial < 20; ++trial) {
      const Tensor x = ht::testing::random_tensor(rng, c.shape, c.lo, c.hi);
      EXPECT_LE(gradient_error(c.graph, x), 1e-6) << c.name << " trial " << trial;
    }
  }
}

TEST(CrossEntropy, StableForHugeLogits) {
  Tape t;
  const std::vector<std::size_t> y{0, 1};
  Var ce = ht::ops::softmax_cross_entropy(t.constant(Tensor::matrix({{1000, 0}, {1e4, -1e4}})), y);
  EXPECT_NEAR(ce.value()[0], 0.0, 1e-12);
  EXPECT_TRUE(std::isfinite(ce.value()[1]));
  EXPECT_NEAR(ce.value()[1], 2e4, 1e-6);
}

TEST(CrossEntropy, LabelOutOfRange) {
  Tape t;
  const std::vector<std::size_t> y{2};
  EXPECT_THROW(ht::ops::softmax_cross_entropy(t.constant(Tensor::matrix({{0, 0}})), y), ht::ContractError);
}
