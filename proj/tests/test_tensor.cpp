#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "coiba/errors.hpp"
#include "coiba/tensor.hpp"
#include "oracles.hpp"

using namespace coiba;
using oracle::gradient_error;
using oracle::project;
using oracle::random_tensor;

namespace {

Tensor vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor::from_data({n}, std::move(v));
}

void expect_values(const Tensor& t, std::vector<double> expected, double tol = 1e-12) {
  ASSERT_EQ(t.numel(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(t.data()[i], expected[i], tol) << "index " << i;
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor::from_data({2, 3}, std::vector<double>(5)), Error);
  Tensor t = Tensor::zeros({2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_EQ(t.size(-1), 4u);
}

TEST(Tensor, GradHasShapeOfData) {
  Tensor x = Tensor::full({3, 2}, 1.5, true);
  sum(square(x)).backward();
  ASSERT_TRUE(x.has_grad());
  EXPECT_EQ(x.grad().size(), x.numel());
  expect_values(Tensor::from_data({6}, {x.grad().begin(), x.grad().end()}), {3, 3, 3, 3, 3, 3});
}

TEST(Tensor, NoGraphWithoutRequiresGrad) {
  Tensor a = Tensor::full({2}, 1.0);
  Tensor b = exp(a) * a;
  EXPECT_FALSE(b.requires_grad());
}

TEST(Tensor, DiamondGraphAccumulatesOnce) {
  // y = x*x + x*x shares x on four paths; dy/dx = 4x.
  Tensor x = Tensor::from_data({1}, {3.0}, true);
  Tensor sq = x * x;
  sum(sq + sq).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Tensor, BackwardTwiceAccumulates) {
  Tensor x = Tensor::from_data({1}, {2.0}, true);
  Tensor y = sum(x * 3.0);
  y.backward();
  y.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
  x.zero_grad();
  y.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
}

TEST(Matmul, IdentityTimesIdentity) {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  expect_values(matmul(eye, eye), {1, 0, 0, 1});
}

TEST(Matmul, HandComputed) {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_data({2, 1}, {1, 1});
  Tensor c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  expect_values(c, {3, 7});
}

TEST(Matmul, TransposedOperand) {
  Tensor a = Tensor::from_data({1, 2}, {1, 2});
  Tensor bt = Tensor::from_data({3, 2}, {1, 0, 0, 1, 1, 1});
  expect_values(matmul(a, bt, true), {1, 2, 3});
}

TEST(Matmul, InnerDimensionMismatch) {
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), Error);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Rng rng(1);
  auto f = [](const std::vector<Tensor>& in) { return project(matmul(in[0], in[1])); };
  EXPECT_LT(gradient_error(f, {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)}, 1e-6), 1e-6);
}

TEST(Matmul, BatchedGradientMatchesFiniteDifferences) {
  Rng rng(2);
  auto shared = [](const std::vector<Tensor>& in) { return project(matmul(in[0], in[1], true)); };
  EXPECT_LT(gradient_error(shared, {random_tensor({2, 3, 4}, rng), random_tensor({5, 4}, rng)}, 1e-6), 1e-6);
  auto batched = [](const std::vector<Tensor>& in) { return project(matmul(in[0], in[1])); };
  EXPECT_LT(gradient_error(batched, {random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 2}, rng)}, 1e-6), 1e-6);
}

TEST(LayerNorm, ConstantRowGivesZeros) {
  Tensor x = Tensor::full({1, 4}, 7.0);
  Tensor y = layer_norm(x, Tensor::full({4}, 1.0), Tensor::zeros({4}), 1e-5);
  expect_values(y, {0, 0, 0, 0});
}

TEST(LayerNorm, AlreadyNormalized) {
  Tensor y = layer_norm(Tensor::from_data({1, 2}, {1, -1}), Tensor::full({2}, 1.0), Tensor::zeros({2}), 1e-12);
  expect_values(y, {1, -1}, 1e-9);
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  auto f = [](const std::vector<Tensor>& in) { return project(layer_norm(in[0], in[1], in[2], 1e-5)); };
  const double err = gradient_error(f, {random_tensor({2, 8}, rng), random_tensor({8}, rng), random_tensor({8}, rng)},
                                    1e-6);
  EXPECT_LT(err, 1e-5);
}

TEST(Softmax, Symmetric) { expect_values(softmax(vec({0, 0})), {0.5, 0.5}); }

TEST(Softmax, LargeLogitsDoNotOverflow) {
  Tensor p = softmax(vec({1000, 0}));
  EXPECT_TRUE(std::isfinite(p.data()[0]));
  EXPECT_NEAR(p.data()[0], 1.0, 1e-12);
  EXPECT_NEAR(p.data()[1], 0.0, 1e-12);
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
  Rng rng(4);
  auto f = [](const std::vector<Tensor>& in) { return project(softmax(in[0])); };
  EXPECT_LT(gradient_error(f, {random_tensor({6}, rng, -2, 2)}, 1e-6), 1e-6);
  auto rows = [](const std::vector<Tensor>& in) { return project(softmax(in[0], 0)); };
  EXPECT_LT(gradient_error(rows, {random_tensor({3, 4}, rng, -2, 2)}, 1e-6), 1e-6);
}

TEST(Elementwise, KnownValues) {
  EXPECT_DOUBLE_EQ(gelu(vec({0})).item(), 0.0);
  EXPECT_NEAR(sigmoid(vec({5})).item(), 0.993307, 1e-6);
  EXPECT_NEAR(softplus(vec({0})).item(), std::numbers::ln2, 1e-12);
  EXPECT_NEAR(gelu(vec({1})).item(), 0.8413447460685429, 1e-12);
}

TEST(Elementwise, SigmoidSaturatesWithoutNaN) {
  Tensor s = sigmoid(vec({-800, 800}));
  EXPECT_EQ(s.data()[0], 0.0);
  EXPECT_EQ(s.data()[1], 1.0);
  Tensor sp = softplus(vec({-800, 800}));
  EXPECT_EQ(sp.data()[0], 0.0);
  EXPECT_EQ(sp.data()[1], 800.0);
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  Rng rng(5);
  using Op = Tensor (*)(const Tensor&);
  const std::vector<std::pair<const char*, Op>> ops = {
      {"exp", exp}, {"square", square}, {"sigmoid", sigmoid}, {"softplus", softplus}, {"gelu", gelu}, {"neg", neg}};
  for (auto [name, op] : ops) {
    auto f = [op](const std::vector<Tensor>& in) { return project(op(in[0])); };
    EXPECT_LT(gradient_error(f, {random_tensor({7}, rng, -3, 3)}, 1e-6), 1e-6) << name;
  }
  auto lg = [](const std::vector<Tensor>& in) { return project(log(in[0])); };
  EXPECT_LT(gradient_error(lg, {random_tensor({7}, rng, 0.5, 3)}, 1e-6), 1e-6);
}

TEST(Broadcast, ShapesFollowNumpyRules) {
  Tensor a = Tensor::full({2, 3}, 1.0);
  Tensor b = vec({1, 2, 3});
  Tensor c = a + b;
  EXPECT_EQ(c.shape(), (Shape{2, 3}));
  expect_values(c, {2, 3, 4, 2, 3, 4});
  EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({2})), Error);
}

TEST(Broadcast, GradientsReduceOverBroadcastAxes) {
  Rng rng(6);
  auto f = [](const std::vector<Tensor>& in) {
    return project(div(mul(add(in[0], in[1]), in[2]), add_scalar(square(in[1]), 1.0)) - in[0]);
  };
  const double err = gradient_error(
      f, {random_tensor({2, 3, 4}, rng), random_tensor({3, 1}, rng), random_tensor({4}, rng)}, 1e-6);
  EXPECT_LT(err, 1e-6);
}

TEST(CrossEntropy, UniformLogits) { EXPECT_NEAR(cross_entropy(vec({0, 0}), 0).item(), std::numbers::ln2, 1e-12); }

TEST(CrossEntropy, ConfidentCorrectPrediction) { EXPECT_NEAR(cross_entropy(vec({50, -50}), 0).item(), 0.0, 1e-12); }

TEST(CrossEntropy, TargetOutOfRange) { EXPECT_THROW(cross_entropy(vec({0, 0}), 2), Error); }

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  auto single = [](const std::vector<Tensor>& in) { return cross_entropy(in[0], 3); };
  EXPECT_LT(gradient_error(single, {random_tensor({5}, rng, -2, 2)}, 1e-6), 1e-6);
  const std::vector<std::size_t> targets{0, 2, 1};
  auto batch = [&](const std::vector<Tensor>& in) { return cross_entropy(in[0], targets); };
  EXPECT_LT(gradient_error(batch, {random_tensor({3, 4}, rng, -2, 2)}, 1e-6), 1e-6);
}

TEST(Reduction, SumGivesOnes) {
  Tensor x = Tensor::full({2, 2, 3}, 0.3, true);
  sum(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Reduction, HalfMeanSquare) {
  Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
  scale(mean(square(x)), 0.5).backward();
  expect_values(Tensor::from_data({3}, {x.grad().begin(), x.grad().end()}), {1.0 / 3, 2.0 / 3, 1.0}, 1e-15);
}

TEST(Structural, ReshapePermuteSliceConcatExpand) {
  Tensor x = Tensor::from_data({2, 3}, {0, 1, 2, 3, 4, 5});
  expect_values(permute(x, {1, 0}), {0, 3, 1, 4, 2, 5});
  expect_values(slice(x, 1, 1, 2), {1, 2, 4, 5});
  expect_values(concat({x, x}, 0), {0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5});
  expect_values(expand(vec({1, 2}), {2, 2}), {1, 2, 1, 2});
  EXPECT_EQ(reshape(x, {3, 2}).shape(), (Shape{3, 2}));
  EXPECT_THROW(reshape(x, {4, 2}), Error);
  EXPECT_THROW(slice(x, 1, 2, 2), Error);
}

TEST(Structural, GradientsMatchFiniteDifferences) {
  Rng rng(8);
  auto f = [](const std::vector<Tensor>& in) {
    Tensor p = permute(reshape(in[0], {2, 3, 2}), {2, 0, 1});
    Tensor joined = concat({slice(p, 2, 1, 2), expand(in[1], {2, 2, 2})}, 2);
    return project(joined * joined);
  };
  EXPECT_LT(gradient_error(f, {random_tensor({3, 4}, rng), random_tensor({2, 1, 2}, rng)}, 1e-6), 1e-6);
}
