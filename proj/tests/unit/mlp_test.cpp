#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "pvm/mlp.hpp"
#include "test_util.hpp"

namespace pvm {
namespace {

// 2-2-2 network with identity weights: input (1, 0) gives hidden (1, 0) and
// logits (1, 0).
Vector identity_weights(const MlpModel& mlp) {
  Vector w = Vector::Zero(mlp.parameter_count());
  w[mlp.w1_offset() + 0] = 1.0;  // W1[0][0]
  w[mlp.w1_offset() + 3] = 1.0;  // W1[1][1]
  w[mlp.w2_offset() + 0] = 1.0;
  w[mlp.w2_offset() + 3] = 1.0;
  return w;
}

DatasetSplit one_example(int label) {
  RowMatrix x(1, 2);
  x << 1.0, 0.0;
  return DatasetSplit::classification(x, {label}, 2, Role::train);
}

TEST(MlpModel, LayoutAndGroups) {
  const MlpModel mlp(784, 100, 10);
  EXPECT_EQ(mlp.parameter_count(), 784 * 100 + 100 + 100 * 10 + 10);
  const auto one = mlp.group_map(1);
  const auto two = mlp.group_map(2);
  EXPECT_EQ((*one)[0], 0);
  EXPECT_EQ((*one)[mlp.b1_offset()], -1);
  EXPECT_EQ((*one)[mlp.w2_offset()], 0);
  EXPECT_EQ((*two)[mlp.w2_offset()], 1);
  EXPECT_EQ((*two)[mlp.b2_offset()], -1);
  EXPECT_THROW(mlp.group_map(3), DomainError);
}

TEST(MlpModel, HandComputedLossAndGradient) {
  const MlpModel mlp(2, 2, 2);
  const Vector w = identity_weights(mlp);
  const auto split = one_example(0);
  const auto rows = all_rows(1);
  const double expected = std::log1p(std::exp(-1.0));  // 0.313261687518...
  EXPECT_NEAR(mlp.loss(w, split, rows), expected, 1e-14);

  Vector grad;
  EXPECT_NEAR(mlp.loss_gradient(w, split, rows, grad), expected, 1e-14);
  const double s = 1.0 / (1.0 + std::exp(1.0));  // 1 - softmax_0
  EXPECT_NEAR(grad[mlp.b2_offset() + 0], -s, 1e-14);
  EXPECT_NEAR(grad[mlp.b2_offset() + 1], s, 1e-14);
  EXPECT_NEAR(grad[mlp.w2_offset() + 0], -s, 1e-14);  // h_0 * delta_0
  EXPECT_NEAR(grad[mlp.w2_offset() + 1], s, 1e-14);
  EXPECT_EQ(grad[mlp.w2_offset() + 2], 0.0);  // h_1 = 0
  // delta1 = delta2 W2^T = (-s, s); ReLU gate open only for unit 0.
  EXPECT_NEAR(grad[mlp.b1_offset() + 0], -s, 1e-14);
  EXPECT_EQ(grad[mlp.b1_offset() + 1], 0.0);
  EXPECT_NEAR(grad[mlp.w1_offset() + 0], -s, 1e-14);
  EXPECT_EQ(grad[mlp.w1_offset() + 2], 0.0);  // x_1 = 0
}

TEST(MlpModel, GradientMatchesFiniteDifferences) {
  Rng rng(21);
  const auto split = testing::class_data(9, 5, 4, rng, Role::train);
  const auto rows = all_rows(9);
  for (auto act : {Activation::relu, Activation::sigmoid, Activation::tanh}) {
    const MlpModel mlp(5, 6, 4, act);
    const Vector w = mlp.initial_weights(7);
    Vector grad;
    mlp.loss_gradient(w, split, rows, grad);
    auto f = [&](const Vector& v) { return mlp.loss(v, split, rows); };
    EXPECT_LT(testing::relative_error(grad, testing::central_difference(f, w, 1e-6)), 1e-5)
        << to_string(act);
  }
}

TEST(MlpModel, LargeLogitsStayFinite) {
  const MlpModel mlp(2, 2, 2);
  Vector w = identity_weights(mlp) * 1.0;
  w[mlp.w2_offset()] = 800.0;  // naive exp would overflow
  const auto split = one_example(1);
  const double loss = mlp.loss(w, split, all_rows(1));
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_NEAR(loss, 800.0, 1e-9);
}

TEST(MlpModel, OverflowRaisesNumericalError) {
  const MlpModel mlp(2, 2, 2);
  Vector w = identity_weights(mlp);
  w[mlp.w1_offset()] = 1e308;
  RowMatrix x(1, 2);
  x << 10.0, 0.0;
  const auto split = DatasetSplit::classification(x, {0}, 2, Role::train);
  EXPECT_THROW(mlp.loss(w, split, all_rows(1)), NumericalError);
  x(0, 0) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(DatasetSplit::classification(x, {0}, 2, Role::train), DomainError);
}

TEST(MlpModel, InitialWeightsAreSeededAndBounded) {
  const MlpModel mlp(784, 100, 10);
  const Vector a = mlp.initial_weights(1);
  EXPECT_EQ(a, mlp.initial_weights(1));
  EXPECT_NE(a, mlp.initial_weights(2));
  const double bound1 = std::sqrt(6.0 / 784.0);
  EXPECT_LE(a.segment(mlp.w1_offset(), 784 * 100).cwiseAbs().maxCoeff(), bound1);
  EXPECT_EQ(a.segment(mlp.b1_offset(), 100).cwiseAbs().maxCoeff(), 0.0);
}

TEST(MlpModel, SoftmaxRowsSumToOne) {
  RowMatrix logits(2, 3);
  logits << 1.0, 2.0, 3.0, -1000.0, 0.0, 1000.0;
  const RowMatrix p = MlpModel::softmax(logits);
  EXPECT_NEAR(p.row(0).sum(), 1.0, 1e-15);
  EXPECT_NEAR(p(1, 2), 1.0, 1e-15);
}

TEST(MlpModel, ShapeChecks) {
  const MlpModel mlp(2, 2, 2);
  EXPECT_THROW(mlp.loss(Vector::Zero(3), one_example(0), all_rows(1)), StructuralError);
  Rng rng(1);
  const auto reg = testing::linear_data(3, 2, rng, Role::train);
  EXPECT_THROW(mlp.loss(identity_weights(mlp), reg, all_rows(3)), StructuralError);
  EXPECT_THROW(MlpModel(2, 2, 1), DomainError);
}

}  // namespace
}  // namespace pvm
