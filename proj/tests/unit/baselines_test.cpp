#include <gtest/gtest.h>

#include <cmath>

#include "pvm/baselines.hpp"
#include "pvm/mlp.hpp"
#include "pvm/ridge.hpp"
#include "test_util.hpp"
#include "toy_problem.hpp"

namespace pvm {
namespace {

auto ridge_problem(std::uint64_t seed = 61) {
  Rng rng(seed);
  auto train = testing::linear_data(40, 5, rng, Role::train, 0.5);
  auto val = testing::linear_data(20, 5, rng, Role::validation, 0.5);
  return SupervisedProblem(RidgeModel(5), HyperSpace::uniform(1, Scale::linear, 0.0, 2.0),
                           std::move(train), std::move(val));
}

auto mlp_problem_2hp() {
  Rng rng(62);
  auto train = testing::class_data(24, 4, 3, rng, Role::train);
  auto val = testing::class_data(12, 4, 3, rng, Role::validation);
  auto test = testing::class_data(12, 4, 3, rng, Role::test);
  return SupervisedProblem(MlpModel(4, 5, 3), HyperSpace::uniform(2, Scale::log, -10.0, 0.0),
                           std::move(train), std::move(val), std::move(test));
}

TEST(ExpectedImprovement, ClosedFormValues) {
  EXPECT_NEAR(expected_improvement(0.0, 1.0, 0.0), 0.3989422804014327, 1e-15);
  EXPECT_DOUBLE_EQ(expected_improvement(2.0, 0.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(expected_improvement(0.5, 0.0, 1.0), 0.5);
  // gap 1, s 1: Phi(1) + phi(1)
  EXPECT_NEAR(expected_improvement(0.0, 1.0, 1.0), 0.8413447460685429 + 0.24197072451914337, 1e-14);
  EXPECT_GE(expected_improvement(10.0, 1e-4, 0.0), 0.0);
  EXPECT_THROW(expected_improvement(0.0, -1.0, 0.0), DomainError);
}

TEST(NormalCdf, Symmetry) {
  for (double z : {0.1, 1.0, 3.0}) EXPECT_NEAR(normal_cdf(z) + normal_cdf(-z), 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(normal_cdf(0.0), 0.5);
}

TEST(GridSearch, CountsAndArgmin) {
  const auto problem = ridge_problem();
  const SolveBudget budget;
  const auto r = grid_search(problem, 21, budget);
  EXPECT_EQ(r.solve_count, 21);
  ASSERT_EQ(r.history.size(), 21u);
  std::size_t arg = 0;
  for (std::size_t i = 1; i < r.history.size(); ++i) {
    if (r.history[i].upper_loss < r.history[arg].upper_loss) arg = i;
  }
  EXPECT_EQ(r.best_lambda.coords(), r.history[arg].lambda.coords());
  EXPECT_DOUBLE_EQ(r.validation_loss, r.history[arg].upper_loss);
  EXPECT_DOUBLE_EQ(r.validation_loss, problem.upper_objective(r.best_weights));
  EXPECT_DOUBLE_EQ(r.train_loss, problem.training_loss(r.best_weights));
  EXPECT_FALSE(r.test_loss.has_value());
}

TEST(GridSearch, TwoDimensionalFactorialCount) {
  const auto problem = mlp_problem_2hp();
  const SolveBudget budget{.epochs = 1, .batch_size = 12};
  const auto r = grid_search(problem, std::vector<int>{4, 3}, budget);
  EXPECT_EQ(r.solve_count, 12);
  EXPECT_TRUE(r.test_loss.has_value());
  EXPECT_DOUBLE_EQ(*r.test_loss, problem.test_objective(r.best_weights));
}

TEST(GridSearch, ToyArgminAtBoundary) {
  const testing::ToyProblem toy;
  const auto r = grid_search(toy, 21, SolveBudget{.epochs = 1, .batch_size = 1});
  EXPECT_DOUBLE_EQ(r.best_lambda.lambda(0), 2.0);
  EXPECT_NEAR(r.validation_loss, 1.0 / 9.0, 1e-15);
}

TEST(RandomSearch, SeededAndCounted) {
  const auto problem = ridge_problem();
  const auto a = random_search(problem, 15, 4, SolveBudget{});
  const auto b = random_search(problem, 15, 4, SolveBudget{});
  EXPECT_EQ(a.solve_count, 15);
  EXPECT_EQ(a.best_lambda.coords(), b.best_lambda.coords());
  for (const auto& h : a.history) EXPECT_TRUE(problem.space().contains(h.lambda.coords()));
  EXPECT_THROW(random_search(problem, 0, 4, SolveBudget{}), DomainError);
}

TEST(BayesSmbo, CountsHistoryAndIncumbent) {
  const auto problem = ridge_problem();
  SolveCountScope scope;
  const auto r = bayes_smbo(problem, 5, 20, 3, SolveBudget{});
  EXPECT_EQ(r.solve_count, 20);
  EXPECT_EQ(scope.count(), 20);
  ASSERT_EQ(r.history.size(), 20u);
  double best = r.history[0].upper_loss;
  for (const auto& h : r.history) best = std::min(best, h.upper_loss);
  EXPECT_DOUBLE_EQ(r.validation_loss, best);
}

TEST(BayesSmbo, FindsRidgeOptimumNearGrid) {
  const auto problem = ridge_problem();
  const auto grid = grid_search(problem, 201, SolveBudget{});
  const auto bayes = bayes_smbo(problem, 4, 15, 11, SolveBudget{});
  EXPECT_LT(bayes.validation_loss - grid.validation_loss, 1e-3);
}

TEST(BayesSmbo, DeterministicGivenSeed) {
  const auto problem = mlp_problem_2hp();
  const SolveBudget budget{.epochs = 1, .batch_size = 12};
  const auto a = bayes_smbo(problem, 3, 8, 5, budget);
  const auto b = bayes_smbo(problem, 3, 8, 5, budget);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].lambda.coords(), b.history[i].lambda.coords());
  }
}

TEST(BayesSmbo, RejectsBadCounts) {
  const auto problem = ridge_problem();
  EXPECT_THROW(bayes_smbo(problem, 1, 10, 0, SolveBudget{}), DomainError);
  EXPECT_THROW(bayes_smbo(problem, 5, 5, 0, SolveBudget{}), DomainError);
}

}  // namespace
}  // namespace pvm
