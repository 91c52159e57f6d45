#ifndef PVM_BASELINES_HPP
#define PVM_BASELINES_HPP

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "pvm/error.hpp"
#include "pvm/kriging.hpp"
#include "pvm/lower_solver.hpp"
#include "pvm/problem.hpp"
#include "pvm/random.hpp"

namespace pvm {

struct HistoryEntry {
  HyperVector lambda;
  double upper_loss = 0.0;
  double f_star = 0.0;
  bool fallback = false;  // SMBO round that fell back to a random draw
};

struct TunerResult {
  HyperVector best_lambda;
  Vector best_weights;
  double train_loss = 0.0;
  double validation_loss = 0.0;
  std::optional<double> test_loss;
  long long solve_count = 0;
  std::vector<HistoryEntry> history;
};

namespace detail {

/// Tracks the incumbent while evaluations stream in; only the best weights
/// are retained.
struct Incumbent {
  std::size_t index = 0;
  double loss = std::numeric_limits<double>::infinity();
  Vector weights;
  bool any = false;

  void offer(std::size_t i, ValueSample& s) {
    if (!any || s.upper_loss < loss) {
      any = true;
      index = i;
      loss = s.upper_loss;
      weights = std::move(s.weights);
    }
  }
};

template <BilevelProblem P>
TunerResult finish(const P& problem, std::vector<HistoryEntry> history, Incumbent& inc,
                   long long solves) {
  TunerResult r;
  r.best_lambda = history[inc.index].lambda;
  r.best_weights = std::move(inc.weights);
  r.validation_loss = inc.loss;
  if constexpr (requires { problem.training_loss(r.best_weights); }) {
    r.train_loss = problem.training_loss(r.best_weights);
  } else {
    r.train_loss = problem.lower_objective(r.best_lambda, r.best_weights);
  }
  if constexpr (HasTestSet<P>) {
    if (problem.has_test()) r.test_loss = problem.test_objective(r.best_weights);
  }
  r.solve_count = solves;
  r.history = std::move(history);
  return r;
}

/// Evaluates sites in order, keeping the history and the incumbent.
template <BilevelProblem P>
TunerResult evaluate_sites(const P& problem, const std::vector<HyperVector>& sites,
                           const SolveBudget& budget) {
  SolveCountScope scope;
  std::vector<HistoryEntry> history;
  history.reserve(sites.size());
  Incumbent inc;
  // Chunked so that at most one chunk of weight vectors is alive at a time.
  constexpr std::size_t chunk = 16;
  for (std::size_t begin = 0; begin < sites.size(); begin += chunk) {
    const std::size_t end = std::min(sites.size(), begin + chunk);
    std::vector<HyperVector> part(sites.begin() + static_cast<std::ptrdiff_t>(begin),
                                  sites.begin() + static_cast<std::ptrdiff_t>(end));
    auto solved = solve_all(problem, part, budget.with_seed(budget.seed + begin));
    for (std::size_t i = 0; i < solved.size(); ++i) {
      history.push_back({solved[i].lambda, solved[i].upper_loss, solved[i].f_star, false});
      inc.offer(begin + i, solved[i]);
    }
  }
  return finish(problem, std::move(history), inc, scope.count());
}

}  // namespace detail

/// Full factorial over the space with `per_dim[k]` levels in component k.
template <BilevelProblem P>
TunerResult grid_search(const P& problem, const std::vector<int>& per_dim, const SolveBudget& budget) {
  const auto coords = factorial_grid(problem.space(), per_dim);
  std::vector<HyperVector> sites;
  sites.reserve(coords.size());
  for (const auto& c : coords) sites.emplace_back(problem.space(), c);
  return detail::evaluate_sites(problem, sites, budget);
}

template <BilevelProblem P>
TunerResult grid_search(const P& problem, int per_dim, const SolveBudget& budget) {
  return grid_search(problem, std::vector<int>(problem.space().dimension(), per_dim), budget);
}

/// K uniform draws in the sampling scale.
template <BilevelProblem P>
TunerResult random_search(const P& problem, int draws, std::uint64_t seed, const SolveBudget& budget) {
  if (draws < 1) throw DomainError("random search needs at least one draw");
  const HyperSpace& space = problem.space();
  Rng rng(seed);
  std::vector<HyperVector> sites;
  for (int i = 0; i < draws; ++i) {
    Vector c(space.dimension());
    for (int k = 0; k < space.dimension(); ++k) c[k] = rng.uniform(space.lower()[k], space.upper()[k]);
    sites.emplace_back(space, c);
  }
  return detail::evaluate_sites(problem, sites, budget);
}

inline double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi); }

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

/// Expected improvement below `y_min` of a Gaussian with the given moments.
inline double expected_improvement(double mean, double variance, double y_min) {
  if (variance < 0.0) throw DomainError("variance must be nonnegative");
  const double gap = y_min - mean;
  const double s = std::sqrt(variance);
  if (s == 0.0) return std::max(gap, 0.0);
  const double z = gap / s;
  return std::max(gap * normal_cdf(z) + s * normal_pdf(z), 0.0);
}

struct SmboOptions {
  int candidates = 1024;
  int refit_every = 10;  // likelihood search period; other rounds reuse (theta, p)
  KrigingOptions kriging;
};

/// Sequential model-based optimization: Latin hypercube initialization, then
/// repeatedly fit a GP to (lambda, F), evaluate the candidate with the largest
/// expected improvement among seeded Latin hypercube draws.
template <BilevelProblem P>
TunerResult bayes_smbo(const P& problem, int init_count, int total_count, std::uint64_t seed,
                       const SolveBudget& budget, const SmboOptions& options = {}) {
  if (init_count < 2) throw DomainError("SMBO needs at least two initial points");
  if (total_count <= init_count) throw DomainError("SMBO total must exceed its initial count");
  const HyperSpace& space = problem.space();
  const int n = space.dimension();
  SolveCountScope scope;

  std::vector<HistoryEntry> history;
  detail::Incumbent inc;
  auto record = [&](ValueSample s, bool fallback) {
    history.push_back({s.lambda, s.upper_loss, s.f_star, fallback});
    inc.offer(history.size() - 1, s);
  };

  {
    std::vector<HyperVector> init;
    for (auto& c : latin_hypercube(space, init_count, seed)) init.emplace_back(space, c);
    auto solved = solve_all(problem, init, budget.with_seed(budget.seed));
    for (auto& s : solved) record(std::move(s), false);
  }

  Rng fallback_rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::optional<KrigingModel> previous;
  for (int round = init_count; round < total_count; ++round) {
    const Index count = static_cast<Index>(history.size());
    Eigen::MatrixXd x(count, n);
    Vector y(count);
    for (Index i = 0; i < count; ++i) {
      x.row(i) = history[i].lambda.coords().transpose();
      y[i] = history[i].upper_loss;
    }

    std::optional<KrigingModel> gp;
    const bool refit = !previous || (round - init_count) % std::max(1, options.refit_every) == 0;
    try {
      if (refit) {
        KrigingOptions ko = options.kriging;
        ko.seed = options.kriging.seed + static_cast<std::uint64_t>(round);
        gp = fit_kriging(x, y, ko);
      } else {
        gp = KrigingModel::build(x, y, previous->theta(), previous->p(), previous->nugget());
        if (!gp) gp = fit_kriging(x, y, options.kriging);
      }
    } catch (const Error&) {
      gp.reset();
    }

    Vector chosen(n);
    bool fallback = !gp.has_value();
    if (gp) {
      previous = gp;
      const auto draws = latin_hypercube(space, options.candidates, seed + 7919ULL * round);
      Eigen::MatrixXd cand(options.candidates, n);
      for (int c = 0; c < options.candidates; ++c) cand.row(c) = draws[c].transpose();
      Vector mean, var;
      gp->predict_many(cand, mean, var);
      const double y_min = y.minCoeff();
      double best_ei = -1.0;
      for (int c = 0; c < options.candidates; ++c) {
        const double ei = expected_improvement(mean[c], var[c], y_min);
        if (ei > best_ei) {
          best_ei = ei;
          chosen = cand.row(c).transpose();
        }
      }
      if (!(best_ei > 0.0)) fallback = true;
    }
    if (fallback) {
      for (int k = 0; k < n; ++k) chosen[k] = fallback_rng.uniform(space.lower()[k], space.upper()[k]);
    }
    record(solve_lower(problem, HyperVector(space, chosen), budget.with_seed(budget.seed + round)),
           fallback);
  }
  return detail::finish(problem, std::move(history), inc, scope.count());
}

}  // namespace pvm

#endif  // PVM_BASELINES_HPP
