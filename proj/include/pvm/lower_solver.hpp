#ifndef PVM_LOWER_SOLVER_HPP
#define PVM_LOWER_SOLVER_HPP

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "pvm/error.hpp"
#include "pvm/problem.hpp"
#include "pvm/random.hpp"

namespace pvm {

/// Stochastic gradient schedule for one lower-level solve.
struct SolveBudget {
  int epochs = 50;
  int batch_size = 32;
  double learning_rate = 0.1;
  double lr_decay = 0.99;  // multiplicative, per epoch
  std::uint64_t seed = 0;

  void validate(Index train_count) const {
    if (epochs < 1 || batch_size < 1 || !(learning_rate > 0.0) || !(lr_decay > 0.0)) {
      throw DomainError("solve budget entries must be positive");
    }
    if (batch_size > train_count) {
      throw DomainError("batch size " + std::to_string(batch_size) + " exceeds training set size " +
                        std::to_string(train_count));
    }
  }

  SolveBudget with_seed(std::uint64_t s) const {
    SolveBudget b = *this;
    b.seed = s;
    return b;
  }
};

/// Outcome of one lower-level solve: (lambda, f*, F(w*), w*).
struct ValueSample {
  HyperVector lambda;
  double f_star = 0.0;
  double upper_loss = 0.0;
  Vector weights;
};

// ---------------------------------------------------------------------------
// Solve accounting
// ---------------------------------------------------------------------------

/// Process-wide count of lower-level solves. Only `solve_lower` increments it.
inline std::atomic<long long>& solve_counter() {
  static std::atomic<long long> counter{0};
  return counter;
}

inline long long solve_count() { return solve_counter().load(); }

/// Counter delta over a scope.
class SolveCountScope {
 public:
  SolveCountScope() : start_(solve_count()) {}
  long long count() const { return solve_count() - start_; }

 private:
  long long start_;
};

// ---------------------------------------------------------------------------
// Concurrency
// ---------------------------------------------------------------------------

/// Runs fn(i) for i in [0, n) on up to hardware_concurrency threads and
/// returns results in index order. The first exception (lowest index) is
/// rethrown after all workers finish.
template <class T, class Fn>
std::vector<T> parallel_map(std::size_t n, Fn&& fn) {
  std::vector<T> out(n);
  std::vector<std::exception_ptr> errors(n);
  const std::size_t workers =
      std::min<std::size_t>(n, std::max(1u, std::thread::hardware_concurrency()));
  auto run = [&](std::size_t i) {
    try {
      out[i] = fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) run(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t t = 0; t < workers; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) run(i);
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Hyperparameter designs
// ---------------------------------------------------------------------------

enum class SamplingScheme { uniform_grid, latin_hypercube };

inline std::vector<double> linspace(double lo, double hi, int count) {
  std::vector<double> out(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    out[i] = count == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / (count - 1);
  }
  if (count > 1) out.back() = hi;
  return out;
}

/// Seeded Latin hypercube design with `count` points in the box.
inline std::vector<Vector> latin_hypercube(const HyperSpace& space, int count, std::uint64_t seed) {
  if (count < 1) throw DomainError("latin hypercube needs at least one point");
  const int n = space.dimension();
  Rng rng(seed);
  std::vector<Vector> points(static_cast<std::size_t>(count), Vector(n));
  std::vector<int> strata(static_cast<std::size_t>(count));
  for (int k = 0; k < n; ++k) {
    for (int i = 0; i < count; ++i) strata[i] = i;
    rng.shuffle(std::span<int>(strata));
    const double lo = space.lower()[k];
    const double width = space.upper()[k] - lo;
    for (int i = 0; i < count; ++i) {
      points[i][k] = lo + width * (strata[i] + rng.uniform()) / count;
    }
  }
  return points;
}

/// Full factorial with `per_dim[k]` equally spaced levels per component,
/// including both endpoints. The first component varies slowest.
inline std::vector<Vector> factorial_grid(const HyperSpace& space, const std::vector<int>& per_dim) {
  const int n = space.dimension();
  if (static_cast<int>(per_dim.size()) != n) {
    throw StructuralError("grid level count per dimension does not match space");
  }
  std::vector<std::vector<double>> axes;
  std::size_t total = 1;
  for (int k = 0; k < n; ++k) {
    if (per_dim[k] < 2) throw DomainError("grid needs at least two points per dimension");
    axes.push_back(linspace(space.lower()[k], space.upper()[k], per_dim[k]));
    total *= static_cast<std::size_t>(per_dim[k]);
  }
  std::vector<Vector> points;
  points.reserve(total);
  std::vector<int> digit(static_cast<std::size_t>(n), 0);
  for (std::size_t c = 0; c < total; ++c) {
    Vector p(n);
    for (int k = 0; k < n; ++k) p[k] = axes[k][digit[k]];
    points.push_back(std::move(p));
    for (int k = n - 1; k >= 0; --k) {
      if (++digit[k] < per_dim[k]) break;
      digit[k] = 0;
    }
  }
  return points;
}

/// L hyperparameter sites. A uniform grid uses the largest full factorial with
/// at most L points, padded with Latin hypercube points up to exactly L.
inline std::vector<HyperVector> sample_hyperparameters(const HyperSpace& space, int count,
                                                       SamplingScheme scheme,
                                                       std::uint64_t seed = 0) {
  std::vector<Vector> coords;
  if (scheme == SamplingScheme::uniform_grid) {
    if (count < 2) throw DomainError("uniform grid needs at least two samples");
    const int n = space.dimension();
    int levels = static_cast<int>(std::floor(std::pow(static_cast<double>(count), 1.0 / n) + 1e-9));
    while (std::pow(static_cast<double>(levels + 1), n) <= count) ++levels;
    while (levels > 1 && std::pow(static_cast<double>(levels), n) > count) --levels;
    if (levels < 2) throw DomainError("too few samples for a grid in this dimension");
    coords = factorial_grid(space, std::vector<int>(static_cast<std::size_t>(n), levels));
    const int pad = count - static_cast<int>(coords.size());
    if (pad > 0) {
      for (auto& p : latin_hypercube(space, pad, seed)) coords.push_back(std::move(p));
    }
  } else {
    coords = latin_hypercube(space, count, seed);
  }
  std::vector<HyperVector> out;
  out.reserve(coords.size());
  for (auto& c : coords) out.emplace_back(space, std::move(c));
  return out;
}

// ---------------------------------------------------------------------------
// Lower-level solves
// ---------------------------------------------------------------------------

inline constexpr double kDivergenceThreshold = 1e6;

/// Mini-batch SGD on f(lambda, .) from the problem's seeded initial weights.
/// Returns the iterate with the smallest full-batch f among epoch-end
/// evaluations.
template <BilevelProblem P>
Vector sgd_lower(const P& problem, const HyperVector& lambda, const SolveBudget& budget,
                 double* best_value = nullptr) {
  budget.validate(problem.train_count());
  Rng rng(budget.seed);
  Vector w = problem.initial_weights(budget.seed);
  Vector grad(w.size());
  std::vector<Index> order = all_rows(problem.train_count());
  const auto batch = static_cast<std::size_t>(budget.batch_size);

  Vector best = w;
  double best_f = std::numeric_limits<double>::infinity();
  double lr = budget.learning_rate;
  for (int epoch = 0; epoch < budget.epochs; ++epoch) {
    rng.shuffle(std::span<Index>(order));
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t len = std::min(batch, order.size() - start);
      problem.lower_batch_gradient(lambda, w, std::span<const Index>(order.data() + start, len), grad);
      w -= lr * grad;
    }
    double f = 0.0;
    try {
      f = problem.lower_objective(lambda, w);
    } catch (const NumericalError&) {
      f = std::numeric_limits<double>::quiet_NaN();
    }
    if (!std::isfinite(f) || f > kDivergenceThreshold) {
      throw SolverError("lower-level SGD diverged at epoch " + std::to_string(epoch), epoch);
    }
    if (f < best_f) {
      best_f = f;
      best = w;
    }
    lr *= budget.lr_decay;
  }
  if (best_value) *best_value = best_f;
  return best;
}

/// Solves min_w f(lambda, w). Exactly solvable problems bypass SGD.
/// Increments the global solve counter once.
template <BilevelProblem P>
ValueSample solve_lower(const P& problem, const HyperVector& lambda, const SolveBudget& budget) {
  if (!(lambda.space() == problem.space())) {
    throw StructuralError("hyper vector belongs to a different space");
  }
  solve_counter().fetch_add(1);
  Vector w;
  if constexpr (ExactlySolvable<P>) {
    w = problem.solve_exact(lambda);
  } else {
    w = sgd_lower(problem, lambda, budget);
  }
  ValueSample s;
  s.lambda = lambda;
  s.f_star = problem.lower_objective(lambda, w);
  if (!std::isfinite(s.f_star)) throw SolverError("non-finite optimal lower value", -1);
  s.upper_loss = problem.upper_objective(w);
  s.weights = std::move(w);
  return s;
}

/// One solve per site, seeded base_seed + index, run concurrently and
/// returned in site order.
template <BilevelProblem P>
std::vector<ValueSample> solve_all(const P& problem, const std::vector<HyperVector>& sites,
                                   const SolveBudget& budget) {
  return parallel_map<ValueSample>(sites.size(), [&](std::size_t i) {
    try {
      return solve_lower(problem, sites[i], budget.with_seed(budget.seed + i));
    } catch (const Error& e) {
      std::string where = "lower solve failed at lambda coords (";
      for (Index k = 0; k < sites[i].coords().size(); ++k) {
        where += (k ? ", " : "") + std::to_string(sites[i].coords()[k]);
      }
      throw SolverError(where + "): " + e.what(), -1);
    }
  });
}

/// Samples L sites and solves the lower level at each.
template <BilevelProblem P>
std::vector<ValueSample> build_value_samples(const P& problem, const HyperSpace& space, int count,
                                             SamplingScheme scheme, const SolveBudget& budget) {
  const auto sites = sample_hyperparameters(space, count, scheme, budget.seed);
  return solve_all(problem, sites, budget);
}

}  // namespace pvm

#endif  // PVM_LOWER_SOLVER_HPP
