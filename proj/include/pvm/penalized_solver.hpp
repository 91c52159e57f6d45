#ifndef PVM_PENALIZED_SOLVER_HPP
#define PVM_PENALIZED_SOLVER_HPP

// Penalized validation method.
//
// With a surrogate phi_hat of the lower-level value function, the bilevel
// problem becomes  min F(w)  s.t.  P(lambda, w) = f(lambda, w) - phi_hat(lambda) = 0,
// handled by the augmented Lagrangian
//
//   Z(lambda, w) = F(w) + (R/2) P^2 + mu P
//
// with updates  mu <- mu + R P(lambda', w'),  R <- eta R  after each round.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pvm/error.hpp"
#include "pvm/kriging.hpp"
#include "pvm/lower_solver.hpp"
#include "pvm/problem.hpp"
#include "pvm/random.hpp"

namespace pvm {

struct PenaltyState {
  double penalty_R = 2.0;
  double multiplier = 2.0;
  double eta = 1.5;
  int round = 0;
};

struct PvmConfig {
  int rounds = 4;  // M
  double R0 = 2.0;
  double mu0 = 2.0;
  double eta = 1.5;
  SolveBudget inner_budget;
  double lambda_rate_scale = 0.1;  // step size on lambda coords relative to w
  bool posthoc_solve = false;      // re-solve the lower level at lambda* afterwards
  KrigingOptions kriging;

  void validate() const {
    if (rounds < 1) throw DomainError("at least one augmented Lagrangian round is required");
    if (!(R0 > 0.0)) throw DomainError("initial penalty must be positive");
    if (!(eta > 1.0)) throw DomainError("penalty growth factor must exceed 1");
    if (!(lambda_rate_scale > 0.0)) throw DomainError("lambda step scale must be positive");
  }

  PenaltyState initial_state() const { return PenaltyState{R0, mu0, eta, 0}; }
};

/// Point in the joint (lambda, w) space.
struct Iterate {
  HyperVector lambda;
  Vector weights;
};

struct PvmRecord {
  int round = 0;
  Vector coords;
  Vector lambda;
  double upper = 0.0;    // F
  double lower = 0.0;    // f
  double phi_hat = 0.0;
  double violation = 0.0;  // P
  double penalized = 0.0;  // Z under the state that produced this iterate
  double penalty_R = 0.0;  // state after the round's updates
  double multiplier = 0.0;
};

/// One record for the start and one per round.
struct PvmTrace {
  std::vector<PvmRecord> records;
};

struct PvmResult {
  Iterate best;
  PvmTrace trace;
  KrigingModel surrogate;
  std::size_t start_index = 0;
  int sample_solves = 0;  // L
  int rounds = 0;         // M, one solve-equivalent each
  int posthoc_solves = 0;
  double final_penalized = 0.0;
};

/// f(lambda, w) - phi_hat(lambda), signed.
template <BilevelProblem P>
double constraint_violation(const P& problem, const KrigingModel& surrogate, const HyperVector& lambda,
                            const Vector& w) {
  return problem.lower_objective(lambda, w) - surrogate.predict(lambda.coords());
}

inline double penalized_value(double upper, double violation, const PenaltyState& state) {
  return upper + 0.5 * state.penalty_R * violation * violation + state.multiplier * violation;
}

/// Z(lambda, w) = F(w) + (R/2) P^2 + mu P.
template <BilevelProblem P>
double penalized_loss(const P& problem, const KrigingModel& surrogate, const HyperVector& lambda,
                      const Vector& w, const PenaltyState& state) {
  return penalized_value(problem.upper_objective(w),
                         constraint_violation(problem, surrogate, lambda, w), state);
}

struct PenalizedGradient {
  Vector coords;   // d Z / d lambda coords (sampling scale)
  Vector weights;  // d Z / d w
};

/// Full-batch gradient of Z. The lambda part is taken in sampling-scale
/// coordinates, so log-scaled components include d lambda / d xi.
template <BilevelProblem P>
PenalizedGradient grad_penalized(const P& problem, const KrigingModel& surrogate,
                                 const HyperVector& lambda, const Vector& w, const PenaltyState& state) {
  const auto train_rows = all_rows(problem.train_count());
  const auto val_rows = all_rows(problem.validation_count());
  Vector grad_f(w.size());
  Vector grad_upper(w.size());
  const double f = problem.lower_batch_gradient(lambda, w, train_rows, grad_f);
  problem.upper_batch_gradient(w, val_rows, grad_upper);
  const double weight = state.penalty_R * (f - surrogate.predict(lambda.coords())) + state.multiplier;
  PenalizedGradient g;
  g.weights = grad_upper + weight * grad_f;
  g.coords = weight * (problem.lower_coord_gradient(lambda, w) - surrogate.grad_predict(lambda.coords()));
  if (!g.weights.allFinite() || !g.coords.allFinite()) {
    throw NumericalError("non-finite penalized-loss gradient");
  }
  return g;
}

/// Index of the sample with the smallest upper-level loss; ties go to the
/// lowest index.
inline std::size_t select_start(std::span<const ValueSample> samples) {
  if (samples.empty()) throw DomainError("cannot select a start from an empty sample");
  std::size_t best = 0;
  for (std::size_t i = 1; i < samples.size(); ++i) {
    if (samples[i].upper_loss < samples[best].upper_loss) best = i;
  }
  return best;
}

/// Multiplier and penalty update after a round that ended with violation P.
inline PenaltyState advance_state(const PenaltyState& state, double violation) {
  PenaltyState next = state;
  next.multiplier = state.multiplier + state.penalty_R * violation;
  next.penalty_R = state.eta * state.penalty_R;
  next.round = state.round + 1;
  return next;
}

struct RoundResult {
  Iterate iterate;
  PenaltyState state;
  double penalized = 0.0;  // Z(iterate) under the incoming state
  double violation = 0.0;
};

/// One augmented-Lagrangian round: joint mini-batch descent on Z over
/// (lambda coords, w) for the same epochs and batch size as one lower solve,
/// projecting lambda onto its box after every step. Returns the best
/// full-batch Z seen (the start included), then applies the updates.
template <BilevelProblem P>
RoundResult al_round(const P& problem, const KrigingModel& surrogate, const PenaltyState& state,
                     const Iterate& start, const SolveBudget& budget, double lambda_rate_scale,
                     int max_rounds = std::numeric_limits<int>::max()) {
  if (state.round >= max_rounds) throw DomainError("augmented Lagrangian round limit reached");
  const Index n_train = problem.train_count();
  const Index n_val = problem.validation_count();
  const int batch = std::min<Index>(budget.batch_size, n_train);
  SolveBudget checked = budget;
  checked.batch_size = batch;
  checked.validate(n_train);

  Rng rng(budget.seed);
  const HyperSpace& space = problem.space();
  Vector coords = start.lambda.coords();
  Vector w = start.weights;
  Vector grad_f(w.size());
  Vector grad_upper(w.size());
  std::vector<Index> train_order = all_rows(n_train);
  std::vector<Index> val_order = all_rows(n_val);
  std::size_t val_pos = val_order.size();
  const auto val_batch = static_cast<std::size_t>(std::min<Index>(batch, n_val));

  auto full_z = [&](const Vector& c, const Vector& weights) {
    return penalized_loss(problem, surrogate, HyperVector(space, c), weights, state);
  };

  Vector best_coords = coords;
  Vector best_w = w;
  double best_z = full_z(coords, w);
  double lr = budget.learning_rate;
  for (int epoch = 0; epoch < budget.epochs; ++epoch) {
    rng.shuffle(std::span<Index>(train_order));
    for (std::size_t pos = 0; pos < train_order.size(); pos += static_cast<std::size_t>(batch)) {
      const std::size_t len = std::min(static_cast<std::size_t>(batch), train_order.size() - pos);
      if (val_pos + val_batch > val_order.size()) {
        rng.shuffle(std::span<Index>(val_order));
        val_pos = 0;
      }
      const HyperVector h(space, coords);
      double f_batch = 0.0;
      try {
        f_batch = problem.lower_batch_gradient(h, w, std::span<const Index>(train_order.data() + pos, len), grad_f);
        problem.upper_batch_gradient(w, std::span<const Index>(val_order.data() + val_pos, val_batch),
                                     grad_upper);
      } catch (const NumericalError& e) {
        throw SolverError("augmented Lagrangian round " + std::to_string(state.round + 1) +
                              " diverged at epoch " + std::to_string(epoch) + ": " + e.what(),
                          epoch);
      }
      val_pos += val_batch;
      const double weight = state.penalty_R * (f_batch - surrogate.predict(coords)) + state.multiplier;
      const Vector grad_coords =
          weight * (problem.lower_coord_gradient(h, w) - surrogate.grad_predict(coords));
      // The lower objective enters Z scaled by `weight`; dividing the step by
      // 1 + |weight| keeps the curvature seen by SGD near that of a plain solve.
      const double step = lr / (1.0 + std::abs(weight));
      w -= step * (grad_upper + weight * grad_f);
      coords = space.project(coords - lambda_rate_scale * step * grad_coords);
    }
    double z = std::numeric_limits<double>::quiet_NaN();
    try {
      z = full_z(coords, w);
    } catch (const NumericalError&) {
    }
    if (!std::isfinite(z) || std::abs(z) > kDivergenceThreshold) {
      throw SolverError("augmented Lagrangian round " + std::to_string(state.round + 1) +
                            " diverged at epoch " + std::to_string(epoch),
                        epoch);
    }
    if (z < best_z) {
      best_z = z;
      best_coords = coords;
      best_w = w;
    }
    lr *= budget.lr_decay;
  }

  RoundResult out;
  out.iterate = Iterate{HyperVector(space, best_coords), best_w};
  out.penalized = best_z;
  out.violation = constraint_violation(problem, surrogate, out.iterate.lambda, best_w);
  out.state = advance_state(state, out.violation);
  return out;
}

namespace detail {

template <BilevelProblem P>
PvmRecord make_record(const P& problem, const KrigingModel& surrogate, const Iterate& it,
                      const PenaltyState& z_state, const PenaltyState& after, int round) {
  PvmRecord r;
  r.round = round;
  r.coords = it.lambda.coords();
  r.lambda = it.lambda.lambda();
  r.upper = problem.upper_objective(it.weights);
  r.lower = problem.lower_objective(it.lambda, it.weights);
  r.phi_hat = surrogate.predict(r.coords);
  r.violation = r.lower - r.phi_hat;
  r.penalized = penalized_value(r.upper, r.violation, z_state);
  r.penalty_R = after.penalty_R;
  r.multiplier = after.multiplier;
  return r;
}

}  // namespace detail

/// Fits phi_hat to the samples, starts from the sample with the best
/// validation loss and runs M rounds. Each round is seeded from the inner
/// budget's seed plus the round index.
template <BilevelProblem P>
PvmResult run_pvm(const P& problem, const PvmConfig& config, const std::vector<ValueSample>& samples) {
  config.validate();
  PvmResult result;
  result.surrogate = fit_value_function(samples, config.kriging);
  result.sample_solves = static_cast<int>(samples.size());
  result.start_index = select_start(samples);

  Iterate current{samples[result.start_index].lambda, samples[result.start_index].weights};
  PenaltyState state = config.initial_state();
  result.trace.records.push_back(
      detail::make_record(problem, result.surrogate, current, state, state, 0));

  for (int m = 0; m < config.rounds; ++m) {
    const PenaltyState incoming = state;
    RoundResult r = al_round(problem, result.surrogate, state, current,
                             config.inner_budget.with_seed(config.inner_budget.seed + 1000003ULL * (m + 1)),
                             config.lambda_rate_scale, config.rounds);
    current = std::move(r.iterate);
    state = r.state;
    result.trace.records.push_back(
        detail::make_record(problem, result.surrogate, current, incoming, state, m + 1));
  }
  result.rounds = config.rounds;
  result.final_penalized = result.trace.records.back().penalized;

  if (config.posthoc_solve) {
    ValueSample s = solve_lower(problem, current.lambda, config.inner_budget);
    current.weights = std::move(s.weights);
    result.posthoc_solves = 1;
  }
  result.best = std::move(current);
  return result;
}

/// Samples, solves and runs the method end to end.
template <BilevelProblem P>
PvmResult run_pvm(const P& problem, const PvmConfig& config, int sample_count, SamplingScheme scheme,
                  const SolveBudget& sample_budget) {
  const auto samples = build_value_samples(problem, problem.space(), sample_count, scheme, sample_budget);
  return run_pvm(problem, config, samples);
}

/// "L (+M)" solve-equivalent label.
inline std::string solve_label(const PvmResult& r) {
  return std::to_string(r.sample_solves + r.posthoc_solves) + " (+" + std::to_string(r.rounds) + ")";
}

}  // namespace pvm

#endif  // PVM_PENALIZED_SOLVER_HPP
