#ifndef PVM_PROBLEM_HPP
#define PVM_PROBLEM_HPP

// Bilevel hyperparameter problem abstraction.
//
//   upper:  min_{lambda, w}  F(w) = l(w; validation)
//   lower:  w in argmin_w    f(lambda, w) = l(w; train) + sum_g lambda_g ||w_g||^2
//
// Hyperparameters live in a "sampling scale": a linear component stores
// lambda directly, a log component stores xi with lambda = exp(xi).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pvm/error.hpp"

namespace pvm {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Scale { linear, log };

inline const char* to_string(Scale s) { return s == Scale::linear ? "linear" : "log"; }

// ---------------------------------------------------------------------------
// Hyperparameter space
// ---------------------------------------------------------------------------

/// Box in the sampling scale, one scale per component.
class HyperSpace {
 public:
  HyperSpace() = default;

  HyperSpace(std::vector<Scale> scales, Vector lower, Vector upper)
      : scales_(std::move(scales)), lower_(std::move(lower)), upper_(std::move(upper)) {
    if (scales_.empty()) throw DomainError("hyper space must have at least one dimension");
    if (lower_.size() != static_cast<Index>(scales_.size()) ||
        upper_.size() != static_cast<Index>(scales_.size())) {
      throw StructuralError("hyper space bounds do not match its dimension");
    }
    for (Index k = 0; k < lower_.size(); ++k) {
      if (!(lower_[k] < upper_[k])) {
        throw DomainError("hyper space lower bound must be below upper bound in component " +
                          std::to_string(k));
      }
      if (scales_[k] == Scale::linear && lower_[k] < 0.0) {
        throw DomainError("linear-scale regularization strength cannot be negative");
      }
    }
  }

  /// Same scale and bounds in every one of `n` components.
  static HyperSpace uniform(int n, Scale scale, double lower, double upper) {
    return HyperSpace(std::vector<Scale>(n, scale), Vector::Constant(n, lower),
                      Vector::Constant(n, upper));
  }

  int dimension() const { return static_cast<int>(scales_.size()); }
  Scale scale(int k) const { return scales_[k]; }
  const std::vector<Scale>& scales() const { return scales_; }
  const Vector& lower() const { return lower_; }
  const Vector& upper() const { return upper_; }

  double decode(int k, double coord) const {
    return scales_[k] == Scale::log ? std::exp(coord) : coord;
  }

  /// d lambda_k / d coord_k.
  double decode_derivative(int k, double coord) const {
    return scales_[k] == Scale::log ? std::exp(coord) : 1.0;
  }

  Vector project(const Vector& coords) const {
    return coords.cwiseMax(lower_).cwiseMin(upper_);
  }

  bool contains(const Vector& coords) const {
    return coords.size() == dimension() && (coords.array() >= lower_.array()).all() &&
           (coords.array() <= upper_.array()).all();
  }

  friend bool operator==(const HyperSpace& a, const HyperSpace& b) {
    return a.scales_ == b.scales_ && a.lower_ == b.lower_ && a.upper_ == b.upper_;
  }

 private:
  std::vector<Scale> scales_;
  Vector lower_;
  Vector upper_;
};

/// Upper-level decision, stored in sampling-scale coordinates and always
/// projected into its space.
class HyperVector {
 public:
  HyperVector() = default;

  HyperVector(HyperSpace space, Vector coords) : space_(std::move(space)) {
    if (coords.size() != space_.dimension()) {
      throw StructuralError("hyper vector length " + std::to_string(coords.size()) +
                            " does not match space dimension " +
                            std::to_string(space_.dimension()));
    }
    coords_ = space_.project(coords);
  }

  /// Builds from regularization strengths rather than coordinates.
  static HyperVector from_lambda(const HyperSpace& space, const Vector& lambda) {
    if (lambda.size() != space.dimension()) {
      throw StructuralError("lambda length does not match space dimension");
    }
    Vector coords(lambda.size());
    for (int k = 0; k < space.dimension(); ++k) {
      if (space.scale(k) == Scale::log) {
        if (!(lambda[k] > 0.0)) throw DomainError("log-scale lambda must be positive");
        coords[k] = std::log(lambda[k]);
      } else {
        coords[k] = lambda[k];
      }
    }
    return HyperVector(space, coords);
  }

  const HyperSpace& space() const { return space_; }
  const Vector& coords() const { return coords_; }
  int dimension() const { return space_.dimension(); }

  double lambda(int k) const { return space_.decode(k, coords_[k]); }

  Vector lambda() const {
    Vector out(dimension());
    for (int k = 0; k < dimension(); ++k) out[k] = lambda(k);
    return out;
  }

  /// Elementwise d lambda / d coords.
  Vector lambda_derivative() const {
    Vector out(dimension());
    for (int k = 0; k < dimension(); ++k) out[k] = space_.decode_derivative(k, coords_[k]);
    return out;
  }

  /// ln lambda per component, the quantity reported in result tables.
  Vector log_lambda() const {
    Vector out(dimension());
    for (int k = 0; k < dimension(); ++k) {
      out[k] = space_.scale(k) == Scale::log ? coords_[k] : std::log(coords_[k]);
    }
    return out;
  }

 private:
  HyperSpace space_;
  Vector coords_;
};

// ---------------------------------------------------------------------------
// Weights and regularization
// ---------------------------------------------------------------------------

/// Regularization group per coordinate; -1 marks coordinates (biases) that
/// are excluded from the penalty. Shared between all weight vectors of a model.
using GroupMap = std::shared_ptr<const std::vector<int>>;

inline int group_count(const std::vector<int>& groups) {
  int top = -1;
  for (int g : groups) top = std::max(top, g);
  return top + 1;
}

struct WeightVector {
  Vector values;
  GroupMap groups;

  Index size() const { return values.size(); }

  int group_count() const { return groups ? pvm::group_count(*groups) : 0; }

  void check() const {
    if (!groups || static_cast<Index>(groups->size()) != values.size()) {
      throw StructuralError("weight vector group map does not match its length");
    }
  }
};

/// Sum over groups of lambda_g * ||w_g||^2; biases (group -1) excluded.
inline double regularizer(const WeightVector& w, const HyperVector& lambda) {
  w.check();
  if (w.group_count() != lambda.dimension()) {
    throw StructuralError("weight vector has " + std::to_string(w.group_count()) +
                          " groups but lambda has dimension " +
                          std::to_string(lambda.dimension()));
  }
  const Vector lam = lambda.lambda();
  if ((lam.array() < 0.0).any()) throw DomainError("negative regularization strength");
  const auto& groups = *w.groups;
  double total = 0.0;
  for (Index j = 0; j < w.values.size(); ++j) {
    const int g = groups[j];
    if (g >= 0) total += lam[g] * w.values[j] * w.values[j];
  }
  return total;
}

/// d f / d lambda_g = ||w_g||^2, independent of lambda.
inline Vector grad_lower_wrt_lambda(const WeightVector& w, const HyperVector& lambda) {
  w.check();
  if (w.group_count() != lambda.dimension()) {
    throw StructuralError("weight vector groups do not match lambda dimension");
  }
  Vector out = Vector::Zero(lambda.dimension());
  const auto& groups = *w.groups;
  for (Index j = 0; j < w.values.size(); ++j) {
    if (groups[j] >= 0) out[groups[j]] += w.values[j] * w.values[j];
  }
  return out;
}

/// Adds the regularizer gradient 2 lambda_g w_j to `grad`.
inline void add_regularizer_gradient(const Vector& w, const std::vector<int>& groups,
                                     const Vector& lambda, Vector& grad) {
  for (Index j = 0; j < w.size(); ++j) {
    const int g = groups[j];
    if (g >= 0) grad[j] += 2.0 * lambda[g] * w[j];
  }
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

enum class Role { train, validation, test };

inline const char* to_string(Role r) {
  switch (r) {
    case Role::train: return "train";
    case Role::validation: return "validation";
    case Role::test: return "test";
  }
  return "?";
}

/// Immutable labelled data. Regression splits carry `targets`; classification
/// splits carry `labels` in 0..classes-1.
class DatasetSplit {
 public:
  DatasetSplit() = default;

  static DatasetSplit regression(RowMatrix features, Vector targets, Role role) {
    if (features.rows() != targets.size()) {
      throw StructuralError("feature rows and target count differ");
    }
    check_finite(features);
    if (!targets.allFinite()) throw DomainError("regression targets contain missing values");
    DatasetSplit s;
    s.features_ = std::move(features);
    s.targets_ = std::move(targets);
    s.role_ = role;
    return s;
  }

  static DatasetSplit classification(RowMatrix features, std::vector<int> labels, int classes,
                                     Role role) {
    if (features.rows() != static_cast<Index>(labels.size())) {
      throw StructuralError("feature rows and label count differ");
    }
    if (classes < 2) throw DomainError("classification needs at least two classes");
    check_finite(features);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || labels[i] >= classes) {
        throw DomainError("label out of range at row " + std::to_string(i));
      }
    }
    DatasetSplit s;
    s.features_ = std::move(features);
    s.labels_ = std::move(labels);
    s.classes_ = classes;
    s.role_ = role;
    return s;
  }

  /// Same data under a different role.
  DatasetSplit with_role(Role role) const {
    DatasetSplit s = *this;
    s.role_ = role;
    return s;
  }

  /// Rows selected by index, in the given order.
  DatasetSplit select(std::span<const Index> rows, Role role) const {
    RowMatrix x(static_cast<Index>(rows.size()), features_.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) x.row(static_cast<Index>(i)) = features_.row(rows[i]);
    if (is_classification()) {
      std::vector<int> y(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) y[i] = labels_[rows[i]];
      return classification(std::move(x), std::move(y), classes_, role);
    }
    Vector y(static_cast<Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) y[static_cast<Index>(i)] = targets_[rows[i]];
    return regression(std::move(x), std::move(y), role);
  }

  Index rows() const { return features_.rows(); }
  Index cols() const { return features_.cols(); }
  Role role() const { return role_; }
  bool is_classification() const { return classes_ > 0; }
  int classes() const { return classes_; }
  const RowMatrix& features() const { return features_; }
  const Vector& targets() const { return targets_; }
  const std::vector<int>& labels() const { return labels_; }

 private:
  static void check_finite(const RowMatrix& x) {
    if (!x.allFinite()) throw DomainError("features contain missing or non-finite values");
  }

  RowMatrix features_;
  Vector targets_;
  std::vector<int> labels_;
  int classes_ = 0;
  Role role_ = Role::train;
};

inline std::vector<Index> all_rows(Index n) {
  std::vector<Index> rows(static_cast<std::size_t>(n));
  std::iota(rows.begin(), rows.end(), Index{0});
  return rows;
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

/// A differentiable predictor with an average per-example loss.
/// `loss` and `loss_gradient` average over `rows` of `split`; gradients are
/// written (not accumulated) into `grad`.
template <class M>
concept LossModel = requires(const M& m, const Vector& w, const DatasetSplit& s,
                             std::span<const Index> rows, Vector& grad, int n_groups,
                             std::uint64_t seed) {
  { m.parameter_count() } -> std::convertible_to<Index>;
  { m.group_map(n_groups) } -> std::same_as<GroupMap>;
  { m.loss(w, s, rows) } -> std::convertible_to<double>;
  { m.loss_gradient(w, s, rows, grad) } -> std::convertible_to<double>;
  { m.initial_weights(seed) } -> std::same_as<Vector>;
};

namespace detail {

template <LossModel M>
void check_weights(const M& model, const WeightVector& w) {
  if (w.size() != model.parameter_count()) {
    throw StructuralError("weight vector length " + std::to_string(w.size()) +
                          " does not match model parameter count " +
                          std::to_string(model.parameter_count()));
  }
}

}  // namespace detail

/// l(w; S_T): mean squared error or mean softmax cross-entropy on a train split.
template <LossModel M>
double training_loss(const M& model, const WeightVector& w, const DatasetSplit& split) {
  if (split.role() != Role::train) throw DomainError("training_loss expects a train split");
  detail::check_weights(model, w);
  const auto rows = all_rows(split.rows());
  return model.loss(w.values, split, rows);
}

/// F(w) = l(w; S_V), no regularization.
template <LossModel M>
double validation_loss(const M& model, const WeightVector& w, const DatasetSplit& split) {
  if (split.role() != Role::validation) {
    throw DomainError("validation_loss expects a validation split");
  }
  detail::check_weights(model, w);
  const auto rows = all_rows(split.rows());
  return model.loss(w.values, split, rows);
}

/// Unregularized loss on a split of any role.
template <LossModel M>
double split_loss(const M& model, const WeightVector& w, const DatasetSplit& split) {
  detail::check_weights(model, w);
  const auto rows = all_rows(split.rows());
  return model.loss(w.values, split, rows);
}

/// f(lambda, w) = l(w; S_T) + Theta(w, lambda).
template <LossModel M>
double lower_objective(const M& model, const HyperVector& lambda, const WeightVector& w,
                       const DatasetSplit& train) {
  return training_loss(model, w, train) + regularizer(w, lambda);
}

template <LossModel M>
Vector grad_lower_wrt_w(const M& model, const HyperVector& lambda, const WeightVector& w,
                        const DatasetSplit& train) {
  if (train.role() != Role::train) throw DomainError("gradient expects a train split");
  detail::check_weights(model, w);
  w.check();
  if (w.group_count() != lambda.dimension()) {
    throw StructuralError("weight vector groups do not match lambda dimension");
  }
  const auto rows = all_rows(train.rows());
  Vector grad(w.size());
  model.loss_gradient(w.values, train, rows, grad);
  add_regularizer_gradient(w.values, *w.groups, lambda.lambda(), grad);
  if (!grad.allFinite()) throw NumericalError("non-finite lower-level gradient");
  return grad;
}

// ---------------------------------------------------------------------------
// Problems
// ---------------------------------------------------------------------------

/// Everything the solvers need from a bilevel problem. Gradients with respect
/// to lambda are taken in sampling-scale coordinates.
template <class P>
concept BilevelProblem = requires(const P& p, const HyperVector& h, const Vector& w,
                                  std::span<const Index> rows, Vector& grad, std::uint64_t seed) {
  { p.space() } -> std::convertible_to<const HyperSpace&>;
  { p.parameter_count() } -> std::convertible_to<Index>;
  { p.group_map() } -> std::same_as<GroupMap>;
  { p.train_count() } -> std::convertible_to<Index>;
  { p.validation_count() } -> std::convertible_to<Index>;
  { p.initial_weights(seed) } -> std::same_as<Vector>;
  { p.lower_objective(h, w) } -> std::convertible_to<double>;
  { p.lower_batch_gradient(h, w, rows, grad) } -> std::convertible_to<double>;
  { p.lower_coord_gradient(h, w) } -> std::same_as<Vector>;
  { p.upper_objective(w) } -> std::convertible_to<double>;
  { p.upper_batch_gradient(w, rows, grad) } -> std::convertible_to<double>;
};

/// A problem whose lower level can be solved exactly.
template <class P>
concept ExactlySolvable = BilevelProblem<P> && requires(const P& p, const HyperVector& h) {
  { p.solve_exact(h) } -> std::same_as<Vector>;
};

/// Problems that can report held-out test loss.
template <class P>
concept HasTestSet = requires(const P& p, const Vector& w) {
  { p.has_test() } -> std::convertible_to<bool>;
  { p.test_objective(w) } -> std::convertible_to<double>;
};

/// Regularized supervised learning: lower level on the train split, upper on
/// the validation split. Immutable after construction.
template <LossModel M>
class SupervisedProblem {
 public:
  SupervisedProblem(M model, HyperSpace space, DatasetSplit train, DatasetSplit validation,
                    std::optional<DatasetSplit> test = std::nullopt)
      : model_(std::move(model)),
        space_(std::move(space)),
        train_(std::move(train)),
        validation_(std::move(validation)),
        test_(std::move(test)) {
    if (train_.role() != Role::train) throw DomainError("first split must have the train role");
    if (validation_.role() != Role::validation) {
      throw DomainError("second split must have the validation role");
    }
    if (test_ && test_->role() != Role::test) throw DomainError("third split must have the test role");
    if (train_.rows() == 0 || validation_.rows() == 0) throw DomainError("empty split");
    groups_ = model_.group_map(space_.dimension());
    if (pvm::group_count(*groups_) != space_.dimension()) {
      throw StructuralError("model group map does not cover every hyperparameter");
    }
  }

  const M& model() const { return model_; }
  const HyperSpace& space() const { return space_; }
  const DatasetSplit& train() const { return train_; }
  const DatasetSplit& validation() const { return validation_; }
  const std::optional<DatasetSplit>& test() const { return test_; }
  Index parameter_count() const { return model_.parameter_count(); }
  GroupMap group_map() const { return groups_; }
  Index train_count() const { return train_.rows(); }
  Index validation_count() const { return validation_.rows(); }

  WeightVector wrap(Vector w) const { return WeightVector{std::move(w), groups_}; }

  Vector initial_weights(std::uint64_t seed) const { return model_.initial_weights(seed); }

  double lower_objective(const HyperVector& h, const Vector& w) const {
    return pvm::lower_objective(model_, h, wrap(w), train_);
  }

  double training_loss(const Vector& w) const { return pvm::training_loss(model_, wrap(w), train_); }

  double upper_objective(const Vector& w) const {
    return pvm::validation_loss(model_, wrap(w), validation_);
  }

  bool has_test() const { return test_.has_value(); }

  double test_objective(const Vector& w) const {
    if (!test_) throw DomainError("problem has no test split");
    return split_loss(model_, wrap(w), *test_);
  }

  /// Mini-batch estimate of f and its w-gradient: batch loss plus the full
  /// regularizer. Returns the estimate of f.
  double lower_batch_gradient(const HyperVector& h, const Vector& w, std::span<const Index> rows,
                              Vector& grad) const {
    const Vector lam = h.lambda();
    double value = model_.loss_gradient(w, train_, rows, grad);
    add_regularizer_gradient(w, *groups_, lam, grad);
    return value + regularizer(wrap(w), h);
  }

  /// d f / d coords = ||w_g||^2 * d lambda_g / d coord_g.
  Vector lower_coord_gradient(const HyperVector& h, const Vector& w) const {
    return grad_lower_wrt_lambda(wrap(w), h).cwiseProduct(h.lambda_derivative());
  }

  double upper_batch_gradient(const Vector& w, std::span<const Index> rows, Vector& grad) const {
    return model_.loss_gradient(w, validation_, rows, grad);
  }

  Vector solve_exact(const HyperVector& h) const
    requires requires(const M& m, const Vector& lam, const DatasetSplit& s) {
      { m.closed_form(lam, s) } -> std::same_as<Vector>;
    }
  {
    return model_.closed_form(h.lambda(), train_);
  }

 private:
  M model_;
  HyperSpace space_;
  DatasetSplit train_;
  DatasetSplit validation_;
  std::optional<DatasetSplit> test_;
  GroupMap groups_;
};

}  // namespace pvm

#endif  // PVM_PROBLEM_HPP
