#ifndef PVM_RIDGE_HPP
#define PVM_RIDGE_HPP

#include <Eigen/Dense>

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pvm/error.hpp"
#include "pvm/problem.hpp"

namespace pvm {

/// Linear least-squares model. Parameters are the d coefficients followed by
/// an unregularized intercept when `fit_intercept` is set.
class RidgeModel {
 public:
  explicit RidgeModel(Index features, bool fit_intercept = true)
      : d_(features), fit_intercept_(fit_intercept) {
    if (features < 1) throw DomainError("ridge model needs at least one feature");
  }

  Index feature_count() const { return d_; }
  bool fit_intercept() const { return fit_intercept_; }
  Index parameter_count() const { return d_ + (fit_intercept_ ? 1 : 0); }

  /// All coefficients share one group; the intercept is excluded.
  GroupMap group_map(int n_groups) const {
    if (n_groups != 1) throw DomainError("ridge regression has a single regularization group");
    auto groups = std::make_shared<std::vector<int>>(static_cast<std::size_t>(parameter_count()), 0);
    if (fit_intercept_) groups->back() = -1;
    return groups;
  }

  Vector initial_weights(std::uint64_t /*seed*/) const { return Vector::Zero(parameter_count()); }

  Vector predict(const Vector& w, const RowMatrix& x) const {
    check(w, x);
    Vector out = x * w.head(d_);
    if (fit_intercept_) out.array() += w[d_];
    return out;
  }

  /// Mean squared error over `rows`.
  double loss(const Vector& w, const DatasetSplit& split, std::span<const Index> rows) const {
    check(w, split.features());
    require_regression(split);
    if (rows.empty()) throw DomainError("empty batch");
    double total = 0.0;
    for (Index i : rows) {
      const double r = residual(w, split, i);
      if (!std::isfinite(r)) {
        throw NumericalError("non-finite squared error at example " + std::to_string(i),
                             static_cast<std::size_t>(i));
      }
      total += r * r;
    }
    return total / static_cast<double>(rows.size());
  }

  /// Mean squared error and its gradient (2/N) X^T (Xw + b - y).
  double loss_gradient(const Vector& w, const DatasetSplit& split, std::span<const Index> rows,
                       Vector& grad) const {
    check(w, split.features());
    require_regression(split);
    if (rows.empty()) throw DomainError("empty batch");
    grad.setZero(parameter_count());
    const double scale = 2.0 / static_cast<double>(rows.size());
    double total = 0.0;
    for (Index i : rows) {
      const double r = residual(w, split, i);
      if (!std::isfinite(r)) {
        throw NumericalError("non-finite squared error at example " + std::to_string(i),
                             static_cast<std::size_t>(i));
      }
      total += r * r;
      grad.head(d_) += (scale * r) * split.features().row(i).transpose();
      if (fit_intercept_) grad[d_] += scale * r;
    }
    return total / static_cast<double>(rows.size());
  }

  /// Exact minimizer of mean squared error + lambda ||coef||^2:
  ///   (X~^T X~ + N lambda D) w = X~^T y
  /// where X~ carries a ones column for the intercept and D is the identity
  /// with the intercept entry zeroed. The factor N appears because the data
  /// term is an average while the penalty is not; dropping it rescales lambda.
  Vector closed_form(const Vector& lambda, const DatasetSplit& train) const {
    require_regression(train);
    if (lambda.size() != 1) throw StructuralError("ridge regression takes one lambda");
    if (lambda[0] < 0.0) throw DomainError("negative regularization strength");
    if (train.cols() != d_) throw StructuralError("feature count does not match ridge model");
    const Index m = parameter_count();
    const auto n = static_cast<double>(train.rows());

    Eigen::MatrixXd gram(m, m);
    Vector rhs(m);
    const auto& x = train.features();
    gram.topLeftCorner(d_, d_).noalias() = x.transpose() * x;
    rhs.head(d_).noalias() = x.transpose() * train.targets();
    if (fit_intercept_) {
      const Vector col_sums = x.colwise().sum().transpose();
      gram.block(0, d_, d_, 1) = col_sums;
      gram.block(d_, 0, 1, d_) = col_sums.transpose();
      gram(d_, d_) = n;
      rhs[d_] = train.targets().sum();
    }
    gram.diagonal().head(d_).array() += n * lambda[0];

    Eigen::LLT<Eigen::MatrixXd> llt(gram);
    if (llt.info() == Eigen::Success) {
      const auto diag = llt.matrixLLT().diagonal();
      if (diag.minCoeff() > 1e-7 * diag.maxCoeff()) return llt.solve(rhs);
    }
    throw NumericalError("ridge normal equations are singular at lambda = " +
                         std::to_string(lambda[0]) + "; use lambda > 0");
  }

 private:
  double residual(const Vector& w, const DatasetSplit& split, Index i) const {
    double pred = split.features().row(i).dot(w.head(d_));
    if (fit_intercept_) pred += w[d_];
    return pred - split.targets()[i];
  }

  void check(const Vector& w, const RowMatrix& x) const {
    if (w.size() != parameter_count()) throw StructuralError("ridge weight length mismatch");
    if (x.cols() != d_) throw StructuralError("feature count does not match ridge model");
  }

  static void require_regression(const DatasetSplit& split) {
    if (split.is_classification()) throw StructuralError("ridge model needs a regression split");
  }

  Index d_;
  bool fit_intercept_;
};

}  // namespace pvm

#endif  // PVM_RIDGE_HPP
