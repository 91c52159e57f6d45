#ifndef PVM_MLP_HPP
#define PVM_MLP_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pvm/error.hpp"
#include "pvm/problem.hpp"
#include "pvm/random.hpp"

namespace pvm {

enum class Activation { relu, sigmoid, tanh };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

/// One-hidden-layer perceptron with a softmax cross-entropy head.
///
/// Flat parameter layout: W1 (input x hidden, row-major), b1 (hidden),
/// W2 (hidden x classes, row-major), b2 (classes).
class MlpModel {
 public:
  MlpModel(Index input_dim, Index hidden, Index classes, Activation activation = Activation::relu)
      : input_(input_dim), hidden_(hidden), classes_(classes), activation_(activation) {
    if (input_dim < 1 || hidden < 1 || classes < 2) throw DomainError("invalid MLP shape");
  }

  Index input_dim() const { return input_; }
  Index hidden() const { return hidden_; }
  Index classes() const { return classes_; }
  Activation activation() const { return activation_; }

  Index parameter_count() const {
    return input_ * hidden_ + hidden_ + hidden_ * classes_ + classes_;
  }

  Index w1_offset() const { return 0; }
  Index b1_offset() const { return input_ * hidden_; }
  Index w2_offset() const { return b1_offset() + hidden_; }
  Index b2_offset() const { return w2_offset() + hidden_ * classes_; }

  /// One group covering both weight matrices, or one group per matrix.
  /// Biases are never regularized.
  GroupMap group_map(int n_groups) const {
    if (n_groups != 1 && n_groups != 2) {
      throw DomainError("MLP supports one or two regularization groups");
    }
    auto groups = std::make_shared<std::vector<int>>(static_cast<std::size_t>(parameter_count()), -1);
    std::fill(groups->begin() + w1_offset(), groups->begin() + b1_offset(), 0);
    std::fill(groups->begin() + w2_offset(), groups->begin() + b2_offset(), n_groups - 1);
    return groups;
  }

  /// He-style uniform initialization, biases zero.
  Vector initial_weights(std::uint64_t seed) const {
    Rng rng(seed);
    Vector w = Vector::Zero(parameter_count());
    const double a1 = std::sqrt(6.0 / static_cast<double>(input_));
    const double a2 = std::sqrt(6.0 / static_cast<double>(hidden_));
    for (Index j = w1_offset(); j < b1_offset(); ++j) w[j] = rng.uniform(-a1, a1);
    for (Index j = w2_offset(); j < b2_offset(); ++j) w[j] = rng.uniform(-a2, a2);
    return w;
  }

  /// Logits for every row of `x`.
  RowMatrix forward(const Vector& w, const RowMatrix& x) const {
    check(w, x.cols());
    const auto rows = all_rows(x.rows());
    Cache cache;
    forward_rows(w, x, rows, cache);
    return cache.logits;
  }

  double loss(const Vector& w, const DatasetSplit& split, std::span<const Index> rows) const {
    check(w, split.cols());
    require_classification(split);
    if (rows.empty()) throw DomainError("empty batch");
    Cache cache;
    forward_rows(w, split.features(), rows, cache);
    return cross_entropy(cache, split, rows, nullptr);
  }

  /// Mean cross-entropy over `rows` and its exact gradient by backpropagation.
  double loss_gradient(const Vector& w, const DatasetSplit& split, std::span<const Index> rows,
                       Vector& grad) const {
    check(w, split.cols());
    require_classification(split);
    if (rows.empty()) throw DomainError("empty batch");
    Cache cache;
    forward_rows(w, split.features(), rows, cache);
    RowMatrix delta2;
    const double value = cross_entropy(cache, split, rows, &delta2);

    grad.setZero(parameter_count());
    const auto batch = static_cast<Index>(rows.size());
    auto gw1 = MatMap(grad.data() + w1_offset(), input_, hidden_);
    auto gb1 = grad.segment(b1_offset(), hidden_);
    auto gw2 = MatMap(grad.data() + w2_offset(), hidden_, classes_);
    auto gb2 = grad.segment(b2_offset(), classes_);
    const auto w2 = ConstMatMap(w.data() + w2_offset(), hidden_, classes_);

    gw2.noalias() = cache.hidden.transpose() * delta2;
    gb2 = delta2.colwise().sum().transpose();

    RowMatrix delta1 = delta2 * w2.transpose();
    apply_activation_derivative(cache.pre, delta1);
    gb1 = delta1.colwise().sum().transpose();

    // Inputs such as image pixels are mostly zero; skip them.
    const auto& x = split.features();
    for (Index b = 0; b < batch; ++b) {
      const auto xrow = x.row(rows[b]);
      for (Index j = 0; j < input_; ++j) {
        const double v = xrow[j];
        if (v != 0.0) gw1.row(j).noalias() += v * delta1.row(b);
      }
    }
    if (!grad.allFinite()) throw NumericalError("non-finite MLP gradient");
    return value;
  }

  /// Row-wise softmax of logits, stabilized by subtracting the row maximum.
  static RowMatrix softmax(const RowMatrix& logits) {
    RowMatrix p = logits;
    for (Index i = 0; i < p.rows(); ++i) {
      const double top = p.row(i).maxCoeff();
      p.row(i) = (p.row(i).array() - top).exp();
      p.row(i) /= p.row(i).sum();
    }
    return p;
  }

 private:
  using MatMap = Eigen::Map<RowMatrix>;
  using ConstMatMap = Eigen::Map<const RowMatrix>;

  struct Cache {
    RowMatrix pre;     // hidden pre-activations
    RowMatrix hidden;  // activations
    RowMatrix logits;
  };

  void check(const Vector& w, Index cols) const {
    if (w.size() != parameter_count()) {
      throw StructuralError("MLP weight length " + std::to_string(w.size()) + " != " +
                            std::to_string(parameter_count()));
    }
    if (cols != input_) throw StructuralError("feature count does not match MLP input size");
  }

  void require_classification(const DatasetSplit& split) const {
    if (!split.is_classification()) throw StructuralError("MLP needs a classification split");
    if (split.classes() != classes_) throw StructuralError("class count does not match MLP");
  }

  void forward_rows(const Vector& w, const RowMatrix& x, std::span<const Index> rows,
                    Cache& cache) const {
    const auto batch = static_cast<Index>(rows.size());
    const auto w1 = ConstMatMap(w.data() + w1_offset(), input_, hidden_);
    const auto b1 = w.segment(b1_offset(), hidden_);
    const auto w2 = ConstMatMap(w.data() + w2_offset(), hidden_, classes_);
    const auto b2 = w.segment(b2_offset(), classes_);

    cache.pre.resize(batch, hidden_);
    for (Index b = 0; b < batch; ++b) {
      auto out = cache.pre.row(b);
      out = b1.transpose();
      const auto xrow = x.row(rows[b]);
      for (Index j = 0; j < input_; ++j) {
        const double v = xrow[j];
        if (v != 0.0) out.noalias() += v * w1.row(j);
      }
    }
    cache.hidden = cache.pre;
    switch (activation_) {
      case Activation::relu: cache.hidden = cache.hidden.cwiseMax(0.0); break;
      case Activation::sigmoid:
        cache.hidden = (1.0 + (-cache.hidden.array()).exp()).inverse().matrix();
        break;
      case Activation::tanh: cache.hidden = cache.hidden.array().tanh().matrix(); break;
    }
    cache.logits.noalias() = cache.hidden * w2;
    cache.logits.rowwise() += b2.transpose();
    if (!cache.logits.allFinite()) throw NumericalError("non-finite MLP activation");
  }

  void apply_activation_derivative(const RowMatrix& pre, RowMatrix& delta) const {
    switch (activation_) {
      case Activation::relu:
        delta = (pre.array() > 0.0).select(delta, 0.0);
        break;
      case Activation::sigmoid: {
        const auto s = (1.0 + (-pre.array()).exp()).inverse();
        delta.array() *= s * (1.0 - s);
        break;
      }
      case Activation::tanh: {
        const auto t = pre.array().tanh();
        delta.array() *= 1.0 - t * t;
        break;
      }
    }
  }

  /// Mean of -log softmax(logits)[label] using log-sum-exp. When `delta` is
  /// given it receives (softmax - onehot) / batch.
  double cross_entropy(const Cache& cache, const DatasetSplit& split, std::span<const Index> rows,
                       RowMatrix* delta) const {
    const auto batch = static_cast<Index>(rows.size());
    const auto& labels = split.labels();
    if (delta) delta->resize(batch, classes_);
    double total = 0.0;
    for (Index b = 0; b < batch; ++b) {
      const auto z = cache.logits.row(b);
      const double top = z.maxCoeff();
      const double lse = top + std::log((z.array() - top).exp().sum());
      const int y = labels[rows[b]];
      const double l = lse - z[y];
      if (!std::isfinite(l)) {
        throw NumericalError("non-finite cross-entropy at example " + std::to_string(rows[b]),
                             static_cast<std::size_t>(rows[b]));
      }
      total += l;
      if (delta) {
        auto d = delta->row(b);
        d = (z.array() - lse).exp().matrix();
        d[y] -= 1.0;
        d /= static_cast<double>(batch);
      }
    }
    return total / static_cast<double>(batch);
  }

  Index input_;
  Index hidden_;
  Index classes_;
  Activation activation_;
};

}  // namespace pvm

#endif  // PVM_MLP_HPP
