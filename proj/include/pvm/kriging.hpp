#ifndef PVM_KRIGING_HPP
#define PVM_KRIGING_HPP

// Ordinary Kriging: constant-mean Gaussian-process interpolation with the
// power-exponential correlation
//
//   corr(a, b) = exp(-sum_k theta_k |a_k - b_k|^p_k),
//
// and (theta, p) chosen by maximizing the concentrated log-likelihood
//
//   -(L/2) ln sigma2_hat - (1/2) ln det R,
//   mu_hat     = 1^T R^-1 y / 1^T R^-1 1,
//   sigma2_hat = (y - mu_hat 1)^T R^-1 (y - mu_hat 1) / L.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "pvm/error.hpp"
#include "pvm/lower_solver.hpp"
#include "pvm/problem.hpp"
#include "pvm/random.hpp"

namespace pvm {

inline constexpr std::array<double, 4> kNuggetLadder{0.0, 1e-10, 1e-8, 1e-6};

struct KrigingOptions {
  int starts = 8;                 // multi-start count for the likelihood search
  double log_theta_min = -8.0;    // natural log
  double log_theta_max = 8.0;
  bool optimize_p = false;        // otherwise p is fixed at `p_fixed`
  double p_fixed = 2.0;
  std::uint64_t seed = 0;
  int max_sweeps = 200;
  // Caps the number of points used while searching (theta, p); the final
  // model always uses every point.
  int mle_max_points = 100;
};

/// exp(-sum_k theta_k |a_k - b_k|^p_k).
inline double correlation(const Vector& a, const Vector& b, const Vector& theta, const Vector& p) {
  if (a.size() != b.size() || a.size() != theta.size() || a.size() != p.size()) {
    throw StructuralError("correlation arguments differ in dimension");
  }
  if ((theta.array() <= 0.0).any()) throw DomainError("correlation weights must be positive");
  if ((p.array() < 1.0).any() || (p.array() > 2.0).any()) {
    throw DomainError("correlation exponents must lie in [1, 2]");
  }
  double d = 0.0;
  for (Index k = 0; k < a.size(); ++k) d += theta[k] * std::pow(std::abs(a[k] - b[k]), p[k]);
  return std::exp(-d);
}

class KrigingModel;
KrigingModel fit_kriging(const Eigen::MatrixXd& sites, const Vector& values,
                         const KrigingOptions& options = {});

/// Fitted surrogate. Immutable; queries are pure.
class KrigingModel {
 public:
  KrigingModel() = default;

  /// Factorizes the correlation matrix for fixed parameters. Returns nullopt
  /// when the factorization is not numerically positive definite.
  static std::optional<KrigingModel> build(Eigen::MatrixXd sites, Vector values, Vector theta,
                                           Vector p, double nugget) {
    KrigingModel m;
    m.sites_ = std::move(sites);
    m.values_ = std::move(values);
    m.theta_ = std::move(theta);
    m.p_ = std::move(p);
    m.nugget_ = nugget;
    if (!m.factorize()) return std::nullopt;
    return m;
  }

  Index size() const { return sites_.rows(); }
  int dimension() const { return static_cast<int>(sites_.cols()); }
  const Eigen::MatrixXd& sites() const { return sites_; }
  const Vector& values() const { return values_; }
  const Vector& theta() const { return theta_; }
  const Vector& p() const { return p_; }
  double mu_hat() const { return mu_hat_; }
  double sigma2_hat() const { return sigma2_hat_; }
  double nugget() const { return nugget_; }
  double log_likelihood() const { return log_likelihood_; }
  const Eigen::MatrixXd& chol_factor() const { return chol_; }

  /// Correlations between `x` and every site.
  Vector correlations(const Vector& x) const {
    check_query(x);
    Vector r(size());
    for (Index i = 0; i < size(); ++i) r[i] = corr_raw(x, sites_.row(i).transpose());
    return r;
  }

  /// mu_hat + r(x)^T R^-1 (y - mu_hat 1).
  double predict(const Vector& x) const { return mu_hat_ + correlations(x).dot(alpha_); }

  /// Posterior variance including the mean-estimation term, clamped at 0.
  double predict_variance(const Vector& x) const {
    const Vector r = correlations(x);
    const Vector v = chol_.triangularView<Eigen::Lower>().solve(r);
    const double u = 1.0 - rinv_one_.dot(r);
    const double s2 = sigma2_hat_ * (1.0 - v.squaredNorm() + u * u / one_rinv_one_);
    return std::max(s2, 0.0);
  }

  /// Means and variances for many query points (one per row) at once.
  void predict_many(const Eigen::MatrixXd& xs, Vector& mean, Vector& variance) const {
    const Index q = xs.rows();
    Eigen::MatrixXd r(size(), q);
    for (Index c = 0; c < q; ++c) {
      const Vector x = xs.row(c).transpose();
      for (Index i = 0; i < size(); ++i) r(i, c) = corr_raw(x, sites_.row(i).transpose());
    }
    mean = (r.transpose() * alpha_).array() + mu_hat_;
    const Eigen::MatrixXd v = chol_.triangularView<Eigen::Lower>().solve(r);
    const Vector u = 1.0 - (r.transpose() * rinv_one_).array();
    variance = sigma2_hat_ *
               (1.0 - v.colwise().squaredNorm().transpose().array() + u.array().square() / one_rinv_one_);
    variance = variance.cwiseMax(0.0);
  }

  /// Analytic gradient of `predict`. For p_k < 2 the predictor is not
  /// differentiable where x_k equals a site coordinate; that term is taken as 0.
  Vector grad_predict(const Vector& x) const {
    const Vector r = correlations(x);
    Vector g = Vector::Zero(dimension());
    for (Index i = 0; i < size(); ++i) {
      const double weight = alpha_[i] * r[i];
      if (weight == 0.0) continue;
      for (int k = 0; k < dimension(); ++k) {
        const double delta = x[k] - sites_(i, k);
        if (delta == 0.0) continue;
        const double mag = std::abs(delta);
        const double dr = -theta_[k] * p_[k] * std::pow(mag, p_[k] - 1.0) * (delta > 0 ? 1.0 : -1.0);
        g[k] += weight * dr;
      }
    }
    return g;
  }

  /// Concentrated log-likelihood of the stored data for other parameters,
  /// -inf when the correlation matrix cannot be factorized at this nugget.
  double concentrated_log_likelihood(const Vector& theta, const Vector& p) const {
    auto m = build(sites_, values_, theta, p, nugget_);
    return m ? m->log_likelihood_ : -std::numeric_limits<double>::infinity();
  }

 private:
  friend KrigingModel fit_kriging(const Eigen::MatrixXd&, const Vector&, const KrigingOptions&);

  double corr_raw(const Vector& a, const Vector& b) const {
    double d = 0.0;
    for (Index k = 0; k < a.size(); ++k) {
      const double delta = std::abs(a[k] - b[k]);
      d += theta_[k] * (p_[k] == 2.0 ? delta * delta : std::pow(delta, p_[k]));
    }
    return std::exp(-d);
  }

  void check_query(const Vector& x) const {
    if (x.size() != dimension()) throw StructuralError("query dimension does not match surrogate");
  }

  bool factorize() {
    const Index n = size();
    Eigen::MatrixXd r(n, n);
    for (Index i = 0; i < n; ++i) {
      r(i, i) = 1.0 + nugget_;
      for (Index j = 0; j < i; ++j) {
        const double c = corr_raw(sites_.row(i).transpose(), sites_.row(j).transpose());
        r(i, j) = c;
        r(j, i) = c;
      }
    }
    Eigen::LLT<Eigen::MatrixXd> llt(r);
    if (llt.info() != Eigen::Success) return false;
    chol_ = llt.matrixL();
    // Reject numerically singular matrices (reciprocal condition estimate);
    // their solves are meaningless and break interpolation.
    if (llt.rcond() < 1e-12) return false;

    const Vector ones = Vector::Ones(n);
    rinv_one_ = llt.solve(ones);
    one_rinv_one_ = ones.dot(rinv_one_);
    if (!(one_rinv_one_ > 0.0)) return false;

    const double spread = values_.maxCoeff() - values_.minCoeff();
    if (spread <= 1e-14 * std::max(1.0, values_.cwiseAbs().maxCoeff())) {
      // Constant data: the predictor is the constant itself.
      mu_hat_ = values_[0];
      alpha_ = Vector::Zero(n);
      sigma2_hat_ = 0.0;
      log_likelihood_ = std::numeric_limits<double>::infinity();
      return true;
    }
    mu_hat_ = rinv_one_.dot(values_) / one_rinv_one_;
    const Vector resid = values_.array() - mu_hat_;
    alpha_ = llt.solve(resid);
    alpha_ += llt.solve(resid - r * alpha_);  // one step of iterative refinement
    sigma2_hat_ = std::max(resid.dot(alpha_) / static_cast<double>(n), 0.0);
    const double log_det = 2.0 * chol_.diagonal().array().log().sum();
    log_likelihood_ = sigma2_hat_ > 0.0
                          ? -0.5 * static_cast<double>(n) * std::log(sigma2_hat_) - 0.5 * log_det
                          : std::numeric_limits<double>::infinity();
    return alpha_.allFinite();
  }

  Eigen::MatrixXd sites_;
  Vector values_;
  Vector theta_;
  Vector p_;
  double nugget_ = 0.0;
  double mu_hat_ = 0.0;
  double sigma2_hat_ = 0.0;
  double log_likelihood_ = 0.0;
  Eigen::MatrixXd chol_;
  Vector alpha_;
  Vector rinv_one_;
  double one_rinv_one_ = 0.0;
};

namespace detail {

struct MleSearch {
  const Eigen::MatrixXd& sites;
  const Vector& values;
  const KrigingOptions& options;
  double nugget;

  int dims() const { return static_cast<int>(sites.cols()); }

  // Parameter vector: log theta per dimension, then p per dimension when optimized.
  void decode(const Vector& params, Vector& theta, Vector& p) const {
    const int n = dims();
    theta = params.head(n).array().exp();
    p = options.optimize_p ? Vector(params.tail(n)) : Vector::Constant(n, options.p_fixed);
  }

  double objective(const Vector& params) const {
    Vector theta, p;
    decode(params, theta, p);
    auto m = KrigingModel::build(sites, values, theta, p, nugget);
    return m ? m->log_likelihood() : -std::numeric_limits<double>::infinity();
  }

  Vector lower() const {
    const int n = dims();
    Vector lo(options.optimize_p ? 2 * n : n);
    lo.head(n).setConstant(options.log_theta_min);
    if (options.optimize_p) lo.tail(n).setConstant(1.0);
    return lo;
  }

  Vector upper() const {
    const int n = dims();
    Vector hi(options.optimize_p ? 2 * n : n);
    hi.head(n).setConstant(options.log_theta_max);
    if (options.optimize_p) hi.tail(n).setConstant(2.0);
    return hi;
  }

  /// Compass search from `start`; only improving moves are accepted.
  Vector coordinate_search(Vector x, double& best) const {
    const Vector lo = lower();
    const Vector hi = upper();
    Vector step = (hi - lo) / 8.0;
    const Vector min_step = (hi - lo) * 1e-4;
    best = objective(x);
    for (int sweep = 0; sweep < options.max_sweeps; ++sweep) {
      bool moved = false;
      for (Index c = 0; c < x.size(); ++c) {
        for (double dir : {1.0, -1.0}) {
          Vector trial = x;
          trial[c] = std::clamp(x[c] + dir * step[c], lo[c], hi[c]);
          if (trial[c] == x[c]) continue;
          const double value = objective(trial);
          if (value > best) {
            best = value;
            x = trial;
            moved = true;
            break;
          }
        }
      }
      if (!moved) {
        step /= 2.0;
        if ((step.array() < min_step.array()).all()) break;
      }
    }
    return x;
  }
};

}  // namespace detail

/// Latin hypercube starting points for the likelihood search, as
/// (log theta_1..n[, p_1..n]) parameter vectors.
inline std::vector<Vector> mle_start_points(const KrigingOptions& options, int dims) {
  const Eigen::MatrixXd none(0, dims);
  const Vector no_values;
  const detail::MleSearch search{none, no_values, options, 0.0};
  const Vector lo = search.lower();
  const Vector hi = search.upper();
  Rng rng(options.seed);
  const int starts = options.starts;
  std::vector<std::vector<int>> strata(static_cast<std::size_t>(lo.size()));
  for (auto& s : strata) {
    s.resize(static_cast<std::size_t>(starts));
    for (int i = 0; i < starts; ++i) s[i] = i;
    rng.shuffle(std::span<int>(s));
  }
  std::vector<Vector> out;
  for (int s = 0; s < starts; ++s) {
    Vector start(lo.size());
    for (Index c = 0; c < lo.size(); ++c) {
      start[c] = lo[c] + (hi[c] - lo[c]) * (strata[c][s] + rng.uniform()) / starts;
    }
    out.push_back(std::move(start));
  }
  return out;
}

/// Splits a parameter vector from `mle_start_points` into (theta, p).
inline void decode_kriging_params(const KrigingOptions& options, int dims, const Vector& params,
                                  Vector& theta, Vector& p) {
  const Eigen::MatrixXd none(0, dims);
  const Vector no_values;
  detail::MleSearch{none, no_values, options, 0.0}.decode(params, theta, p);
}

/// Multi-start likelihood search at the lowest nugget on the ladder that
/// admits a factorization, then the final model on all points.
inline KrigingModel fit_kriging(const Eigen::MatrixXd& sites, const Vector& values,
                                const KrigingOptions& options) {
  const Index count = sites.rows();
  if (count < 2) throw DomainError("Kriging needs at least two sites");
  if (values.size() != count) throw StructuralError("site and value counts differ");
  if (!values.allFinite() || !sites.allFinite()) throw DomainError("non-finite Kriging data");
  if (options.starts < 1) throw DomainError("need at least one likelihood search start");
  for (Index i = 0; i < count; ++i) {
    for (Index j = 0; j < i; ++j) {
      if ((sites.row(i) - sites.row(j)).cwiseAbs().maxCoeff() == 0.0) {
        throw DomainError("duplicate Kriging sites " + std::to_string(j) + " and " +
                          std::to_string(i));
      }
    }
  }

  // Likelihood search on an evenly strided subset when the sample is large.
  Eigen::MatrixXd search_sites = sites;
  Vector search_values = values;
  if (count > options.mle_max_points) {
    const Index m = options.mle_max_points;
    search_sites.resize(m, sites.cols());
    search_values.resize(m);
    for (Index i = 0; i < m; ++i) {
      const Index src = i * count / m;
      search_sites.row(i) = sites.row(src);
      search_values[i] = values[src];
    }
  }

  for (double nugget : kNuggetLadder) {
    detail::MleSearch search{search_sites, search_values, options, nugget};
    const Vector lo = search.lower();
    const Vector hi = search.upper();
    Vector best_params;
    double best = -std::numeric_limits<double>::infinity();
    for (const Vector& start : mle_start_points(options, static_cast<int>(sites.cols()))) {
      double value = 0.0;
      Vector found = search.coordinate_search(start, value);
      if (value > best) {
        best = value;
        best_params = found;
      }
    }
    if (best_params.size() == 0) continue;

    Vector theta, p;
    search.decode(best_params, theta, p);
    auto model = KrigingModel::build(sites, values, theta, p, nugget);
    if (!model) {
      // The subset factorized but the full sample did not; try larger theta.
      for (double bump = 1.0; bump <= 16.0 && !model; bump += 1.0) {
        Vector t = (theta.array().log() + bump).min(options.log_theta_max).exp();
        model = KrigingModel::build(sites, values, t, p, nugget);
      }
    }
    if (model) return *model;
  }
  throw FitError("correlation matrix is not positive definite at any nugget on the ladder");
}

/// Convenience overload for sites given as hyper vectors (sampling scale).
inline KrigingModel fit_kriging(const std::vector<HyperVector>& sites, const Vector& values,
                                const KrigingOptions& options = {}) {
  if (sites.empty()) throw DomainError("Kriging needs at least two sites");
  Eigen::MatrixXd x(static_cast<Index>(sites.size()), sites.front().dimension());
  for (std::size_t i = 0; i < sites.size(); ++i) x.row(static_cast<Index>(i)) = sites[i].coords().transpose();
  return fit_kriging(x, values, options);
}

/// Surrogate of the lower-level value function phi from solved samples.
inline KrigingModel fit_value_function(const std::vector<ValueSample>& samples,
                                       const KrigingOptions& options = {}) {
  std::vector<HyperVector> sites;
  Vector values(static_cast<Index>(samples.size()));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    sites.push_back(samples[i].lambda);
    values[static_cast<Index>(i)] = samples[i].f_star;
  }
  return fit_kriging(sites, values, options);
}

}  // namespace pvm

#endif  // PVM_KRIGING_HPP
