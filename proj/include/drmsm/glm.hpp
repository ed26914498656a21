#pragma once

// Logistic regression by iteratively reweighted least squares (observation
// weights, offsets, optional ridge penalty) and weighted least squares.

#include "drmsm/error.hpp"
#include "drmsm/linalg.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace drmsm {

enum class Link { Identity, Logit };

inline double expit(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

// log(1 + exp(x)) without overflow
inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

struct GlmFit {
  VectorXd coefficients;
  Link link = Link::Identity;
  bool converged = false;
  int iterations = 0;
  std::optional<double> ridge_lambda;  // set when a penalty was used
  std::vector<std::string> design_columns;
  double score_norm = 0.0;  // sup-norm of the mean (penalized) score at the solution
  std::string diagnostic;
};

struct LogisticOptions {
  VectorXd weights;  // empty: unit weights
  VectorXd offset;   // empty: no offset
  double ridge = 0.0;
  int max_iterations = 100;
  double score_tolerance = 1e-8;
  double deviance_tolerance = 1e-10;
  // |linear predictor| beyond this on a weighted row is treated as separation
  double separation_bound = 30.0;
  std::vector<std::string> names;
};

namespace detail {

inline void check_weights(const VectorXd& w, Index n) {
  if (w.size() != n) throw std::invalid_argument("weights length does not match design rows");
  for (Index i = 0; i < n; ++i)
    if (!(w(i) >= 0.0) || !std::isfinite(w(i))) throw std::invalid_argument("weights must be finite and nonnegative");
  if (w.sum() <= 0.0) throw std::invalid_argument("all weights are zero");
}

}  // namespace detail

/// Maximizes the weighted Bernoulli quasi-likelihood
///   sum_i w_i [y_i eta_i - log(1 + exp(eta_i))] - (ridge / 2) * sum(w) * |beta|^2
/// with eta = X beta + offset. Responses may be fractional in [0, 1].
///
/// Stops when the mean score sup-norm drops below `score_tolerance` or the
/// relative deviance change drops below `deviance_tolerance`. Divergence or
/// separation returns `converged = false` with a diagnostic instead of
/// throwing; callers pick the fallback.
inline GlmFit fit_logistic(const MatrixXd& x, const VectorXd& y, const LogisticOptions& opt = {}) {
  const Index n = x.rows();
  const Index p = x.cols();
  if (y.size() != n) throw std::invalid_argument("response length does not match design rows");
  if (n == 0) throw std::invalid_argument("empty design");
  VectorXd w = opt.weights.size() == 0 ? VectorXd::Ones(n) : opt.weights;
  detail::check_weights(w, n);
  VectorXd off = opt.offset.size() == 0 ? VectorXd::Zero(n) : opt.offset;
  if (off.size() != n) throw std::invalid_argument("offset length does not match design rows");
  for (Index i = 0; i < n; ++i)
    if (!(y(i) >= 0.0 && y(i) <= 1.0)) throw std::invalid_argument("logistic response outside [0, 1]");

  const double wsum = w.sum();
  const double pen = opt.ridge * wsum;

  GlmFit fit;
  fit.link = Link::Logit;
  fit.design_columns = opt.names;
  fit.ridge_lambda = opt.ridge > 0.0 ? std::optional<double>(opt.ridge) : std::nullopt;
  VectorXd beta = VectorXd::Zero(p);

  auto objective = [&](const VectorXd& b, VectorXd& eta) {
    eta = x * b + off;
    double ll = 0.0;
    for (Index i = 0; i < n; ++i)
      if (w(i) > 0.0) ll += w(i) * (y(i) * eta(i) - softplus(eta(i)));
    return ll - 0.5 * pen * b.squaredNorm();
  };
  auto deviance = [&](const VectorXd& eta) {
    double dev = 0.0;
    for (Index i = 0; i < n; ++i) {
      if (w(i) <= 0.0) continue;
      const double ll = y(i) * eta(i) - softplus(eta(i));
      // saturated log-likelihood of a fractional response
      double sat = 0.0;
      if (y(i) > 0.0 && y(i) < 1.0) sat = y(i) * std::log(y(i)) + (1.0 - y(i)) * std::log1p(-y(i));
      dev += 2.0 * w(i) * (sat - ll);
    }
    return dev;
  };
  auto separated = [&](const VectorXd& eta) {
    for (Index i = 0; i < n; ++i)
      if (w(i) > 0.0 && std::abs(eta(i) - off(i)) > opt.separation_bound) return true;
    return false;
  };

  VectorXd eta;
  double obj = objective(beta, eta);
  double dev = deviance(eta);
  VectorXd mu(n), grad(p);

  for (int it = 0;; ++it) {
    for (Index i = 0; i < n; ++i) mu(i) = expit(eta(i));
    grad = x.transpose() * (w.array() * (y - mu).array()).matrix() - pen * beta;
    fit.score_norm = grad.lpNorm<Eigen::Infinity>() / static_cast<double>(n);
    fit.iterations = it;
    if (fit.score_norm < opt.score_tolerance) {
      fit.converged = true;
      break;
    }
    if (it >= opt.max_iterations) {
      fit.diagnostic = "iteration limit reached";
      break;
    }
    const VectorXd hw = (w.array() * mu.array() * (1.0 - mu.array())).matrix();
    MatrixXd h = x.transpose() * (x.array().colwise() * hw.array()).matrix();
    h.diagonal().array() += pen;
    Eigen::LDLT<MatrixXd> ldlt(h);
    VectorXd step = ldlt.solve(grad);
    if (ldlt.info() != Eigen::Success || !step.allFinite()) {
      h.diagonal().array() += 1e-10 * (1.0 + h.diagonal().maxCoeff());
      step = h.ldlt().solve(grad);
    }
    if (!step.allFinite()) {
      fit.diagnostic = "singular information matrix";
      break;
    }
    // step halving keeps the objective monotone
    double t = 1.0;
    VectorXd trial, trial_eta;
    double trial_obj = 0.0;
    for (int halving = 0; halving < 40; ++halving, t *= 0.5) {
      trial = beta + t * step;
      trial_obj = objective(trial, trial_eta);
      if (std::isfinite(trial_obj) && trial_obj >= obj - 1e-12 * (1.0 + std::abs(obj))) break;
    }
    beta = trial;
    eta = trial_eta;
    obj = trial_obj;
    const double new_dev = deviance(eta);
    // a penalized optimum is always finite, so only unpenalized fits can separate
    if (pen == 0.0 && separated(eta)) {
      fit.iterations = it + 1;
      fit.diagnostic = "separation: fitted probabilities numerically 0 or 1";
      break;
    }
    const bool small_change = std::abs(dev - new_dev) / (std::abs(new_dev) + 0.1) < opt.deviance_tolerance;
    dev = new_dev;
    if (small_change) {
      for (Index i = 0; i < n; ++i) mu(i) = expit(eta(i));
      grad = x.transpose() * (w.array() * (y - mu).array()).matrix() - pen * beta;
      fit.score_norm = grad.lpNorm<Eigen::Infinity>() / static_cast<double>(n);
      fit.iterations = it + 1;
      fit.converged = true;
      break;
    }
  }
  if (!beta.allFinite()) {
    fit.converged = false;
    fit.diagnostic = "non-finite coefficients";
  }
  fit.coefficients = beta;
  return fit;
}

/// Unpenalized fit first; on failure, the smallest ridge penalty in
/// {1e-6, ..., 1e-1} that converges. The last attempt is returned
/// unconverged if none does.
inline GlmFit fit_logistic_with_fallback(const MatrixXd& x, const VectorXd& y, LogisticOptions opt = {}) {
  opt.ridge = 0.0;
  GlmFit fit = fit_logistic(x, y, opt);
  if (fit.converged) return fit;
  const std::string first_failure = fit.diagnostic;
  for (double lambda : {1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1}) {
    opt.ridge = lambda;
    fit = fit_logistic(x, y, opt);
    if (fit.converged) {
      fit.diagnostic = "ridge fallback after: " + first_failure;
      return fit;
    }
  }
  return fit;
}

/// Least squares solving the (weighted) normal equations. Rank deficiency is
/// an error naming the columns that depend on earlier ones.
inline GlmFit fit_ols(const MatrixXd& x, const VectorXd& y, const VectorXd& weights = {},
                      const std::vector<std::string>& names = {}) {
  const Index n = x.rows();
  if (y.size() != n) throw std::invalid_argument("response length does not match design rows");
  MatrixXd xs = x;
  VectorXd ys = y;
  if (weights.size() != 0) {
    detail::check_weights(weights, n);
    const VectorXd sw = weights.array().sqrt().matrix();
    xs = (x.array().colwise() * sw.array()).matrix();
    ys = (y.array() * sw.array()).matrix();
  }
  Eigen::ColPivHouseholderQR<MatrixXd> qr(xs);
  if (qr.rank() < x.cols()) {
    const auto kept = independent_columns(xs);
    std::string dependent;
    std::size_t next = 0;
    for (Index c = 0; c < x.cols(); ++c) {
      if (next < kept.size() && kept[next] == c) {
        ++next;
        continue;
      }
      const auto label = static_cast<std::size_t>(c) < names.size() ? names[static_cast<std::size_t>(c)]
                                                                    : "column " + std::to_string(c);
      dependent += (dependent.empty() ? "" : ", ") + label;
    }
    throw NumericError("rank-deficient design; dependent columns: " + dependent);
  }
  GlmFit fit;
  fit.link = Link::Identity;
  fit.coefficients = qr.solve(ys);
  fit.converged = true;
  fit.design_columns = names;
  const VectorXd resid = ys - xs * fit.coefficients;
  fit.score_norm = (xs.transpose() * resid).lpNorm<Eigen::Infinity>() / static_cast<double>(std::max<Index>(n, 1));
  return fit;
}

inline VectorXd predict(const GlmFit& fit, const MatrixXd& x, const VectorXd& offset = {}) {
  if (x.cols() != fit.coefficients.size()) throw std::invalid_argument("design width does not match fit");
  if (offset.size() != 0 && offset.size() != x.rows()) throw std::invalid_argument("offset length does not match design rows");
  VectorXd eta = x * fit.coefficients;
  if (offset.size() != 0) eta += offset;
  if (fit.link == Link::Logit) {
    // keep probabilities strictly inside (0, 1)
    constexpr double lo = 1e-300;
    constexpr double hi = 1.0 - 1e-16;
    for (Index i = 0; i < eta.size(); ++i) eta(i) = std::clamp(expit(eta(i)), lo, hi);
  }
  return eta;
}

}  // namespace drmsm
