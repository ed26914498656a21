#pragma once

// Doubly robust estimators of the coefficients of a linear working model for
// the conditional average treatment effect, E[Y(1) - Y(0) | V] = V' beta.

#include "drmsm/data_model.hpp"
#include "drmsm/error.hpp"
#include "drmsm/glm.hpp"
#include "drmsm/linalg.hpp"
#include "drmsm/nuisance.hpp"

#include <string>
#include <vector>

namespace drmsm {

enum class Method { Tmle, Aiptw, Plugin };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::Tmle: return "tmle";
    case Method::Aiptw: return "aiptw";
    case Method::Plugin: return "plugin";
  }
  return "?";
}

struct WeightSummary {
  double max_treated = 0.0;
  double p99_treated = 0.0;
  double max_untreated = 0.0;
  double p99_untreated = 0.0;
};

struct EifResult {
  MatrixXd eif;       // n x (p+1), rows M^{-1} D_i
  MatrixXd m_matrix;  // (1/n) sum V V'
  VectorXd mean_d;    // column means of D (estimating equation residual)
};

struct MsmEstimate {
  Method method = Method::Tmle;
  std::vector<std::string> coefficient_names;
  VectorXd beta;         // outcome units
  VectorXd beta_scaled;  // bounded scale
  double scale = 1.0;    // beta = beta_scaled * scale
  MatrixXd eif;          // outcome units
  MatrixXd m_matrix;
  VectorXd qstar1, qstar0;  // TMLE only
  double eif_residual = 0.0;  // sup-norm of the mean of D on the bounded scale
  WeightSummary weights;
  std::vector<std::string> notes;
};

/// Per-record estimating function
///   D = [ (1{A=1}/g(1|X) - 1{A=0}/g(0|X)) (Y - Qbar(A, X)) + Qbar(1, X) - Qbar(0, X) - V' beta ] V
/// normalized by M = (1/n) sum V V'. A singular M is an error.
inline EifResult eif_values(const VectorXd& y, const VectorXd& a, const MatrixXd& v,
                            const VectorXd& qbar1, const VectorXd& qbar0, const VectorXd& g_treat,
                            const VectorXd& g_untreat, const VectorXd& beta) {
  const Index n = v.rows();
  if (y.size() != n || a.size() != n || qbar1.size() != n || qbar0.size() != n ||
      g_treat.size() != n || g_untreat.size() != n)
    throw std::invalid_argument("eif inputs have inconsistent lengths");
  if (beta.size() != v.cols()) throw std::invalid_argument("beta length does not match design");
  if (n == 0) throw std::invalid_argument("no records");

  EifResult out;
  out.m_matrix = v.transpose() * v / static_cast<double>(n);
  Eigen::LDLT<MatrixXd> ldlt(out.m_matrix);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
      Eigen::ColPivHouseholderQR<MatrixXd>(out.m_matrix).rank() < v.cols())
    throw NumericError("normalizing matrix M is singular");

  const VectorXd fitted = v * beta;
  VectorXd resid(n);
  for (Index i = 0; i < n; ++i) {
    const bool treated = a(i) == 1.0;
    const double h = treated ? 1.0 / g_treat(i) : -1.0 / g_untreat(i);
    const double q_obs = treated ? qbar1(i) : qbar0(i);
    resid(i) = h * (y(i) - q_obs) + qbar1(i) - qbar0(i) - fitted(i);
  }
  const MatrixXd d = (v.array().colwise() * resid.array()).matrix();
  out.mean_d = d.colwise().mean().transpose();
  out.eif = ldlt.solve(d.transpose()).transpose();
  return out;
}

namespace detail {

inline WeightSummary summarize_weights(const VectorXd& a, const PropensityFit& g) {
  std::vector<double> wt, wu;
  for (Index i = 0; i < a.size(); ++i) {
    if (a(i) == 1.0) wt.push_back(1.0 / g.g_treat(i));
    else wu.push_back(1.0 / g.g_untreat(i));
  }
  WeightSummary s;
  if (!wt.empty()) {
    s.max_treated = *std::max_element(wt.begin(), wt.end());
    s.p99_treated = quantile(wt, 0.99);
  }
  if (!wu.empty()) {
    s.max_untreated = *std::max_element(wu.begin(), wu.end());
    s.p99_untreated = quantile(wu, 0.99);
  }
  return s;
}

inline MsmEstimate finish(Method method, const ModifierDesign& design, const NuisanceFits& nf,
                          const VectorXd& a, const VectorXd& qbar1, const VectorXd& qbar0,
                          VectorXd beta_scaled) {
  MsmEstimate est;
  est.method = method;
  est.coefficient_names = design.columns;
  est.scale = nf.y.bounds.scale();
  const auto& g = nf.propensity;
  auto eif = eif_values(nf.y.scaled, a, design.matrix, qbar1, qbar0, g.g_treat, g.g_untreat, beta_scaled);
  est.beta_scaled = std::move(beta_scaled);
  est.beta = est.beta_scaled * est.scale;
  est.eif = eif.eif * est.scale;
  est.m_matrix = std::move(eif.m_matrix);
  est.eif_residual = eif.mean_d.lpNorm<Eigen::Infinity>();
  est.weights = summarize_weights(a, g);
  return est;
}

inline void check_inputs(const PooledDataset& data, const ModifierDesign& design, const NuisanceFits& nf) {
  const auto n = static_cast<Index>(data.size());
  if (design.matrix.rows() != n || nf.y.scaled.size() != n || nf.outcome.qbar1.size() != n ||
      nf.propensity.g_treat.size() != n)
    throw std::invalid_argument("design and nuisance fits do not match the dataset");
  if (design.columns.empty() || design.columns.front() != "(intercept)")
    throw std::invalid_argument("modifier design must start with an intercept");
}

}  // namespace detail

/// Initial-substitution estimator: least squares of Qbar(1,X) - Qbar(0,X) on V
/// with no targeting. Not doubly robust; kept as a simulation baseline.
inline MsmEstimate plugin(const PooledDataset& data, const AdjustmentSet& adj,
                          const ModifierDesign& design, const NuisanceFits& nf) {
  detail::check_inputs(data, design, nf);
  const VectorXd a = data.treatment(adj.target);
  const auto& q = nf.outcome;
  const GlmFit fit = fit_ols(design.matrix, q.qbar1 - q.qbar0, {}, design.columns);
  return detail::finish(Method::Plugin, design, nf, a, q.qbar1, q.qbar0, fit.coefficients);
}

/// Least squares of the augmented pseudo-outcome
///   u = (1{A=1}/g(1|X) - 1{A=0}/g(0|X)) (Y - Qbar(A,X)) + Qbar(1,X) - Qbar(0,X)
/// on V. Because D is linear in beta this solves sum D = 0 at the initial fits.
inline MsmEstimate aiptw(const PooledDataset& data, const AdjustmentSet& adj,
                         const ModifierDesign& design, const NuisanceFits& nf) {
  detail::check_inputs(data, design, nf);
  const VectorXd a = data.treatment(adj.target);
  const auto& q = nf.outcome;
  const auto& g = nf.propensity;
  const auto& y = nf.y.scaled;
  VectorXd u(a.size());
  for (Index i = 0; i < a.size(); ++i) {
    const bool treated = a(i) == 1.0;
    const double h = treated ? 1.0 / g.g_treat(i) : -1.0 / g.g_untreat(i);
    u(i) = h * (y(i) - (treated ? q.qbar1(i) : q.qbar0(i))) + q.qbar1(i) - q.qbar0(i);
  }
  const GlmFit fit = fit_ols(design.matrix, u, {}, design.columns);
  return detail::finish(Method::Aiptw, design, nf, a, q.qbar1, q.qbar0, fit.coefficients);
}

/// Targeting: for each arm a, a weighted logistic regression of the bounded
/// outcome on V with offset logit(Qbar(a, X)) and weights A/g(1|X) or
/// (1-A)/g(0|X); the fitted values are Q*(a, X). Beta is the least squares
/// fit of Q*(1, X) - Q*(0, X) on V.
inline MsmEstimate tmle(const PooledDataset& data, const AdjustmentSet& adj,
                        const ModifierDesign& design, const NuisanceFits& nf) {
  detail::check_inputs(data, design, nf);
  const VectorXd a = data.treatment(adj.target);
  const auto n = a.size();
  const auto& q = nf.outcome;
  const auto& g = nf.propensity;
  const auto& y = nf.y.scaled;

  std::vector<std::string> notes;
  auto fluctuate = [&](const VectorXd& qbar, bool arm_treated) {
    LogisticOptions opt;
    opt.names = design.columns;
    opt.offset.resize(n);
    opt.weights.resize(n);
    for (Index i = 0; i < n; ++i) {
      opt.offset(i) = logit(qbar(i));
      const bool treated = a(i) == 1.0;
      opt.weights(i) = arm_treated ? (treated ? 1.0 / g.g_treat(i) : 0.0)
                                   : (treated ? 0.0 : 1.0 / g.g_untreat(i));
    }
    const GlmFit fit = fit_logistic_with_fallback(design.matrix, y, opt);
    const char* arm = arm_treated ? "treated" : "untreated";
    if (!fit.converged)
      throw NumericError(std::string("fluctuation for ") + arm + " arm did not converge: " + fit.diagnostic);
    if (fit.ridge_lambda) notes.push_back(std::string(arm) + " fluctuation used ridge " + std::to_string(*fit.ridge_lambda));
    return predict(fit, design.matrix, opt.offset);
  };

  VectorXd qstar1 = fluctuate(q.qbar1, true);
  VectorXd qstar0 = fluctuate(q.qbar0, false);
  const GlmFit fit = fit_ols(design.matrix, qstar1 - qstar0, {}, design.columns);
  MsmEstimate est = detail::finish(Method::Tmle, design, nf, a, qstar1, qstar0, fit.coefficients);
  est.qstar1 = std::move(qstar1);
  est.qstar0 = std::move(qstar0);
  est.notes = std::move(notes);
  return est;
}

inline MsmEstimate estimate(Method method, const PooledDataset& data, const AdjustmentSet& adj,
                            const ModifierDesign& design, const NuisanceFits& nf) {
  switch (method) {
    case Method::Tmle: return tmle(data, adj, design, nf);
    case Method::Aiptw: return aiptw(data, adj, design, nf);
    case Method::Plugin: return plugin(data, adj, design, nf);
  }
  throw std::invalid_argument("unknown method");
}

}  // namespace drmsm
