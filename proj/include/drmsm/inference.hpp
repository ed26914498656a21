#pragma once

// Influence-function variance (i.i.d. and clustered by study), Wald
// intervals, Benjamini-Hochberg step-up and Rubin's rules.

#include "drmsm/error.hpp"
#include "drmsm/linalg.hpp"

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

namespace drmsm {

enum class VarianceMode { Iid, Clustered };

struct VarianceEstimate {
  MatrixXd cov;
  VectorXd se;
  VarianceMode mode = VarianceMode::Iid;
  std::size_t n = 0;
  std::size_t clusters = 0;
};

namespace detail {

inline MatrixXd centered(const MatrixXd& eif) {
  return eif.rowwise() - eif.colwise().mean();
}

inline VectorXd se_from(const MatrixXd& cov) {
  // diagonal only; off-diagonal structure may be indefinite
  return cov.diagonal().array().max(0.0).sqrt().matrix();
}

}  // namespace detail

/// cov = (1/n^2) sum_i e_i e_i' over centered influence rows.
inline VarianceEstimate sandwich_iid(const MatrixXd& eif) {
  const Index n = eif.rows();
  if (n < 2) throw std::invalid_argument("variance needs at least two influence rows");
  const MatrixXd e = detail::centered(eif);
  VarianceEstimate out;
  out.cov = e.transpose() * e / (static_cast<double>(n) * static_cast<double>(n));
  out.se = detail::se_from(out.cov);
  out.mode = VarianceMode::Iid;
  out.n = static_cast<std::size_t>(n);
  out.clusters = static_cast<std::size_t>(n);
  return out;
}

struct ClusterOptions {
  // multiply by J / (J - 1); off by default
  bool small_sample_correction = false;
};

/// Independence across studies only:
///   cov = (1/n^2) sum_j (sum_{i in C_j} e_i)(sum_{i in C_j} e_i)'
/// which equals the within-study double sum over pairs (i, m) including i = m.
/// `cluster[i]` must lie in [0, num_clusters).
inline VarianceEstimate sandwich_clustered(const MatrixXd& eif, std::span<const std::size_t> cluster,
                                           std::size_t num_clusters, ClusterOptions opt = {}) {
  const Index n = eif.rows();
  if (static_cast<std::size_t>(n) != cluster.size())
    throw std::invalid_argument("cluster assignment length does not match influence rows");
  if (num_clusters < 2) throw std::invalid_argument("clustered variance needs at least two studies");
  if (n < 2) throw std::invalid_argument("variance needs at least two influence rows");
  const MatrixXd e = detail::centered(eif);
  MatrixXd sums = MatrixXd::Zero(static_cast<Index>(num_clusters), eif.cols());
  for (Index i = 0; i < n; ++i) {
    const auto j = cluster[static_cast<std::size_t>(i)];
    if (j >= num_clusters) throw std::invalid_argument("unknown study id " + std::to_string(j));
    sums.row(static_cast<Index>(j)) += e.row(i);
  }
  VarianceEstimate out;
  out.cov = sums.transpose() * sums / (static_cast<double>(n) * static_cast<double>(n));
  if (opt.small_sample_correction)
    out.cov *= static_cast<double>(num_clusters) / static_cast<double>(num_clusters - 1);
  out.se = detail::se_from(out.cov);
  out.mode = VarianceMode::Clustered;
  out.n = static_cast<std::size_t>(n);
  out.clusters = num_clusters;
  return out;
}

inline double normal_quantile(double p) {
  return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

// Two-sided normal p-value of beta / se.
inline double two_sided_p(double beta, double se) {
  if (se == 0.0) return beta == 0.0 ? 1.0 : 0.0;
  return std::erfc(std::abs(beta / se) / std::sqrt(2.0));
}

struct Interval {
  double lower = 0.0;
  double upper = 0.0;
  bool contains(double x) const { return lower <= x && x <= upper; }
};

inline std::vector<Interval> wald_ci(const VectorXd& beta, const VectorXd& se, double level = 0.95) {
  if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("confidence level must lie in (0, 1)");
  if (beta.size() != se.size()) throw std::invalid_argument("beta and se lengths differ");
  const double z = normal_quantile(0.5 * (1.0 + level));
  std::vector<Interval> out(static_cast<std::size_t>(beta.size()));
  for (Index i = 0; i < beta.size(); ++i)
    out[static_cast<std::size_t>(i)] = {beta(i) - z * se(i), beta(i) + z * se(i)};
  return out;
}

struct BhResult {
  std::vector<bool> reject;
  // largest rejected p-value; 0 when nothing is rejected
  double threshold = 0.0;
  std::size_t rejections = 0;
};

/// Step-up rule: with p sorted ascending, find the largest i such that
/// p_(i) <= i q / m and reject every hypothesis with p <= p_(i).
inline BhResult bh_adjust(std::span<const double> pvalues, double q = 0.05) {
  BhResult out;
  const std::size_t m = pvalues.size();
  out.reject.assign(m, false);
  if (m == 0) return out;
  std::vector<double> sorted(pvalues.begin(), pvalues.end());
  std::sort(sorted.begin(), sorted.end());
  std::size_t largest = 0;
  for (std::size_t i = 1; i <= m; ++i)
    if (sorted[i - 1] <= static_cast<double>(i) * q / static_cast<double>(m)) largest = i;
  if (largest == 0) return out;
  out.threshold = sorted[largest - 1];
  for (std::size_t i = 0; i < m; ++i) {
    out.reject[i] = pvalues[i] <= out.threshold;
    out.rejections += out.reject[i] ? 1 : 0;
  }
  return out;
}

struct PooledEstimate {
  VectorXd beta;
  VectorXd within_var;
  VectorXd between_var;
  VectorXd total_var;
  std::size_t imputations = 0;
};

/// Rows are imputations. Between-imputation variance uses the m - 1
/// denominator and is zero for m = 1.
inline PooledEstimate rubin_combine(const MatrixXd& estimates, const MatrixXd& variances) {
  if (estimates.rows() != variances.rows() || estimates.cols() != variances.cols())
    throw std::invalid_argument("estimate and variance shapes differ");
  const Index m = estimates.rows();
  if (m < 1) throw std::invalid_argument("need at least one imputation");
  PooledEstimate out;
  out.imputations = static_cast<std::size_t>(m);
  out.beta = estimates.colwise().mean().transpose();
  out.within_var = variances.colwise().mean().transpose();
  out.between_var = VectorXd::Zero(estimates.cols());
  if (m > 1) {
    const MatrixXd dev = estimates.rowwise() - out.beta.transpose();
    out.between_var = dev.array().square().colwise().sum().transpose() / static_cast<double>(m - 1);
  }
  out.total_var = out.within_var + (1.0 + 1.0 / static_cast<double>(m)) * out.between_var;
  return out;
}

}  // namespace drmsm
