#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace drmsm {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// Indices of the columns of `x` that are not linear combinations of earlier
// columns. Columns are visited left to right, so earlier columns win ties the
// same way aliased terms are dropped in a model formula.
inline std::vector<Index> independent_columns(const MatrixXd& x, double tol = 1e-9) {
  std::vector<Index> kept;
  MatrixXd basis(x.rows(), 0);
  for (Index c = 0; c < x.cols(); ++c) {
    VectorXd v = x.col(c);
    const double norm0 = v.norm();
    if (norm0 == 0.0) continue;
    // two passes of Gram-Schmidt for numerical stability
    for (int pass = 0; pass < 2; ++pass) {
      if (basis.cols() > 0) v -= basis * (basis.transpose() * v);
    }
    const double norm1 = v.norm();
    if (norm1 > tol * norm0 && norm1 > tol) {
      basis.conservativeResize(Eigen::NoChange, basis.cols() + 1);
      basis.col(basis.cols() - 1) = v / norm1;
      kept.push_back(c);
    }
  }
  return kept;
}

inline MatrixXd select_columns(const MatrixXd& x, std::span<const Index> cols) {
  MatrixXd out(x.rows(), static_cast<Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) out.col(static_cast<Index>(j)) = x.col(cols[j]);
  return out;
}

inline MatrixXd select_rows(const MatrixXd& x, std::span<const Index> rows) {
  MatrixXd out(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = x.row(rows[i]);
  return out;
}

inline VectorXd select_rows(const VectorXd& x, std::span<const Index> rows) {
  VectorXd out(static_cast<Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) out(static_cast<Index>(i)) = x(rows[i]);
  return out;
}

// Sample quantile with linear interpolation between order statistics.
inline double quantile(std::vector<double> values, double prob) {
  if (values.empty()) return std::nan("");
  std::sort(values.begin(), values.end());
  const double pos = prob * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

}  // namespace drmsm
