#pragma once

// Outcome regressions Qbar(1, X), Qbar(0, X) and the factorized propensity
// score g(1 | X) = P(A = 1 | D = 1, X) * P(D = 1 | S).

#include "drmsm/data_model.hpp"
#include "drmsm/error.hpp"
#include "drmsm/glm.hpp"
#include "drmsm/linalg.hpp"

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

namespace drmsm {

/// Main-effects model over a column list. `Main` uses every eligible column,
/// `Null` is intercept-only.
struct ModelSpec {
  enum class Kind { Main, Null, Columns };
  Kind kind = Kind::Main;
  std::vector<std::string> columns;

  static ModelSpec main() { return {}; }
  static ModelSpec null() { return {Kind::Null, {}}; }
  static ModelSpec of(std::vector<std::string> cols) { return {Kind::Columns, std::move(cols)}; }
};

struct OutcomeBounds {
  double lo = 0.0;
  double hi = 1.0;
  double margin = 0.005;

  // Multiplier taking bounded-scale differences back to outcome units.
  double scale() const { return (hi - lo) / (1.0 - 2.0 * margin); }
  double to_bounded(double y) const { return margin + (y - lo) / scale(); }
  double to_original(double ys) const { return lo + (ys - margin) * scale(); }
};

struct BoundedOutcome {
  VectorXd scaled;
  OutcomeBounds bounds;
};

/// Affine map of y onto [margin, 1 - margin] using the sample range.
inline BoundedOutcome bound_outcome(const VectorXd& y, double margin = 0.005) {
  if (y.size() == 0) throw DataError("empty outcome");
  BoundedOutcome out;
  out.bounds = {y.minCoeff(), y.maxCoeff(), margin};
  if (!(out.bounds.hi > out.bounds.lo)) throw DataError("outcome is constant; cannot bound");
  out.scaled.resize(y.size());
  const double range = out.bounds.hi - out.bounds.lo;
  for (Index i = 0; i < y.size(); ++i)
    out.scaled(i) = margin + (1.0 - 2.0 * margin) * ((y(i) - out.bounds.lo) / range);
  return out;
}

inline bool is_binary_vector(const VectorXd& v) {
  return std::all_of(v.data(), v.data() + v.size(), [](double x) { return is_binary_value(x); });
}

struct FittedComponent {
  GlmFit fit;
  std::vector<std::string> columns;  // kept design columns, intercept first
  std::vector<std::string> dropped;  // aliased on the training rows
};

struct OutcomeFit {
  FittedComponent q1;
  FittedComponent q0;
  VectorXd qbar1;
  VectorXd qbar0;
};

struct PropensityFit {
  std::optional<FittedComponent> g1_model;  // empty when the response was constant
  std::optional<FittedComponent> g2_model;
  double alpha = 0.001;
  VectorXd g1_raw, g2_raw;  // before truncation
  VectorXd g1, g2;
  VectorXd g_treat;    // g1 * g2
  VectorXd g_untreat;  // 1 - g_treat
  bool g1_degenerate = false;
  bool g2_degenerate = false;
};

struct NuisanceFits {
  OutcomeFit outcome;
  PropensityFit propensity;
  BoundedOutcome y;
};

namespace detail {

struct DesignColumns {
  MatrixXd matrix;  // intercept first
  std::vector<std::string> names;
};

// Intercept plus the model's columns; `eligible` restricts what Main expands to
// and what an explicit list may contain.
inline DesignColumns spec_design(const ModelSpec& spec, const MatrixXd& x,
                                 const std::vector<std::string>& x_names,
                                 const std::vector<bool>& eligible, const char* component) {
  std::vector<Index> cols;
  switch (spec.kind) {
    case ModelSpec::Kind::Null:
      break;
    case ModelSpec::Kind::Main:
      for (std::size_t c = 0; c < x_names.size(); ++c)
        if (eligible[c]) cols.push_back(static_cast<Index>(c));
      break;
    case ModelSpec::Kind::Columns:
      for (const auto& name : spec.columns) {
        auto it = std::find(x_names.begin(), x_names.end(), name);
        if (it == x_names.end() || !eligible[static_cast<std::size_t>(it - x_names.begin())])
          throw ConfigError(std::string(component) + " model column not available: " + name);
        cols.push_back(static_cast<Index>(it - x_names.begin()));
      }
      break;
  }
  DesignColumns out;
  out.matrix.resize(x.rows(), static_cast<Index>(cols.size()) + 1);
  out.matrix.col(0).setOnes();
  out.names.push_back("(intercept)");
  for (std::size_t j = 0; j < cols.size(); ++j) {
    out.matrix.col(static_cast<Index>(j) + 1) = x.col(cols[j]);
    out.names.push_back(x_names[static_cast<std::size_t>(cols[j])]);
  }
  return out;
}

// Fits on `rows`, dropping columns aliased on those rows, then predicts for
// every row of the design.
inline std::pair<FittedComponent, VectorXd> fit_component(const DesignColumns& design,
                                                          const std::vector<Index>& rows,
                                                          const VectorXd& response, Link link,
                                                          const char* component) {
  const MatrixXd train = select_rows(design.matrix, rows);
  const VectorXd y = select_rows(response, rows);
  const auto kept = independent_columns(train);
  FittedComponent out;
  for (std::size_t c = 0, next = 0; c < design.names.size(); ++c) {
    if (next < kept.size() && kept[next] == static_cast<Index>(c)) {
      out.columns.push_back(design.names[c]);
      ++next;
    } else {
      out.dropped.push_back(design.names[c]);
    }
  }
  const MatrixXd train_kept = select_columns(train, kept);
  if (link == Link::Identity) {
    out.fit = fit_ols(train_kept, y, {}, out.columns);
  } else {
    LogisticOptions opt;
    opt.names = out.columns;
    out.fit = fit_logistic_with_fallback(train_kept, y, opt);
    if (!out.fit.converged)
      throw NumericError(std::string(component) + " logistic fit failed: " + out.fit.diagnostic);
  }
  VectorXd pred = predict(out.fit, select_columns(design.matrix, kept));
  return {std::move(out), std::move(pred)};
}

inline std::vector<Index> rows_where(const VectorXd& v, double value) {
  std::vector<Index> rows;
  for (Index i = 0; i < v.size(); ++i)
    if (v(i) == value) rows.push_back(i);
  return rows;
}

}  // namespace detail

/// Q1 is trained on the treated, Q0 on everyone untreated (including records
/// in studies without access). Predictions for both arms are produced for all
/// records and clamped to [margin, 1 - margin].
inline OutcomeFit fit_outcome(const PooledDataset& data, const AvailabilityMatrix& avail,
                              const AdjustmentSet& adj, const VectorXd& y_scaled,
                              const ModelSpec& spec, Link link = Link::Identity,
                              double margin = 0.005) {
  if (y_scaled.size() != static_cast<Index>(data.size()))
    throw std::invalid_argument("outcome length does not match dataset");
  const MatrixXd x = adjustment_matrix(data, avail, adj);
  const auto names = adj.names();
  const auto design = detail::spec_design(spec, x, names, std::vector<bool>(names.size(), true), "outcome");
  const VectorXd a = data.treatment(adj.target);
  const auto treated = detail::rows_where(a, 1.0);
  const auto untreated = detail::rows_where(a, 0.0);
  const auto& tname = data.treatment_names()[adj.target];
  if (treated.empty()) throw DataError("no records received treatment " + tname);
  if (untreated.empty()) throw DataError("every record received treatment " + tname);

  OutcomeFit out;
  auto [q1, pred1] = detail::fit_component(design, treated, y_scaled, link, "Q1");
  auto [q0, pred0] = detail::fit_component(design, untreated, y_scaled, link, "Q0");
  out.q1 = std::move(q1);
  out.q0 = std::move(q0);
  out.qbar1 = pred1.array().max(margin).min(1.0 - margin).matrix();
  out.qbar0 = pred0.array().max(margin).min(1.0 - margin).matrix();
  return out;
}

/// g1 = P(A = 1 | D = 1, X) from records in studies with access; g2 =
/// P(D = 1 | S) from one row per study. Both are truncated to
/// [alpha, 1 - alpha]. A constant response skips the fit and uses the
/// truncated empirical constant.
inline PropensityFit fit_propensity(const PooledDataset& data, const AvailabilityMatrix& avail,
                                    const AdjustmentSet& adj, const ModelSpec& spec_g1,
                                    const ModelSpec& spec_g2, double alpha = 0.001) {
  if (!(alpha > 0.0 && alpha < 0.5)) throw ConfigError("truncation alpha must lie in (0, 0.5)");
  const auto n = static_cast<Index>(data.size());
  const std::size_t k = adj.target;
  const auto& tname = data.treatment_names()[k];
  const MatrixXd x = adjustment_matrix(data, avail, adj);
  const auto names = adj.names();
  const VectorXd a = data.treatment(k);
  const VectorXd d = avail.for_records(data, k);

  PropensityFit out;
  out.alpha = alpha;
  auto truncate = [alpha](const VectorXd& v) { return v.array().max(alpha).min(1.0 - alpha).matrix().eval(); };

  // g1 over records with access
  const auto available = detail::rows_where(d, 1.0);
  if (available.empty()) throw DataError("treatment " + tname + " is unavailable in every study");
  {
    const auto design = detail::spec_design(spec_g1, x, names, std::vector<bool>(names.size(), true), "g1");
    const VectorXd a_avail = select_rows(a, available);
    const double mean = a_avail.mean();
    if (mean == 0.0 || mean == 1.0) {
      out.g1_degenerate = true;
      out.g1_raw = VectorXd::Constant(n, mean);
    } else {
      auto [comp, pred] = detail::fit_component(design, available, a, Link::Logit, "g1");
      out.g1_model = std::move(comp);
      out.g1_raw = std::move(pred);
    }
  }

  // g2 at the study level
  {
    const std::size_t num_studies = data.num_studies();
    std::vector<bool> study_level(names.size(), false);
    for (std::size_t c = 0; c < adj.columns.size(); ++c)
      study_level[c] = adj.columns[c].source == ColumnSource::Covariate &&
                       data.schema()[adj.columns[c].index].role == CovariateRole::Study;
    MatrixXd xs(static_cast<Index>(num_studies), x.cols());
    VectorXd ds(static_cast<Index>(num_studies));
    for (std::size_t j = 0; j < num_studies; ++j) {
      const auto first = static_cast<Index>(data.members(j).front());
      xs.row(static_cast<Index>(j)) = x.row(first);
      ds(static_cast<Index>(j)) = avail.at(j, k);
    }
    const double mean = ds.mean();
    // built even when unused so a bad model list is reported
    const auto design = detail::spec_design(spec_g2, xs, names, study_level, "g2");
    VectorXd g2_study;
    if (mean == 0.0 || mean == 1.0) {
      out.g2_degenerate = true;
      g2_study = VectorXd::Constant(static_cast<Index>(num_studies), mean);
    } else {
      std::vector<Index> all(num_studies);
      for (std::size_t j = 0; j < num_studies; ++j) all[j] = static_cast<Index>(j);
      auto [comp, pred] = detail::fit_component(design, all, ds, Link::Logit, "g2");
      out.g2_model = std::move(comp);
      g2_study = std::move(pred);
    }
    out.g2_raw.resize(n);
    for (Index i = 0; i < n; ++i) out.g2_raw(i) = g2_study(static_cast<Index>(data.study_of(static_cast<std::size_t>(i))));
  }

  out.g1 = truncate(out.g1_raw);
  out.g2 = truncate(out.g2_raw);
  out.g_treat = out.g1.cwiseProduct(out.g2);
  out.g_untreat = (1.0 - out.g_treat.array()).matrix();
  return out;
}

struct NuisanceSpec {
  ModelSpec q = ModelSpec::main();
  ModelSpec g1 = ModelSpec::main();
  ModelSpec g2 = ModelSpec::main();
  // Empty: logit for a binary outcome, identity otherwise.
  std::optional<Link> outcome_link;
  double alpha = 0.001;
  double margin = 0.005;
};

inline NuisanceFits fit_nuisance(const PooledDataset& data, const AvailabilityMatrix& avail,
                                 const AdjustmentSet& adj, const NuisanceSpec& spec = {}) {
  NuisanceFits out;
  out.y = bound_outcome(data.outcome(), spec.margin);
  const Link link = spec.outcome_link.value_or(is_binary_vector(data.outcome()) ? Link::Logit : Link::Identity);
  out.outcome = fit_outcome(data, avail, adj, out.y.scaled, spec.q, link, spec.margin);
  out.propensity = fit_propensity(data, avail, adj, spec.g1, spec.g2, spec.alpha);
  return out;
}

}  // namespace drmsm
