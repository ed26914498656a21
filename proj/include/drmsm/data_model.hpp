#pragma once

// Pooled multi-study individual-participant data, derived treatment
// availability, per-treatment adjustment sets and effect-modifier designs.

#include "drmsm/error.hpp"
#include "drmsm/linalg.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace drmsm {

enum class CovariateRole { Study, Individual, Resistance };
enum class ColumnKind { Continuous, Binary };

struct Covariate {
  std::string name;
  CovariateRole role = CovariateRole::Individual;
  ColumnKind kind = ColumnKind::Continuous;
};

inline bool is_binary_value(double v) { return v == 0.0 || v == 1.0; }

/// Rectangular pooled IPD table. Records are grouped into studies in order of
/// first appearance of their study label; all columns are dense doubles.
///
/// Construction validates the table: finite outcome, 0/1 treatment and binary
/// covariate columns, study-level covariates constant within each study and at
/// least one treatment. The object is immutable afterwards.
class PooledDataset {
 public:
  PooledDataset(std::vector<std::string> study_labels, VectorXd outcome,
                std::vector<std::string> treatment_names, MatrixXd treatments,
                std::vector<Covariate> schema, MatrixXd covariates)
      : outcome_(std::move(outcome)),
        treatment_names_(std::move(treatment_names)),
        treatments_(std::move(treatments)),
        schema_(std::move(schema)),
        covariates_(std::move(covariates)) {
    const auto n = static_cast<Index>(study_labels.size());
    if (outcome_.size() != n || treatments_.rows() != n || covariates_.rows() != n)
      throw DataError("dataset columns have inconsistent lengths");
    if (treatment_names_.empty()) throw DataError("dataset needs at least one treatment");
    if (treatments_.cols() != static_cast<Index>(treatment_names_.size()))
      throw DataError("treatment matrix width does not match treatment names");
    if (covariates_.cols() != static_cast<Index>(schema_.size()))
      throw DataError("covariate matrix width does not match schema");

    std::unordered_map<std::string, std::size_t> seen;
    for (const auto& t : treatment_names_)
      if (!seen.emplace("a_" + t, 0).second) throw DataError("duplicate treatment name: " + t);
    for (const auto& c : schema_)
      if (!seen.emplace(c.name, 0).second) throw DataError("duplicate column name: " + c.name);

    study_of_.resize(study_labels.size());
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < study_labels.size(); ++i) {
      auto [it, inserted] = index.emplace(study_labels[i], study_labels_.size());
      if (inserted) {
        study_labels_.push_back(study_labels[i]);
        members_.emplace_back();
      }
      study_of_[i] = it->second;
      members_[it->second].push_back(i);
    }

    for (Index i = 0; i < n; ++i) {
      if (!std::isfinite(outcome_(i)))
        throw DataError("non-finite outcome at record " + std::to_string(i));
      for (Index k = 0; k < treatments_.cols(); ++k)
        if (!is_binary_value(treatments_(i, k)))
          throw DataError("treatment a_" + treatment_names_[k] + " is not 0/1 at record " +
                          std::to_string(i));
      for (Index c = 0; c < covariates_.cols(); ++c) {
        const double v = covariates_(i, c);
        if (!std::isfinite(v))
          throw DataError("missing or non-finite value in " + schema_[c].name + " at record " +
                          std::to_string(i));
        if (schema_[c].kind == ColumnKind::Binary && !is_binary_value(v))
          throw DataError("binary column " + schema_[c].name + " has value " + std::to_string(v));
      }
    }
    for (Index c = 0; c < covariates_.cols(); ++c) {
      if (schema_[c].role != CovariateRole::Study) continue;
      for (const auto& m : members_) {
        for (auto i : m)
          if (covariates_(static_cast<Index>(i), c) != covariates_(static_cast<Index>(m[0]), c))
            throw DataError("study-level covariate " + schema_[c].name +
                            " varies within study " + study_labels_[study_of_[m[0]]]);
      }
    }
  }

  std::size_t size() const { return study_of_.size(); }
  std::size_t num_studies() const { return members_.size(); }
  std::size_t num_treatments() const { return treatment_names_.size(); }

  const VectorXd& outcome() const { return outcome_; }
  const MatrixXd& treatments() const { return treatments_; }
  auto treatment(std::size_t k) const { return treatments_.col(static_cast<Index>(k)); }
  const std::vector<std::string>& treatment_names() const { return treatment_names_; }

  const std::vector<Covariate>& schema() const { return schema_; }
  const MatrixXd& covariates() const { return covariates_; }
  auto covariate(std::size_t c) const { return covariates_.col(static_cast<Index>(c)); }

  const std::vector<std::string>& study_labels() const { return study_labels_; }
  const std::vector<std::size_t>& members(std::size_t j) const { return members_[j]; }
  const std::vector<std::size_t>& study_of_records() const { return study_of_; }
  std::size_t study_of(std::size_t i) const { return study_of_[i]; }

  std::optional<std::size_t> find_treatment(const std::string& name) const {
    for (std::size_t k = 0; k < treatment_names_.size(); ++k)
      if (treatment_names_[k] == name) return k;
    return std::nullopt;
  }
  std::optional<std::size_t> find_covariate(const std::string& name) const {
    for (std::size_t c = 0; c < schema_.size(); ++c)
      if (schema_[c].name == name) return c;
    return std::nullopt;
  }

  // Same design with a replaced outcome column (used for equivariance checks).
  PooledDataset with_outcome(VectorXd y) const {
    PooledDataset copy = *this;
    if (y.size() != outcome_.size()) throw DataError("replacement outcome has wrong length");
    for (Index i = 0; i < y.size(); ++i)
      if (!std::isfinite(y(i))) throw DataError("non-finite outcome");
    copy.outcome_ = std::move(y);
    return copy;
  }

 private:
  VectorXd outcome_;
  std::vector<std::string> treatment_names_;
  MatrixXd treatments_;
  std::vector<Covariate> schema_;
  MatrixXd covariates_;
  std::vector<std::string> study_labels_;
  std::vector<std::vector<std::size_t>> members_;
  std::vector<std::size_t> study_of_;
};

/// J x K study-level availability: d(j, k) = 1 iff some member of study j
/// received treatment k.
struct AvailabilityMatrix {
  Eigen::MatrixXi d;

  int at(std::size_t j, std::size_t k) const {
    return d(static_cast<Index>(j), static_cast<Index>(k));
  }

  VectorXd for_records(const PooledDataset& data, std::size_t k) const {
    VectorXd out(static_cast<Index>(data.size()));
    for (std::size_t i = 0; i < data.size(); ++i) out(static_cast<Index>(i)) = at(data.study_of(i), k);
    return out;
  }
};

inline AvailabilityMatrix derive_availability(const PooledDataset& data) {
  AvailabilityMatrix out{Eigen::MatrixXi::Zero(static_cast<Index>(data.num_studies()),
                                               static_cast<Index>(data.num_treatments()))};
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto j = static_cast<Index>(data.study_of(i));
    for (Index k = 0; k < out.d.cols(); ++k)
      if (data.treatments()(static_cast<Index>(i), k) == 1.0) out.d(j, k) = 1;
  }
  return out;
}

enum class ColumnSource { Covariate, Availability, Treatment };

struct AdjustmentColumn {
  std::string name;
  ColumnSource source = ColumnSource::Covariate;
  std::size_t index = 0;  // covariate index or treatment index
};

struct ColumnExclusion {
  std::string column;
  std::string reason;
};

inline std::string availability_column(const std::string& treatment) { return "d_" + treatment; }
inline std::string treatment_column(const std::string& treatment) { return "a_" + treatment; }

/// Confounder set for one target treatment: study-level, individual-level and
/// resistance covariates followed by the (d_, a_) pair of every other
/// treatment, minus recorded exclusions.
struct AdjustmentSet {
  std::size_t target = 0;
  std::vector<AdjustmentColumn> columns;
  std::vector<ColumnExclusion> exclusions;

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t c = 0; c < columns.size(); ++c)
      if (columns[c].name == name) return c;
    return std::nullopt;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(columns.size());
    for (const auto& c : columns) out.push_back(c.name);
    return out;
  }
};

namespace detail {

inline std::vector<AdjustmentColumn> candidate_columns(const PooledDataset& data, std::size_t k) {
  std::vector<AdjustmentColumn> cols;
  for (auto role : {CovariateRole::Study, CovariateRole::Individual, CovariateRole::Resistance})
    for (std::size_t c = 0; c < data.schema().size(); ++c)
      if (data.schema()[c].role == role)
        cols.push_back({data.schema()[c].name, ColumnSource::Covariate, c});
  for (std::size_t other = 0; other < data.num_treatments(); ++other) {
    if (other == k) continue;
    const auto& name = data.treatment_names()[other];
    cols.push_back({availability_column(name), ColumnSource::Availability, other});
    cols.push_back({treatment_column(name), ColumnSource::Treatment, other});
  }
  return cols;
}

}  // namespace detail

/// Exclusions may name a column (`w_age`, `a_AMK`, `d_AMK`) or a bare
/// treatment name, which removes both its availability and treatment columns.
inline AdjustmentSet build_adjustment_set(const PooledDataset& data, std::size_t k,
                                          const std::vector<ColumnExclusion>& exclusions = {}) {
  if (k >= data.num_treatments()) throw ConfigError("treatment index out of range");
  auto candidates = detail::candidate_columns(data, k);

  AdjustmentSet out;
  out.target = k;
  std::vector<bool> drop(candidates.size(), false);
  for (const auto& ex : exclusions) {
    bool matched = false;
    for (std::size_t c = 0; c < candidates.size(); ++c) {
      const auto& cand = candidates[c];
      const bool by_treatment = cand.source != ColumnSource::Covariate &&
                                data.treatment_names()[cand.index] == ex.column;
      if (cand.name == ex.column || by_treatment) {
        if (!drop[c]) out.exclusions.push_back({cand.name, ex.reason});
        drop[c] = true;
        matched = true;
      }
    }
    if (!matched) throw ConfigError("exclusion names unknown column: " + ex.column);
  }
  for (std::size_t c = 0; c < candidates.size(); ++c)
    if (!drop[c]) out.columns.push_back(candidates[c]);
  return out;
}

inline VectorXd column_values(const PooledDataset& data, const AvailabilityMatrix& avail,
                              const AdjustmentColumn& col) {
  switch (col.source) {
    case ColumnSource::Covariate:
      return data.covariate(col.index);
    case ColumnSource::Treatment:
      return data.treatment(col.index);
    case ColumnSource::Availability:
      return avail.for_records(data, col.index);
  }
  return {};
}

inline MatrixXd adjustment_matrix(const PooledDataset& data, const AvailabilityMatrix& avail,
                                  const AdjustmentSet& adj) {
  MatrixXd x(static_cast<Index>(data.size()), static_cast<Index>(adj.columns.size()));
  for (std::size_t c = 0; c < adj.columns.size(); ++c)
    x.col(static_cast<Index>(c)) = column_values(data, avail, adj.columns[c]);
  return x;
}

inline bool is_continuous(const PooledDataset& data, const AdjustmentColumn& col) {
  return col.source == ColumnSource::Covariate &&
         data.schema()[col.index].kind == ColumnKind::Continuous;
}

struct Standardization {
  double center = 0.0;
  double scale = 1.0;
};

/// Intercept plus p effect modifiers drawn from an adjustment set. Continuous
/// modifiers are optionally centered and scaled; `to_raw` maps coefficients
/// back to the unstandardized columns.
struct ModifierDesign {
  std::vector<std::string> columns;  // "(intercept)" first
  std::vector<Standardization> standardization;
  MatrixXd matrix;

  Index num_coefficients() const { return matrix.cols(); }

  // Linear map T with beta_raw = T * beta_std.
  MatrixXd raw_transform() const {
    const Index p1 = matrix.cols();
    MatrixXd t = MatrixXd::Identity(p1, p1);
    for (Index j = 1; j < p1; ++j) {
      const auto& s = standardization[static_cast<std::size_t>(j)];
      t(j, j) = 1.0 / s.scale;
      t(0, j) = -s.center / s.scale;
    }
    return t;
  }

  VectorXd to_raw(const VectorXd& beta) const { return raw_transform() * beta; }
  MatrixXd to_raw_cov(const MatrixXd& cov) const {
    const MatrixXd t = raw_transform();
    return t * cov * t.transpose();
  }

  // Undo the standardization to recover the raw modifier columns.
  MatrixXd unstandardized() const {
    MatrixXd raw = matrix;
    for (Index j = 1; j < raw.cols(); ++j) {
      const auto& s = standardization[static_cast<std::size_t>(j)];
      raw.col(j) = (raw.col(j).array() * s.scale + s.center).matrix();
    }
    return raw;
  }
};

inline ModifierDesign build_modifier_design(const PooledDataset& data,
                                            const AvailabilityMatrix& avail,
                                            const AdjustmentSet& adj,
                                            const std::vector<std::string>& modifiers,
                                            bool standardize = true) {
  const auto n = static_cast<Index>(data.size());
  ModifierDesign out;
  out.columns.push_back("(intercept)");
  out.standardization.push_back({});
  out.matrix.resize(n, static_cast<Index>(modifiers.size()) + 1);
  out.matrix.col(0).setOnes();
  for (std::size_t m = 0; m < modifiers.size(); ++m) {
    const auto pos = adj.find(modifiers[m]);
    if (!pos) throw ConfigError("effect modifier not in adjustment set: " + modifiers[m]);
    const auto& col = adj.columns[*pos];
    VectorXd v = column_values(data, avail, col);
    Standardization s;
    if (standardize && is_continuous(data, col) && n > 1) {
      s.center = v.mean();
      const double var = (v.array() - s.center).square().sum() / static_cast<double>(n - 1);
      s.scale = var > 0.0 ? std::sqrt(var) : 1.0;
      v = ((v.array() - s.center) / s.scale).matrix();
    }
    out.columns.push_back(modifiers[m]);
    out.standardization.push_back(s);
    out.matrix.col(static_cast<Index>(m) + 1) = v;
  }
  const auto kept = independent_columns(out.matrix);
  if (static_cast<Index>(kept.size()) < out.matrix.cols()) {
    std::string dependent;
    std::size_t next = 0;
    for (Index c = 0; c < out.matrix.cols(); ++c) {
      if (next < kept.size() && kept[next] == c) {
        ++next;
        continue;
      }
      dependent += (dependent.empty() ? "" : ", ") + out.columns[static_cast<std::size_t>(c)];
    }
    throw NumericError("effect-modifier design is rank deficient; dependent columns: " + dependent);
  }
  return out;
}

using CountMatrix = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;

/// Entry (k, k') counts records taking both treatments; the diagonal holds
/// per-treatment totals.
inline CountMatrix coprescription_table(const PooledDataset& data) {
  const auto k = static_cast<Index>(data.num_treatments());
  CountMatrix table = CountMatrix::Zero(k, k);
  for (Index i = 0; i < static_cast<Index>(data.size()); ++i)
    for (Index a = 0; a < k; ++a) {
      if (data.treatments()(i, a) != 1.0) continue;
      for (Index b = 0; b < k; ++b)
        if (data.treatments()(i, b) == 1.0) ++table(a, b);
    }
  return table;
}

struct PositivityFlag {
  std::size_t first = 0;
  std::size_t second = 0;
  std::int64_t count = 0;
  bool below_threshold = false;
  // Every user of `first` or `second` also takes the other treatment.
  bool nested = false;
};

/// Pairs (k < k') with fewer than `threshold` joint users, or whose joint count
/// equals one of the two totals. Pairs involving an unused treatment are not
/// reported.
inline std::vector<PositivityFlag> positivity_report(const CountMatrix& table, std::int64_t threshold) {
  std::vector<PositivityFlag> flags;
  for (Index a = 0; a < table.rows(); ++a)
    for (Index b = a + 1; b < table.cols(); ++b) {
      if (table(a, a) == 0 || table(b, b) == 0) continue;
      const auto joint = table(a, b);
      PositivityFlag f{static_cast<std::size_t>(a), static_cast<std::size_t>(b), joint,
                       joint < threshold, joint == table(a, a) || joint == table(b, b)};
      if (f.below_threshold || f.nested) flags.push_back(f);
    }
  return flags;
}

}  // namespace drmsm
