#pragma once

// Delimited-text ingestion of pooled IPD and the matching writer.
//
// Header columns: `study_id`, `y`, one `a_<name>` per treatment, and any
// number of `s_*` (study-level), `w_*` (individual) and `r_*` (resistance)
// covariates. Other columns are ignored and listed in the result.

#include "drmsm/data_model.hpp"
#include "drmsm/error.hpp"

#include "json.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace drmsm::io {

struct IngestOptions {
  // 0 picks tab when the header contains one, comma otherwise
  char delimiter = 0;
  // per-column kind overrides; unlisted covariates are inferred
  std::map<std::string, ColumnKind> kinds;
};

struct Ingested {
  PooledDataset data;
  std::size_t dropped_missing_outcome = 0;
  std::vector<std::string> ignored_columns;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == delim) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(trim(cur));
  return out;
}

inline bool is_missing_token(const std::string& s) {
  return s.empty() || s == "NA" || s == "na" || s == "NaN" || s == "nan" || s == ".";
}

// nullopt for a missing token; DataError for anything unparsable
inline std::optional<double> parse_number(const std::string& s, const std::string& column, std::size_t line) {
  if (is_missing_token(s)) return std::nullopt;
  double v = 0.0;
  const char* first = s.data();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw DataError("line " + std::to_string(line) + ": cannot parse '" + s + "' in column " + column);
  if (!std::isfinite(v)) return std::nullopt;
  return v;
}

inline bool has_prefix(const std::string& s, const char* p) { return s.rfind(p, 0) == 0 && s.size() > 2; }

}  // namespace detail

inline ColumnKind parse_kind(const std::string& s) {
  if (s == "binary") return ColumnKind::Binary;
  if (s == "continuous") return ColumnKind::Continuous;
  throw DataError("unknown column kind '" + s + "' (expected binary or continuous)");
}

inline const char* kind_name(ColumnKind k) { return k == ColumnKind::Binary ? "binary" : "continuous"; }

/// Sidecar of the form {"kinds": {"w_sex": "binary", "w_age": "continuous"}}.
inline std::map<std::string, ColumnKind> parse_schema_sidecar(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("schema sidecar is not valid JSON: ") + e.what());
  }
  std::map<std::string, ColumnKind> out;
  if (!j.is_object() || !j.contains("kinds") || !j["kinds"].is_object())
    throw DataError("schema sidecar needs a \"kinds\" object");
  for (const auto& [name, kind] : j["kinds"].items()) {
    if (!kind.is_string()) throw DataError("schema kind for " + name + " must be a string");
    out[name] = parse_kind(kind.get<std::string>());
  }
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Records with a missing outcome are dropped (and counted) before the dataset
/// is built, so availability is derived from the retained records only. A
/// missing treatment or covariate value is a DataError.
inline Ingested read_dataset(std::istream& in, const IngestOptions& opt = {}) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!detail::trim(line).empty()) break;
  }
  if (detail::trim(line).empty()) throw DataError("input has no header row");
  const char delim = opt.delimiter != 0 ? opt.delimiter : (line.find('\t') != std::string::npos ? '\t' : ',');
  const auto header = detail::split(line, delim);

  std::optional<std::size_t> study_col, y_col;
  std::vector<std::size_t> a_cols, cov_cols;
  std::vector<std::string> treatment_names;
  std::vector<Covariate> schema;
  std::vector<std::string> ignored;
  std::map<std::string, std::size_t> seen;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const auto& h = header[c];
    if (h.empty()) throw DataError("empty column name at position " + std::to_string(c + 1));
    if (!seen.emplace(h, c).second) throw DataError("duplicate column " + h);
    if (h == "study_id") {
      study_col = c;
    } else if (h == "y") {
      y_col = c;
    } else if (detail::has_prefix(h, "a_")) {
      a_cols.push_back(c);
      treatment_names.push_back(h.substr(2));
    } else if (detail::has_prefix(h, "s_") || detail::has_prefix(h, "w_") || detail::has_prefix(h, "r_")) {
      const auto role = h[0] == 's' ? CovariateRole::Study : h[0] == 'w' ? CovariateRole::Individual
                                                                          : CovariateRole::Resistance;
      cov_cols.push_back(c);
      schema.push_back({h, role, ColumnKind::Continuous});
    } else {
      ignored.push_back(h);
    }
  }
  if (!study_col) throw DataError("missing required column study_id");
  if (!y_col) throw DataError("missing required column y");
  if (a_cols.empty()) throw DataError("no treatment columns (a_<name>)");
  for (const auto& [name, kind] : opt.kinds)
    if (!seen.count(name)) throw DataError("schema names unknown column " + name);

  std::vector<std::string> labels;
  std::vector<double> y, a, cov;
  std::size_t dropped = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split(line, delim);
    if (f.size() != header.size())
      throw DataError("line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                      " fields, found " + std::to_string(f.size()));
    const auto yv = detail::parse_number(f[*y_col], "y", line_no);
    if (!yv) {
      ++dropped;
      continue;
    }
    if (detail::is_missing_token(f[*study_col]))
      throw DataError("line " + std::to_string(line_no) + ": missing study_id");
    labels.push_back(f[*study_col]);
    y.push_back(*yv);
    for (auto c : a_cols) {
      const auto v = detail::parse_number(f[c], header[c], line_no);
      if (!v) throw DataError("line " + std::to_string(line_no) + ": missing treatment " + header[c]);
      a.push_back(*v);
    }
    for (auto c : cov_cols) {
      const auto v = detail::parse_number(f[c], header[c], line_no);
      if (!v)
        throw DataError("line " + std::to_string(line_no) + ": missing value in " + header[c] +
                        " (impute before analysis)");
      cov.push_back(*v);
    }
  }

  const auto n = static_cast<Index>(labels.size());
  const auto k = static_cast<Index>(a_cols.size());
  const auto p = static_cast<Index>(cov_cols.size());
  MatrixXd am(n, k), cm(n, p);
  for (Index i = 0; i < n; ++i) {
    for (Index t = 0; t < k; ++t) am(i, t) = a[static_cast<std::size_t>(i * k + t)];
    for (Index c = 0; c < p; ++c) cm(i, c) = cov[static_cast<std::size_t>(i * p + c)];
  }
  for (std::size_t c = 0; c < schema.size(); ++c) {
    const auto it = opt.kinds.find(schema[c].name);
    if (it != opt.kinds.end()) {
      schema[c].kind = it->second;
      continue;
    }
    bool binary = n > 0;
    for (Index i = 0; i < n && binary; ++i) binary = is_binary_value(cm(i, static_cast<Index>(c)));
    schema[c].kind = binary ? ColumnKind::Binary : ColumnKind::Continuous;
  }
  VectorXd yv = Eigen::Map<VectorXd>(y.data(), n);
  return {PooledDataset(std::move(labels), std::move(yv), std::move(treatment_names), std::move(am),
                        std::move(schema), std::move(cm)),
          dropped, std::move(ignored)};
}

inline Ingested read_dataset_file(const std::string& path, const IngestOptions& opt = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  try {
    return read_dataset(in, opt);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

/// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "NaN";
  if (std::isinf(v)) return v > 0 ? "Inf" : "-Inf";
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline void write_dataset(std::ostream& out, const PooledDataset& data, char delim = '\t') {
  out << "study_id" << delim << "y";
  for (const auto& t : data.treatment_names()) out << delim << treatment_column(t);
  for (const auto& c : data.schema()) out << delim << c.name;
  out << '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto r = static_cast<Index>(i);
    out << data.study_labels()[data.study_of(i)] << delim << format_double(data.outcome()(r));
    for (Index t = 0; t < data.treatments().cols(); ++t) out << delim << format_double(data.treatments()(r, t));
    for (Index c = 0; c < data.covariates().cols(); ++c) out << delim << format_double(data.covariates()(r, c));
    out << '\n';
  }
}

/// Sidecar recording the kinds of `data`, readable by parse_schema_sidecar.
inline std::string schema_sidecar(const PooledDataset& data) {
  nlohmann::json kinds = nlohmann::json::object();
  for (const auto& c : data.schema()) kinds[c.name] = kind_name(c.kind);
  return nlohmann::json{{"kinds", kinds}}.dump(2) + "\n";
}

}  // namespace drmsm::io
