#pragma once

// Batch front-end: configuration parsing and the `estimate`, `simulate` and
// `report` commands. Everything here is callable without a process so the
// test suite can drive it directly.

#include "drmsm/data_model.hpp"
#include "drmsm/error.hpp"
#include "drmsm/estimators.hpp"
#include "drmsm/inference.hpp"
#include "drmsm/io.hpp"
#include "drmsm/nuisance.hpp"
#include "drmsm/simulation.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <Eigen/Core>
#include <boost/version.hpp>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#ifndef DRMSM_VERSION
#define DRMSM_VERSION "0.0.0"
#endif

namespace drmsm::cli {

using json = nlohmann::json;

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kThreshold = 3 };

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline json library_versions() {
  return {{"drmsm", DRMSM_VERSION},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"boost", std::to_string(BOOST_VERSION / 100000) + "." + std::to_string(BOOST_VERSION / 100 % 1000) +
                        "." + std::to_string(BOOST_VERSION % 100)}};
}

// ---------------------------------------------------------------------------
// config helpers

namespace detail {

inline json parse_json_text(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(what + " is not valid JSON: " + e.what());
  }
}

inline void reject_unknown_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key) || j[key].is_null()) return fallback;
  try {
    return j[key].get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

inline std::vector<std::string> string_list(const json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError(where + " must be a list of strings");
  std::vector<std::string> out;
  for (const auto& v : j) {
    if (!v.is_string()) throw ConfigError(where + " must be a list of strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

inline ModelSpec parse_model_spec(const json& j, const std::string& where) {
  if (j.is_null()) return ModelSpec::null();
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "main") return ModelSpec::main();
    if (s == "null") return ModelSpec::null();
    throw ConfigError(where + " must be \"main\", \"null\", null or a column list");
  }
  return ModelSpec::of(string_list(j, where));
}

inline std::string resolve_path(const std::string& p, const std::string& base_dir) {
  namespace fs = std::filesystem;
  if (p.empty() || fs::path(p).is_absolute() || base_dir.empty()) return p;
  return (fs::path(base_dir) / p).lexically_normal().string();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// estimate

struct TreatmentExclusions {
  std::vector<std::string> confounders;  // removed from the adjustment set
  std::vector<std::string> modifiers;    // removed from the effect-modifier list only
};

// Expands to a_<t> for every other treatment still in the adjustment set.
inline constexpr const char* kOtherTreatments = "@other_treatments";

struct AnalysisConfig {
  std::vector<std::string> inputs;  // one per imputed dataset
  std::optional<std::string> schema_path;
  char delimiter = 0;
  std::vector<std::string> treatments;  // empty: every treatment in the data
  std::vector<std::string> modifiers;
  // keyed by treatment name; "*" applies to every treatment
  std::map<std::string, TreatmentExclusions> exclusions;
  NuisanceSpec nuisance;
  double level = 0.95;
  double fdr_q = 0.05;
  bool bh_within_treatment = false;
  bool standardize = true;
  bool small_sample_correction = false;
  std::int64_t positivity_threshold = 50;
  std::uint64_t seed = 1;
  std::size_t threads = 1;
  std::string out = "drmsm_results.tsv";

  void validate() const {
    if (inputs.empty()) throw ConfigError("estimate needs at least one input dataset");
    if (modifiers.empty()) throw ConfigError("effect-modifier list is empty; use [\"@none\"] for an intercept-only model");
    if (!(nuisance.alpha > 0.0 && nuisance.alpha < 0.5)) throw ConfigError("alpha must lie in (0, 0.5)");
    if (!(level > 0.0 && level < 1.0)) throw ConfigError("level must lie in (0, 1)");
    if (!(fdr_q > 0.0 && fdr_q < 1.0)) throw ConfigError("fdr_q must lie in (0, 1)");
    if (!(nuisance.margin > 0.0 && nuisance.margin < 0.25)) throw ConfigError("margin must lie in (0, 0.25)");
    if (threads < 1) throw ConfigError("threads must be at least 1");
  }
};

// "@none" stands for an intercept-only working model.
inline constexpr const char* kNoModifiers = "@none";

inline AnalysisConfig parse_analysis_config(const json& j, const std::string& base_dir = {}) {
  detail::reject_unknown_keys(j,
                              {"inputs", "schema", "delimiter", "treatments", "modifiers", "exclusions", "models",
                               "outcome_link", "alpha", "margin", "level", "fdr_q", "bh_scope", "standardize",
                               "small_sample_correction", "positivity_threshold", "seed", "threads", "out"},
                              "estimate config");
  AnalysisConfig c;
  if (!j.contains("inputs")) throw ConfigError("estimate config needs \"inputs\"");
  for (const auto& p : detail::string_list(j["inputs"], "inputs")) c.inputs.push_back(detail::resolve_path(p, base_dir));
  if (j.contains("schema")) c.schema_path = detail::resolve_path(detail::get_or<std::string>(j, "schema", ""), base_dir);
  const auto delim = detail::get_or<std::string>(j, "delimiter", "");
  if (delim == "\\t" || delim == "tab") c.delimiter = '\t';
  else if (delim.size() == 1) c.delimiter = delim[0];
  else if (!delim.empty()) throw ConfigError("delimiter must be a single character or \"tab\"");
  if (j.contains("treatments")) c.treatments = detail::string_list(j["treatments"], "treatments");
  if (!j.contains("modifiers")) throw ConfigError("estimate config needs \"modifiers\"");
  c.modifiers = detail::string_list(j["modifiers"], "modifiers");
  if (j.contains("exclusions")) {
    const auto& ex = j["exclusions"];
    if (!ex.is_object()) throw ConfigError("exclusions must be an object keyed by treatment");
    for (const auto& [t, body] : ex.items()) {
      detail::reject_unknown_keys(body, {"confounders", "modifiers"}, "exclusions." + t);
      TreatmentExclusions te;
      if (body.contains("confounders")) te.confounders = detail::string_list(body["confounders"], "exclusions." + t + ".confounders");
      if (body.contains("modifiers")) te.modifiers = detail::string_list(body["modifiers"], "exclusions." + t + ".modifiers");
      c.exclusions[t] = te;
    }
  }
  if (j.contains("models")) {
    const auto& m = j["models"];
    detail::reject_unknown_keys(m, {"q", "g1", "g2"}, "models");
    if (m.contains("q")) c.nuisance.q = detail::parse_model_spec(m["q"], "models.q");
    if (m.contains("g1")) c.nuisance.g1 = detail::parse_model_spec(m["g1"], "models.g1");
    if (m.contains("g2")) c.nuisance.g2 = detail::parse_model_spec(m["g2"], "models.g2");
  }
  const auto link = detail::get_or<std::string>(j, "outcome_link", "auto");
  if (link == "identity") c.nuisance.outcome_link = Link::Identity;
  else if (link == "logit") c.nuisance.outcome_link = Link::Logit;
  else if (link != "auto") throw ConfigError("outcome_link must be auto, identity or logit");
  c.nuisance.alpha = detail::get_or(j, "alpha", c.nuisance.alpha);
  c.nuisance.margin = detail::get_or(j, "margin", c.nuisance.margin);
  c.level = detail::get_or(j, "level", c.level);
  c.fdr_q = detail::get_or(j, "fdr_q", c.fdr_q);
  const auto scope = detail::get_or<std::string>(j, "bh_scope", "all");
  if (scope == "within") c.bh_within_treatment = true;
  else if (scope != "all") throw ConfigError("bh_scope must be all or within");
  c.standardize = detail::get_or(j, "standardize", c.standardize);
  c.small_sample_correction = detail::get_or(j, "small_sample_correction", c.small_sample_correction);
  c.positivity_threshold = detail::get_or(j, "positivity_threshold", c.positivity_threshold);
  c.seed = detail::get_or(j, "seed", c.seed);
  c.threads = detail::get_or(j, "threads", c.threads);
  c.out = detail::resolve_path(detail::get_or(j, "out", c.out), base_dir);
  c.validate();
  return c;
}

struct DistributionSummary {
  std::size_t count = 0;
  double min = 0, p01 = 0, p05 = 0, p25 = 0, p50 = 0, p75 = 0, p95 = 0, p99 = 0, max = 0;
};

inline DistributionSummary summarize_values(std::vector<double> v) {
  DistributionSummary s;
  s.count = v.size();
  if (v.empty()) return s;
  std::sort(v.begin(), v.end());
  s.min = v.front();
  s.max = v.back();
  s.p01 = quantile(v, 0.01);
  s.p05 = quantile(v, 0.05);
  s.p25 = quantile(v, 0.25);
  s.p50 = quantile(v, 0.50);
  s.p75 = quantile(v, 0.75);
  s.p95 = quantile(v, 0.95);
  s.p99 = quantile(v, 0.99);
  return s;
}

inline json to_json(const DistributionSummary& s) {
  return {{"count", s.count}, {"min", s.min}, {"p01", s.p01}, {"p05", s.p05}, {"p25", s.p25}, {"p50", s.p50},
          {"p75", s.p75},     {"p95", s.p95}, {"p99", s.p99}, {"max", s.max}};
}

/// Everything one TMLE fit on one imputed dataset contributes.
struct ImputationFit {
  std::vector<std::string> coefficients;
  VectorXd beta, var, beta_raw, var_raw;
  double eif_residual = 0.0;
  WeightSummary weights;
  DistributionSummary g1_untruncated, g2_untruncated, g_untruncated;
  std::vector<std::string> adjustment_columns;
  std::vector<ColumnExclusion> exclusions;
  std::vector<std::string> notes;
};

struct TreatmentResult {
  std::string treatment;
  bool ok = false;
  std::string error;
  std::vector<std::string> coefficients;
  PooledEstimate pooled, pooled_raw;
  std::vector<ImputationFit> fits;
};

struct ResultRow {
  std::string treatment, coefficient;
  double estimate = 0, std_error = 0, ci_lower = 0, ci_upper = 0, p_value = 1;
  bool bh_significant = false;
  double estimate_raw = 0, std_error_raw = 0, within_var = 0, between_var = 0;
  std::size_t imputations = 0;
};

inline const std::vector<std::string>& estimate_columns() {
  static const std::vector<std::string> cols{"treatment",   "coefficient",   "estimate",    "std_error",
                                             "ci_lower",    "ci_upper",      "p_value",     "bh_significant",
                                             "estimate_raw", "std_error_raw", "within_var", "between_var",
                                             "imputations"};
  return cols;
}

struct EstimateOutput {
  std::vector<TreatmentResult> treatments;
  std::vector<ResultRow> rows;
  BhResult bh;
  json meta;
};

namespace detail {

inline std::vector<std::string> modifiers_for(const AnalysisConfig& cfg, const PooledDataset& data,
                                              const AdjustmentSet& adj) {
  const auto& target = data.treatment_names()[adj.target];
  std::vector<std::string> drop;
  for (const auto* key : {"*", target.c_str()}) {
    const auto it = cfg.exclusions.find(key);
    if (it != cfg.exclusions.end()) drop.insert(drop.end(), it->second.modifiers.begin(), it->second.modifiers.end());
  }
  auto dropped = [&](const std::string& name) {
    for (const auto& d : drop) {
      if (d == name) return true;
      // bare treatment name drops its a_ column
      if (name == treatment_column(d)) return true;
    }
    return false;
  };
  std::vector<std::string> out;
  auto add = [&](const std::string& name) {
    if (name == treatment_column(target) || name == availability_column(target)) return;
    if (dropped(name)) return;
    if (std::find(out.begin(), out.end(), name) == out.end()) out.push_back(name);
  };
  for (const auto& m : cfg.modifiers) {
    if (m == kNoModifiers) continue;
    if (m == kOtherTreatments) {
      for (const auto& col : adj.columns)
        if (col.source == ColumnSource::Treatment) add(col.name);
      continue;
    }
    add(m);
  }
  return out;
}

inline std::vector<ColumnExclusion> confounder_exclusions(const AnalysisConfig& cfg, const std::string& target) {
  std::vector<ColumnExclusion> out;
  for (const auto* key : {"*", target.c_str()}) {
    const auto it = cfg.exclusions.find(key);
    if (it == cfg.exclusions.end()) continue;
    for (const auto& c : it->second.confounders) {
      // a shared "*" list may name the target itself
      if (std::string(key) == "*" && (c == target || c == treatment_column(target) || c == availability_column(target)))
        continue;
      out.push_back({c, std::string("configured for ") + key});
    }
  }
  return out;
}

inline ImputationFit fit_one(const AnalysisConfig& cfg, const PooledDataset& data, std::size_t k) {
  const auto avail = derive_availability(data);
  const auto adj = build_adjustment_set(data, k, confounder_exclusions(cfg, data.treatment_names()[k]));
  const auto mods = modifiers_for(cfg, data, adj);
  const auto design = build_modifier_design(data, avail, adj, mods, cfg.standardize);
  const auto nf = fit_nuisance(data, avail, adj, cfg.nuisance);
  const auto est = tmle(data, adj, design, nf);
  const auto var = sandwich_clustered(est.eif, data.study_of_records(), data.num_studies(),
                                      {cfg.small_sample_correction});

  ImputationFit f;
  f.coefficients = est.coefficient_names;
  f.beta = est.beta;
  f.var = var.cov.diagonal().cwiseMax(0.0);
  f.beta_raw = design.to_raw(est.beta);
  f.var_raw = design.to_raw_cov(var.cov).diagonal().cwiseMax(0.0);
  f.eif_residual = est.eif_residual;
  f.weights = est.weights;
  f.notes = est.notes;
  f.adjustment_columns = adj.names();
  f.exclusions = adj.exclusions;

  const auto& g = nf.propensity;
  const VectorXd d = avail.for_records(data, k);
  std::vector<double> g1, g2, gp;
  for (Index i = 0; i < d.size(); ++i) {
    if (d(i) == 1.0) g1.push_back(g.g1_raw(i));
    gp.push_back(g.g1_raw(i) * g.g2_raw(i));
  }
  for (std::size_t j = 0; j < data.num_studies(); ++j)
    g2.push_back(g.g2_raw(static_cast<Index>(data.members(j).front())));
  f.g1_untruncated = summarize_values(std::move(g1));
  f.g2_untruncated = summarize_values(std::move(g2));
  f.g_untruncated = summarize_values(std::move(gp));
  return f;
}

inline void check_common_schema(const PooledDataset& first, const PooledDataset& other, const std::string& path) {
  if (first.treatment_names() != other.treatment_names())
    throw DataError("schema mismatch across imputations: treatments differ in " + path);
  if (first.schema().size() != other.schema().size())
    throw DataError("schema mismatch across imputations: covariates differ in " + path);
  for (std::size_t c = 0; c < first.schema().size(); ++c) {
    const auto& a = first.schema()[c];
    const auto& b = other.schema()[c];
    if (a.name != b.name || a.role != b.role || a.kind != b.kind)
      throw DataError("schema mismatch across imputations: column " + a.name + " differs in " + path);
  }
}

}  // namespace detail

struct LoadedInputs {
  std::vector<PooledDataset> datasets;
  std::vector<std::size_t> dropped_missing_outcome;
  std::vector<std::vector<std::string>> ignored_columns;
};

/// Kinds are fixed by the sidecar or inferred from the first dataset and then
/// imposed on every later imputation.
inline LoadedInputs load_inputs(const AnalysisConfig& cfg) {
  LoadedInputs out;
  io::IngestOptions opt;
  opt.delimiter = cfg.delimiter;
  if (cfg.schema_path) opt.kinds = io::parse_schema_sidecar(io::read_file(*cfg.schema_path));
  for (std::size_t m = 0; m < cfg.inputs.size(); ++m) {
    auto ing = io::read_dataset_file(cfg.inputs[m], opt);
    if (m == 0) {
      for (const auto& c : ing.data.schema()) opt.kinds[c.name] = c.kind;
    } else {
      detail::check_common_schema(out.datasets.front(), ing.data, cfg.inputs[m]);
    }
    out.dropped_missing_outcome.push_back(ing.dropped_missing_outcome);
    out.ignored_columns.push_back(std::move(ing.ignored_columns));
    out.datasets.push_back(std::move(ing.data));
  }
  return out;
}

/// Per treatment: TMLE with study-clustered variance in every imputed
/// dataset, Rubin pooling, Wald intervals and two-sided p-values, then BH over
/// every coefficient of every treatment (or within treatment). A failing
/// treatment is recorded and skipped.
inline EstimateOutput run_estimate(const AnalysisConfig& cfg, const LoadedInputs& in) {
  const auto& first = in.datasets.front();
  std::vector<std::size_t> targets;
  if (cfg.treatments.empty()) {
    for (std::size_t k = 0; k < first.num_treatments(); ++k) targets.push_back(k);
  } else {
    for (const auto& t : cfg.treatments) {
      const auto k = first.find_treatment(t);
      if (!k) throw ConfigError("treatment not in data: " + t);
      targets.push_back(*k);
    }
  }
  for (const auto& [t, ex] : cfg.exclusions)
    if (t != "*" && !first.find_treatment(t)) throw ConfigError("exclusions name unknown treatment: " + t);

  const std::size_t m = in.datasets.size();
  const std::size_t tasks = targets.size() * m;
  std::vector<std::optional<ImputationFit>> fits(tasks);
  std::vector<std::string> errors(tasks);
  sim::detail::parallel_for(tasks, cfg.threads, [&](std::size_t t) {
    try {
      fits[t] = detail::fit_one(cfg, in.datasets[t % m], targets[t / m]);
    } catch (const std::exception& e) {
      errors[t] = "imputation " + std::to_string(t % m + 1) + ": " + e.what();
    }
  });

  EstimateOutput out;
  const double z = normal_quantile(0.5 * (1.0 + cfg.level));
  for (std::size_t ti = 0; ti < targets.size(); ++ti) {
    TreatmentResult r;
    r.treatment = first.treatment_names()[targets[ti]];
    for (std::size_t i = 0; i < m; ++i) {
      const auto t = ti * m + i;
      if (!fits[t]) {
        r.error = errors[t];
        break;
      }
      if (i > 0 && fits[t]->coefficients != r.fits.front().coefficients) {
        r.error = "imputation " + std::to_string(i + 1) + ": coefficient set differs from imputation 1";
        break;
      }
      r.fits.push_back(std::move(*fits[t]));
    }
    if (r.error.empty()) {
      const auto p = r.fits.front().beta.size();
      MatrixXd b(static_cast<Index>(m), p), v(static_cast<Index>(m), p), br(static_cast<Index>(m), p),
          vr(static_cast<Index>(m), p);
      for (std::size_t i = 0; i < m; ++i) {
        const auto row = static_cast<Index>(i);
        b.row(row) = r.fits[i].beta.transpose();
        v.row(row) = r.fits[i].var.transpose();
        br.row(row) = r.fits[i].beta_raw.transpose();
        vr.row(row) = r.fits[i].var_raw.transpose();
      }
      r.coefficients = r.fits.front().coefficients;
      r.pooled = rubin_combine(b, v);
      r.pooled_raw = rubin_combine(br, vr);
      r.ok = true;
      for (Index c = 0; c < p; ++c) {
        ResultRow row;
        row.treatment = r.treatment;
        row.coefficient = r.coefficients[static_cast<std::size_t>(c)];
        row.estimate = r.pooled.beta(c);
        row.std_error = std::sqrt(r.pooled.total_var(c));
        row.ci_lower = row.estimate - z * row.std_error;
        row.ci_upper = row.estimate + z * row.std_error;
        row.p_value = two_sided_p(row.estimate, row.std_error);
        row.estimate_raw = r.pooled_raw.beta(c);
        row.std_error_raw = std::sqrt(r.pooled_raw.total_var(c));
        row.within_var = r.pooled.within_var(c);
        row.between_var = r.pooled.between_var(c);
        row.imputations = m;
        out.rows.push_back(row);
      }
    }
    out.treatments.push_back(std::move(r));
  }

  // multiple-testing adjustment
  std::vector<double> p;
  for (const auto& row : out.rows) p.push_back(row.p_value);
  if (!cfg.bh_within_treatment) {
    out.bh = bh_adjust(p, cfg.fdr_q);
    for (std::size_t i = 0; i < out.rows.size(); ++i) out.rows[i].bh_significant = out.bh.reject[i];
  } else {
    out.bh.reject.assign(p.size(), false);
    std::size_t start = 0;
    while (start < out.rows.size()) {
      std::size_t end = start;
      while (end < out.rows.size() && out.rows[end].treatment == out.rows[start].treatment) ++end;
      const auto part = bh_adjust(std::span<const double>(p.data() + start, end - start), cfg.fdr_q);
      for (std::size_t i = start; i < end; ++i) out.rows[i].bh_significant = out.bh.reject[i] = part.reject[i - start];
      out.bh.rejections += part.rejections;
      start = end;
    }
  }
  return out;
}

inline void write_estimate_table(std::ostream& os, const std::vector<ResultRow>& rows) {
  const auto& cols = estimate_columns();
  for (std::size_t c = 0; c < cols.size(); ++c) os << (c ? "\t" : "") << cols[c];
  os << '\n';
  using io::format_double;
  for (const auto& r : rows) {
    os << r.treatment << '\t' << r.coefficient << '\t' << format_double(r.estimate) << '\t'
       << format_double(r.std_error) << '\t' << format_double(r.ci_lower) << '\t' << format_double(r.ci_upper)
       << '\t' << format_double(r.p_value) << '\t' << (r.bh_significant ? 1 : 0) << '\t'
       << format_double(r.estimate_raw) << '\t' << format_double(r.std_error_raw) << '\t'
       << format_double(r.within_var) << '\t' << format_double(r.between_var) << '\t' << r.imputations << '\n';
  }
}

inline json estimate_meta(const AnalysisConfig& cfg, const LoadedInputs& in, const EstimateOutput& res,
                          const std::string& config_hash) {
  const auto& first = in.datasets.front();
  json meta;
  meta["command"] = "estimate";
  meta["config_hash"] = config_hash;
  meta["seed"] = cfg.seed;
  meta["versions"] = library_versions();
  meta["inputs"] = json::array();
  for (std::size_t m = 0; m < cfg.inputs.size(); ++m)
    meta["inputs"].push_back({{"path", std::filesystem::path(cfg.inputs[m]).filename().string()},
                              {"records", in.datasets[m].size()},
                              {"studies", in.datasets[m].num_studies()},
                              {"dropped_missing_outcome", in.dropped_missing_outcome[m]},
                              {"ignored_columns", in.ignored_columns[m]}});
  meta["settings"] = {{"alpha", cfg.nuisance.alpha},
                      {"level", cfg.level},
                      {"fdr_q", cfg.fdr_q},
                      {"bh_scope", cfg.bh_within_treatment ? "within" : "all"},
                      {"standardize", cfg.standardize},
                      {"small_sample_correction", cfg.small_sample_correction}};

  // availability and co-prescription from the first imputation
  const auto avail = derive_availability(first);
  json av = json::object();
  for (std::size_t k = 0; k < first.num_treatments(); ++k)
    av[first.treatment_names()[k]] = static_cast<double>(avail.d.col(static_cast<Index>(k)).sum()) /
                                     static_cast<double>(first.num_studies());
  meta["availability_fraction"] = av;
  const auto table = coprescription_table(first);
  json counts = json::array();
  for (Index a = 0; a < table.rows(); ++a) {
    json row = json::array();
    for (Index b = 0; b < table.cols(); ++b) row.push_back(table(a, b));
    counts.push_back(row);
  }
  meta["coprescription"] = {{"treatments", first.treatment_names()}, {"counts", counts}};
  json flags = json::array();
  for (const auto& f : positivity_report(table, cfg.positivity_threshold))
    flags.push_back({{"first", first.treatment_names()[f.first]},
                     {"second", first.treatment_names()[f.second]},
                     {"count", f.count},
                     {"below_threshold", f.below_threshold},
                     {"nested", f.nested}});
  meta["positivity"] = {{"threshold", cfg.positivity_threshold}, {"flags", flags}};

  json drugs = json::object();
  json failures = json::array();
  for (const auto& t : res.treatments) {
    if (!t.ok) {
      failures.push_back({{"treatment", t.treatment}, {"error", t.error}});
      continue;
    }
    json per = json::array();
    for (const auto& f : t.fits) {
      json ex = json::array();
      for (const auto& e : f.exclusions) ex.push_back({{"column", e.column}, {"reason", e.reason}});
      per.push_back({{"eif_residual", f.eif_residual},
                     {"g1_untruncated", to_json(f.g1_untruncated)},
                     {"g2_untruncated", to_json(f.g2_untruncated)},
                     {"g_untruncated", to_json(f.g_untruncated)},
                     {"weights",
                      {{"max_treated", f.weights.max_treated},
                       {"p99_treated", f.weights.p99_treated},
                       {"max_untreated", f.weights.max_untreated},
                       {"p99_untreated", f.weights.p99_untreated}}},
                     {"adjustment_columns", f.adjustment_columns},
                     {"exclusions", ex},
                     {"notes", f.notes}});
    }
    drugs[t.treatment] = {{"coefficients", t.coefficients}, {"imputations", per}};
  }
  meta["treatments"] = drugs;
  meta["failures"] = failures;
  meta["bh"] = {{"rejections", res.bh.rejections}, {"threshold", res.bh.threshold}};
  return meta;
}

// ---------------------------------------------------------------------------
// simulate

struct Threshold {
  std::string metric;  // abs_bias_z, abs_mean_error, mean_abs_error, coverage_clustered, coverage_iid, max_eif_residual
  std::optional<double> min, max;
  std::set<std::size_t> studies;
  std::set<int> scenarios;
  std::set<std::string> methods;
  std::set<std::string> coefficients;
  std::optional<bool> random_effects;
};

struct SimulationConfig {
  sim::SimulationGrid grid;
  std::vector<Threshold> thresholds;
  std::size_t threads = 1;
  std::string out = "drmsm_simulation.tsv";
};

namespace detail {

inline void read_dgp(const json& j, sim::DgpParameters& p) {
  auto num = [&](const char* key, double& field) { field = get_or(j, key, field); };
  auto arr = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    const auto& v = j[key];
    if (!v.is_array() || v.size() != field.size()) throw ConfigError(std::string("dgp.") + key + " has the wrong length");
    for (std::size_t i = 0; i < field.size(); ++i) {
      if constexpr (std::is_same_v<std::decay_t<decltype(field[0])>, double>) {
        field[i] = v[i].get<double>();
      } else {
        if (!v[i].is_array() || v[i].size() != field[i].size())
          throw ConfigError(std::string("dgp.") + key + " rows have the wrong length");
        for (std::size_t c = 0; c < field[i].size(); ++c) field[i][c] = v[i][c].get<double>();
      }
    }
  };
  reject_unknown_keys(j,
                      {"w1_study_sd", "w1_s1_correlation", "w1_s2_correlation", "w1_within_sd", "w2_prob", "w3_prob",
                       "availability_intercept", "availability_s1", "treatment", "y_intercept", "y_s1", "y_w", "y_a",
                       "a1_w1", "a1_w3", "a1_s2", "noise_sd"},
                      "dgp");
  num("w1_study_sd", p.w1_study_sd);
  num("w1_s1_correlation", p.w1_s1_correlation);
  num("w1_s2_correlation", p.w1_s2_correlation);
  num("w1_within_sd", p.w1_within_sd);
  num("w2_prob", p.w2_prob);
  num("w3_prob", p.w3_prob);
  arr("availability_intercept", p.availability_intercept);
  arr("availability_s1", p.availability_s1);
  arr("treatment", p.treatment);
  num("y_intercept", p.y_intercept);
  num("y_s1", p.y_s1);
  arr("y_w", p.y_w);
  arr("y_a", p.y_a);
  num("a1_w1", p.a1_w1);
  num("a1_w3", p.a1_w3);
  num("a1_s2", p.a1_s2);
  num("noise_sd", p.noise_sd);
  const double r = p.w1_s1_correlation * p.w1_s1_correlation + p.w1_s2_correlation * p.w1_s2_correlation;
  if (r > 1.0) throw ConfigError("dgp: squared W1 correlations must sum to at most 1");
}

inline Method parse_method(const std::string& s) {
  if (s == "tmle") return Method::Tmle;
  if (s == "aiptw") return Method::Aiptw;
  if (s == "plugin") return Method::Plugin;
  throw ConfigError("unknown method " + s);
}

inline Threshold parse_threshold(const json& j) {
  reject_unknown_keys(j, {"metric", "min", "max", "studies", "scenarios", "methods", "coefficients", "random_effects"},
                      "threshold");
  Threshold t;
  t.metric = get_or<std::string>(j, "metric", "");
  static const std::set<std::string> metrics{"abs_bias_z",         "abs_mean_error", "mean_abs_error",
                                             "coverage_clustered", "coverage_iid",   "max_eif_residual"};
  if (!metrics.count(t.metric)) throw ConfigError("unknown threshold metric '" + t.metric + "'");
  if (j.contains("min")) t.min = get_or(j, "min", 0.0);
  if (j.contains("max")) t.max = get_or(j, "max", 0.0);
  if (!t.min && !t.max) throw ConfigError("threshold on " + t.metric + " needs min or max");
  if (j.contains("studies")) for (auto v : j["studies"]) t.studies.insert(v.get<std::size_t>());
  if (j.contains("scenarios")) for (auto v : j["scenarios"]) t.scenarios.insert(v.get<int>());
  if (j.contains("methods")) for (const auto& s : string_list(j["methods"], "threshold.methods")) {
    parse_method(s);
    t.methods.insert(s);
  }
  if (j.contains("coefficients"))
    for (const auto& s : string_list(j["coefficients"], "threshold.coefficients")) t.coefficients.insert(s);
  if (j.contains("random_effects")) t.random_effects = get_or(j, "random_effects", false);
  return t;
}

}  // namespace detail

inline SimulationConfig parse_simulation_config(const json& j, const std::string& base_dir = {}) {
  detail::reject_unknown_keys(j, {"grid", "dgp", "thresholds", "seed", "threads", "out"}, "simulate config");
  SimulationConfig c;
  auto& g = c.grid;
  if (j.contains("grid")) {
    const auto& gj = j["grid"];
    detail::reject_unknown_keys(gj,
                                {"studies", "random_effects", "scenarios", "methods", "per_study", "replications",
                                 "alpha", "level", "truth_oracle_size", "failure_cap"},
                                "grid");
    try {
      if (gj.contains("studies")) g.studies = gj["studies"].get<std::vector<std::size_t>>();
      if (gj.contains("random_effects")) g.random_effects = gj["random_effects"].get<std::vector<bool>>();
      if (gj.contains("scenarios")) g.scenarios = gj["scenarios"].get<std::vector<int>>();
    } catch (const json::exception&) {
      throw ConfigError("grid axes must be lists");
    }
    if (gj.contains("methods")) {
      g.methods.clear();
      for (const auto& s : detail::string_list(gj["methods"], "grid.methods")) g.methods.push_back(detail::parse_method(s));
    }
    g.per_study = detail::get_or(gj, "per_study", g.per_study);
    g.replications = detail::get_or(gj, "replications", g.replications);
    g.alpha = detail::get_or(gj, "alpha", g.alpha);
    g.level = detail::get_or(gj, "level", g.level);
    g.truth_oracle_size = detail::get_or(gj, "truth_oracle_size", g.truth_oracle_size);
    g.failure_cap = detail::get_or(gj, "failure_cap", g.failure_cap);
  }
  if (j.contains("dgp")) detail::read_dgp(j["dgp"], g.dgp);
  if (j.contains("thresholds")) {
    if (!j["thresholds"].is_array()) throw ConfigError("thresholds must be a list");
    for (const auto& t : j["thresholds"]) c.thresholds.push_back(detail::parse_threshold(t));
  }
  g.seed = detail::get_or(j, "seed", g.seed);
  c.threads = detail::get_or(j, "threads", c.threads);
  c.out = detail::resolve_path(detail::get_or(j, "out", c.out), base_dir);
  if (g.studies.empty() || g.random_effects.empty() || g.scenarios.empty() || g.methods.empty())
    throw ConfigError("simulation grid has an empty axis");
  for (auto s : g.scenarios)
    if (s < 1 || s > 4) throw ConfigError("scenario must be 1-4");
  for (auto s : g.studies)
    if (s < 2) throw ConfigError("simulation needs at least two studies");
  if (g.replications < 1) throw ConfigError("replications must be at least 1");
  if (g.per_study < 1) throw ConfigError("per_study must be at least 1");
  if (!(g.alpha > 0.0 && g.alpha < 0.5)) throw ConfigError("alpha must lie in (0, 0.5)");
  if (!(g.failure_cap >= 0.0 && g.failure_cap <= 1.0)) throw ConfigError("failure_cap must lie in [0, 1]");
  if (c.threads < 1) throw ConfigError("threads must be at least 1");
  return c;
}

inline const std::vector<std::string>& simulation_columns() {
  static const std::vector<std::string> cols{
      "studies",         "per_study",  "random_effects",    "scenario",          "method",
      "coefficient",     "truth",      "replications",      "failed",            "mean_estimate",
      "mean_error",      "mean_abs_error", "mc_se_abs_error", "mc_sd",         "mc_se_mean",        "mean_se_iid",
      "mean_se_clustered", "coverage_clustered", "coverage_iid", "max_eif_residual"};
  return cols;
}

inline void write_simulation_table(std::ostream& os, const std::vector<sim::McReport>& reports) {
  const auto& cols = simulation_columns();
  for (std::size_t c = 0; c < cols.size(); ++c) os << (c ? "\t" : "") << cols[c];
  os << '\n';
  using io::format_double;
  for (const auto& r : reports)
    for (const auto& s : r.coefficients)
      os << r.studies << '\t' << r.per_study << '\t' << (r.random_effects ? 1 : 0) << '\t' << r.scenario << '\t'
         << method_name(r.method) << '\t' << s.name << '\t' << format_double(s.truth) << '\t' << r.replications
         << '\t' << r.failed << '\t' << format_double(s.mean_estimate) << '\t' << format_double(s.mean_error) << '\t'
         << format_double(s.mean_abs_error) << '\t' << format_double(s.mc_se_abs_error) << '\t'
         << format_double(s.mc_sd) << '\t'
         << format_double(s.mc_se_mean) << '\t' << format_double(s.mean_se_iid) << '\t'
         << format_double(s.mean_se_clustered) << '\t' << format_double(s.coverage_clustered) << '\t'
         << format_double(s.coverage_iid) << '\t' << format_double(r.max_eif_residual) << '\n';
}

/// One message per violated (threshold, cell, coefficient).
inline std::vector<std::string> check_thresholds(const std::vector<Threshold>& thresholds,
                                                 const std::vector<sim::McReport>& reports) {
  std::vector<std::string> out;
  for (const auto& t : thresholds)
    for (const auto& r : reports) {
      if (!t.studies.empty() && !t.studies.count(r.studies)) continue;
      if (!t.scenarios.empty() && !t.scenarios.count(r.scenario)) continue;
      if (!t.methods.empty() && !t.methods.count(method_name(r.method))) continue;
      if (t.random_effects && *t.random_effects != r.random_effects) continue;
      auto check = [&](double value, const std::string& what) {
        const bool bad = std::isnan(value) || (t.min && value < *t.min) || (t.max && value > *t.max);
        if (!bad) return;
        std::ostringstream msg;
        msg << t.metric << " = " << value << " outside [" << (t.min ? std::to_string(*t.min) : "-inf") << ", "
            << (t.max ? std::to_string(*t.max) : "inf") << "] at J=" << r.studies
            << (r.random_effects ? " RE" : " noRE") << " scenario " << r.scenario << " " << method_name(r.method)
            << what;
        out.push_back(msg.str());
      };
      if (t.metric == "max_eif_residual") {
        check(r.max_eif_residual, "");
        continue;
      }
      for (const auto& s : r.coefficients) {
        if (!t.coefficients.empty() && !t.coefficients.count(s.name)) continue;
        double v = 0.0;
        if (t.metric == "abs_bias_z") v = std::abs(s.mean_error) / s.mc_se_mean;
        else if (t.metric == "abs_mean_error") v = std::abs(s.mean_error);
        else if (t.metric == "mean_abs_error") v = s.mean_abs_error;
        else if (t.metric == "coverage_clustered") v = s.coverage_clustered;
        else if (t.metric == "coverage_iid") v = s.coverage_iid;
        check(v, " " + s.name);
      }
    }
  return out;
}

inline json simulation_meta(const SimulationConfig& cfg, const std::vector<sim::McReport>& reports,
                            const std::vector<std::string>& violations, const std::string& config_hash) {
  json meta;
  meta["command"] = "simulate";
  meta["config_hash"] = config_hash;
  meta["seed"] = cfg.grid.seed;
  meta["versions"] = library_versions();
  json truths = json::object();
  for (const auto& r : reports) {
    const std::string key = r.random_effects ? "random_effects" : "no_random_effects";
    if (truths.contains(key)) continue;
    std::vector<double> beta(r.truth.beta.data(), r.truth.beta.data() + r.truth.beta.size());
    truths[key] = {{"coefficients", sim::coefficient_names()},
                   {"beta", beta},
                   {"provenance", r.truth.provenance == sim::TruthSpec::Provenance::Oracle ? "oracle" : "analytic"},
                   {"oracle_size", r.truth.oracle_size}};
  }
  meta["truth"] = truths;
  json failures = json::array();
  for (const auto& r : reports)
    if (r.failed > 0)
      failures.push_back({{"studies", r.studies}, {"random_effects", r.random_effects}, {"scenario", r.scenario},
                          {"method", method_name(r.method)}, {"failed", r.failed}, {"messages", r.failure_messages}});
  meta["replication_failures"] = failures;
  meta["threshold_violations"] = violations;
  return meta;
}

// ---------------------------------------------------------------------------
// report

struct ResultsTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::optional<std::size_t> column(const std::string& name) const {
    for (std::size_t c = 0; c < header.size(); ++c)
      if (header[c] == name) return c;
    return std::nullopt;
  }
  bool is_estimate() const { return column("bh_significant").has_value(); }
  bool is_simulation() const { return column("coverage_clustered").has_value(); }
};

inline ResultsTable parse_results(std::istream& in) {
  ResultsTable t;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = io::detail::split(line, '\t');
    if (t.header.empty()) {
      t.header = std::move(fields);
      continue;
    }
    if (fields.size() != t.header.size())
      throw DataError("corrupt results file: line " + std::to_string(line_no) + " has " + std::to_string(fields.size()) +
                      " fields, header has " + std::to_string(t.header.size()));
    t.rows.push_back(std::move(fields));
  }
  if (in.bad()) throw DataError("cannot read results file");
  if (!t.header.empty() && !t.is_estimate() && !t.is_simulation())
    throw DataError("unrecognized results file: header matches neither estimate nor simulation output");
  return t;
}

inline ResultsTable read_results(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open results file " + path);
  return parse_results(in);
}

namespace detail {

inline std::string short_number(const std::string& token) {
  char* end = nullptr;
  const double v = std::strtod(token.c_str(), &end);
  if (end == token.c_str() || *end != '\0') return token;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline void print_aligned(std::ostream& os, const std::vector<std::string>& header,
                          const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  auto emit = [&](const std::vector<std::string>& cells) {
    std::string line;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c) line += "  ";
      line += cells[c];
      if (c + 1 < cells.size()) line += std::string(width[c] - cells[c].size(), ' ');
    }
    os << line << '\n';
  };
  emit(header);
  for (const auto& r : rows) emit(r);
}

}  // namespace detail

enum class Format { Table, Rows };

inline Format parse_format(const std::string& s) {
  if (s == "table") return Format::Table;
  if (s == "rows") return Format::Rows;
  throw ConfigError("format must be table or rows");
}

/// `rows` re-emits the stored tab-separated rows unchanged (full precision).
/// `table` aligns a subset of columns at four significant digits; estimate
/// results gain a `sig` column holding `*` for BH-significant rows and
/// simulation results keep their coverage columns. An empty file prints the
/// estimate header only.
inline void render_results(std::ostream& os, const ResultsTable& t, Format fmt) {
  if (fmt == Format::Rows) {
    const auto& header = t.header.empty() ? estimate_columns() : t.header;
    for (std::size_t c = 0; c < header.size(); ++c) os << (c ? "\t" : "") << header[c];
    os << '\n';
    for (const auto& r : t.rows) {
      for (std::size_t c = 0; c < r.size(); ++c) os << (c ? "\t" : "") << r[c];
      os << '\n';
    }
    return;
  }
  std::vector<std::string> text_cols, shown;
  if (t.header.empty() || t.is_estimate()) {
    shown = {"treatment", "coefficient", "estimate", "std_error", "ci_lower", "ci_upper", "p_value"};
    text_cols = {"treatment", "coefficient"};
  } else {
    shown = {"studies", "random_effects", "scenario", "method", "coefficient", "truth", "mean_error",
             "mc_se_mean", "mean_abs_error", "mean_se_clustered", "coverage_clustered", "coverage_iid", "failed"};
    text_cols = {"studies", "random_effects", "scenario", "method", "coefficient", "failed"};
  }
  std::vector<std::string> header = shown;
  const bool estimate = t.header.empty() || t.is_estimate();
  if (estimate) header.push_back("sig");
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : t.rows) {
    std::vector<std::string> out;
    for (const auto& name : shown) {
      const auto c = t.column(name);
      if (!c) throw DataError("results file lacks column " + name);
      const bool text = std::find(text_cols.begin(), text_cols.end(), name) != text_cols.end();
      out.push_back(text ? r[*c] : detail::short_number(r[*c]));
    }
    if (estimate) out.push_back(r[*t.column("bh_significant")] == "1" ? "*" : "");
    rows.push_back(std::move(out));
  }
  detail::print_aligned(os, header, rows);
}

// ---------------------------------------------------------------------------
// command entry points

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::optional<std::string> out;
  std::string format = "table";
};

namespace detail {

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  f << text;
  if (!f) throw DataError("failed writing " + path);
}

inline std::string read_config(const std::string& path) {
  try {
    return io::read_file(path);
  } catch (const DataError&) {
    throw ConfigError("cannot read config file " + path);
  }
}

inline std::string base_dir_of(const std::string& path) {
  return std::filesystem::path(path).parent_path().string();
}

}  // namespace detail

inline int cmd_estimate(const CommonFlags& flags, std::ostream& out, std::ostream& err) {
  const std::string text = detail::read_config(flags.config);
  auto cfg = parse_analysis_config(detail::parse_json_text(text, flags.config), detail::base_dir_of(flags.config));
  if (flags.seed) cfg.seed = *flags.seed;
  if (flags.threads) cfg.threads = *flags.threads;
  if (flags.out) cfg.out = *flags.out;
  const auto fmt = parse_format(flags.format);

  const auto inputs = load_inputs(cfg);
  auto res = run_estimate(cfg, inputs);
  const auto hash = hex64(fnv1a64(text));
  std::ostringstream table;
  write_estimate_table(table, res.rows);
  detail::write_text(cfg.out, table.str());
  detail::write_text(cfg.out + ".meta.json", estimate_meta(cfg, inputs, res, hash).dump(2) + "\n");

  std::size_t failed = 0;
  for (const auto& t : res.treatments)
    if (!t.ok) {
      ++failed;
      err << "warning: treatment " << t.treatment << " failed: " << t.error << '\n';
    }
  std::istringstream back(table.str());
  render_results(out, parse_results(back), fmt);
  if (failed == res.treatments.size()) {
    err << "error: every treatment failed\n";
    return kData;
  }
  return kOk;
}

inline int cmd_simulate(const CommonFlags& flags, std::ostream& out, std::ostream& err) {
  const std::string text = detail::read_config(flags.config);
  auto cfg = parse_simulation_config(detail::parse_json_text(text, flags.config), detail::base_dir_of(flags.config));
  if (flags.seed) cfg.grid.seed = *flags.seed;
  if (flags.threads) cfg.threads = *flags.threads;
  if (flags.out) cfg.out = *flags.out;
  const auto fmt = parse_format(flags.format);

  const auto reports = sim::run_scenarios(cfg.grid, {cfg.threads});
  const auto violations = check_thresholds(cfg.thresholds, reports);
  std::ostringstream table;
  write_simulation_table(table, reports);
  detail::write_text(cfg.out, table.str());
  detail::write_text(cfg.out + ".meta.json",
                     simulation_meta(cfg, reports, violations, hex64(fnv1a64(text))).dump(2) + "\n");
  std::istringstream back(table.str());
  render_results(out, parse_results(back), fmt);
  for (const auto& v : violations) err << "threshold violated: " << v << '\n';
  return violations.empty() ? kOk : kThreshold;
}

inline int cmd_report(const std::string& path, const CommonFlags& flags, std::ostream& out) {
  const auto fmt = parse_format(flags.format);
  const auto table = read_results(path);
  if (flags.out) {
    std::ostringstream s;
    render_results(s, table, fmt);
    detail::write_text(*flags.out, s.str());
  } else {
    render_results(out, table, fmt);
  }
  return kOk;
}

/// Parses argv-style arguments (without the program name) and dispatches.
/// Returns the process exit status; nothing escapes as an exception.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Doubly robust estimation of effect-modification models on pooled multi-study data", "drmsm"};
  app.require_subcommand(1);
  app.set_version_flag("--version", DRMSM_VERSION);

  CommonFlags flags;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string out_path, results_path;

  auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* c = sub->add_option("--config", flags.config, "JSON configuration file");
    if (needs_config) c->required();
    sub->add_option("--seed", seed, "master seed (overrides the config)");
    sub->add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--out", out_path, "output path (overrides the config)");
    sub->add_option("--format", flags.format, "stdout rendering")->check(CLI::IsMember({"table", "rows"}));
  };
  auto* sim_cmd = app.add_subcommand("simulate", "run a Monte Carlo scenario grid");
  add_common(sim_cmd, true);
  auto* est_cmd = app.add_subcommand("estimate", "per-treatment analyses of pooled IPD");
  add_common(est_cmd, true);
  auto* rep_cmd = app.add_subcommand("report", "render a stored results table");
  add_common(rep_cmd, false);
  rep_cmd->add_option("results", results_path, "results file written by estimate or simulate")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForVersion&) {
    out << DRMSM_VERSION << '\n';
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsage;
  }
  auto* active = app.get_subcommands().front();
  if (active->count("--seed")) flags.seed = seed;
  if (active->count("--threads")) flags.threads = threads;
  if (active->count("--out")) flags.out = out_path;

  try {
    if (active == sim_cmd) return cmd_simulate(flags, out, err);
    if (active == est_cmd) return cmd_estimate(flags, out, err);
    return cmd_report(results_path, flags, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kData;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kData;
  }
}

}  // namespace drmsm::cli
