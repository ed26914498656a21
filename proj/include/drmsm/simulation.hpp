#pragma once

// Monte Carlo harness: multi-study data with differential availability and
// optional study random effects, four nuisance-misspecification scenarios,
// truth by counterfactual forcing, and per-coefficient summaries.

#include "drmsm/data_model.hpp"
#include "drmsm/error.hpp"
#include "drmsm/estimators.hpp"
#include "drmsm/glm.hpp"
#include "drmsm/inference.hpp"
#include "drmsm/nuisance.hpp"

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <thread>
#include <vector>

namespace drmsm::sim {

enum class ModelQuality { Correct, Null };

struct ScenarioConfig {
  std::size_t studies = 10;
  std::size_t per_study = 300;
  bool random_effects = false;
  ModelQuality q_spec = ModelQuality::Correct;
  ModelQuality g_spec = ModelQuality::Correct;
  std::size_t replications = 1000;
  std::uint64_t seed = 1;
  double alpha = 0.001;

  // 1: both correct, 2: g null, 3: Q null, 4: both null
  int scenario() const {
    if (q_spec == ModelQuality::Correct) return g_spec == ModelQuality::Correct ? 1 : 2;
    return g_spec == ModelQuality::Correct ? 3 : 4;
  }

  static ScenarioConfig for_scenario(int scenario, std::size_t studies, bool random_effects) {
    if (scenario < 1 || scenario > 4) throw ConfigError("scenario must be 1-4");
    ScenarioConfig cfg;
    cfg.studies = studies;
    cfg.random_effects = random_effects;
    cfg.q_spec = scenario <= 2 ? ModelQuality::Correct : ModelQuality::Null;
    cfg.g_spec = scenario % 2 == 1 ? ModelQuality::Correct : ModelQuality::Null;
    return cfg;
  }

  void validate() const {
    if (studies < 2) throw ConfigError("simulation needs at least two studies");
    if (per_study < 1) throw ConfigError("studies need at least one subject");
    if (replications < 1) throw ConfigError("replications must be at least 1");
    if (!(alpha > 0.0 && alpha < 0.5)) throw ConfigError("alpha must lie in (0, 0.5)");
  }
};

/// Every constant of the data-generating mechanism.
struct DgpParameters {
  // study mean of W1: sd and correlations with S1 and the unobserved S2
  double w1_study_sd = 1.0;
  double w1_s1_correlation = 0.5;
  double w1_s2_correlation = 0.5;
  double w1_within_sd = 1.0;
  double w2_prob = 0.5;
  double w3_prob = 0.4;

  // P(D_k = 1 | S1) = expit(intercept_k + slope_k * S1); marginals ~ (0.9, 0.7, 0.6)
  std::array<double, 3> availability_intercept{2.56, 1.02, 0.49};
  std::array<double, 3> availability_s1{1.0, 1.0, 1.0};

  // P(A_k = 1 | D_k = 1, S1, W) = expit(c0 + c1 S1 + c2 W1 + c3 W2 + c4 W3)
  std::array<std::array<double, 5>, 3> treatment{{
      {-0.3, 0.5, 0.5, 0.4, -0.4},
      {-0.2, 0.3, -0.3, 0.3, 0.2},
      {0.0, -0.3, 0.2, -0.3, 0.3},
  }};

  double y_intercept = 1.0;
  double y_s1 = 0.8;
  std::array<double, 3> y_w{0.5, -0.4, 0.3};
  std::array<double, 3> y_a{1.0, 0.5, -0.5};
  double a1_w1 = 0.65;
  double a1_w3 = 0.35;
  double a1_s2 = 0.3;  // random-effect slope, active with random_effects
  double noise_sd = 1.0;
};

inline const std::vector<std::string>& modifier_names() {
  static const std::vector<std::string> names{"w_1", "w_2", "w_3", "a_2", "a_3"};
  return names;
}

inline const std::vector<std::string>& coefficient_names() {
  static const std::vector<std::string> names{"(intercept)", "w_1", "w_2", "w_3", "a_2", "a_3"};
  return names;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x2545F4914F6CDD1DULL;
  for (auto p : parts) h = splitmix64(h ^ splitmix64(p));
  return h;
}

struct SimulatedData {
  PooledDataset data;
  Eigen::MatrixXi generated_availability;  // J x 3, as drawn (before derivation)
};

namespace detail {

struct Subject {
  double s1, s2, w1, w2, w3;
  std::array<int, 3> d;
  std::array<int, 3> a;
};

class SubjectSampler {
 public:
  SubjectSampler(const DgpParameters& p, std::uint64_t seed) : p_(p), rng_(seed) {}

  struct Study {
    double s1, s2, w1_mean;
    std::array<int, 3> d;
  };

  Study draw_study() {
    Study s{};
    s.s1 = normal_(rng_);
    s.s2 = normal_(rng_);
    const double z = normal_(rng_);
    const double r1 = p_.w1_s1_correlation;
    const double r2 = p_.w1_s2_correlation;
    s.w1_mean = p_.w1_study_sd * (r1 * s.s1 + r2 * s.s2 + std::sqrt(1.0 - r1 * r1 - r2 * r2) * z);
    for (int k = 0; k < 3; ++k)
      s.d[k] = bernoulli(expit(p_.availability_intercept[k] + p_.availability_s1[k] * s.s1));
    return s;
  }

  // `force_available` draws every treatment as if the study had access.
  Subject draw_subject(const Study& s, bool force_available = false) {
    Subject x{};
    x.s1 = s.s1;
    x.s2 = s.s2;
    x.w1 = s.w1_mean + p_.w1_within_sd * normal_(rng_);
    x.w2 = bernoulli(p_.w2_prob);
    x.w3 = bernoulli(p_.w3_prob);
    for (int k = 0; k < 3; ++k) {
      const auto& c = p_.treatment[k];
      const double pr = expit(c[0] + c[1] * x.s1 + c[2] * x.w1 + c[3] * x.w2 + c[4] * x.w3);
      x.d[k] = force_available ? 1 : s.d[k];
      const int take = bernoulli(pr);
      x.a[k] = x.d[k] * take;
    }
    return x;
  }

  // E[Y | subject] excluding the treatment-1 effect, plus the A1 effect itself.
  double baseline_mean(const Subject& x) const {
    return p_.y_intercept + p_.y_s1 * x.s1 + p_.y_w[0] * x.w1 + p_.y_w[1] * x.w2 + p_.y_w[2] * x.w3 +
           p_.y_a[1] * x.a[1] + p_.y_a[2] * x.a[2];
  }
  double a1_effect(const Subject& x, bool random_effects) const {
    double e = p_.y_a[0] + p_.a1_w1 * x.w1 + p_.a1_w3 * x.w3;
    if (random_effects) e += p_.a1_s2 * x.s2;
    return e;
  }
  double noise() { return p_.noise_sd * normal_(rng_); }

 private:
  int bernoulli(double pr) { return uniform_(rng_) < pr ? 1 : 0; }

  const DgpParameters& p_;
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace detail

/// One pooled dataset: per study S1, S2 and availability D_k from S1; per
/// subject W1 (continuous, study mean correlated with S2), W2, W3 (binary),
/// A_k gated by D_k, and a continuous Y with A1 x W1 and A1 x W3
/// interactions (plus A1 x S2 under random effects). S2 is not emitted.
inline SimulatedData generate_dataset(const ScenarioConfig& cfg, std::uint64_t replicate_seed,
                                      const DgpParameters& dgp = {}) {
  cfg.validate();
  detail::SubjectSampler sampler(dgp, replicate_seed);
  const std::size_t n = cfg.studies * cfg.per_study;
  std::vector<std::string> labels;
  labels.reserve(n);
  VectorXd y(static_cast<Index>(n));
  MatrixXd a(static_cast<Index>(n), 3);
  MatrixXd cov(static_cast<Index>(n), 4);
  Eigen::MatrixXi avail(static_cast<Index>(cfg.studies), 3);

  Index row = 0;
  for (std::size_t j = 0; j < cfg.studies; ++j) {
    const auto study = sampler.draw_study();
    for (int k = 0; k < 3; ++k) avail(static_cast<Index>(j), k) = study.d[k];
    const std::string label = "study" + std::to_string(j + 1);
    for (std::size_t i = 0; i < cfg.per_study; ++i, ++row) {
      const auto x = sampler.draw_subject(study);
      labels.push_back(label);
      cov.row(row) << x.s1, x.w1, x.w2, x.w3;
      for (int k = 0; k < 3; ++k) a(row, k) = x.a[k];
      y(row) = sampler.baseline_mean(x) + x.a[0] * sampler.a1_effect(x, cfg.random_effects) + sampler.noise();
    }
  }
  std::vector<Covariate> schema{{"s_1", CovariateRole::Study, ColumnKind::Continuous},
                                {"w_1", CovariateRole::Individual, ColumnKind::Continuous},
                                {"w_2", CovariateRole::Individual, ColumnKind::Binary},
                                {"w_3", CovariateRole::Individual, ColumnKind::Binary}};
  return {PooledDataset(std::move(labels), std::move(y), {"1", "2", "3"}, std::move(a), std::move(schema),
                        std::move(cov)),
          std::move(avail)};
}

struct TruthSpec {
  enum class Provenance { Analytic, Oracle };
  VectorXd beta;  // over coefficient_names()
  Provenance provenance = Provenance::Analytic;
  std::size_t oracle_size = 0;
};

inline TruthSpec analytic_truth(const DgpParameters& dgp = {}) {
  TruthSpec t;
  t.beta = VectorXd::Zero(6);
  t.beta << dgp.y_a[0], dgp.a1_w1, 0.0, dgp.a1_w3, 0.0, 0.0;
  return t;
}

/// Counterfactual forcing: draw `size` subjects (each from its own study, so
/// the marginal law of the modifiers is the pooled population's), set A1 to 1
/// and to 0 regardless of availability, and regress the difference of the
/// two counterfactual outcomes on V.
inline TruthSpec oracle_truth(bool random_effects, std::size_t size, std::uint64_t seed,
                              const DgpParameters& dgp = {}) {
  if (size < 10) throw ConfigError("oracle size too small");
  detail::SubjectSampler sampler(dgp, seed);
  MatrixXd v(static_cast<Index>(size), 6);
  VectorXd diff(static_cast<Index>(size));
  for (std::size_t i = 0; i < size; ++i) {
    const auto study = sampler.draw_study();
    const auto x = sampler.draw_subject(study);
    const double eps = sampler.noise();
    const double base = sampler.baseline_mean(x) + eps;
    const double y1 = base + sampler.a1_effect(x, random_effects);
    const double y0 = base;
    v.row(static_cast<Index>(i)) << 1.0, x.w1, x.w2, x.w3, x.a[1], x.a[2];
    diff(static_cast<Index>(i)) = y1 - y0;
  }
  TruthSpec t;
  t.beta = fit_ols(v, diff).coefficients;
  t.provenance = TruthSpec::Provenance::Oracle;
  t.oracle_size = size;
  return t;
}

inline TruthSpec true_parameters(const ScenarioConfig& cfg, const DgpParameters& dgp = {},
                                 std::size_t oracle_size = 1'000'000) {
  if (!cfg.random_effects) return analytic_truth(dgp);
  return oracle_truth(true, oracle_size, derive_seed({cfg.seed, 0x7275746855ULL, 1}), dgp);
}

struct CoefficientSummary {
  std::string name;
  double truth = 0.0;
  double mean_estimate = 0.0;
  double mean_error = 0.0;
  double mean_abs_error = 0.0;
  double mc_se_abs_error = 0.0;  // MC standard error of mean_abs_error
  double mc_sd = 0.0;
  double mc_se_mean = 0.0;  // mc_sd / sqrt(replications)
  double mean_se_iid = 0.0;
  double mean_se_clustered = 0.0;
  double coverage_clustered = 0.0;
  double coverage_iid = 0.0;
};

struct McReport {
  std::size_t studies = 0;
  std::size_t per_study = 0;
  bool random_effects = false;
  int scenario = 1;
  Method method = Method::Tmle;
  std::size_t replications = 0;  // attempted
  std::size_t failed = 0;
  bool mc_se_defined = false;
  double max_eif_residual = 0.0;
  TruthSpec truth;
  std::vector<CoefficientSummary> coefficients;
  std::vector<std::string> failure_messages;  // first few
};

struct SimulationGrid {
  std::vector<std::size_t> studies{10, 30, 50};
  std::vector<bool> random_effects{false, true};
  std::vector<int> scenarios{1, 2, 3, 4};
  std::vector<Method> methods{Method::Tmle, Method::Aiptw};
  std::size_t per_study = 300;
  std::size_t replications = 1000;
  std::uint64_t seed = 1;
  double alpha = 0.001;
  double level = 0.95;
  std::size_t truth_oracle_size = 1'000'000;
  double failure_cap = 0.02;
  DgpParameters dgp;
};

struct RunOptions {
  std::size_t threads = 1;
};

/// Per-replication result of one (scenario, method) pair.
struct ReplicateOutcome {
  bool ok = false;
  std::string error;
  VectorXd beta, se_iid, se_clustered;
  double eif_residual = 0.0;
};

namespace detail {

// Fits every requested scenario and method on one dataset; nuisance fits are
// shared across scenarios with the same Q or g specification.
inline std::vector<ReplicateOutcome> run_replicate(const SimulatedData& sim, const std::vector<int>& scenarios,
                                                   const std::vector<Method>& methods, double alpha) {
  std::vector<ReplicateOutcome> out(scenarios.size() * methods.size());
  const auto& data = sim.data;
  try {
    const auto avail = derive_availability(data);
    const auto adj = build_adjustment_set(data, 0);
    const auto design = build_modifier_design(data, avail, adj, modifier_names(), false);
    const auto y = bound_outcome(data.outcome());

    std::map<ModelQuality, OutcomeFit> q_fits;
    std::map<ModelQuality, PropensityFit> g_fits;
    std::map<ModelQuality, std::string> q_err, g_err;
    auto spec = [](ModelQuality m) { return m == ModelQuality::Correct ? ModelSpec::main() : ModelSpec::null(); };
    for (int s : scenarios) {
      const auto cfg = ScenarioConfig::for_scenario(s, 2, false);
      if (!q_fits.count(cfg.q_spec) && !q_err.count(cfg.q_spec)) {
        try {
          q_fits.emplace(cfg.q_spec, fit_outcome(data, avail, adj, y.scaled, spec(cfg.q_spec), Link::Identity));
        } catch (const std::exception& e) {
          q_err[cfg.q_spec] = e.what();
        }
      }
      if (!g_fits.count(cfg.g_spec) && !g_err.count(cfg.g_spec)) {
        try {
          g_fits.emplace(cfg.g_spec, fit_propensity(data, avail, adj, spec(cfg.g_spec), spec(cfg.g_spec), alpha));
        } catch (const std::exception& e) {
          g_err[cfg.g_spec] = e.what();
        }
      }
    }
    const auto& clusters = data.study_of_records();
    for (std::size_t si = 0; si < scenarios.size(); ++si) {
      const auto cfg = ScenarioConfig::for_scenario(scenarios[si], 2, false);
      for (std::size_t mi = 0; mi < methods.size(); ++mi) {
        auto& res = out[si * methods.size() + mi];
        if (q_err.count(cfg.q_spec)) { res.error = q_err[cfg.q_spec]; continue; }
        if (g_err.count(cfg.g_spec)) { res.error = g_err[cfg.g_spec]; continue; }
        try {
          NuisanceFits nf{q_fits.at(cfg.q_spec), g_fits.at(cfg.g_spec), y};
          const auto est = estimate(methods[mi], data, adj, design, nf);
          res.beta = est.beta;
          res.se_iid = sandwich_iid(est.eif).se;
          res.se_clustered = sandwich_clustered(est.eif, clusters, data.num_studies()).se;
          res.eif_residual = est.eif_residual;
          res.ok = res.beta.allFinite() && res.se_clustered.allFinite();
          if (!res.ok) res.error = "non-finite estimate";
        } catch (const std::exception& e) {
          res.error = e.what();
        }
      }
    }
  } catch (const std::exception& e) {
    for (auto& r : out) r.error = e.what();
  }
  return out;
}

template <class Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) fn(i);
    });
  for (auto& th : pool) th.join();
}

inline McReport summarize(const std::vector<const ReplicateOutcome*>& reps, const TruthSpec& truth, double level) {
  McReport r;
  r.replications = reps.size();
  const double z = normal_quantile(0.5 * (1.0 + level));
  std::vector<const ReplicateOutcome*> ok;
  for (const auto* rep : reps) {
    if (rep->ok) ok.push_back(rep);
    else {
      ++r.failed;
      if (r.failure_messages.size() < 5) r.failure_messages.push_back(rep->error);
    }
  }
  r.truth = truth;
  const auto& names = coefficient_names();
  const auto m = static_cast<double>(ok.size());
  r.mc_se_defined = ok.size() >= 2;
  for (const auto* rep : ok) r.max_eif_residual = std::max(r.max_eif_residual, rep->eif_residual);
  for (std::size_t c = 0; c < names.size(); ++c) {
    const auto ci = static_cast<Index>(c);
    CoefficientSummary s;
    s.name = names[c];
    s.truth = truth.beta(ci);
    if (ok.empty()) {
      s.mean_estimate = s.mean_error = s.mean_abs_error = s.mean_se_iid = s.mean_se_clustered = std::nan("");
      s.coverage_clustered = s.coverage_iid = std::nan("");
      s.mc_sd = s.mc_se_mean = s.mc_se_abs_error = std::nan("");
      r.coefficients.push_back(s);
      continue;
    }
    double sum = 0, abs_sum = 0, se_i = 0, se_c = 0, cov_c = 0, cov_i = 0;
    for (const auto* rep : ok) {
      const double b = rep->beta(ci);
      sum += b;
      abs_sum += std::abs(b - s.truth);
      se_i += rep->se_iid(ci);
      se_c += rep->se_clustered(ci);
      cov_c += std::abs(b - s.truth) <= z * rep->se_clustered(ci) ? 1.0 : 0.0;
      cov_i += std::abs(b - s.truth) <= z * rep->se_iid(ci) ? 1.0 : 0.0;
    }
    s.mean_estimate = sum / m;
    s.mean_error = s.mean_estimate - s.truth;
    s.mean_abs_error = abs_sum / m;
    s.mean_se_iid = se_i / m;
    s.mean_se_clustered = se_c / m;
    s.coverage_clustered = cov_c / m;
    s.coverage_iid = cov_i / m;
    if (r.mc_se_defined) {
      double ss = 0;
      for (const auto* rep : ok) ss += (rep->beta(ci) - s.mean_estimate) * (rep->beta(ci) - s.mean_estimate);
      s.mc_sd = std::sqrt(ss / (m - 1.0));
      s.mc_se_mean = s.mc_sd / std::sqrt(m);
      double sa = 0;
      for (const auto* rep : ok) {
        const double d = std::abs(rep->beta(ci) - s.truth) - s.mean_abs_error;
        sa += d * d;
      }
      s.mc_se_abs_error = std::sqrt(sa / (m - 1.0) / m);
    } else {
      s.mc_sd = s.mc_se_mean = s.mc_se_abs_error = std::nan("");
    }
    r.coefficients.push_back(s);
  }
  return r;
}

}  // namespace detail

/// Runs the grid. Datasets are keyed by (seed, J, n_j, random effects,
/// replicate), so every scenario and method at the same J and random-effects
/// setting sees the same datasets, and serial and threaded runs agree.
/// A cell whose failure fraction exceeds `failure_cap` aborts the run.
inline std::vector<McReport> run_scenarios(const SimulationGrid& grid, const RunOptions& opt = {}) {
  if (grid.studies.empty() || grid.random_effects.empty() || grid.scenarios.empty() || grid.methods.empty())
    throw ConfigError("simulation grid has an empty axis");
  for (int s : grid.scenarios)
    if (s < 1 || s > 4) throw ConfigError("scenario must be 1-4");
  if (!(grid.level > 0.0 && grid.level < 1.0)) throw ConfigError("level must lie in (0, 1)");

  std::map<bool, TruthSpec> truths;
  for (bool re : grid.random_effects) {
    if (truths.count(re)) continue;
    truths[re] = re ? oracle_truth(true, grid.truth_oracle_size, derive_seed({grid.seed, 0x7275746855ULL, 1}), grid.dgp)
                    : analytic_truth(grid.dgp);
  }

  std::vector<McReport> reports;
  for (bool re : grid.random_effects) {
    for (std::size_t j : grid.studies) {
      ScenarioConfig base;
      base.studies = j;
      base.per_study = grid.per_study;
      base.random_effects = re;
      base.replications = grid.replications;
      base.seed = grid.seed;
      base.alpha = grid.alpha;
      base.validate();

      std::vector<std::vector<ReplicateOutcome>> results(grid.replications);
      detail::parallel_for(grid.replications, opt.threads, [&](std::size_t r) {
        const auto seed = derive_seed({grid.seed, j, grid.per_study, re ? 1ULL : 0ULL, r});
        const auto sim = generate_dataset(base, seed, grid.dgp);
        results[r] = detail::run_replicate(sim, grid.scenarios, grid.methods, grid.alpha);
      });

      for (std::size_t si = 0; si < grid.scenarios.size(); ++si)
        for (std::size_t mi = 0; mi < grid.methods.size(); ++mi) {
          std::vector<const ReplicateOutcome*> cell;
          cell.reserve(results.size());
          for (const auto& rep : results) cell.push_back(&rep[si * grid.methods.size() + mi]);
          auto rep = detail::summarize(cell, truths.at(re), grid.level);
          rep.studies = j;
          rep.per_study = grid.per_study;
          rep.random_effects = re;
          rep.scenario = grid.scenarios[si];
          rep.method = grid.methods[mi];
          if (static_cast<double>(rep.failed) > grid.failure_cap * static_cast<double>(rep.replications)) {
            std::string msg = "simulation cell J=" + std::to_string(j) + (re ? " RE" : " noRE") +
                              " scenario " + std::to_string(rep.scenario) + " " + method_name(rep.method) +
                              ": " + std::to_string(rep.failed) + " of " + std::to_string(rep.replications) +
                              " replications failed";
            if (!rep.failure_messages.empty()) msg += " (first: " + rep.failure_messages.front() + ")";
            throw NumericError(msg);
          }
          reports.push_back(std::move(rep));
        }
    }
  }
  return reports;
}

}  // namespace drmsm::sim
