#include "catch_amalgamated.hpp"
#include "test_support.hpp"

#include "drmsm/estimators.hpp"

using namespace drmsm;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

struct Fixture {
  sim::SimulatedData sim;
  AvailabilityMatrix avail;
  AdjustmentSet adj;
  ModifierDesign design;
  NuisanceFits nf;

  explicit Fixture(std::uint64_t seed, std::size_t studies = 10, bool re = false,
                   ModelSpec q = ModelSpec::main(), ModelSpec g = ModelSpec::main())
      : sim(testing::simulated(studies, 150, re, seed)),
        avail(derive_availability(sim.data)),
        adj(build_adjustment_set(sim.data, 0)),
        design(build_modifier_design(sim.data, avail, adj, sim::modifier_names(), false)) {
    NuisanceSpec spec;
    spec.q = q;
    spec.g1 = g;
    spec.g2 = g;
    nf = fit_nuisance(sim.data, avail, adj, spec);
  }
};

}  // namespace

TEST_CASE("estimating function on a three-record example") {
  MatrixXd v(3, 2);
  v << 1, -1, 1, 0, 1, 1;
  VectorXd y(3), a(3), q1(3), q0(3), gt(3), beta(2);
  y << 0.2, 0.6, 0.9;
  a << 1, 0, 1;
  q1 << 0.3, 0.5, 0.8;
  q0 << 0.1, 0.4, 0.5;
  gt << 0.5, 0.4, 0.8;
  beta << 0.2, 0.1;
  const VectorXd gu = (1.0 - gt.array()).matrix();
  const auto r = eif_values(y, a, v, q1, q0, gt, gu, beta);

  // residuals worked by hand: h (y - Q_A) + Q1 - Q0 - V'beta
  const double r0 = 2.0 * (0.2 - 0.3) + 0.2 - 0.1;
  const double r1 = -(1.0 / 0.6) * (0.6 - 0.4) + 0.1 - 0.2;
  const double r2 = 1.25 * (0.9 - 0.8) + 0.3 - 0.3;
  // M = diag(1, 2/3), so M^{-1} D scales the slope component by 3/2
  CHECK_THAT(r.m_matrix(0, 0), WithinAbs(1.0, 1e-15));
  CHECK_THAT(r.m_matrix(1, 1), WithinAbs(2.0 / 3.0, 1e-15));
  CHECK_THAT(r.m_matrix(0, 1), WithinAbs(0.0, 1e-15));
  CHECK_THAT(r.eif(0, 0), WithinAbs(r0, 1e-14));
  CHECK_THAT(r.eif(0, 1), WithinAbs(-1.5 * r0, 1e-14));
  CHECK_THAT(r.eif(1, 0), WithinAbs(r1, 1e-14));
  CHECK_THAT(r.eif(1, 1), WithinAbs(0.0, 1e-14));
  CHECK_THAT(r.eif(2, 0), WithinAbs(r2, 1e-14));
  CHECK_THAT(r.eif(2, 1), WithinAbs(1.5 * r2, 1e-14));
  CHECK_THAT(r.mean_d(0), WithinAbs((r0 + r1 + r2) / 3.0, 1e-14));
  CHECK_THAT(r.mean_d(1), WithinAbs((-r0 + r2) / 3.0, 1e-14));
}

TEST_CASE("singular normalizing matrix is an error") {
  MatrixXd v(3, 2);
  v << 1, 1, 1, 1, 1, 1;
  VectorXd ones = VectorXd::Constant(3, 0.5);
  CHECK_THROWS_AS(eif_values(ones, ones, v, ones, ones, ones, ones, VectorXd::Zero(2)), NumericError);
}

TEST_CASE("A-IPTW equals a direct normal-equation solve") {
  for (std::uint64_t seed : {31u, 32u}) {
    Fixture f(seed);
    const auto est = aiptw(f.sim.data, f.adj, f.design, f.nf);
    const auto& q = f.nf.outcome;
    const auto& g = f.nf.propensity;
    const auto& y = f.nf.y.scaled;
    const VectorXd a = f.sim.data.treatment(0);
    VectorXd u(a.size());
    for (Index i = 0; i < a.size(); ++i) {
      const double aipw1 = a(i) / g.g_treat(i) * (y(i) - q.qbar1(i)) + q.qbar1(i);
      const double aipw0 = (1.0 - a(i)) / g.g_untreat(i) * (y(i) - q.qbar0(i)) + q.qbar0(i);
      u(i) = aipw1 - aipw0;
    }
    const MatrixXd& v = f.design.matrix;
    const VectorXd ref = (v.transpose() * v).llt().solve(v.transpose() * u);
    CHECK((est.beta_scaled - ref).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((est.beta - ref * f.nf.y.bounds.scale()).cwiseAbs().maxCoeff() < 1e-11);
    CHECK(est.eif_residual < 1e-12);
  }
}

TEST_CASE("TMLE solves the estimating equation in every scenario") {
  for (int s = 1; s <= 4; ++s) {
    const auto cfg = sim::ScenarioConfig::for_scenario(s, 10, false);
    auto spec = [](sim::ModelQuality m) { return m == sim::ModelQuality::Correct ? ModelSpec::main() : ModelSpec::null(); };
    Fixture f(40 + static_cast<std::uint64_t>(s), 10, s % 2 == 0, spec(cfg.q_spec), spec(cfg.g_spec));
    const auto est = tmle(f.sim.data, f.adj, f.design, f.nf);
    CHECK(est.eif_residual <= 1e-6);
    CHECK(est.qstar1.minCoeff() > 0.0);
    CHECK(est.qstar1.maxCoeff() < 1.0);
    // beta is the projection of the targeted contrast onto V
    const VectorXd ref = fit_ols(f.design.matrix, est.qstar1 - est.qstar0).coefficients;
    CHECK((est.beta_scaled - ref).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("TMLE is shift invariant and scale equivariant in the outcome") {
  Fixture f(50);
  const auto& data = f.sim.data;
  const auto base = tmle(data, f.adj, f.design, f.nf);
  auto refit = [&](const VectorXd& y) {
    const auto d = data.with_outcome(y);
    const auto nf = fit_nuisance(d, f.avail, f.adj);
    return tmle(d, f.adj, f.design, nf).beta;
  };
  const VectorXd shifted = refit((data.outcome().array() + 12.5).matrix());
  CHECK((shifted - base.beta).cwiseAbs().maxCoeff() < 1e-8);
  const VectorXd scaled = refit(data.outcome() * 3.0);
  CHECK((scaled - 3.0 * base.beta).cwiseAbs().maxCoeff() < 1e-8);
  const VectorXd both = refit((data.outcome().array() * 0.25 - 4.0).matrix());
  CHECK((both - 0.25 * base.beta).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("plug-in estimator projects the initial contrast") {
  Fixture f(51);
  const auto est = plugin(f.sim.data, f.adj, f.design, f.nf);
  const VectorXd diff = f.nf.outcome.qbar1 - f.nf.outcome.qbar0;
  const MatrixXd& v = f.design.matrix;
  const VectorXd ref = (v.transpose() * v).llt().solve(v.transpose() * diff);
  CHECK((est.beta_scaled - ref).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("weight summaries report the inverse propensities") {
  Fixture f(52);
  const auto est = tmle(f.sim.data, f.adj, f.design, f.nf);
  const VectorXd a = f.sim.data.treatment(0);
  double max_t = 0, max_u = 0;
  for (Index i = 0; i < a.size(); ++i) {
    if (a(i) == 1.0) max_t = std::max(max_t, 1.0 / f.nf.propensity.g_treat(i));
    else max_u = std::max(max_u, 1.0 / f.nf.propensity.g_untreat(i));
  }
  CHECK(est.weights.max_treated == max_t);
  CHECK(est.weights.max_untreated == max_u);
  CHECK(est.weights.p99_treated <= max_t);
}

TEST_CASE("binary outcome with an intercept-only working model") {
  Fixture f(53);
  VectorXd yb = (f.sim.data.outcome().array() > 1.5).cast<double>();
  const auto data = f.sim.data.with_outcome(yb);
  const auto nf = fit_nuisance(data, f.avail, f.adj);
  const auto design = build_modifier_design(data, f.avail, f.adj, {});
  const auto t = tmle(data, f.adj, design, nf);
  const auto a = aiptw(data, f.adj, design, nf);
  CHECK(t.eif_residual <= 1e-6);
  CHECK(t.beta.size() == 1);
  CHECK(std::abs(t.beta(0)) <= 1.0);
  // both are consistent for the same risk difference
  CHECK_THAT(t.beta(0), WithinAbs(a.beta(0), 0.05));
}

TEST_CASE("mismatched inputs are rejected") {
  Fixture f(54);
  Fixture g(55, 6);
  CHECK_THROWS_AS(tmle(f.sim.data, f.adj, g.design, f.nf), std::invalid_argument);
}
