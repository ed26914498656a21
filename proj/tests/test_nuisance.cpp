#include "catch_amalgamated.hpp"
#include "test_support.hpp"

#include "drmsm/nuisance.hpp"

using namespace drmsm;
using Catch::Matchers::WithinAbs;

TEST_CASE("bounded outcome maps the sample range into the margins") {
  VectorXd y(4);
  y << -3.0, 1.0, 5.0, 2.0;
  const auto b = bound_outcome(y, 0.005);
  CHECK_THAT(b.scaled.minCoeff(), WithinAbs(0.005, 1e-15));
  CHECK_THAT(b.scaled.maxCoeff(), WithinAbs(0.995, 1e-15));
  for (Index i = 0; i < 4; ++i) {
    CHECK_THAT(b.bounds.to_original(b.scaled(i)), WithinAbs(y(i), 1e-12));
    CHECK_THAT(b.bounds.to_bounded(y(i)), WithinAbs(b.scaled(i), 1e-15));
  }
  // a unit difference on the bounded scale is `scale` outcome units
  CHECK_THAT(b.bounds.to_original(0.6) - b.bounds.to_original(0.5), WithinAbs(0.1 * b.bounds.scale(), 1e-12));
  CHECK_THROWS_AS(bound_outcome(VectorXd::Constant(3, 2.0)), DataError);
}

TEST_CASE("outcome regressions are trained on their own arm") {
  const auto sim = testing::simulated(8, 60, false, 21);
  const auto& data = sim.data;
  const auto avail = derive_availability(data);
  const auto adj = build_adjustment_set(data, 0);
  const auto y = bound_outcome(data.outcome());
  const auto fit = fit_outcome(data, avail, adj, y.scaled, ModelSpec::main());

  // oracle: direct least squares on the treated rows with an intercept
  const MatrixXd x = adjustment_matrix(data, avail, adj);
  std::vector<Index> treated;
  for (Index i = 0; i < x.rows(); ++i)
    if (data.treatment(0)(i) == 1.0) treated.push_back(i);
  MatrixXd xt(static_cast<Index>(treated.size()), x.cols() + 1);
  VectorXd yt(xt.rows());
  for (Index r = 0; r < xt.rows(); ++r) {
    xt(r, 0) = 1.0;
    xt.row(r).tail(x.cols()) = x.row(treated[static_cast<std::size_t>(r)]);
    yt(r) = y.scaled(treated[static_cast<std::size_t>(r)]);
  }
  const auto kept = independent_columns(xt);
  const MatrixXd xk = select_columns(xt, kept);
  const VectorXd b = (xk.transpose() * xk).ldlt().solve(xk.transpose() * yt);
  MatrixXd xall(x.rows(), x.cols() + 1);
  xall << VectorXd::Ones(x.rows()), x;
  const VectorXd pred = (select_columns(xall, kept) * b).array().max(0.005).min(0.995).matrix();
  CHECK((fit.qbar1 - pred).cwiseAbs().maxCoeff() < 1e-9);

  CHECK(fit.qbar1.minCoeff() >= 0.005);
  CHECK(fit.qbar0.maxCoeff() <= 0.995);
}

TEST_CASE("null outcome model predicts the arm mean") {
  const auto sim = testing::simulated(6, 50, false, 22);
  const auto& data = sim.data;
  const auto avail = derive_availability(data);
  const auto adj = build_adjustment_set(data, 0);
  const auto y = bound_outcome(data.outcome());
  const auto fit = fit_outcome(data, avail, adj, y.scaled, ModelSpec::null());
  double s1 = 0, n1 = 0, s0 = 0, n0 = 0;
  for (Index i = 0; i < y.scaled.size(); ++i) {
    if (data.treatment(0)(i) == 1.0) { s1 += y.scaled(i); ++n1; }
    else { s0 += y.scaled(i); ++n0; }
  }
  CHECK_THAT(fit.qbar1(0), WithinAbs(s1 / n1, 1e-12));
  CHECK_THAT(fit.qbar0(5), WithinAbs(s0 / n0, 1e-12));
  CHECK(fit.qbar1.maxCoeff() - fit.qbar1.minCoeff() < 1e-12);
}

TEST_CASE("propensity factorizes into access and prescription components") {
  const auto sim = testing::simulated(20, 40, false, 23);
  const auto& data = sim.data;
  const auto avail = derive_availability(data);
  const auto adj = build_adjustment_set(data, 0);
  const auto g = fit_propensity(data, avail, adj, ModelSpec::main(), ModelSpec::main(), 0.001);

  CHECK(((g.g_treat - g.g1.cwiseProduct(g.g2)).array().abs() < 1e-15).all());
  CHECK(((g.g_treat + g.g_untreat).array() == 1.0).all());
  CHECK(g.g1.minCoeff() >= 0.001);
  CHECK(g.g1.maxCoeff() <= 0.999);
  CHECK(g.g2.minCoeff() >= 0.001);

  // g1 oracle: logistic fit on the records in studies with access
  const MatrixXd x = adjustment_matrix(data, avail, adj);
  const VectorXd d = avail.for_records(data, 0);
  std::vector<Index> rows;
  for (Index i = 0; i < d.size(); ++i)
    if (d(i) == 1.0) rows.push_back(i);
  MatrixXd xa(static_cast<Index>(rows.size()), x.cols() + 1);
  VectorXd aa(xa.rows());
  for (Index r = 0; r < xa.rows(); ++r) {
    xa(r, 0) = 1.0;
    xa.row(r).tail(x.cols()) = x.row(rows[static_cast<std::size_t>(r)]);
    aa(r) = data.treatment(0)(rows[static_cast<std::size_t>(r)]);
  }
  const auto kept = independent_columns(xa);
  const auto ref = fit_logistic(select_columns(xa, kept), aa);
  REQUIRE(ref.converged);
  REQUIRE(g.g1_model);
  CHECK((g.g1_model->fit.coefficients - ref.coefficients).cwiseAbs().maxCoeff() < 1e-6);

  // g2 uses study-level columns only and is constant within a study
  REQUIRE(g.g2_model);
  for (const auto& c : g.g2_model->columns) CHECK((c == "(intercept)" || c == "s_1"));
  for (std::size_t j = 0; j < data.num_studies(); ++j)
    for (auto i : data.members(j))
      CHECK(g.g2_raw(static_cast<Index>(i)) == g.g2_raw(static_cast<Index>(data.members(j).front())));
}

TEST_CASE("universal access gives a degenerate access model truncated at 1 - alpha") {
  auto sim = testing::simulated(6, 50, false, 24);
  const auto& data = sim.data;
  const auto avail = derive_availability(data);
  // force availability of treatment 1 everywhere
  AvailabilityMatrix all = avail;
  all.d.col(0).setOnes();
  const auto adj = build_adjustment_set(data, 0);
  const auto g = fit_propensity(data, all, adj, ModelSpec::main(), ModelSpec::main(), 0.01);
  CHECK(g.g2_degenerate);
  CHECK((g.g2_raw.array() == 1.0).all());
  CHECK((g.g2.array() == 0.99).all());
  CHECK_THROWS_AS(fit_propensity(data, avail, adj, ModelSpec::main(), ModelSpec::main(), 0.7), ConfigError);
}

TEST_CASE("aliased adjustment columns are pruned instead of failing") {
  const auto sim = testing::simulated(6, 50, false, 25);
  const auto& base = sim.data;
  MatrixXd x(base.covariates().rows(), base.covariates().cols() + 1);
  x << base.covariates(), base.covariate(1);
  auto schema = base.schema();
  schema.push_back({"w_copy", CovariateRole::Individual, ColumnKind::Continuous});
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < base.size(); ++i) labels.push_back(base.study_labels()[base.study_of(i)]);
  const PooledDataset data(labels, base.outcome(), base.treatment_names(), base.treatments(), schema, x);
  const auto avail = derive_availability(data);
  const auto adj = build_adjustment_set(data, 0);
  const auto y = bound_outcome(data.outcome());
  const auto q = fit_outcome(data, avail, adj, y.scaled, ModelSpec::main());
  CHECK(std::find(q.q1.dropped.begin(), q.q1.dropped.end(), "w_copy") != q.q1.dropped.end());
}

TEST_CASE("model specs naming unknown or ineligible columns are config errors") {
  const auto sim = testing::simulated(6, 40, false, 26);
  const auto& data = sim.data;
  const auto avail = derive_availability(data);
  const auto adj = build_adjustment_set(data, 0);
  const auto y = bound_outcome(data.outcome());
  CHECK_THROWS_AS(fit_outcome(data, avail, adj, y.scaled, ModelSpec::of({"w_9"})), ConfigError);
  CHECK_THROWS_AS(fit_propensity(data, avail, adj, ModelSpec::main(), ModelSpec::of({"w_1"})), ConfigError);
  const auto q = fit_outcome(data, avail, adj, y.scaled, ModelSpec::of({"w_1", "a_2"}));
  CHECK(q.q1.columns == std::vector<std::string>{"(intercept)", "w_1", "a_2"});
}

TEST_CASE("binary outcomes default to a logit outcome model") {
  const auto sim = testing::simulated(6, 60, false, 27);
  VectorXd yb = (sim.data.outcome().array() > sim.data.outcome().mean()).cast<double>();
  const auto data = sim.data.with_outcome(yb);
  const auto avail = derive_availability(data);
  const auto adj = build_adjustment_set(data, 0);
  const auto nf = fit_nuisance(data, avail, adj);
  CHECK(nf.outcome.q1.fit.link == Link::Logit);
  NuisanceSpec forced;
  forced.outcome_link = Link::Identity;
  CHECK(fit_nuisance(data, avail, adj, forced).outcome.q1.fit.link == Link::Identity);
}
