#include "catch_amalgamated.hpp"
#include "test_support.hpp"

#include "drmsm/glm.hpp"

#include <random>

using namespace drmsm;
using Catch::Matchers::WithinAbs;

namespace {

struct LogisticData {
  MatrixXd x;
  VectorXd y;
};

LogisticData draw_logistic(Index n, double b0, double b1, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z;
  std::uniform_real_distribution<double> u;
  LogisticData d{MatrixXd(n, 2), VectorXd(n)};
  for (Index i = 0; i < n; ++i) {
    const double x = z(rng);
    d.x(i, 0) = 1.0;
    d.x(i, 1) = x;
    d.y(i) = u(rng) < expit(b0 + b1 * x) ? 1.0 : 0.0;
  }
  return d;
}

// independent dense solve of the (weighted) normal equations
VectorXd normal_equations(const MatrixXd& x, const VectorXd& y, const VectorXd& w) {
  const MatrixXd xtw = x.transpose() * w.asDiagonal();
  return (xtw * x).llt().solve(xtw * y);
}

}  // namespace

TEST_CASE("intercept-only logistic fit of a balanced response is zero") {
  MatrixXd x = MatrixXd::Ones(6, 1);
  VectorXd y(6);
  y << 1, 0, 1, 0, 1, 0;
  const auto fit = fit_logistic(x, y);
  CHECK(fit.converged);
  CHECK_THAT(fit.coefficients(0), WithinAbs(0.0, 1e-12));
  CHECK(fit.score_norm <= 1e-8);
  CHECK_FALSE(fit.ridge_lambda);
}

TEST_CASE("perfect separation is flagged and ridge restores finite coefficients") {
  MatrixXd x(8, 2);
  VectorXd y(8);
  for (Index i = 0; i < 8; ++i) {
    x(i, 0) = 1.0;
    x(i, 1) = static_cast<double>(i) - 3.5;
    y(i) = i < 4 ? 0.0 : 1.0;
  }
  const auto plain = fit_logistic(x, y);
  CHECK_FALSE(plain.converged);
  CHECK_FALSE(plain.diagnostic.empty());

  LogisticOptions opt;
  opt.ridge = 1e-4;
  const auto ridge = fit_logistic(x, y, opt);
  CHECK(ridge.converged);
  CHECK(ridge.coefficients.allFinite());
  REQUIRE(ridge.ridge_lambda);
  CHECK(*ridge.ridge_lambda == 1e-4);

  const auto fb = fit_logistic_with_fallback(x, y);
  CHECK(fb.converged);
  REQUIRE(fb.ridge_lambda);
  CHECK(*fb.ridge_lambda >= 1e-6);
}

TEST_CASE("logistic MLE is consistent at n = 1e5") {
  for (std::uint64_t seed : {101u, 202u}) {
    const auto d = draw_logistic(100000, -0.5, 1.0, seed);
    const auto fit = fit_logistic(d.x, d.y);
    REQUIRE(fit.converged);
    CHECK_THAT(fit.coefficients(0), WithinAbs(-0.5, 0.05));
    CHECK_THAT(fit.coefficients(1), WithinAbs(1.0, 0.05));
  }
}

TEST_CASE("converged logistic fits satisfy the score equations") {
  const auto d = draw_logistic(2000, 0.3, -0.8, 5);
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.2, 3.0);
  LogisticOptions opt;
  opt.weights.resize(2000);
  opt.offset.resize(2000);
  for (Index i = 0; i < 2000; ++i) {
    opt.weights(i) = u(rng);
    opt.offset(i) = 0.5 * std::sin(static_cast<double>(i));
  }
  const auto fit = fit_logistic(d.x, d.y, opt);
  REQUIRE(fit.converged);
  VectorXd mu(2000);
  const VectorXd eta = d.x * fit.coefficients + opt.offset;
  for (Index i = 0; i < 2000; ++i) mu(i) = expit(eta(i));
  const VectorXd score = d.x.transpose() * (opt.weights.array() * (d.y - mu).array()).matrix();
  CHECK(score.lpNorm<Eigen::Infinity>() / 2000.0 <= 1e-8);
}

TEST_CASE("logistic fits with fractional responses") {
  MatrixXd x = testing::random_matrix(300, 2, 8);
  x.col(0).setOnes();
  VectorXd y(300);
  for (Index i = 0; i < 300; ++i) y(i) = expit(0.2 + 0.5 * x(i, 1));
  const auto fit = fit_logistic(x, y);
  REQUIRE(fit.converged);
  // the response is exactly on the model, so the fit recovers it
  CHECK_THAT(fit.coefficients(0), WithinAbs(0.2, 1e-6));
  CHECK_THAT(fit.coefficients(1), WithinAbs(0.5, 1e-6));
}

TEST_CASE("equal weights leave logistic coefficients unchanged") {
  const auto d = draw_logistic(500, 0.1, 0.9, 9);
  const auto base = fit_logistic(d.x, d.y);
  LogisticOptions opt;
  opt.weights = VectorXd::Constant(500, 3.7);
  const auto scaled = fit_logistic(d.x, d.y, opt);
  CHECK((base.coefficients - scaled.coefficients).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("a constant offset is absorbed by the intercept") {
  const auto d = draw_logistic(800, -0.2, 0.6, 10);
  const auto base = fit_logistic(d.x, d.y);
  LogisticOptions opt;
  opt.offset = VectorXd::Constant(800, 0.75);
  const auto off = fit_logistic(d.x, d.y, opt);
  CHECK_THAT(off.coefficients(0), WithinAbs(base.coefficients(0) - 0.75, 1e-7));
  CHECK_THAT(off.coefficients(1), WithinAbs(base.coefficients(1), 1e-7));
}

TEST_CASE("an offset fit matches the augmented design with its coefficient pinned at one") {
  // Score equations of the offset fit are the score equations of the
  // augmented design restricted to the free columns.
  const auto d = draw_logistic(1000, 0.4, -0.3, 12);
  VectorXd o(1000);
  for (Index i = 0; i < 1000; ++i) o(i) = 0.3 * d.x(i, 1) * d.x(i, 1) - 0.2;
  LogisticOptions opt;
  opt.offset = o;
  const auto fit = fit_logistic(d.x, d.y, opt);
  MatrixXd aug(1000, 3);
  aug << d.x, o;
  VectorXd beta(3);
  beta << fit.coefficients, 1.0;
  VectorXd mu(1000);
  for (Index i = 0; i < 1000; ++i) mu(i) = expit(aug.row(i).dot(beta));
  const VectorXd score = d.x.transpose() * (d.y - mu);
  CHECK(score.lpNorm<Eigen::Infinity>() / 1000.0 < 1e-8);
}

TEST_CASE("ridge path converges to the unpenalized solution") {
  const auto d = draw_logistic(600, 0.5, 1.5, 13);
  const auto base = fit_logistic(d.x, d.y);
  double last = std::numeric_limits<double>::infinity();
  for (double lambda : {1e-2, 1e-4, 1e-6}) {
    LogisticOptions opt;
    opt.ridge = lambda;
    const auto fit = fit_logistic(d.x, d.y, opt);
    REQUIRE(fit.converged);
    const double gap = (fit.coefficients - base.coefficients).norm();
    CHECK(gap < last);
    last = gap;
  }
  CHECK(last < 1e-4);
}

TEST_CASE("logistic argument errors") {
  MatrixXd x = MatrixXd::Ones(3, 1);
  VectorXd y(3);
  y << 0, 1, 0;
  LogisticOptions opt;
  opt.weights = VectorXd::Zero(3);
  CHECK_THROWS_AS(fit_logistic(x, y, opt), std::invalid_argument);
  CHECK_THROWS_AS(fit_logistic(x, VectorXd::Zero(2)), std::invalid_argument);
  VectorXd bad(3);
  bad << 0, 1.5, 0;
  CHECK_THROWS_AS(fit_logistic(x, bad), std::invalid_argument);
}

TEST_CASE("least squares on an exactly linear response") {
  MatrixXd x = testing::random_matrix(40, 3, 14);
  x.col(0).setOnes();
  VectorXd beta(3);
  beta << 1.5, -2.0, 0.25;
  const auto fit = fit_ols(x, x * beta);
  CHECK((fit.coefficients - beta).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("duplicated column is a rank-deficiency error naming it") {
  MatrixXd x = testing::random_matrix(20, 3, 15);
  x.col(2) = x.col(1);
  VectorXd y = VectorXd::Ones(20);
  try {
    fit_ols(x, y, {}, {"a", "b", "b_copy"});
    FAIL("expected an error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("b_copy") != std::string::npos);
  }
}

TEST_CASE("least squares agrees with a direct normal-equation solve") {
  for (std::uint64_t seed : {16u, 17u, 18u}) {
    MatrixXd x = testing::random_matrix(200, 5, seed);
    VectorXd y = testing::random_matrix(200, 1, seed + 100).col(0);
    VectorXd w = testing::random_matrix(200, 1, seed + 200).col(0).array().abs() + 0.1;
    const auto fit = fit_ols(x, y, w);
    const VectorXd ref = normal_equations(x, y, w);
    CHECK((fit.coefficients - ref).cwiseAbs().maxCoeff() < 1e-10);
    const VectorXd resid = y - x * fit.coefficients;
    const VectorXd ortho = x.transpose() * (w.array() * resid.array()).matrix();
    CHECK(ortho.lpNorm<Eigen::Infinity>() <= 1e-10 * (1.0 + (x.transpose() * w.asDiagonal() * y).lpNorm<Eigen::Infinity>()));
    const auto unweighted = fit_ols(x, y);
    CHECK((unweighted.coefficients - normal_equations(x, y, VectorXd::Ones(200))).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("predictions") {
  MatrixXd x = testing::random_matrix(10, 2, 19);
  GlmFit logit_fit;
  logit_fit.link = Link::Logit;
  logit_fit.coefficients = VectorXd::Zero(2);
  CHECK((predict(logit_fit, x).array() == 0.5).all());

  GlmFit id;
  id.link = Link::Identity;
  id.coefficients = VectorXd::Zero(2);
  VectorXd o = testing::random_matrix(10, 1, 20).col(0);
  CHECK(predict(id, x, o) == o);

  VectorXd y = testing::random_matrix(10, 1, 21).col(0);
  const auto ols = fit_ols(x, y);
  const VectorXd fitted = x * normal_equations(x, y, VectorXd::Ones(10));
  CHECK((predict(ols, x) - fitted).cwiseAbs().maxCoeff() < 1e-12);

  logit_fit.coefficients << 800.0, -800.0;
  const VectorXd p = predict(logit_fit, x);
  CHECK((p.array() > 0.0).all());
  CHECK((p.array() < 1.0).all());
  CHECK_THROWS_AS(predict(logit_fit, MatrixXd::Ones(3, 3)), std::invalid_argument);
}
