#include "catch_amalgamated.hpp"
#include "test_support.hpp"

#include "drmsm/inference.hpp"

#include <random>

using namespace drmsm;
using Catch::Matchers::WithinAbs;

namespace {

// Double sum over within-study pairs (i, m), i = m included.
MatrixXd cluster_double_sum(const MatrixXd& eif, const std::vector<std::size_t>& cluster) {
  const MatrixXd e = eif.rowwise() - eif.colwise().mean();
  const Index n = e.rows();
  MatrixXd out = MatrixXd::Zero(e.cols(), e.cols());
  for (Index i = 0; i < n; ++i)
    for (Index m = 0; m < n; ++m)
      if (cluster[static_cast<std::size_t>(i)] == cluster[static_cast<std::size_t>(m)])
        out += e.row(i).transpose() * e.row(m);
  return out / static_cast<double>(n * n);
}

// Brute force: R is the size of the largest subset S with max_{S} p <= |S| q / m;
// BH rejects every p <= R q / m.
std::vector<bool> bh_brute_force(const std::vector<double>& p, double q) {
  const std::size_t m = p.size();
  std::size_t best = 0;
  for (std::size_t mask = 1; mask < (std::size_t{1} << m); ++mask) {
    std::size_t size = 0;
    double worst = 0.0;
    for (std::size_t i = 0; i < m; ++i)
      if (mask >> i & 1U) {
        ++size;
        worst = std::max(worst, p[i]);
      }
    if (worst <= static_cast<double>(size) * q / static_cast<double>(m)) best = std::max(best, size);
  }
  std::vector<bool> reject(m, false);
  for (std::size_t i = 0; i < m; ++i) reject[i] = best > 0 && p[i] <= static_cast<double>(best) * q / static_cast<double>(m);
  return reject;
}

}  // namespace

TEST_CASE("clustered sandwich equals the within-study double sum") {
  for (std::uint64_t seed : {61u, 62u, 63u}) {
    const MatrixXd eif = testing::random_matrix(90, 4, seed);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, 6);
    std::vector<std::size_t> cluster(90);
    for (auto& c : cluster) c = pick(rng);
    const auto v = sandwich_clustered(eif, cluster, 7);
    CHECK((v.cov - cluster_double_sum(eif, cluster)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("singleton clusters reproduce the iid sandwich exactly") {
  const MatrixXd eif = testing::random_matrix(50, 3, 64);
  std::vector<std::size_t> cluster(50);
  for (std::size_t i = 0; i < 50; ++i) cluster[i] = i;
  const auto c = sandwich_clustered(eif, cluster, 50);
  const auto i = sandwich_iid(eif);
  CHECK(c.cov == i.cov);
  CHECK(c.se == i.se);
}

TEST_CASE("iid sandwich is the empirical variance over n") {
  const MatrixXd eif = testing::random_matrix(40, 2, 65);
  const auto v = sandwich_iid(eif);
  for (Index a = 0; a < 2; ++a) {
    const VectorXd col = eif.col(a);
    const double var = (col.array() - col.mean()).square().sum() / 40.0;
    CHECK_THAT(v.cov(a, a), WithinAbs(var / 40.0, 1e-15));
    CHECK_THAT(v.se(a), WithinAbs(std::sqrt(var / 40.0), 1e-15));
  }
}

TEST_CASE("small-sample correction multiplies by J / (J - 1)") {
  const MatrixXd eif = testing::random_matrix(30, 2, 66);
  std::vector<std::size_t> cluster(30);
  for (std::size_t i = 0; i < 30; ++i) cluster[i] = i % 5;
  const auto plain = sandwich_clustered(eif, cluster, 5);
  const auto corrected = sandwich_clustered(eif, cluster, 5, {true});
  CHECK((corrected.cov - plain.cov * 1.25).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("standard errors are nonnegative") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const MatrixXd eif = testing::random_matrix(12, 5, 70 + seed);
    std::vector<std::size_t> cluster(12);
    for (std::size_t i = 0; i < 12; ++i) cluster[i] = i % 2;
    const auto v = sandwich_clustered(eif, cluster, 2);
    CHECK((v.cov.diagonal().array() >= 0.0).all());
    CHECK((v.se.array() >= 0.0).all());
  }
}

TEST_CASE("sandwich argument errors") {
  const MatrixXd eif = testing::random_matrix(4, 2, 80);
  std::vector<std::size_t> cluster{0, 0, 0, 0};
  CHECK_THROWS_AS(sandwich_clustered(eif, cluster, 1), std::invalid_argument);
  std::vector<std::size_t> bad{0, 1, 5, 1};
  CHECK_THROWS_AS(sandwich_clustered(eif, bad, 2), std::invalid_argument);
  CHECK_THROWS_AS(sandwich_iid(MatrixXd::Zero(1, 2)), std::invalid_argument);
}

TEST_CASE("Wald intervals and two-sided p-values") {
  VectorXd b(2), se(2);
  b << 1.0, -0.5;
  se << 0.5, 0.25;
  const auto ci = wald_ci(b, se, 0.95);
  const double z = 1.959963984540054;
  CHECK_THAT(ci[0].lower, WithinAbs(1.0 - z * 0.5, 1e-12));
  CHECK_THAT(ci[1].upper, WithinAbs(-0.5 + z * 0.25, 1e-12));
  CHECK_THAT(two_sided_p(z, 1.0), WithinAbs(0.05, 1e-12));
  CHECK_THAT(two_sided_p(0.0, 1.0), WithinAbs(1.0, 1e-15));
  CHECK_THROWS_AS(wald_ci(b, se, 1.0), std::invalid_argument);
}

TEST_CASE("BH step-up matches the all-subsets definition") {
  std::mt19937_64 rng(90);
  std::uniform_real_distribution<double> u(0.0, 0.2);
  for (int trial = 0; trial < 400; ++trial) {
    const std::size_t m = 1 + static_cast<std::size_t>(trial % 8);
    std::vector<double> p(m);
    for (auto& v : p) v = u(rng);
    if (trial % 5 == 0 && m > 1) p[1] = p[0];  // ties
    for (double q : {0.05, 0.2}) {
      const auto got = bh_adjust(p, q);
      const auto want = bh_brute_force(p, q);
      CHECK(got.reject == want);
      std::size_t count = 0;
      for (bool r : want) count += r ? 1 : 0;
      CHECK(got.rejections == count);
    }
  }
}

TEST_CASE("BH edge cases") {
  CHECK(bh_adjust(std::vector<double>{}).reject.empty());
  const std::vector<double> p{0.01, 0.02, 0.03, 0.04};
  const auto all = bh_adjust(p, 0.05);
  CHECK(all.rejections == 4);
  CHECK(all.threshold == 0.04);
  const std::vector<double> none{0.5, 0.9};
  CHECK(bh_adjust(none, 0.05).rejections == 0);
}

TEST_CASE("Rubin's rules on a three-imputation hand example") {
  MatrixXd est(3, 1), var(3, 1);
  est << 1, 2, 3;
  var << 1, 1, 1;
  const auto r = rubin_combine(est, var);
  CHECK_THAT(r.beta(0), WithinAbs(2.0, 1e-15));
  CHECK_THAT(r.between_var(0), WithinAbs(1.0, 1e-15));
  CHECK_THAT(r.within_var(0), WithinAbs(1.0, 1e-15));
  CHECK_THAT(r.total_var(0), WithinAbs(7.0 / 3.0, 1e-15));
}

TEST_CASE("Rubin's rules degenerate cases") {
  MatrixXd one(1, 2), v1(1, 2);
  one << 0.4, -1.0;
  v1 << 0.1, 0.2;
  const auto r1 = rubin_combine(one, v1);
  CHECK(r1.beta == one.row(0).transpose());
  CHECK(r1.between_var.isZero());
  CHECK(r1.total_var == v1.row(0).transpose());

  MatrixXd same(4, 1), vs(4, 1);
  same << 2, 2, 2, 2;
  vs << 0.5, 0.7, 0.6, 0.2;
  const auto r2 = rubin_combine(same, vs);
  CHECK(r2.between_var(0) == 0.0);
  CHECK_THAT(r2.total_var(0), WithinAbs(0.5, 1e-15));
  CHECK_THROWS_AS(rubin_combine(same, v1), std::invalid_argument);
}
