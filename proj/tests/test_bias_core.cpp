#include <cmath>
#include <set>

#include "doctest.h"
#include "wsc/bias_core.hpp"
#include "wsc/rng.hpp"
#include "wsc/stats.hpp"

using namespace wsc;

namespace {

RctSummary base_rct(long n_trt = 50, long n_contr = 50) {
  RctSummary r;
  r.n_trt = n_trt;
  r.n_contr = n_contr;
  return r;
}

}  // namespace

TEST_SUITE("bias_core") {

TEST_CASE("pooled sd: equal-SD pooling returns the common SD") {
  auto r = base_rct(3, 3);
  r.sd_trt = 2.0;
  r.sd_contr = 2.0;
  CHECK(pooled_sd(r) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("pooled sd: unequal arm SDs pool with n-1 weights") {
  auto r = base_rct(5, 3);
  r.sd_trt = 3.0;
  r.sd_contr = 1.0;
  // (4*9 + 2*1) / 6 = 38/6
  CHECK(pooled_sd(r) == doctest::Approx(std::sqrt(38.0 / 6.0)).epsilon(1e-12));
}

TEST_CASE("pooled sd: sd_trt alone is used as-is") {
  auto r = base_rct();
  r.sd_trt = 1.7;
  CHECK(pooled_sd(r) == doctest::Approx(1.7).epsilon(1e-12));
}

TEST_CASE("pooled sd: backed out of se_rct") {
  auto r = base_rct(50, 50);
  r.se_rct = 0.2;
  CHECK(pooled_sd(r) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("pooled sd: backed out of the F statistic") {
  auto r = base_rct(50, 50);
  r.theta_rct = 0.4;
  r.f_stat = 4.0;
  CHECK(pooled_sd(r) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("pooled sd: p-value route inverts the t statistic") {
  // forward-simulate: known S, back out p, recover S
  const double S = 1.3;
  const long nt = 40, nc = 60;
  const double inv_n = 1.0 / nt + 1.0 / nc;
  const double theta = 0.5;
  const double t = theta / (S * std::sqrt(inv_n));
  const double p = 2.0 * (1.0 - t_cdf(t, double(nt + nc - 2)));
  auto r = base_rct(nt, nc);
  r.theta_rct = theta;
  r.p_value = p;
  CHECK(pooled_sd(r) == doctest::Approx(S).epsilon(1e-9));
}

TEST_CASE("pooled sd: cascade order is strict") {
  auto r = base_rct(5, 3);
  r.sd_trt = 3.0;
  r.sd_contr = 1.0;
  r.se_rct = 0.123;   // would give a wildly different answer
  r.theta_rct = 0.4;
  r.f_stat = 4.0;
  r.p_value = 0.04;
  CHECK(pooled_sd(r) == doctest::Approx(std::sqrt(38.0 / 6.0)).epsilon(1e-12));

  auto r2 = base_rct(5, 3);
  r2.sd_contr = 1.0;  // control SD without treatment SD cannot pool
  r2.se_rct = 0.2;
  const double inv_n = 1.0 / 5.0 + 1.0 / 3.0;
  CHECK(pooled_sd(r2) == doctest::Approx(0.2 / std::sqrt(inv_n)).epsilon(1e-12));
}

TEST_CASE("pooled sd: error taxonomy") {
  auto none = base_rct();
  CHECK_THROWS_AS(pooled_sd(none), NoSdSource);

  auto degen = base_rct();
  degen.theta_rct = 0.4;
  degen.f_stat = 0.0;
  CHECK_THROWS_AS(pooled_sd(degen), DegenerateStatistic);

  auto badp = base_rct();
  badp.theta_rct = 0.4;
  badp.p_value = 1.0;
  CHECK_THROWS_AS(pooled_sd(badp), ValidationError);

  auto badn = base_rct(1, 50);
  badn.sd_trt = 1.0;
  CHECK_THROWS_AS(pooled_sd(badn), InvalidSampleSize);

  auto badsd = base_rct();
  badsd.sd_trt = -1.0;
  CHECK_THROWS_AS(pooled_sd(badsd), NonPositiveSd);
}

TEST_CASE("standardize: frozen examples") {
  CHECK(standardize_bias(0.3, 0.3, 1.0, +1) == doctest::Approx(0.0));
  CHECK(standardize_bias(0.5, 0.3, 0.4, +1) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(standardize_bias(5.0, 3.0, 4.0, +1) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("standardize: scale invariance and antisymmetry") {
  Rng rng(7u);
  for (int i = 0; i < 200; ++i) {
    const double a = rng.normal(0, 2);
    const double b = rng.normal(0, 2);
    const double S = std::exp(rng.uniform(-2.0, 2.0));
    const double c = std::exp(rng.uniform(-3.0, 3.0));
    const double y = standardize_bias(a, b, S, +1);
    CHECK(standardize_bias(c * a, c * b, c * S, +1) == doctest::Approx(y).epsilon(1e-10));
    CHECK(standardize_bias(a, b, S, -1) == doctest::Approx(-y).epsilon(1e-12));
  }
  CHECK_THROWS_AS(standardize_bias(1.0, 0.0, 0.0, +1), NonPositiveSd);
}

TEST_CASE("bias se: frozen examples") {
  CHECK(bias_se(0.1, 0.1, 1.0, 100, 100, 100) == doctest::Approx(0.1).epsilon(1e-12));
  // covariance vanishes as the shared treatment arm grows
  CHECK(bias_se(0.1, 0.1, 1.0, 1000000000000L, 100, 100) ==
        doctest::Approx(std::sqrt(0.02)).epsilon(1e-6));
}

TEST_CASE("bias se: bounds, monotonicity, exchange symmetry") {
  const double cap = std::sqrt(0.1 * 0.1 + 0.2 * 0.2) / 1.5;
  double prev = 0.0;
  for (long nt : {2L, 5L, 20L, 100L, 10000L}) {
    const double v = bias_se(0.1, 0.2, 1.5, nt, 80, 40);
    CHECK(v > prev);
    CHECK(v < cap);
    prev = v;
  }
  CHECK(bias_se(0.1, 0.2, 1.5, 30, 80, 40) == doctest::Approx(bias_se(0.1, 0.2, 1.5, 30, 40, 80)));
  CHECK_THROWS_AS(bias_se(0.1, 0.2, 1.5, 30, 1, 40), InvalidSampleSize);
  CHECK_THROWS_AS(bias_se(0.0, 0.2, 1.5, 30, 40, 40), NonPositiveSd);
}

TEST_CASE("bias se: Monte Carlo oracle with a shared treatment arm") {
  // Unit-variance outcomes, all groups of size n. Group means are sufficient:
  // each is N(0, 1/n). theta_obs and theta_rct share the treatment mean, so
  // y = theta_obs - theta_rct has SD sqrt(2/n) exactly; bias_se must agree.
  const long n = 200;
  const int reps = 100000;
  Rng rng(20240902u);
  const double gsd = 1.0 / std::sqrt(double(n));
  double sum = 0.0, ss = 0.0;
  for (int i = 0; i < reps; ++i) {
    const double mt = rng.normal(0, gsd);   // shared treatment mean
    const double mc = rng.normal(0, gsd);   // RCT control mean
    const double mq = rng.normal(0, gsd);   // comparison mean
    const double y = (mt - mq) - (mt - mc);
    sum += y;
    ss += y * y;
  }
  const double mean = sum / reps;
  const double sd = std::sqrt((ss - reps * mean * mean) / (reps - 1));
  const double se_arm = std::sqrt(2.0 / double(n));  // SE of each impact estimate
  const double predicted = bias_se(se_arm, se_arm, 1.0, n, n, n);
  CHECK(predicted == doctest::Approx(std::sqrt(2.0 / double(n))).epsilon(1e-12));
  CHECK(sd == doctest::Approx(predicted).epsilon(0.03));
}

TEST_CASE("classify: richness needs four distinct domains") {
  using D = CovariateDomain;
  auto cell = classify_design(true, true,
                              {D::kDemographics, D::kEducation, D::kSocioeconomic, D::kGeographic});
  CHECK(cell == DesignCell{true, true, true});
  CHECK(classify_design(false, false, {}) == DesignCell{false, false, false});
  CHECK(classify_design(true, false, {D::kDemographics, D::kEducation, D::kSocioeconomic}) ==
        DesignCell{true, false, false});
  // cardinality is all that matters
  auto other = classify_design(true, true,
                               {D::kHealthStatus, D::kHealthUtilization, D::kHealthExpenditures,
                                D::kBehavioralEmotional, D::kOther});
  CHECK(other.rich);
}

TEST_CASE("design cells: index round trip and element counts") {
  std::set<int> seen;
  for (int i = 0; i < kNumDesigns; ++i) {
    const auto cell = DesignCell::from_index(i);
    CHECK(cell.index() == i);
    seen.insert(cell.index());
    CHECK(cell.n_elements() == int(cell.pretest) + int(cell.local) + int(cell.rich));
  }
  CHECK(seen.size() == 8);
}

TEST_CASE("covariate domains: names round trip") {
  for (int i = 0; i < 10; ++i) {
    const auto d = CovariateDomain(i);
    const auto back = covariate_domain_from_string(to_string(d));
    REQUIRE(back.has_value());
    CHECK(*back == d);
  }
  CHECK(!covariate_domain_from_string("not a domain").has_value());
}

}  // TEST_SUITE
