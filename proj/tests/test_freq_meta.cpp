#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "wsc/errors.hpp"
#include "wsc/freq_meta.hpp"
#include "wsc/rng.hpp"
#include "wsc/stats.hpp"

using namespace wsc;

namespace {

ContrastRecord contrast(const std::string& study, const std::string& id, const std::string& dom,
                        int design, double y, double s_y) {
  ContrastRecord c;
  c.contrast_id = id;
  c.study_id = study;
  c.outcome_domain = dom;
  c.design = DesignCell::from_index(design);
  c.y = y;
  c.s_y = s_y;
  return c;
}

void add_study(Dataset& ds, const std::string& id) {
  for (const auto& s : ds.studies)
    if (s.study_id == id) return;
  ds.studies.push_back({id, false, false, 1, false});
}

// single-design hierarchy: n_dom domains per study, n_per contrasts per
// domain, equicorrelated sampling errors with correlation rho
Dataset make_sim(Rng& rng, int n_studies, int n_dom, int n_per, double mu0, double tau,
                 double omega, double phi, double s_y, double rho, int design = 0) {
  Dataset ds;
  int cid = 0;
  for (int s = 0; s < n_studies; ++s) {
    const std::string sid = "s" + std::to_string(s);
    add_study(ds, sid);
    const double zc = tau * rng.normal();
    const double shared = rng.normal();
    for (int d = 0; d < n_dom; ++d) {
      const double zf = omega * rng.normal();
      for (int k = 0; k < n_per; ++k) {
        const double eps = s_y * (std::sqrt(rho) * shared + std::sqrt(1.0 - rho) * rng.normal());
        const double y = mu0 + zc + zf + phi * rng.normal() + eps;
        ds.contrasts.push_back(
            contrast(sid, "c" + std::to_string(cid++), "dom" + std::to_string(d), design, y, s_y));
      }
    }
  }
  return ds;
}

// minimal fit object for exercising the summary formulas directly
FreqFit hand_fit(double mu, double var_mu, double tau2, double omega2, double phi2, double df) {
  FreqFit f;
  f.design_present[0] = true;
  f.mu_hat[0] = mu;
  f.tau2[0] = tau2;
  f.omega2[0] = omega2;
  f.phi2[0] = phi2;
  f.vcov_robust = Eigen::MatrixXd::Zero(kNumDesigns, kNumDesigns);
  f.vcov_robust(0, 0) = var_mu;
  f.satterthwaite_df[0] = df;
  f.n_studies[0] = 10;
  f.design_column.assign(kNumDesigns, -1);
  f.design_column[0] = 0;
  f.has_robust = true;
  return f;
}

const DesignCell kCell0 = DesignCell::from_index(0);

}  // namespace

TEST_SUITE("freq_meta") {

TEST_CASE("error covariance blocks") {
  Dataset ds;
  add_study(ds, "a");
  add_study(ds, "b");
  ds.contrasts.push_back(contrast("a", "c1", "d1", 0, 0.1, 0.1));
  ds.contrasts.push_back(contrast("a", "c2", "d2", 0, 0.2, 0.2));
  ds.contrasts.push_back(contrast("b", "c3", "d1", 0, 0.0, 0.3));

  auto V0 = build_error_cov(ds, 0.0);
  CHECK(V0(0, 0) == doctest::Approx(0.01));
  CHECK(V0(1, 1) == doctest::Approx(0.04));
  CHECK(V0(0, 1) == doctest::Approx(0.0));

  auto V = build_error_cov(ds, 0.8);
  CHECK(V(0, 0) == doctest::Approx(0.01));
  CHECK(V(0, 1) == doctest::Approx(0.016));
  CHECK(V(1, 0) == doctest::Approx(0.016));
  CHECK(V(1, 1) == doctest::Approx(0.04));
  CHECK(V(2, 2) == doctest::Approx(0.09));
  CHECK(V(0, 2) == doctest::Approx(0.0));
  CHECK(V(1, 2) == doctest::Approx(0.0));

  // two single-contrast studies stay diagonal for any rho
  Dataset ds2;
  add_study(ds2, "a");
  add_study(ds2, "b");
  ds2.contrasts.push_back(contrast("a", "c1", "d1", 0, 0.1, 0.1));
  ds2.contrasts.push_back(contrast("b", "c2", "d1", 0, 0.2, 0.2));
  auto V2 = build_error_cov(ds2, 0.9);
  CHECK(V2(0, 1) == doctest::Approx(0.0));

  CHECK_THROWS_AS(build_error_cov(ds, 1.0), ConfigError);
}

TEST_CASE("restricted log-likelihood matches a dense evaluation") {
  Dataset ds;
  add_study(ds, "a");
  add_study(ds, "b");
  ds.contrasts.push_back(contrast("a", "c1", "d1", 0, 0.12, 0.10));
  ds.contrasts.push_back(contrast("a", "c2", "d1", 0, -0.05, 0.15));
  ds.contrasts.push_back(contrast("a", "c3", "d2", 0, 0.30, 0.12));
  ds.contrasts.push_back(contrast("b", "c4", "d1", 0, 0.02, 0.20));
  ds.contrasts.push_back(contrast("b", "c5", "d1", 0, -0.11, 0.08));
  ds.contrasts.push_back(contrast("b", "c6", "d3", 0, 0.21, 0.25));

  FreqSpec spec;
  spec.rho = 0.8;
  const double tau2 = 0.02, omega2 = 0.01, phi2 = 0.03;

  Eigen::MatrixXd V = build_error_cov(ds, spec.rho);
  // study blocks: rows 0-2 and 3-5
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) {
      V(a, b) += tau2;
      V(3 + a, 3 + b) += tau2;
    }
  // domain groups: {0,1}, {2}, {3,4}, {5}
  V(0, 0) += omega2; V(0, 1) += omega2; V(1, 0) += omega2; V(1, 1) += omega2;
  V(2, 2) += omega2;
  V(3, 3) += omega2; V(3, 4) += omega2; V(4, 3) += omega2; V(4, 4) += omega2;
  V(5, 5) += omega2;
  for (int i = 0; i < 6; ++i) V(i, i) += phi2;

  Eigen::VectorXd y(6);
  y << 0.12, -0.05, 0.30, 0.02, -0.11, 0.21;
  Eigen::MatrixXd X = Eigen::MatrixXd::Ones(6, 1);

  Eigen::MatrixXd Vi = V.inverse();
  const double xvx = (X.transpose() * Vi * X)(0, 0);
  const double beta = (X.transpose() * Vi * y)(0, 0) / xvx;
  Eigen::VectorXd r = y - X * beta;
  const double dense = -0.5 * (std::log(V.determinant()) + std::log(xvx) +
                               (r.transpose() * Vi * r)(0, 0)) -
                       0.5 * 5.0 * std::log(2.0 * M_PI);

  std::array<double, kNumDesigns> t2{}, o2{}, p2{};
  t2[0] = tau2;
  o2[0] = omega2;
  p2[0] = phi2;
  CHECK(reml_loglik_at(ds, spec, t2, o2, p2) == doctest::Approx(dense).epsilon(1e-10));
}

TEST_CASE("balanced single cell reduces to the simple mean") {
  Dataset ds;
  const std::vector<double> ys = {0.1, -0.2, 0.3, 0.05, -0.12, 0.44};
  for (std::size_t i = 0; i < ys.size(); ++i) {
    const std::string sid = "s" + std::to_string(i);
    add_study(ds, sid);
    ds.contrasts.push_back(contrast(sid, "c" + std::to_string(i), "d1", 0, ys[i], 0.1));
  }
  FreqSpec spec;
  spec.rho = 0.0;
  auto fit = fit_freq(ds, spec);
  const double mean = std::accumulate(ys.begin(), ys.end(), 0.0) / double(ys.size());
  CHECK(fit.mu_hat[0] == doctest::Approx(mean).epsilon(1e-8));
  CHECK(fit.omega2[0] == 0.0);  // aliased groupings are pinned
  CHECK(fit.phi2[0] == 0.0);
  CHECK(!fit.omega_active[0]);
  CHECK(!fit.phi_active[0]);
  CHECK(fit.tau_active[0]);
}

TEST_CASE("pinned components reproduce generalized least squares") {
  Dataset ds;
  add_study(ds, "a");
  add_study(ds, "b");
  add_study(ds, "c");
  ds.contrasts.push_back(contrast("a", "c1", "d1", 0, 0.12, 0.10));
  ds.contrasts.push_back(contrast("a", "c2", "d2", 3, -0.05, 0.15));
  ds.contrasts.push_back(contrast("b", "c3", "d1", 0, 0.30, 0.12));
  ds.contrasts.push_back(contrast("b", "c4", "d1", 3, 0.02, 0.20));
  ds.contrasts.push_back(contrast("c", "c5", "d1", 0, -0.11, 0.08));
  ds.contrasts.push_back(contrast("c", "c6", "d3", 3, 0.21, 0.25));

  FreqSpec spec;
  spec.rho = 0.8;
  spec.estimate_components = false;
  auto fit = fit_freq(ds, spec);

  Eigen::MatrixXd V = build_error_cov(ds, spec.rho);
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(6, 2);
  X(0, 0) = X(2, 0) = X(4, 0) = 1.0;  // design 0
  X(1, 1) = X(3, 1) = X(5, 1) = 1.0;  // design 3
  Eigen::VectorXd y(6);
  y << 0.12, -0.05, 0.30, 0.02, -0.11, 0.21;
  Eigen::MatrixXd Vi = V.inverse();
  Eigen::VectorXd beta = (X.transpose() * Vi * X).inverse() * (X.transpose() * Vi * y);
  CHECK(fit.mu_hat[0] == doctest::Approx(beta[0]).epsilon(1e-9));
  CHECK(fit.mu_hat[3] == doctest::Approx(beta[1]).epsilon(1e-9));
  CHECK(fit.tau2[0] == 0.0);
}

TEST_CASE("zero-heterogeneity data drives components to the boundary") {
  Rng rng(20250101u);
  auto ds = make_sim(rng, 60, 2, 3, 0.15, 0.0, 0.0, 0.0, 0.1, 0.8);
  FreqSpec spec;
  auto fit = fit_freq(ds, spec);
  CHECK(fit.mu_hat[0] == doctest::Approx(0.15).epsilon(0.15));
  CHECK(fit.tau2[0] < 5e-3);
  CHECK(fit.omega2[0] < 5e-3);
  CHECK(fit.phi2[0] < 5e-3);
}

TEST_CASE("heterogeneity is recovered in the right components") {
  Rng rng(20250102u);
  // generous sizes so a single replicate is stable
  auto ds = make_sim(rng, 120, 3, 3, 0.0, 0.15, 0.10, 0.20, 0.05, 0.8);
  FreqSpec spec;
  auto fit = fit_freq(ds, spec);
  CHECK(fit.tau_active[0]);
  CHECK(fit.omega_active[0]);
  CHECK(fit.phi_active[0]);
  CHECK(std::sqrt(fit.tau2[0]) == doctest::Approx(0.15).epsilon(0.35));
  CHECK(std::sqrt(fit.omega2[0]) == doctest::Approx(0.10).epsilon(0.35));
  CHECK(std::sqrt(fit.phi2[0]) == doctest::Approx(0.20).epsilon(0.15));
}

TEST_CASE("restricted likelihood is invariant to within-study reordering") {
  Rng rng(20250103u);
  auto ds = make_sim(rng, 10, 2, 2, 0.1, 0.1, 0.05, 0.1, 0.1, 0.8);
  FreqSpec spec;
  auto fit = fit_freq(ds, spec);

  Dataset ds2 = ds;
  std::reverse(ds2.contrasts.begin(), ds2.contrasts.end());
  auto fit2 = fit_freq(ds2, spec);
  CHECK(fit2.reml_loglik == doctest::Approx(fit.reml_loglik).epsilon(1e-7));
  CHECK(fit2.mu_hat[0] == doctest::Approx(fit.mu_hat[0]).epsilon(1e-6));
}

TEST_CASE("collinear covariates are rejected") {
  Rng rng(20250104u);
  auto ds = make_sim(rng, 8, 1, 2, 0.1, 0.1, 0.0, 0.1, 0.1, 0.8);
  // x_nu_team identical everywhere -> centered column is zero
  FreqSpec spec;
  spec.use_covariates = true;
  CHECK_THROWS_AS(fit_freq(ds, spec), SingularDesign);
}

TEST_CASE("robust variance agrees with the model under correct specification") {
  Rng rng(20250105u);
  FreqSpec spec;
  double ratio_sum = 0.0;
  const int reps = 200;
  for (int r = 0; r < reps; ++r) {
    auto ds = make_sim(rng, 20, 1, 1, 0.0, 0.12, 0.0, 0.0, 0.1, 0.0);
    auto fit = fit_freq(ds, spec);
    robust_vcov(fit, ds, spec);
    ratio_sum += fit.vcov_robust(0, 0) / fit.model_vcov(0, 0);
  }
  const double mean_ratio = ratio_sum / reps;
  CHECK(mean_ratio == doctest::Approx(1.0).epsilon(0.1));
}

TEST_CASE("satterthwaite df: balanced two-study design gives one df") {
  Dataset ds;
  add_study(ds, "a");
  add_study(ds, "b");
  ds.contrasts.push_back(contrast("a", "c1", "d1", 0, 0.1, 0.1));
  ds.contrasts.push_back(contrast("b", "c2", "d1", 0, 0.3, 0.1));
  FreqSpec spec;
  auto fit = fit_freq(ds, spec);
  robust_vcov(fit, ds, spec);
  CHECK(fit.satterthwaite_df[0] == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("satterthwaite df: dominant cluster shrinks the df") {
  Dataset ds;
  Rng rng(20250106u);
  for (int s = 0; s < 5; ++s) {
    const std::string sid = "s" + std::to_string(s);
    add_study(ds, sid);
    const int n = s == 0 ? 20 : 1;
    for (int k = 0; k < n; ++k)
      ds.contrasts.push_back(contrast(sid, "c" + std::to_string(s * 100 + k), "d1", 0,
                                      rng.normal(0.0, 0.2), 0.1));
  }
  FreqSpec spec;
  auto fit = fit_freq(ds, spec);
  robust_vcov(fit, ds, spec);
  CHECK(fit.satterthwaite_df[0] > 0.0);
  CHECK(fit.satterthwaite_df[0] < 4.0);
}

TEST_CASE("designs backed by a single study are flagged, not fabricated") {
  Rng rng(20250107u);
  auto ds = make_sim(rng, 6, 1, 2, 0.1, 0.1, 0.0, 0.1, 0.1, 0.8, 0);
  // design 7 exists in exactly one study
  add_study(ds, "solo");
  ds.contrasts.push_back(contrast("solo", "x1", "d1", 7, 0.5, 0.1));
  ds.contrasts.push_back(contrast("solo", "x2", "d1", 7, 0.4, 0.1));
  FreqSpec spec;
  auto fit = fit_freq(ds, spec);
  robust_vcov(fit, ds, spec);
  CHECK(!fit.inference_unavailable[0]);
  CHECK(fit.inference_unavailable[7]);
  CHECK(std::isfinite(fit.mu_hat[7]));
  CHECK_THROWS_AS(sd_of_bias(fit, DesignCell::from_index(7), Level::kStudy), TooFewClusters);

  // a dataset where no design reaches two studies cannot support inference
  Dataset lone;
  add_study(lone, "only");
  lone.contrasts.push_back(contrast("only", "c1", "d1", 0, 0.1, 0.1));
  lone.contrasts.push_back(contrast("only", "c2", "d2", 0, 0.2, 0.1));
  auto lfit = fit_freq(lone, spec);
  CHECK_THROWS_AS(robust_vcov(lfit, lone, spec), TooFewClusters);
}

TEST_CASE("sd_of_bias: hand sums and level monotonicity") {
  auto f = hand_fit(0.0, 0.0025, 0.0, 0.0, 0.0, 10.0);
  CHECK(sd_of_bias(f, kCell0, Level::kStudy) == doctest::Approx(0.05));
  CHECK(sd_of_bias(f, kCell0, Level::kHypothesis) == doctest::Approx(0.05));
  CHECK(sd_of_bias(f, kCell0, Level::kContrast) == doctest::Approx(0.05));

  auto g = hand_fit(0.0, 0.0, 0.0025, 0.0075, 0.0, 10.0);
  CHECK(sd_of_bias(g, kCell0, Level::kHypothesis) == doctest::Approx(0.1).epsilon(1e-12));

  auto h = hand_fit(0.1, 0.001, 0.002, 0.003, 0.004, 12.0);
  const double s_st = sd_of_bias(h, kCell0, Level::kStudy);
  const double s_hy = sd_of_bias(h, kCell0, Level::kHypothesis);
  const double s_co = sd_of_bias(h, kCell0, Level::kContrast);
  CHECK(s_st == doctest::Approx(std::sqrt(0.003)));
  CHECK(s_hy == doctest::Approx(std::sqrt(0.006)));
  CHECK(s_co == doctest::Approx(std::sqrt(0.010)));
  CHECK(s_st < s_hy);
  CHECK(s_hy < s_co);
}

TEST_CASE("prediction intervals: frozen quantiles and nesting") {
  // nu = 10, total SD = 0.1
  auto f = hand_fit(0.25, 0.01, 0.0, 0.0, 0.0, 10.0);
  auto pi = prediction_interval(f, kCell0, Level::kStudy, 0.95);
  CHECK(pi.first == doctest::Approx(0.25 - 2.2281 * 0.1).epsilon(1e-4));
  CHECK(pi.second == doctest::Approx(0.25 + 2.2281 * 0.1).epsilon(1e-4));

  auto collapsed = prediction_interval(f, kCell0, Level::kStudy, 0.0);
  CHECK(collapsed.first == doctest::Approx(0.25));
  CHECK(collapsed.second == doctest::Approx(0.25));

  // large df approaches the normal quantile
  auto g = hand_fit(0.0, 0.01, 0.0, 0.0, 0.0, 1e7);
  auto pin = prediction_interval(g, kCell0, Level::kStudy, 0.95);
  CHECK(pin.second == doctest::Approx(1.95996 * 0.1).epsilon(1e-4));

  // nesting in beta and in level
  auto h = hand_fit(0.1, 0.001, 0.002, 0.003, 0.004, 12.0);
  auto narrow = prediction_interval(h, kCell0, Level::kStudy, 0.5);
  auto wide = prediction_interval(h, kCell0, Level::kStudy, 0.9);
  CHECK(wide.first < narrow.first);
  CHECK(wide.second > narrow.second);
  auto st = prediction_interval(h, kCell0, Level::kStudy, 0.9);
  auto hy = prediction_interval(h, kCell0, Level::kHypothesis, 0.9);
  auto co = prediction_interval(h, kCell0, Level::kContrast, 0.9);
  CHECK(hy.first < st.first);
  CHECK(co.first < hy.first);
  CHECK(hy.second > st.second);
  CHECK(co.second > hy.second);
}

TEST_CASE("rope probability: frozen values, symmetry, monotonicity") {
  auto f = hand_fit(0.0, 0.0025, 0.0, 0.0, 0.0, 10.0);
  CHECK(rope_probability(f, kCell0, Level::kStudy, 0.1) == doctest::Approx(0.9545).epsilon(1e-3));

  // sign symmetry
  auto pos = hand_fit(0.04, 0.0025, 0.0, 0.0, 0.0, 10.0);
  auto neg = hand_fit(-0.04, 0.0025, 0.0, 0.0, 0.0, 10.0);
  CHECK(rope_probability(pos, kCell0, Level::kStudy, 0.1) ==
        doctest::Approx(rope_probability(neg, kCell0, Level::kStudy, 0.1)).epsilon(1e-12));

  // strictly decreasing in S for |mu| < rope
  double last = 1.1;
  for (double v : {0.0004, 0.0025, 0.01, 0.04, 1.0, 100.0}) {
    const double p = rope_probability(hand_fit(0.04, v, 0, 0, 0, 10.0), kCell0, Level::kStudy, 0.1);
    CHECK(p < last);
    last = p;
  }
  CHECK(last < 0.01);  // S -> infinity limit

  // degenerate S
  auto in = hand_fit(0.05, 0.0, 0.0, 0.0, 0.0, 10.0);
  auto out = hand_fit(0.2, 0.0, 0.0, 0.0, 0.0, 10.0);
  CHECK(rope_probability(in, kCell0, Level::kStudy, 0.1) == 1.0);
  CHECK(rope_probability(out, kCell0, Level::kStudy, 0.1) == 0.0);
}

TEST_CASE("level summaries cover present designs at all levels") {
  Rng rng(20250108u);
  auto ds = make_sim(rng, 12, 2, 2, 0.05, 0.1, 0.05, 0.1, 0.1, 0.8, 2);
  FreqSpec spec;
  auto fit = fit_freq(ds, spec);
  robust_vcov(fit, ds, spec);
  auto rows = level_summaries(fit, spec.rope, spec.pi_level);
  REQUIRE(rows.size() == 3);
  for (const auto& row : rows) {
    CHECK(row.design.index() == 2);
    CHECK(row.available);
    CHECK(row.pi_lo <= row.mean);
    CHECK(row.mean <= row.pi_hi);
    CHECK(row.rope_prob >= 0.0);
    CHECK(row.rope_prob <= 1.0);
  }
  // study < hypothesis < contrast spread
  CHECK(rows[0].sd <= rows[1].sd);
  CHECK(rows[1].sd <= rows[2].sd);
}

}  // TEST_SUITE
