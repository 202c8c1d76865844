#include <cmath>
#include <numeric>

#include "doctest.h"
#include "wsc/errors.hpp"
#include "wsc/simgen.hpp"
#include "wsc/stats.hpp"

using namespace wsc;

namespace {

StudyPlan plan(int design, int domains, int per_domain, bool edu = false) {
  StudyPlan p;
  p.domains = domains;
  p.education = edu;
  CellLoad cl;
  cl.design = design;
  cl.per_domain.assign(std::size_t(domains), per_domain);
  p.cells.push_back(cl);
  return p;
}

GenConfig flat_config(int n_studies, int design, int domains, int per_domain) {
  GenConfig cfg;
  for (int i = 0; i < n_studies; ++i) cfg.studies.push_back(plan(design, domains, per_domain));
  return cfg;
}

double var_of(const std::vector<double>& v) {
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / double(v.size() - 1);
}

std::vector<double> ys(const Dataset& ds) {
  std::vector<double> v;
  v.reserve(ds.contrasts.size());
  for (const auto& c : ds.contrasts) v.push_back(c.y);
  return v;
}

}  // namespace

TEST_SUITE("simgen") {

TEST_CASE("config validation") {
  GenConfig cfg;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);  // no studies

  cfg = flat_config(2, 0, 1, 3);
  CHECK_NOTHROW(cfg.validate());

  GenConfig bad = cfg;
  bad.studies[0].cells[0].design = 8;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.studies[0].cells[0].per_domain = {1, 2};  // study has one domain
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.studies[0].cells.push_back(bad.studies[0].cells[0]);  // duplicate design
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.studies[0].cells[0].per_domain = {0};  // empty cell
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.rho = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.s_y_median = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.freq.tau[0] = -0.1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("generated census equals the plan") {
  GenConfig cfg;
  cfg.studies.push_back(plan(0, 2, 3));  // 6 contrasts, 2 hypotheses
  cfg.studies.push_back(plan(0, 1, 2));  // 2 contrasts, 1 hypothesis
  StudyPlan multi;                       // one study in two cells
  multi.domains = 2;
  CellLoad a;
  a.design = 3;
  a.per_domain = {2, 1};
  CellLoad b;
  b.design = 7;
  b.per_domain = {1, 0};  // second domain skipped
  multi.cells = {a, b};
  cfg.studies.push_back(multi);
  cfg.seed = 5;

  const Dataset ds = generate(cfg);
  const CellCensus census = cell_census(ds);
  CHECK(census.contrasts[0] == 8);
  CHECK(census.contrasts[3] == 3);
  CHECK(census.contrasts[7] == 1);
  CHECK(census.hypotheses[0] == 3);
  CHECK(census.hypotheses[3] == 2);
  CHECK(census.hypotheses[7] == 1);
  CHECK(census.studies[0] == 2);
  CHECK(census.studies[3] == 1);
  CHECK(census.studies[7] == 1);
  CHECK(ds.studies.size() == 3);
  CHECK(ds.studies[2].x_n_contrasts == 4);
}

TEST_CASE("same seed gives byte-identical output") {
  GenConfig cfg = flat_config(4, 2, 2, 3);
  cfg.freq.mu.fill(0.1);
  cfg.freq.tau.fill(0.2);
  cfg.freq.phi.fill(0.1);
  cfg.seed = 77;
  const Dataset a = generate(cfg);
  const Dataset b = generate(cfg);
  CHECK(save_contrasts_csv(a) == save_contrasts_csv(b));
  CHECK(save_studies_csv(a) == save_studies_csv(b));
  cfg.seed = 78;
  const Dataset c = generate(cfg);
  CHECK(save_contrasts_csv(a) != save_contrasts_csv(c));
}

TEST_CASE("rows round-trip through the CSV schema") {
  GenConfig cfg = flat_config(3, 5, 2, 2);
  cfg.freq.mu.fill(-0.2);
  cfg.freq.tau.fill(0.15);
  cfg.freq.omega.fill(0.1);
  cfg.freq.phi.fill(0.2);
  cfg.seed = 11;
  const Dataset ds = generate(cfg);
  const Dataset back = ingest_strings(save_contrasts_csv(ds), save_studies_csv(ds));
  REQUIRE(back.contrasts.size() == ds.contrasts.size());
  for (std::size_t i = 0; i < ds.contrasts.size(); ++i) {
    CHECK(back.contrasts[i].y == ds.contrasts[i].y);
    CHECK(back.contrasts[i].s_y == doctest::Approx(ds.contrasts[i].s_y).epsilon(1e-15));
    CHECK(back.contrasts[i].design.index() == ds.contrasts[i].design.index());
  }
  CHECK(back.studies.size() == ds.studies.size());
}

TEST_CASE("zero components: y is mu plus sampling error") {
  GenConfig cfg = flat_config(1, 0, 1, 100000);
  cfg.freq.mu.fill(0.3);
  cfg.rho = 0.0;
  cfg.s_y_log_sd = 0.0;  // constant s_y at the median
  cfg.s_y_median = 0.1;
  cfg.seed = 3;
  const Dataset ds = generate(cfg);
  const std::vector<double> v = ys(ds);
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  const double sd = std::sqrt(var_of(v));
  CHECK(mean == doctest::Approx(0.3).epsilon(0.005));
  CHECK(sd == doctest::Approx(0.1).epsilon(0.01));
}

TEST_CASE("variance components add") {
  GenConfig cfg = flat_config(1000, 4, 1, 100);
  cfg.freq.tau.fill(0.15);
  cfg.freq.omega.fill(0.10);
  cfg.freq.phi.fill(0.20);
  cfg.s_y_log_sd = 0.0;
  cfg.s_y_median = 0.1;
  cfg.rho = 0.8;
  cfg.seed = 21;
  const Dataset ds = generate(cfg);
  const double truth = 0.15 * 0.15 + 0.10 * 0.10 + 0.20 * 0.20 + 0.1 * 0.1;
  const double sd = std::sqrt(var_of(ys(ds)));
  CHECK(sd == doctest::Approx(std::sqrt(truth)).epsilon(0.02));

  // doubling phi adds exactly 3 phi^2 up to Monte Carlo noise
  GenConfig cfg2 = cfg;
  cfg2.freq.phi.fill(0.40);
  const double var2 = var_of(ys(generate(cfg2)));
  CHECK(var2 - var_of(ys(generate(cfg))) ==
        doctest::Approx(3.0 * 0.20 * 0.20).epsilon(0.02));
}

TEST_CASE("fixed Student-t truth reproduces the scale law") {
  GenConfig cfg = flat_config(5000, 0, 1, 1);
  cfg.mode = TruthMode::kBayesFixed;
  cfg.bayes.theta = 0.2;
  cfg.bayes.alpha.fill(-40.0);
  cfg.bayes.nu.fill(5.0);
  cfg.bayes.alpha[kBatchA] = std::log(0.3);  // only the study batch is live
  cfg.s_y_log_sd = 0.0;
  cfg.s_y_median = 0.05;
  cfg.rho = 0.0;
  cfg.seed = 9;
  const GenResult gr = generate_full(cfg);
  CHECK(gr.mu_true[0] == doctest::Approx(0.2));
  const std::vector<double> v = ys(gr.data);
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  // t_5 with scale 0.3 has variance 0.09 * 5/3
  const double truth = 0.09 * 5.0 / 3.0 + 0.05 * 0.05;
  CHECK(mean == doctest::Approx(0.2).epsilon(0.05));
  CHECK(var_of(v) == doctest::Approx(truth).epsilon(0.10));
  // the drawn effects are recorded in the returned truth
  CHECK(gr.truth.effects[kBatchA].size() == 5000);
}

TEST_CASE("hyperdrawn truth is finite and structurally complete") {
  GenConfig cfg = flat_config(6, 2, 2, 2);
  cfg.mode = TruthMode::kBayesHyperdrawn;
  cfg.sampler.phi_alpha_lo = -3.0;  // keep prior scales moderate
  cfg.sampler.phi_alpha_hi = 0.0;
  cfg.seed = 14;
  const GenResult gr = generate_full(cfg);
  CHECK(gr.truth.effects[kBatchA].size() == 6);
  CHECK(gr.truth.effects[kBatchG].size() == gr.data.contrasts.size());
  for (const auto& c : gr.data.contrasts) CHECK(std::isfinite(c.y));
  for (int j = 0; j < kNumDesigns; ++j)
    CHECK(gr.mu_true[std::size_t(j)] == doctest::Approx(mu_of_design(gr.truth, j)));
  // a different seed draws a different truth
  GenConfig cfg2 = cfg;
  cfg2.seed = 15;
  CHECK(generate_full(cfg2).truth.theta != gr.truth.theta);
}

TEST_CASE("default structure matches the intended census") {
  const GenConfig cfg = default_config();
  CHECK(cfg.studies.size() == 39);
  cfg.validate();
  GenConfig with_truth = cfg;
  with_truth.seed = 1;
  const Dataset ds = generate(with_truth);
  const CellCensus census = cell_census(ds);
  const std::array<std::size_t, 8> want_studies = {11, 5, 11, 3, 17, 8, 10, 10};
  const std::array<std::size_t, 8> want_contrasts = {51, 38, 38, 21, 177, 57, 39, 52};
  for (int j = 0; j < kNumDesigns; ++j) {
    CHECK(census.studies[std::size_t(j)] == want_studies[std::size_t(j)]);
    CHECK(census.contrasts[std::size_t(j)] == want_contrasts[std::size_t(j)]);
  }
  CHECK(ds.contrasts.size() == 473);
  std::size_t hyp = 0;
  for (auto h : census.hypotheses) hyp += h;
  CHECK(hyp >= 100);  // about 1.7 domains per study
  CHECK(hyp <= 150);
}

TEST_CASE("json config parsing") {
  const char* text = R"({
    "seed": 42,
    "rho": 0.5,
    "s_y_median": 0.2,
    "mode": "freq",
    "studies": [
      {"id": "a", "education": true, "domains": 2,
       "cells": [{"design": 3, "per_domain": [2, 1]}, {"design": 0, "per_domain": 1}]},
      {"id": "b", "cells": [{"design": 7, "per_domain": [4]}]}
    ],
    "truth": {"mu": -0.1, "tau": [0.1, 0.1, 0.1, 0.1, 0.2, 0.2, 0.2, 0.2], "phi": 0.3}
  })";
  const GenConfig cfg = parse_gen_config(text);
  CHECK(cfg.seed == 42);
  CHECK(cfg.rho == 0.5);
  CHECK(cfg.s_y_median == 0.2);
  CHECK(cfg.studies.size() == 2);
  CHECK(cfg.studies[0].cells.size() == 2);
  CHECK(cfg.studies[0].cells[1].per_domain == std::vector<int>{1, 1});
  CHECK(cfg.studies[1].domains == 1);
  CHECK(cfg.freq.mu[5] == -0.1);
  CHECK(cfg.freq.tau[4] == 0.2);
  CHECK(cfg.freq.phi[0] == 0.3);
  CHECK(cfg.freq.omega[0] == 0.0);

  CHECK_THROWS_AS(parse_gen_config("{"), ConfigError);
  CHECK_THROWS_AS(parse_gen_config(R"({"sedd": 1})"), ConfigError);
  CHECK_THROWS_AS(parse_gen_config(R"({"mode": "magic"})"), ConfigError);
  CHECK_THROWS_AS(parse_gen_config(R"({"studies": []})"), ConfigError);
  CHECK_THROWS_AS(
      parse_gen_config(R"({"studies": [{"cells": [{"design": 9, "per_domain": 1}]}]})"),
      ConfigError);

  // omitted studies fall back to the default structure
  const GenConfig dflt = parse_gen_config(R"({"seed": 3, "truth": {"tau": 0.1}})");
  CHECK(dflt.studies.size() == 39);
  CHECK(dflt.freq.tau[7] == 0.1);

  // bayes truth and sampler blocks
  const GenConfig bay = parse_gen_config(R"({
    "mode": "bayes_fixed",
    "studies": [{"cells": [{"design": 0, "per_domain": 2}]}],
    "bayes": {"theta": 0.4, "alpha": -2.0, "nu": 8.0},
    "sampler": {"chains": 3, "iterations": 600, "warmup": 300}
  })");
  CHECK(bay.mode == TruthMode::kBayesFixed);
  CHECK(bay.bayes.theta == 0.4);
  CHECK(bay.bayes.alpha[6] == -2.0);
  CHECK(bay.bayes.nu[2] == 8.0);
  CHECK(bay.sampler.chains == 3);
}

TEST_CASE("se oracle matches the closed form") {
  const double got = se_oracle(200, 200, 200, 20000);
  CHECK(got == doctest::Approx(std::sqrt(2.0 / 200.0)).epsilon(0.03));

  const double asym = se_oracle(123, 100, 400, 20000);
  CHECK(asym == doctest::Approx(std::sqrt(1.0 / 100.0 + 1.0 / 400.0)).epsilon(0.03));

  // exactly symmetric in the two non-shared groups
  CHECK(se_oracle(123, 400, 100, 20000) == asym);

  // a huge shared group changes nothing: its mean cancels from y
  const double big = se_oracle(1000000, 100, 400, 20000);
  CHECK(big == doctest::Approx(std::sqrt(1.0 / 100.0 + 1.0 / 400.0)).epsilon(0.03));

  CHECK_THROWS_AS(se_oracle(1, 10, 10, 100), ConfigError);
  CHECK_THROWS_AS(se_oracle(10, 10, 10, 1), ConfigError);
}

TEST_CASE("frequentist recovery finds the truth at desk scale") {
  GenConfig cfg = flat_config(12, 2, 3, 4);
  cfg.freq.mu.fill(0.1);
  cfg.freq.tau.fill(0.15);
  cfg.freq.omega.fill(0.10);
  cfg.freq.phi.fill(0.20);
  cfg.s_y_median = 0.05;
  cfg.s_y_log_sd = 0.0;
  cfg.seed = 400;
  const RecoveryReport rep = recovery_study(cfg, Engine::kFreq, 24);
  CHECK(rep.usable == 24);
  CHECK(rep.failures.empty());
  CHECK(rep.median(2, &RecoveryCell::mu_hat) == doctest::Approx(0.1).epsilon(0.5));
  CHECK(rep.median(2, &RecoveryCell::tau_hat) == doctest::Approx(0.15).epsilon(0.5));
  CHECK(rep.median(2, &RecoveryCell::phi_hat) == doctest::Approx(0.20).epsilon(0.3));
  const double cov = rep.coverage(2);
  CHECK(cov >= 0.7);
  CHECK(cov <= 1.0);
}

TEST_CASE("zero-truth components are estimated at the boundary") {
  GenConfig cfg = flat_config(10, 0, 2, 3);
  cfg.freq.mu.fill(0.0);
  cfg.s_y_median = 0.1;
  cfg.s_y_log_sd = 0.0;
  cfg.rho = 0.0;
  cfg.seed = 250;
  const RecoveryReport rep = recovery_study(cfg, Engine::kFreq, 40);
  CHECK(rep.usable == 40);
  const double z_tau = rep.share_at_zero(0, &RecoveryCell::tau_hat);
  const double z_omega = rep.share_at_zero(0, &RecoveryCell::omega_hat);
  const double z_phi = rep.share_at_zero(0, &RecoveryCell::phi_hat);
  CHECK((z_tau + z_omega + z_phi) / 3.0 >= 0.5);
}

TEST_CASE("bayes recovery covers a fixed truth") {
  GenConfig cfg = flat_config(4, 0, 1, 2);
  cfg.mode = TruthMode::kBayesFixed;
  cfg.bayes.theta = 0.1;
  cfg.bayes.alpha.fill(-40.0);  // no heterogeneity: conjugate-like target
  cfg.s_y_median = 0.1;
  cfg.s_y_log_sd = 0.0;
  cfg.sampler.mean_only = true;
  cfg.sampler.chains = 2;
  cfg.sampler.iterations = 1000;
  cfg.sampler.warmup = 300;
  cfg.seed = 90;
  const RecoveryReport rep = recovery_study(cfg, Engine::kBayes, 10);
  CHECK(rep.usable == 10);
  CHECK(rep.coverage(0) >= 0.5);
  CHECK(std::isnan(rep.median(0, &RecoveryCell::tau_hat)));
  for (const auto& c : rep.cells) CHECK(c.lo <= c.hi);
}

TEST_CASE("sbc is uniform on the conjugate collapse") {
  GenConfig cfg = flat_config(2, 0, 1, 2);
  cfg.mode = TruthMode::kBayesHyperdrawn;
  cfg.rho = 0.6;
  cfg.seed = 1234;
  BayesSpec spec;
  spec.mean_only = true;
  spec.chains = 2;
  spec.iterations = 2200;
  spec.warmup = 200;
  spec.rho = 0.6;
  spec.seed = 77;
  const SbcReport rep = sbc(spec, cfg, 80);
  CHECK(rep.usable == 80);
  CHECK(rep.names.size() == 1);
  CHECK(rep.max_rank == 100);
  int total = 0;
  for (int b : rep.histogram[0]) {
    CHECK(b >= 0);
    total += b;
  }
  CHECK(total == 80);
  CHECK(rep.p_value > 0.05);

  CHECK_THROWS_AS(sbc(spec, flat_config(2, 0, 1, 2), 10), ConfigError);  // not hyperdrawn
}

}  // TEST_SUITE simgen
