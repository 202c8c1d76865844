#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "wsc/dataset.hpp"
#include "wsc/errors.hpp"
#include "wsc/freq_meta.hpp"
#include "wsc/reports.hpp"

using namespace wsc;
using njson = nlohmann::json;

TEST_SUITE("reports") {

namespace {

const char* kStudiesCsv =
    "study_id,x_education,x_multicell,x_n_contrasts,x_nu_team\n"
    "s1,1,0,2,0\n"
    "s2,0,0,1,1\n"
    "s3,1,1,2,0\n";

// reported-y rows with se_obs = se_rct = 0.1 and equal arms make s_y exact
const char* kContrastsCsv =
    "study_id,contrast_id,outcome_domain,pretest,local,rich,y,theta_obs,theta_rct,se_obs,se_rct,"
    "sd_trt,sd_contr,f_stat,p_value,n_trt,n_contr,n_comp,desired_direction\n"
    "s1,c1,d1,0,0,0,0.25,,,0.1,0.1,1,1,,,100,100,100,\n"
    "s1,c2,d1,0,0,0,0.75,,,0.1,0.1,1,1,,,100,100,100,\n"
    "s2,c3,d1,0,0,0,-0.05,,,0.1,0.1,1,1,,,100,100,100,\n"
    "s3,c4,d1,0,0,0,0,,,0.1,0.1,1,1,,,100,100,100,\n"
    "s3,c5,d1,1,0,0,0.05,,,0.1,0.1,1,1,,,100,100,100,\n";

Dataset hand_dataset() { return ingest_strings(kContrastsCsv, kStudiesCsv); }

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::size_t at = 0;
  while (at < text.size()) {
    const std::size_t nl = text.find('\n', at);
    out.push_back(text.substr(at, nl - at));
    if (nl == std::string::npos) break;
    at = nl + 1;
  }
  return out;
}

}  // namespace

TEST_CASE("design labels round-trip") {
  CHECK(design_label(DesignCell::from_index(0)) == "none");
  CHECK(design_label(DesignCell::from_index(4)) == "P");
  CHECK(design_label(DesignCell::from_index(2)) == "L");
  CHECK(design_label(DesignCell::from_index(1)) == "R");
  CHECK(design_label(DesignCell::from_index(7)) == "PLR");
  CHECK(design_label(DesignCell::from_index(6)) == "PL");
  for (int d = 0; d < kNumDesigns; ++d) {
    const auto back = design_from_label(design_label(DesignCell::from_index(d)));
    REQUIRE(back.has_value());
    CHECK(back->index() == d);
  }
  CHECK(!design_from_label("X").has_value());
  CHECK(!design_from_label("RLP").has_value());
  CHECK(!design_from_label("").has_value());
}

TEST_CASE("number formatting") {
  CHECK(format_number(0.125) == "0.125");
  CHECK(format_number(std::nan("")) == "");
  CHECK(format_number(0.36600313, 3) == "0.366");
  CHECK(format_number(2.0 / 3.0, 4) == "0.6667");
  CHECK(format_number(-0.05) == "-0.05");
}

TEST_CASE("descriptive table matches a hand aggregation") {
  const Dataset ds = hand_dataset();
  ReportOptions opt;
  opt.digits = 4;
  const std::string csv = describe_report(
      ds, {Level::kStudy, Level::kHypothesis, Level::kContrast}, 0.10, opt);
  const auto ls = lines_of(csv);
  REQUIRE(ls.size() == 7);
  CHECK(ls[0] == "analysis,design,level,n,mean,sd,min,max,rope_prob");
  CHECK(ls[1] == "descriptive,none,study,3,0.15,0.3041,-0.05,0.5,0.6667");
  CHECK(ls[2] == "descriptive,P,study,1,0.05,,0.05,0.05,1");
  CHECK(ls[3] == "descriptive,none,hypothesis,3,0.15,0.3041,-0.05,0.5,0.6667");
  CHECK(ls[4] == "descriptive,P,hypothesis,1,0.05,,0.05,0.05,1");
  CHECK(ls[5] == "descriptive,none,contrast,4,0.2375,0.366,-0.05,0.75,0.5");
  CHECK(ls[6] == "descriptive,P,contrast,1,0.05,,0.05,0.05,1");

  opt.format = "json";
  const njson j = njson::parse(describe_report(ds, {Level::kContrast}, 0.10, opt));
  CHECK(j["analysis"] == "descriptive");
  CHECK(j["rope"] == 0.1);
  REQUIRE(j["rows"].size() == 2);
  CHECK(j["rows"][0]["design"] == "none");
  CHECK(j["rows"][0]["n"] == 4);
  CHECK(j["rows"][1]["design"] == "P");
  CHECK(j["rows"][1]["sd"].is_null());  // single contrast has no sample SD
}

TEST_CASE("frequentist table carries rows and components") {
  const Dataset ds = hand_dataset();
  FreqSpec spec;
  FreqFit fit = fit_freq(ds, spec);
  robust_vcov(fit, ds, spec);

  ReportOptions opt;
  const std::string csv = freq_report(fit, spec, opt);
  const auto ls = lines_of(csv);
  REQUIRE(ls.size() == 7);
  CHECK(ls[0] ==
        "analysis,design,level,mean,sd,pi_lo,pi_hi,rope_prob,tau,omega,phi,n_studies,available");
  CHECK(ls[1].rfind("non-bayesian,none,study,", 0) == 0);
  CHECK(ls[4].rfind("non-bayesian,P,study,", 0) == 0);
  // the single-study design has no robust inference: empty sd, available=false
  CHECK(ls[4].find(",,") != std::string::npos);
  CHECK(ls[4].substr(ls[4].size() - 6) == ",false");
  CHECK(ls[1].substr(ls[1].size() - 5) == ",true");

  opt.format = "json";
  const njson j = njson::parse(freq_report(fit, spec, opt));
  CHECK(j["analysis"] == "non-bayesian");
  CHECK(j["spec"]["rho"] == 0.8);
  REQUIRE(j["rows"].size() == 6);
  REQUIRE(j["components"].size() == 2);
  CHECK(j["components"][0]["design"] == "none");
  CHECK(j["components"][1]["design"] == "P");
  CHECK(j["components"][1]["n_studies"] == 1);
  CHECK(j["rows"][3]["sd"].is_null());
  CHECK(j["rows"][3]["available"] == false);
}

TEST_CASE("bayes table sorts rows and renders missing values") {
  std::vector<DesignSummary> rows;
  DesignSummary a;
  a.design = DesignCell::from_index(7);
  a.level = Level::kStudy;
  a.mean = 0.1;
  a.sd = 0.2;
  a.rope_prob = 0.5;
  a.pi_lo = -0.25;
  a.pi_hi = 0.5;
  DesignSummary b;
  b.design = DesignCell::from_index(0);
  b.level = Level::kContrast;
  b.mean = 0.3;
  b.sd = 0.4;  // rope/pi left NaN
  DesignSummary c;
  c.design = DesignCell::from_index(0);
  c.level = Level::kStudy;
  c.mean = -0.125;
  c.sd = 0.5;
  c.rope_prob = 0.25;
  c.pi_lo = -1.0;
  c.pi_hi = 0.75;
  rows = {a, b, c};

  DiagnosticsReport diag;
  ParamSummary p;
  p.name = "theta";
  p.mean = 0.1;
  p.rhat = 1.002;
  diag.params.push_back(p);
  diag.divergences = 3;

  BayesSpec spec;
  spec.seed = 42;
  ReportOptions opt;
  const std::string csv = bayes_report(rows, diag, spec, opt);
  const auto ls = lines_of(csv);
  REQUIRE(ls.size() == 4);
  CHECK(ls[0] == "analysis,design,level,mean,sd,pi_lo,pi_hi,rope_prob");
  CHECK(ls[1] == "bayesian,none,study,-0.125,0.5,-1,0.75,0.25");
  CHECK(ls[2] == "bayesian,none,contrast,0.3,0.4,,,");  // NaN renders empty
  CHECK(ls[3] == "bayesian,PLR,study,0.1,0.2,-0.25,0.5,0.5");

  opt.format = "json";
  const njson j = njson::parse(bayes_report(rows, diag, spec, opt));
  CHECK(j["analysis"] == "bayesian");
  CHECK(j["spec"]["seed"] == 42);
  CHECK(j["rows"][1]["rope_prob"].is_null());
  CHECK(j["diagnostics"]["divergences"] == 3);
  CHECK(j["diagnostics"]["params"][0]["name"] == "theta");
}

TEST_CASE("simulation reports serialize their verdicts") {
  RecoveryReport rec;
  rec.engine = Engine::kFreq;
  rec.replications = 3;
  rec.usable = 2;
  RecoveryCell c1;
  c1.rep = 0;
  c1.design = 0;
  c1.mu_true = 0.1;
  c1.mu_hat = 0.12;
  c1.tau_true = 0.15;
  c1.tau_hat = 0.14;
  c1.lo = -0.1;
  c1.hi = 0.3;
  c1.covered = true;
  RecoveryCell c2 = c1;
  c2.rep = 1;
  c2.mu_hat = 0.08;
  c2.tau_hat = std::nan("");
  rec.cells = {c1, c2};
  rec.failures = {"rep 2: it broke"};

  njson j = njson::parse(recovery_report(rec));
  CHECK(j["kind"] == "recovery");
  CHECK(j["engine"] == "freq");
  CHECK(j["usable"] == 2);
  REQUIRE(j["designs"].size() == 1);
  CHECK(j["designs"][0]["design"] == "none");
  CHECK(j["designs"][0]["cells"] == 2);
  CHECK(j["designs"][0]["median"]["mu_hat"] == 0.1);  // median of 0.12, 0.08
  CHECK(j["designs"][0]["coverage"] == 1.0);
  CHECK(j["cells"].size() == 2);
  CHECK(j["cells"][1]["tau_hat"].is_null());
  CHECK(j["failures"][0] == "rep 2: it broke");

  SbcReport sr;
  sr.replications = 50;
  sr.usable = 50;
  sr.max_rank = 100;
  sr.bins = 5;
  sr.names = {"theta"};
  sr.histogram = {{10, 10, 10, 10, 10}};
  sr.chi2 = 30.0;
  sr.df = 4;
  sr.p_value = 0.001;
  njson s = njson::parse(sbc_report(sr));
  CHECK(s["kind"] == "sbc");
  CHECK(s["uniformity_rejected_at_0_01"] == true);
  CHECK(s["parameters"][0]["name"] == "theta");
  CHECK(s["parameters"][0]["histogram"].size() == 5);
  sr.p_value = 0.4;
  CHECK(njson::parse(sbc_report(sr))["uniformity_rejected_at_0_01"] == false);
}

TEST_CASE("figure rows pass values through unmodified") {
  const Dataset ds = hand_dataset();
  FreqSpec spec;
  FreqFit fit = fit_freq(ds, spec);
  robust_vcov(fit, ds, spec);
  ReportOptions opt;
  const std::string csv = freq_report(fit, spec, opt);

  const TidyParse parsed = tidy_from_output(csv, Level::kStudy);
  CHECK(parsed.analysis == "non-bayesian");
  // design none: all three metrics; design P: mean only (sd/rope empty)
  REQUIRE(parsed.rows.size() == 4);
  CHECK(parsed.notes.size() == 2);
  for (const auto& row : parsed.rows) {
    CHECK(row.analysis == "non-bayesian");
    // byte pass-through: the emitted token is a substring of the input
    CHECK(csv.find(row.value) != std::string::npos);
  }
  CHECK(parsed.rows[0].design == "none");
  CHECK(parsed.rows[0].metric == "mean");
  CHECK(parsed.rows[3].design == "P");
  CHECK(parsed.rows[3].metric == "mean");

  // JSON inputs round-trip through the same serializer
  opt.format = "json";
  const std::string jtext = freq_report(fit, spec, opt);
  const TidyParse jp = tidy_from_output(jtext, Level::kStudy);
  REQUIRE(jp.rows.size() == 4);
  for (const auto& row : jp.rows) CHECK(jtext.find(row.value) != std::string::npos);
  CHECK(jp.rows[0].value == parsed.rows[0].value);

  const std::string tidy = tidy_csv(parsed.rows);
  const auto ls = lines_of(tidy);
  CHECK(ls[0] == "design,analysis,metric,value");
  CHECK(ls.size() == 5);
  CHECK(ls[1].rfind("none,non-bayesian,mean,", 0) == 0);
}

TEST_CASE("figure rows reject malformed inputs") {
  CHECK_THROWS_AS(tidy_from_output("", Level::kStudy), ConfigError);
  CHECK_THROWS_AS(tidy_from_output("{}", Level::kStudy), ConfigError);
  CHECK_THROWS_AS(tidy_from_output("{\"analysis\": \"x\"}", Level::kStudy), ConfigError);
  CHECK_THROWS_AS(tidy_from_output("not json {", Level::kStudy), ConfigError);
  CHECK_THROWS_AS(tidy_from_output("a,b,c\n1,2,3\n", Level::kStudy), ConfigError);
  CHECK_THROWS_AS(
      tidy_from_output("analysis,design,level,mean\nx,none,study\n", Level::kStudy),
      ConfigError);  // field count mismatch

  // level with no rows is a note, not an error
  const TidyParse empty = tidy_from_output(
      "analysis,design,level,mean,sd,rope_prob\ndescriptive,none,study,0.1,0.2,0.3\n",
      Level::kContrast);
  CHECK(empty.rows.empty());
  REQUIRE(!empty.notes.empty());
  CHECK(empty.notes.back().find("no rows") != std::string::npos);
}

}  // TEST_SUITE reports
