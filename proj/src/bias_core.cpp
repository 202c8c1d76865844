#include "wsc/bias_core.hpp"

#include <cmath>

#include "wsc/stats.hpp"

namespace wsc {

const char* to_string(CovariateDomain d) {
  switch (d) {
    case CovariateDomain::kDemographics: return "demographics";
    case CovariateDomain::kEducation: return "education";
    case CovariateDomain::kSocioeconomic: return "socioeconomic";
    case CovariateDomain::kHealthStatus: return "health_status";
    case CovariateDomain::kHealthUtilization: return "health_utilization";
    case CovariateDomain::kHealthExpenditures: return "health_expenditures";
    case CovariateDomain::kOtherProgramParticipation: return "other_program_participation";
    case CovariateDomain::kGeographic: return "geographic";
    case CovariateDomain::kBehavioralEmotional: return "behavioral_emotional";
    case CovariateDomain::kOther: return "other";
  }
  return "other";
}

std::optional<CovariateDomain> covariate_domain_from_string(const std::string& s) {
  static const std::array<CovariateDomain, 10> all = {
      CovariateDomain::kDemographics,        CovariateDomain::kEducation,
      CovariateDomain::kSocioeconomic,       CovariateDomain::kHealthStatus,
      CovariateDomain::kHealthUtilization,   CovariateDomain::kHealthExpenditures,
      CovariateDomain::kOtherProgramParticipation, CovariateDomain::kGeographic,
      CovariateDomain::kBehavioralEmotional, CovariateDomain::kOther};
  for (CovariateDomain d : all) {
    if (s == to_string(d)) return d;
  }
  return std::nullopt;
}

namespace {

void check_positive(const std::optional<double>& v, const char* name) {
  if (v && !(*v > 0.0)) throw NonPositiveSd(std::string(name) + " must be strictly positive");
}

}  // namespace

void RctSummary::validate() const {
  if (n_trt < 2 || n_contr < 2) throw InvalidSampleSize("RCT sample sizes must be >= 2");
  check_positive(se_rct, "se_rct");
  check_positive(sd_trt, "sd_trt");
  check_positive(sd_contr, "sd_contr");
  if (f_stat && !(*f_stat >= 0.0)) throw DegenerateStatistic("f_stat must be >= 0");
  if (p_value && !(*p_value > 0.0 && *p_value < 1.0))
    throw ValidationError("p_value must lie in the open interval (0,1)");
  if (!sd_trt && !se_rct && !f_stat && !p_value)
    throw NoSdSource("no pooled-SD source available");
}

void ObsSummary::validate() const {
  if (n_comp < 2) throw InvalidSampleSize("comparison sample size must be >= 2");
  if (!(se_obs > 0.0)) throw NonPositiveSd("se_obs must be strictly positive");
}

double pooled_sd(const RctSummary& rct) {
  rct.validate();
  const double inv_n = 1.0 / double(rct.n_trt) + 1.0 / double(rct.n_contr);
  if (rct.sd_trt && rct.sd_contr) {
    const double num = double(rct.n_trt - 1) * (*rct.sd_trt) * (*rct.sd_trt) +
                       double(rct.n_contr - 1) * (*rct.sd_contr) * (*rct.sd_contr);
    return std::sqrt(num / double(rct.n_trt + rct.n_contr - 2));
  }
  if (rct.sd_trt) return *rct.sd_trt;
  if (rct.se_rct) return *rct.se_rct / std::sqrt(inv_n);
  if (rct.f_stat) {
    if (*rct.f_stat == 0.0) throw DegenerateStatistic("F statistic of 0 cannot identify a pooled SD");
    return std::abs(rct.theta_rct) / (std::sqrt(*rct.f_stat) * std::sqrt(inv_n));
  }
  if (rct.p_value) {
    // two-sided p -> central t quantile with Nt + Nc - 2 df
    const double df = double(rct.n_trt + rct.n_contr - 2);
    const double t = t_quantile(1.0 - 0.5 * (*rct.p_value), df);
    if (!(t > 0.0)) throw DegenerateStatistic("t derived from p_value is 0");
    return std::abs(rct.theta_rct) / (t * std::sqrt(inv_n));
  }
  throw NoSdSource("no pooled-SD source available");
}

double standardize_bias(double theta_obs, double theta_rct, double s_rct_pooled,
                        int desired_direction) {
  if (!(s_rct_pooled > 0.0)) throw NonPositiveSd("pooled SD must be strictly positive");
  const double sign = desired_direction < 0 ? -1.0 : 1.0;
  return sign * (theta_obs - theta_rct) / s_rct_pooled;
}

double bias_se(double se_obs, double se_rct, double s_rct_pooled, long n_trt, long n_contr,
               long n_comp) {
  if (!(s_rct_pooled > 0.0)) throw NonPositiveSd("pooled SD must be strictly positive");
  if (!(se_obs > 0.0) || !(se_rct > 0.0)) throw NonPositiveSd("standard errors must be strictly positive");
  if (n_trt < 2 || n_contr < 2 || n_comp < 2) throw InvalidSampleSize("sample sizes must be >= 2");
  const double inv_cc = 1.0 / double(n_contr) + 1.0 / double(n_comp);
  const double shrink = inv_cc / (inv_cc + 2.0 / double(n_trt));
  return std::sqrt((se_obs * se_obs + se_rct * se_rct) * shrink) / s_rct_pooled;
}

DesignCell classify_design(bool pretest_used, bool comparison_is_local,
                           const std::set<CovariateDomain>& covariate_domains) {
  return DesignCell{pretest_used, comparison_is_local, covariate_domains.size() >= 4};
}

}  // namespace wsc
