#ifndef WSC_BIAS_CORE_HPP
#define WSC_BIAS_CORE_HPP

#include <array>
#include <cstdint>
#include <optional>
#include <set>
#include <string>

#include "wsc/errors.hpp"

// Numeric kernel for within-study-comparison bias estimates: standardization,
// pooled-SD approximation, covariance-corrected standard errors, and design
// classification. All functions are pure.

namespace wsc {

// Conceptual domains for covariate richness classification.
enum class CovariateDomain : std::uint8_t {
  kDemographics = 0,
  kEducation,
  kSocioeconomic,
  kHealthStatus,
  kHealthUtilization,
  kHealthExpenditures,
  kOtherProgramParticipation,
  kGeographic,
  kBehavioralEmotional,
  kOther,
};

const char* to_string(CovariateDomain d);
std::optional<CovariateDomain> covariate_domain_from_string(const std::string& s);

// One of the 8 observational designs: pretest x local x rich.
struct DesignCell {
  bool pretest = false;
  bool local = false;
  bool rich = false;

  int n_elements() const { return int(pretest) + int(local) + int(rich); }
  int index() const { return (int(pretest) << 2) | (int(local) << 1) | int(rich); }
  static DesignCell from_index(int idx) {
    return DesignCell{(idx & 4) != 0, (idx & 2) != 0, (idx & 1) != 0};
  }
  bool operator==(const DesignCell&) const = default;
  auto operator<=>(const DesignCell&) const = default;
};

inline constexpr int kNumDesigns = 8;

// RCT side of a contrast. Optional fields mirror what studies report; at
// least one pooled-SD source must be present.
struct RctSummary {
  double theta_rct = 0.0;
  std::optional<double> se_rct;
  std::optional<double> sd_trt;
  std::optional<double> sd_contr;
  std::optional<double> f_stat;
  std::optional<double> p_value;
  long n_trt = 0;
  long n_contr = 0;

  // throws InvalidSampleSize / NonPositiveSd / NoSdSource on violation
  void validate() const;
};

// Observational side of a contrast.
struct ObsSummary {
  double theta_obs = 0.0;
  double se_obs = 0.0;
  long n_comp = 0;

  void validate() const;
};

struct StandardizedBias {
  double y = 0.0;    // bias in RCT-outcome SD units
  double s_y = 0.0;  // standard error of y
  bool sign_oriented = true;  // positive = observational study overestimates effectiveness
};

// Pooled outcome SD of the RCT arms, via the first applicable strategy:
//   1. pooled from (sd_trt, sd_contr, n_trt, n_contr)
//   2. sd_trt alone
//   3. backed out of se_rct:              S = se / sqrt(1/Nt + 1/Nc)
//   4. backed out of the F statistic:     S = |theta| / (sqrt(F) * sqrt(1/Nt + 1/Nc))
//   5. backed out of the two-sided p:     S = |theta| / (t * sqrt(1/Nt + 1/Nc)),
//      t the central-t quantile with Nt + Nc - 2 df
double pooled_sd(const RctSummary& rct);

// (theta_obs - theta_rct) / S, oriented so that positive output means the
// observational study overestimates effectiveness. desired_direction is +1
// when larger outcomes are socially desirable, -1 otherwise.
double standardize_bias(double theta_obs, double theta_rct, double s_rct_pooled,
                        int desired_direction);

// Standard error of the standardized bias, shrunk for the covariance induced
// by the shared treatment group:
//   (1/S) * sqrt((se_obs^2 + se_rct^2) * (1/Nc + 1/Nq) / (1/Nc + 1/Nq + 2/Nt))
double bias_se(double se_obs, double se_rct, double s_rct_pooled, long n_trt, long n_contr,
               long n_comp);

// P = pretest used (proxy pretests count), L = local comparison group,
// R = covariates span at least 4 distinct conceptual domains.
DesignCell classify_design(bool pretest_used, bool comparison_is_local,
                           const std::set<CovariateDomain>& covariate_domains);

}  // namespace wsc

#endif
