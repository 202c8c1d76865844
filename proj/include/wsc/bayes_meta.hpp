#ifndef WSC_BAYES_META_HPP
#define WSC_BAYES_META_HPP

#include <Eigen/Dense>
#include <array>
#include <limits>
#include <string>
#include <vector>

#include "wsc/bayes_model.hpp"
#include "wsc/dataset.hpp"

namespace wsc {

// retained posterior draws on the natural scale, chain-major rows
struct PosteriorDraws {
  Eigen::MatrixXd draws;  // (chains * kept_per_chain) x dim
  int chains = 0;
  int kept_per_chain = 0;
  std::vector<std::string> names;
  std::vector<bool> structural;

  std::vector<double> rhat, ess_bulk, ess_tail;  // per parameter

  int divergences = 0;
  int max_depth_hits = 0;
  std::vector<double> step_sizes;    // per chain
  std::vector<double> mean_accepts;  // per chain

  BayesSpec spec;  // settings the draws were produced under

  Eigen::VectorXd column(int p) const { return draws.col(p); }
};

struct DesignSummary {
  DesignCell design;
  Level level = Level::kStudy;
  double mean = 0.0;
  double sd = 0.0;
  double rope_prob = std::numeric_limits<double>::quiet_NaN();
  double pi_lo = std::numeric_limits<double>::quiet_NaN();
  double pi_hi = std::numeric_limits<double>::quiet_NaN();
};

struct ParamSummary {
  std::string name;
  double mean = 0.0, sd = 0.0, q05 = 0.0, q50 = 0.0, q95 = 0.0;
  double rhat = 0.0, ess_bulk = 0.0, ess_tail = 0.0;
  bool structural = true;
};

struct DiagnosticsReport {
  std::vector<ParamSummary> params;
  int divergences = 0;
  int max_depth_hits = 0;
  std::vector<double> step_sizes;
  std::vector<double> mean_accepts;
};

// fit the hierarchical model; throws NotConverged when the structural
// parameters miss the R-hat/ESS gate (unless the spec disables the check)
PosteriorDraws sample(const Dataset& ds, const BayesSpec& spec);

// counterfactual marginalization: mean and SD of bias each design would
// show on the observed covariate mix, at the requested level
std::array<DesignSummary, kNumDesigns> marginalize_designs(const PosteriorDraws& draws,
                                                           const Dataset& ds, Level level);

// posterior-predictive probability that a new unit's bias lies in the rope;
// sims_per_draw 0 means the spec default
double predictive_rope(const PosteriorDraws& draws, const Dataset& ds, DesignCell design,
                       Level level, double rope, long sims_per_draw = 0);

// central interval of the same predictive distribution at coverage beta
std::pair<double, double> predictive_interval(const PosteriorDraws& draws, const Dataset& ds,
                                              DesignCell design, Level level, double beta,
                                              long sims_per_draw = 0);

// all designs x levels with rope probabilities and predictive intervals filled in
std::vector<DesignSummary> design_summaries(const PosteriorDraws& draws, const Dataset& ds,
                                            double pi_level = 0.95);

DiagnosticsReport diagnostics(const PosteriorDraws& draws);

}  // namespace wsc

#endif
