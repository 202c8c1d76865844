#ifndef WSC_FREQ_META_HPP
#define WSC_FREQ_META_HPP

#include <Eigen/Dense>
#include <array>
#include <utility>
#include <vector>

#include "wsc/dataset.hpp"

// Non-Bayesian engine: multilevel random-effects meta-regression with
// design-specific variance components at the study (tau2), study x domain
// (omega2), and contrast (phi2) levels, REML-estimated under block-correlated
// sampling errors, with cluster-robust (bias-reduced) inference.

namespace wsc {

struct FreqSpec {
  double rho = 0.8;            // sampling-error correlation within study
  bool use_covariates = false; // include study characteristics in the mean
  double rope = 0.10;          // half-width of the negligible-bias region
  double pi_level = 0.95;      // coverage of prediction intervals
  // Test hook: when false all variance components are pinned at zero and the
  // fit reduces to weighted GLS on the error covariance alone.
  bool estimate_components = true;

  void validate() const;
};

struct FreqFit {
  std::array<double, kNumDesigns> mu_hat{};   // NaN for absent designs
  std::array<double, kNumDesigns> tau2{};
  std::array<double, kNumDesigns> omega2{};
  std::array<double, kNumDesigns> phi2{};
  std::array<bool, kNumDesigns> design_present{};
  // a component is inactive when the grouping cannot separate it from a
  // coarser one (it is then reported as exactly 0)
  std::array<bool, kNumDesigns> tau_active{};
  std::array<bool, kNumDesigns> omega_active{};
  std::array<bool, kNumDesigns> phi_active{};
  std::array<int, kNumDesigns> n_studies{};   // clusters contributing to each design

  std::vector<double> beta_hat;               // covariate effects, empty when disabled
  double reml_loglik = 0.0;
  int iterations = 0;

  // filled by robust_vcov
  Eigen::MatrixXd vcov_robust;                          // kNumDesigns x kNumDesigns
  std::array<double, kNumDesigns> satterthwaite_df{};
  std::array<bool, kNumDesigns> inference_unavailable{};
  bool has_robust = false;

  // model-based curvature of the fixed effects, kept for the robust pass
  Eigen::MatrixXd model_vcov;                 // p x p
  std::vector<int> design_column;             // design index -> column in X, -1 if absent
};

struct LevelSummary {
  DesignCell design;
  Level level = Level::kContrast;
  double mean = 0.0;
  double sd = 0.0;        // total SD of the bias distribution at this level
  double pi_lo = 0.0;
  double pi_hi = 0.0;
  double rope_prob = 0.0;
  bool available = true;  // false when cluster-robust inference is undefined
};

// Block-diagonal sampling-error covariance: one block per study (contrasts in
// file order within studies ordered as in the studies table), diagonal s_y^2,
// off-diagonal rho * s_a * s_b.
Eigen::MatrixXd build_error_cov(const Dataset& ds, double rho);

// REML fit of the multilevel model. Throws NonConvergence, SingularDesign.
FreqFit fit_freq(const Dataset& ds, const FreqSpec& spec);

// Restricted log-likelihood at fixed variance components (zero entries are
// pinned, not estimated). Exposed so the objective can be pinned against a
// dense-matrix evaluation.
double reml_loglik_at(const Dataset& ds, const FreqSpec& spec,
                      const std::array<double, kNumDesigns>& tau2,
                      const std::array<double, kNumDesigns>& omega2,
                      const std::array<double, kNumDesigns>& phi2);

// Cluster-robust (CR2-style) variance of the per-design means with
// Satterthwaite degrees of freedom; clusters are studies. Designs backed by
// fewer than 2 studies are flagged inference_unavailable. Throws
// TooFewClusters when no design supports robust inference at all.
void robust_vcov(FreqFit& fit, const Dataset& ds, const FreqSpec& spec);

// sqrt(Var(mu_hat) + cumulative variance components for the level)
double sd_of_bias(const FreqFit& fit, DesignCell design, Level level);

// mu_hat +- t(nu, (1+beta)/2) * sd_of_bias
std::pair<double, double> prediction_interval(const FreqFit& fit, DesignCell design, Level level,
                                              double beta);

// Phi((rope - mu)/S) - Phi((-rope - mu)/S); S = 0 degenerates to an indicator
double rope_probability(const FreqFit& fit, DesignCell design, Level level, double rope);

// one row per (design present, level)
std::vector<LevelSummary> level_summaries(const FreqFit& fit, double rope, double pi_level);

}  // namespace wsc

#endif
