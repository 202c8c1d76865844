#ifndef WSC_BAYES_MODEL_HPP
#define WSC_BAYES_MODEL_HPP

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "wsc/dataset.hpp"
#include "wsc/rng.hpp"

namespace wsc {

enum class PhiAlphaPrior { kBoundedUniform, kImproperFlat };

struct BayesSpec {
  double rho = 0.8;
  double nu_floor = 2.5;  // keeps every random-effect variance finite
  int chains = 4;
  int iterations = 2000;  // per chain, warmup included
  int warmup = 1000;
  std::uint64_t seed = 0;
  double rope = 0.10;
  PhiAlphaPrior phi_alpha_prior = PhiAlphaPrior::kBoundedUniform;
  double phi_alpha_lo = -20.0;
  double phi_alpha_hi = 20.0;

  double target_accept = 0.9;
  int max_treedepth = 10;

  // convergence gate on structural parameters
  bool check_convergence = true;
  double rhat_max = 1.01;
  double ess_min = 400.0;

  bool mean_only = false;  // degenerate model (overall mean only), for tests
  int predictive_sims = 4;

  void validate() const;  // throws ConfigError
};

// random-effect batches in the order they appear in the model
enum ReBatch : int {
  kBatchA = 0,  // study
  kBatchB,      // outcome domain
  kBatchC,      // design x study
  kBatchD,      // design x domain
  kBatchE,      // study x domain
  kBatchF,      // design x study x domain
  kBatchG,      // contrast
  kNumBatches
};

inline constexpr int kNumCovariates = 4;

// which batches carry covariate slopes (a,c,e,f,g) and design terms (c,d,f,g)
inline constexpr std::array<int, kNumBatches> kZetaRow = {0, -1, 1, -1, 2, 3, 4};
inline constexpr std::array<int, kNumBatches> kPhiRow = {-1, -1, 0, 1, -1, 2, 3};
inline constexpr int kNumZetaRows = 5;
inline constexpr int kNumPhiRows = 4;

// index sets derived from a dataset: group memberships for every
// random-effect batch plus the study covariate matrix
struct ModelIndex {
  int n_studies = 0;
  int n_domains = 0;
  int n_contrasts = 0;
  std::vector<std::string> domains;  // sorted unique outcome domains

  std::vector<int> k_of, l_of, j_of;  // per contrast: study, domain, design

  std::vector<std::pair<int, int>> c_groups;   // (design, study)
  std::vector<std::pair<int, int>> d_groups;   // (design, domain)
  std::vector<std::pair<int, int>> e_groups;   // (study, domain)
  std::vector<std::array<int, 3>> f_groups;    // (design, study, domain)
  std::vector<int> c_of, d_of, e_of, f_of;     // per contrast group ids

  Eigen::MatrixXd X;  // n_studies x 4; count covariate z-scored over studies
  double xn_mean = 0.0;
  double xn_sd = 1.0;

  struct Block {
    std::vector<int> rows;  // contrast indices, one block per study
  };
  std::vector<Block> blocks;

  static ModelIndex build(const Dataset& ds);
  int group_count(int batch) const;
};

// model parameters on their natural (constrained) scale
struct ParameterVector {
  double theta = 0.0;
  std::array<double, 3> gamma{};  // pretest, local, rich
  std::array<double, kNumDesigns> delta{};
  std::array<double, kNumCovariates> beta{};

  // actual random-effect values, batch order a..g
  std::array<std::vector<double>, kNumBatches> effects;

  std::array<double, kNumBatches> nu;      // t degrees of freedom
  std::array<double, kNumBatches> alpha{};  // variance-regression intercepts
  std::array<std::array<double, kNumCovariates>, kNumZetaRows> zeta{};
  std::array<std::array<double, 3>, kNumPhiRows> phivar{};  // P, L, R slopes
  std::array<std::array<double, kNumDesigns>, kNumPhiRows> xivar{};

  double tau_beta = 1.0;
  double phi_gamma = 0.0;
  double tau_gamma = 1.0;
  double tau_delta = 1.0;
  double phi_alpha = 0.0;
  double tau_alpha = 1.0;
  double tau_zeta = 1.0;
  double phi_phi = 0.0;
  double tau_phi = 1.0;
  double tau_xi = 1.0;

  ParameterVector() { nu.fill(30.0); }
};

// cell mean implied by the design regression
double mu_of_design(const ParameterVector& pv, int design);

// log of the Eq.-5 scale for one group of a batch; j and k are the group's
// design cell and study (-1 where the batch has no such term)
double log_scale_of(const ParameterVector& pv, const ModelIndex& ix, int batch, int j, int k);

// hierarchical model over a dataset: joint density, gradient on the
// unconstrained scale, and the parameter packing used for draws
class BayesModel {
 public:
  BayesModel(const Dataset& ds, const BayesSpec& spec);

  int dim() const { return dim_; }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<bool>& structural() const { return structural_; }
  const ModelIndex& index() const { return ix_; }
  const BayesSpec& spec() const { return spec_; }

  // log posterior with transform Jacobians, non-centered random effects;
  // grad may be null
  double logp_grad(const Eigen::VectorXd& u, Eigen::VectorXd* grad) const;

  // natural-scale views of an unconstrained point
  ParameterVector constrain(const Eigen::VectorXd& u) const;
  Eigen::VectorXd constrain_row(const Eigen::VectorXd& u) const;
  ParameterVector unflatten(const Eigen::VectorXd& row) const;
  Eigen::VectorXd flatten(const ParameterVector& pv) const;

  // ancestral draw from the prior (scales, then effects)
  ParameterVector prior_draw(Rng& rng) const;

  // mean vector implied by a parameter point, in contrast order
  Eigen::VectorXd mean_vector(const ParameterVector& pv) const;

 private:
  struct Block {
    std::vector<int> rows;
    Eigen::MatrixXd L;  // Cholesky factor of the error covariance
    double logdet = 0.0;
  };

  double logp_grad_full(const Eigen::VectorXd& u, Eigen::VectorXd* grad) const;
  double logp_grad_mean_only(const Eigen::VectorXd& u, Eigen::VectorXd* grad) const;

  BayesSpec spec_;
  ModelIndex ix_;
  std::vector<Block> blocks_;
  Eigen::VectorXd y_;
  int dim_ = 0;
  std::vector<std::string> names_;
  std::vector<bool> structural_;

  // offsets into the flat vector
  int off_gamma_ = 0, off_delta_ = 0, off_beta_ = 0;
  std::array<int, kNumBatches> off_z_{};
  int off_eta_ = 0, off_alpha_ = 0, off_zeta_ = 0, off_phi_ = 0, off_xi_ = 0, off_hyper_ = 0;

  friend double log_posterior(const ParameterVector&, const Dataset&, const BayesSpec&);
  double log_posterior_centered(const ParameterVector& pv) const;
};

// joint log density (prior + likelihood) at a natural-scale point
double log_posterior(const ParameterVector& pv, const Dataset& ds, const BayesSpec& spec);

}  // namespace wsc

#endif
