#ifndef WSC_SIMGEN_HPP
#define WSC_SIMGEN_HPP

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "wsc/bayes_model.hpp"
#include "wsc/dataset.hpp"

// Generative models and oracles: synthesize crossed-hierarchical datasets
// from known truths, run recovery and simulation-based calibration studies,
// and provide Monte Carlo oracles for the closed-form SE formula.

namespace wsc {

// contrasts one study contributes to one design cell, split by the study's
// outcome domains (entries may be 0; the cell total must be >= 1)
struct CellLoad {
  int design = 0;
  std::vector<int> per_domain;
};

struct StudyPlan {
  std::string id;  // autogenerated when empty
  bool education = false;
  bool multicell = false;
  bool nu_team = false;
  int domains = 1;
  std::vector<CellLoad> cells;
};

// fixed normal-components truth: per-design means and level SDs
struct FreqTruth {
  std::array<double, kNumDesigns> mu{};
  std::array<double, kNumDesigns> tau{};    // between-study SD
  std::array<double, kNumDesigns> omega{};  // between-hypothesis SD
  std::array<double, kNumDesigns> phi{};    // between-contrast SD
  std::array<double, kNumCovariates> beta{};
};

// kFreqFixed draws normal random effects from FreqTruth; kBayesFixed draws
// Student-t effects from a fixed ParameterVector's scale laws; in
// kBayesHyperdrawn the whole truth is drawn from the model prior first
enum class TruthMode { kFreqFixed, kBayesFixed, kBayesHyperdrawn };

struct GenConfig {
  std::vector<StudyPlan> studies;
  TruthMode mode = TruthMode::kFreqFixed;
  FreqTruth freq;
  ParameterVector bayes;  // truth for kBayesFixed (its effects are redrawn)
  BayesSpec sampler;      // prior for hyperdrawn truth and fit settings
  double s_y_median = 0.1;  // log-normal law of the contrast SEs
  double s_y_log_sd = 0.4;
  double rho = 0.8;  // sampling-error correlation within study
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

// parse a JSON config; unknown keys are rejected. Scalars broadcast to
// per-design / per-batch arrays where one is expected. When "studies" is
// absent the default census-shaped structure is used.
GenConfig parse_gen_config(const std::string& json_text);

// desk-scale default: 39 studies spread over the eight design cells with the
// study / contrast cell counts used throughout the test suite
GenConfig default_config();

struct GenResult {
  Dataset data;
  ParameterVector truth;  // meaningful in the Bayesian modes
  std::array<double, kNumDesigns> mu_true{};
};

// deterministic given cfg.seed; the output cell census equals the plan and
// the rows round-trip through the CSV schema
Dataset generate(const GenConfig& cfg);
GenResult generate_full(const GenConfig& cfg);

enum class Engine { kFreq, kBayes };

struct RecoveryCell {
  int rep = 0;
  int design = 0;
  double mu_true = 0.0, tau_true = 0.0, omega_true = 0.0, phi_true = 0.0;
  double mu_hat = 0.0, tau_hat = 0.0, omega_hat = 0.0, phi_hat = 0.0;
  double lo = 0.0, hi = 0.0;  // 95% robust CI (freq) / 90% credible (bayes)
  bool covered = false;
  bool inference_ok = true;
};

struct RecoveryReport {
  Engine engine = Engine::kFreq;
  int replications = 0;
  int usable = 0;
  std::vector<RecoveryCell> cells;     // usable replicates only
  std::vector<std::string> failures;   // error messages of failed replicates

  // summaries over one design cell; NaN when it has no usable cells
  double median(int design, double RecoveryCell::*field) const;
  double coverage(int design) const;  // over inference_ok cells
  double share_at_zero(int design, double RecoveryCell::*field) const;
};

// fit every replicate and compare against the generating truth; engine
// errors are recorded per replicate, not fatal
RecoveryReport recovery_study(const GenConfig& cfg, Engine engine, int replications);

struct SbcReport {
  int replications = 0;
  int usable = 0;
  int max_rank = 0;  // ranks lie in [0, max_rank]
  int bins = 0;
  std::vector<std::string> names;           // one histogram per parameter
  std::vector<std::vector<int>> histogram;  // names.size() x bins
  double chi2 = 0.0;
  long df = 0;
  double p_value = 1.0;
  std::vector<std::string> failures;
};

// simulation-based calibration: per replicate draw the truth from the prior,
// simulate data, sample the posterior with `spec`, and rank the truth among
// thinned draws. Fewer than 90% usable replicates is an error. The
// data-generating prior is forced to match `spec`.
SbcReport sbc(const BayesSpec& spec, const GenConfig& cfg, int replications);

// empirical SD of the standardized bias when the observational and
// randomized arms share one treatment group and all effects are zero;
// oracle for the SE formula's shrinkage term
double se_oracle(long n_trt, long n_contr, long n_comp, long replications,
                 std::uint64_t seed = 20240915u);

// run fn(0..n-1) across hardware threads; fn must not throw
void parallel_reps(int n, const std::function<void(int)>& fn);

}  // namespace wsc

#endif
