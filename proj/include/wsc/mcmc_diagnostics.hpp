#ifndef WSC_MCMC_DIAGNOSTICS_HPP
#define WSC_MCMC_DIAGNOSTICS_HPP

#include <Eigen/Dense>

namespace wsc {

// per-parameter chain health; NaN where the statistic is undefined
// (constant chains, too few draws)
struct ParamDiag {
  double rhat = 0.0;
  double ess_bulk = 0.0;
  double ess_tail = 0.0;
};

// x holds one parameter's draws, rows = iterations, cols = chains.
// rhat is the rank-normalized split statistic folded for scale as well;
// ess follows the paired initial-monotone-sequence construction.
ParamDiag param_diagnostics(const Eigen::MatrixXd& x);

// effective sample size of the given sequences without rank normalization
double ess_of(const Eigen::MatrixXd& x);

}  // namespace wsc

#endif
