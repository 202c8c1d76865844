#ifndef WSC_NUTS_HPP
#define WSC_NUTS_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <functional>

#include "wsc/rng.hpp"

namespace wsc {

// differentiable log-density target; grad may be null when only the value is
// needed. Must return -inf (never throw) on invalid points.
struct NutsTarget {
  int dim = 0;
  std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)> logp_grad;
};

struct NutsOptions {
  int iterations = 2000;  // total, warmup included
  int warmup = 1000;
  double target_accept = 0.9;
  int max_treedepth = 10;
  double divergence_threshold = 1000.0;
  bool adapt_mass = true;
  double init_radius = 2.0;
  int max_init_tries = 100;
};

struct NutsResult {
  Eigen::MatrixXd draws;  // (iterations - warmup) x dim
  int divergences = 0;     // post-warmup
  int max_depth_hits = 0;  // post-warmup
  double mean_accept = 0.0;
  double step_size = 0.0;
  Eigen::VectorXd inv_mass;
};

// one chain of the no-U-turn sampler with dual-averaging step size and
// windowed diagonal mass adaptation
NutsResult run_nuts(const NutsTarget& target, const NutsOptions& opt, Rng& rng,
                    const Eigen::VectorXd* init = nullptr);

}  // namespace wsc

#endif
