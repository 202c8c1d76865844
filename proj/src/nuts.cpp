#include "wsc/nuts.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "wsc/errors.hpp"

namespace wsc {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double logaddexp(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

struct Phase {  // one end of a trajectory: position, momentum, gradient
  Eigen::VectorXd q, p, grad;
};

struct Walker {
  const NutsTarget* target;
  Eigen::VectorXd inv_mass;
  double eps = 1.0;
  double h0 = 0.0;  // Hamiltonian at the iteration start
  double divergence_threshold = 1000.0;

  double sum_alpha = 0.0;
  int n_alpha = 0;
  bool diverged = false;

  double kinetic(const Eigen::VectorXd& p) const {
    return 0.5 * p.cwiseProduct(inv_mass).dot(p);
  }

  // one leapfrog step in place; returns the node's log weight h0 - H
  double step(Phase& ph, int dir) {
    const double e = eps * dir;
    ph.p += 0.5 * e * ph.grad;
    ph.q += e * inv_mass.cwiseProduct(ph.p);
    const double logp = target->logp_grad(ph.q, &ph.grad);
    ph.p += 0.5 * e * ph.grad;
    double lw = kNegInf;
    if (std::isfinite(logp)) {
      const double h = -logp + kinetic(ph.p);
      lw = std::isfinite(h) ? h0 - h : kNegInf;
    }
    sum_alpha += std::exp(std::min(0.0, lw));
    ++n_alpha;
    if (!(lw > -divergence_threshold)) diverged = true;
    return lw;
  }
};

struct Tree {
  Phase minus, plus;
  Eigen::VectorXd sample;
  double logw = kNegInf;
  bool turning = false;
};

bool uturn(const Phase& minus, const Phase& plus, const Eigen::VectorXd& inv_mass) {
  const Eigen::VectorXd dq = plus.q - minus.q;
  return dq.dot(inv_mass.cwiseProduct(minus.p)) < 0.0 ||
         dq.dot(inv_mass.cwiseProduct(plus.p)) < 0.0;
}

// doubling subtree grown from `from` in direction dir
Tree build_tree(Walker& w, int depth, const Phase& from, int dir, Rng& rng) {
  Tree t;
  if (depth == 0) {
    Phase ph = from;
    t.logw = w.step(ph, dir);
    t.sample = ph.q;
    t.minus = ph;
    t.plus = std::move(ph);
    return t;
  }
  Tree first = build_tree(w, depth - 1, from, dir, rng);
  if (w.diverged || first.turning) return first;
  const Phase& edge = dir > 0 ? first.plus : first.minus;
  Tree second = build_tree(w, depth - 1, edge, dir, rng);
  if (w.diverged) return second;

  Tree merged;
  merged.minus = dir > 0 ? std::move(first.minus) : std::move(second.minus);
  merged.plus = dir > 0 ? std::move(second.plus) : std::move(first.plus);
  merged.logw = logaddexp(first.logw, second.logw);
  const double p_second = std::exp(second.logw - merged.logw);
  merged.sample = rng.uniform() < p_second ? std::move(second.sample) : std::move(first.sample);
  merged.turning =
      second.turning || uturn(merged.minus, merged.plus, w.inv_mass);
  return merged;
}

// mass-adaptation window boundaries within warmup (Stan-style schedule)
struct Schedule {
  int open = 0;   // first adapting iteration
  int close = 0;  // first post-adaptation iteration
  std::vector<int> window_ends;
};

Schedule make_schedule(int warmup, bool adapt_mass) {
  Schedule s;
  int init_buf = 75, term_buf = 50, base = 25;
  if (warmup < init_buf + base + term_buf) {
    init_buf = int(0.15 * warmup);
    term_buf = int(0.10 * warmup);
    base = warmup - init_buf - term_buf;
  }
  s.open = init_buf;
  s.close = warmup - term_buf;
  if (!adapt_mass || base <= 0 || s.close <= s.open) {
    s.open = s.close = warmup;
    return s;
  }
  int start = s.open, size = base;
  while (start < s.close) {
    int end = start + size;
    if (end + 2 * size > s.close) end = s.close;  // absorb the remainder
    s.window_ends.push_back(end);
    start = end;
    size *= 2;
  }
  return s;
}

struct Welford {
  long n = 0;
  Eigen::VectorXd mean, m2;
  void reset(int dim) {
    n = 0;
    mean = Eigen::VectorXd::Zero(dim);
    m2 = Eigen::VectorXd::Zero(dim);
  }
  void add(const Eigen::VectorXd& x) {
    ++n;
    const Eigen::VectorXd d = x - mean;
    mean += d / double(n);
    m2 += d.cwiseProduct(x - mean);
  }
};

double find_initial_step(Walker& w, const Phase& start, double logp0, Rng& rng) {
  const int dim = int(start.q.size());
  w.eps = 1.0;
  Phase probe = start;
  for (int i = 0; i < dim; ++i) probe.p[i] = rng.normal() / std::sqrt(w.inv_mass[i]);
  w.h0 = -logp0 + w.kinetic(probe.p);
  Phase ph = probe;
  double lw = w.step(ph, 1);
  int dir = lw > std::log(0.5) ? 1 : -1;
  for (int it = 0; it < 100; ++it) {
    w.eps *= dir > 0 ? 2.0 : 0.5;
    if (w.eps > 1e10 || w.eps < 1e-10) break;
    ph = probe;
    w.diverged = false;
    lw = w.step(ph, 1);
    if ((dir > 0 && lw <= std::log(0.5)) || (dir < 0 && lw > std::log(0.5))) break;
  }
  w.diverged = false;
  w.sum_alpha = 0.0;
  w.n_alpha = 0;
  return std::clamp(w.eps, 1e-10, 1e10);
}

}  // namespace

NutsResult run_nuts(const NutsTarget& target, const NutsOptions& opt, Rng& rng,
                    const Eigen::VectorXd* init) {
  const int dim = target.dim;
  const int kept = opt.iterations - opt.warmup;
  if (dim <= 0 || kept <= 0) throw ConfigError("sampler needs a positive dimension and draws");

  Phase cur;
  cur.q.resize(dim);
  cur.grad.resize(dim);
  cur.p = Eigen::VectorXd::Zero(dim);
  double logp = kNegInf;
  for (int attempt = 0; attempt < opt.max_init_tries; ++attempt) {
    if (init && attempt == 0) {
      cur.q = *init;
    } else {
      for (int i = 0; i < dim; ++i) cur.q[i] = rng.uniform(-opt.init_radius, opt.init_radius);
    }
    logp = target.logp_grad(cur.q, &cur.grad);
    if (std::isfinite(logp) && cur.grad.allFinite()) break;
    logp = kNegInf;
  }
  if (!std::isfinite(logp))
    throw NumericalFailure("sampler could not find a starting point with finite density");

  Walker w;
  w.target = &target;
  w.inv_mass = Eigen::VectorXd::Ones(dim);
  w.divergence_threshold = opt.divergence_threshold;
  w.eps = find_initial_step(w, cur, logp, rng);

  // dual averaging state
  const double da_gamma = 0.05, da_t0 = 10.0, da_kappa = 0.75;
  double da_mu = std::log(10.0 * w.eps);
  double da_hbar = 0.0, da_logebar = std::log(w.eps);
  long da_count = 0;

  const Schedule sched = make_schedule(opt.warmup, opt.adapt_mass && dim > 0);
  Welford acc;
  acc.reset(dim);
  std::size_t next_window = 0;

  NutsResult out;
  out.draws.resize(kept, dim);
  double accept_sum = 0.0;
  int accept_n = 0;

  for (int iter = 0; iter < opt.iterations; ++iter) {
    const bool warm = iter < opt.warmup;

    for (int i = 0; i < dim; ++i) cur.p[i] = rng.normal() / std::sqrt(w.inv_mass[i]);
    w.h0 = -logp + w.kinetic(cur.p);
    w.diverged = false;
    w.sum_alpha = 0.0;
    w.n_alpha = 0;

    Phase minus = cur, plus = cur;
    Eigen::VectorXd sample = cur.q;
    double logw_total = 0.0;  // the start node carries weight exp(0)
    bool saw_divergence = false, hit_depth = true;

    for (int depth = 0; depth < opt.max_treedepth; ++depth) {
      const int dir = rng.uniform() < 0.5 ? -1 : 1;
      Tree sub = build_tree(w, depth, dir > 0 ? plus : minus, dir, rng);
      if (w.diverged) {
        saw_divergence = true;
        hit_depth = false;
        break;
      }
      if (!sub.turning) {
        // biased progressive sampling favours the fresh subtree
        if (rng.uniform() < std::exp(std::min(0.0, sub.logw - logw_total)))
          sample = sub.sample;
        logw_total = logaddexp(logw_total, sub.logw);
      }
      if (dir > 0)
        plus = std::move(sub.plus);
      else
        minus = std::move(sub.minus);
      if (sub.turning || uturn(minus, plus, w.inv_mass)) {
        hit_depth = false;
        break;
      }
    }

    cur.q = sample;
    logp = target.logp_grad(cur.q, &cur.grad);

    const double alpha = w.n_alpha > 0 ? w.sum_alpha / double(w.n_alpha) : 0.0;
    if (warm) {
      // dual averaging toward the target acceptance statistic
      ++da_count;
      const double eta = 1.0 / (double(da_count) + da_t0);
      da_hbar = (1.0 - eta) * da_hbar + eta * (opt.target_accept - alpha);
      const double logeps = da_mu - std::sqrt(double(da_count)) / da_gamma * da_hbar;
      const double wgt = std::pow(double(da_count), -da_kappa);
      da_logebar = wgt * logeps + (1.0 - wgt) * da_logebar;
      w.eps = std::exp(logeps);

      if (iter >= sched.open && iter < sched.close) {
        acc.add(cur.q);
        if (next_window < sched.window_ends.size() &&
            iter + 1 == sched.window_ends[next_window]) {
          if (acc.n > 1) {
            const double n = double(acc.n);
            Eigen::VectorXd var = acc.m2 / (n - 1.0);
            w.inv_mass = (n / (n + 5.0)) * var +
                         Eigen::VectorXd::Constant(dim, 1e-3 * (5.0 / (n + 5.0)));
            w.inv_mass = w.inv_mass.cwiseMax(1e-10);
          }
          acc.reset(dim);
          ++next_window;
          // restart step-size adaptation around the current value
          w.eps = std::exp(da_logebar);
          da_mu = std::log(10.0 * w.eps);
          da_hbar = 0.0;
          da_count = 0;
        }
      }
      if (iter + 1 == opt.warmup) w.eps = std::exp(da_logebar);
    } else {
      out.draws.row(iter - opt.warmup) = cur.q;
      if (saw_divergence) ++out.divergences;
      if (hit_depth) ++out.max_depth_hits;
      accept_sum += alpha;
      ++accept_n;
    }
  }

  out.mean_accept = accept_n > 0 ? accept_sum / accept_n : 0.0;
  out.step_size = w.eps;
  out.inv_mass = w.inv_mass;
  return out;
}

}  // namespace wsc
