#include "wsc/bayes_meta.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "wsc/errors.hpp"
#include "wsc/mcmc_diagnostics.hpp"
#include "wsc/nuts.hpp"
#include "wsc/stats.hpp"

namespace wsc {

namespace {

// batches whose random effects a new unit at this level would draw
std::vector<int> level_batches(Level level) {
  std::vector<int> b = {kBatchA, kBatchC};
  if (level == Level::kStudy) return b;
  b.insert(b.end(), {kBatchB, kBatchD, kBatchE});
  if (level == Level::kHypothesis) return b;
  b.insert(b.end(), {kBatchF, kBatchG});
  return b;
}

// (design, study) arguments for a batch's scale when the design is set
// counterfactually to j for a contrast of study k
std::pair<int, int> counterfactual_jk(int batch, int j, int k) {
  switch (batch) {
    case kBatchA: return {-1, k};
    case kBatchB: return {-1, -1};
    case kBatchD: return {j, -1};
    case kBatchE: return {-1, k};
    default: return {j, k};  // c, f, g
  }
}

}  // namespace

PosteriorDraws sample(const Dataset& ds, const BayesSpec& spec) {
  BayesModel model(ds, spec);
  const int dim = model.dim();
  const int kept = spec.iterations - spec.warmup;

  NutsTarget target;
  target.dim = dim;
  target.logp_grad = [&model](const Eigen::VectorXd& u, Eigen::VectorXd* g) {
    return model.logp_grad(u, g);
  };

  NutsOptions opt;
  opt.iterations = spec.iterations;
  opt.warmup = spec.warmup;
  opt.target_accept = spec.target_accept;
  opt.max_treedepth = spec.max_treedepth;

  PosteriorDraws out;
  out.spec = spec;
  out.chains = spec.chains;
  out.kept_per_chain = kept;
  out.names = model.names();
  out.structural = model.structural();
  out.draws.resize(std::size_t(spec.chains) * std::size_t(kept), dim);

  for (int c = 0; c < spec.chains; ++c) {
    Rng rng(derive_seed(spec.seed, std::uint64_t(c)));
    NutsResult res = run_nuts(target, opt, rng);
    for (int r = 0; r < kept; ++r)
      out.draws.row(Eigen::Index(c) * kept + r) = model.constrain_row(res.draws.row(r));
    out.divergences += res.divergences;
    out.max_depth_hits += res.max_depth_hits;
    out.step_sizes.push_back(res.step_size);
    out.mean_accepts.push_back(res.mean_accept);
  }

  out.rhat.resize(std::size_t(dim));
  out.ess_bulk.resize(std::size_t(dim));
  out.ess_tail.resize(std::size_t(dim));
  Eigen::MatrixXd per_param(kept, spec.chains);
  for (int p = 0; p < dim; ++p) {
    for (int c = 0; c < spec.chains; ++c)
      per_param.col(c) = out.draws.col(p).segment(Eigen::Index(c) * kept, kept);
    const ParamDiag d = param_diagnostics(per_param);
    out.rhat[std::size_t(p)] = d.rhat;
    out.ess_bulk[std::size_t(p)] = d.ess_bulk;
    out.ess_tail[std::size_t(p)] = d.ess_tail;
  }

  if (spec.check_convergence) {
    std::vector<std::string> failed;
    for (int p = 0; p < dim; ++p) {
      if (!out.structural[std::size_t(p)]) continue;
      const double r = out.rhat[std::size_t(p)];
      const double e = out.ess_bulk[std::size_t(p)];
      if (!(r <= spec.rhat_max) || !(e >= spec.ess_min)) failed.push_back(out.names[std::size_t(p)]);
    }
    if (!failed.empty()) {
      std::ostringstream msg;
      msg << failed.size() << " structural parameter(s) failed the convergence gate:";
      for (std::size_t i = 0; i < failed.size() && i < 6; ++i) msg << " " << failed[i];
      if (failed.size() > 6) msg << " ...";
      throw NotConverged(msg.str());
    }
  }
  return out;
}

std::array<DesignSummary, kNumDesigns> marginalize_designs(const PosteriorDraws& draws,
                                                           const Dataset& ds, Level level) {
  if (draws.spec.mean_only)
    throw ConfigError("marginalization is undefined for the degenerate mean-only model");
  BayesModel model(ds, draws.spec);
  const ModelIndex& ix = model.index();
  const std::vector<int> batches = level_batches(level);
  const Eigen::Index n_draws = draws.draws.rows();

  std::array<double, kNumDesigns> mean_acc{}, sd_acc{};
  for (Eigen::Index d = 0; d < n_draws; ++d) {
    const ParameterVector pv = model.unflatten(draws.draws.row(d));
    for (int j = 0; j < kNumDesigns; ++j) {
      const double mu = mu_of_design(pv, j);
      double mean_sum = 0.0, var_sum = 0.0;
      for (int i = 0; i < ix.n_contrasts; ++i) {
        const int k = ix.k_of[std::size_t(i)];
        double m = mu;
        for (int c = 0; c < kNumCovariates; ++c) m += pv.beta[std::size_t(c)] * ix.X(k, c);
        double v = 0.0;
        for (int b : batches) {
          const auto [jj, kk] = counterfactual_jk(b, j, k);
          const double s = std::exp(log_scale_of(pv, ix, b, jj, kk));
          const double nu = pv.nu[std::size_t(b)];
          v += s * s * nu / (nu - 2.0);
        }
        mean_sum += m;
        var_sum += v;
      }
      mean_acc[std::size_t(j)] += mean_sum / double(ix.n_contrasts);
      sd_acc[std::size_t(j)] += std::sqrt(var_sum / double(ix.n_contrasts));
    }
  }

  std::array<DesignSummary, kNumDesigns> out;
  for (int j = 0; j < kNumDesigns; ++j) {
    out[std::size_t(j)].design = DesignCell::from_index(j);
    out[std::size_t(j)].level = level;
    out[std::size_t(j)].mean = mean_acc[std::size_t(j)] / double(n_draws);
    out[std::size_t(j)].sd = sd_acc[std::size_t(j)] / double(n_draws);
  }
  return out;
}

double predictive_rope(const PosteriorDraws& draws, const Dataset& ds, DesignCell design,
                       Level level, double rope, long sims_per_draw) {
  if (draws.spec.mean_only)
    throw ConfigError("predictive simulation is undefined for the degenerate mean-only model");
  if (sims_per_draw <= 0) sims_per_draw = draws.spec.predictive_sims;
  BayesModel model(ds, draws.spec);
  const ModelIndex& ix = model.index();
  const std::vector<int> batches = level_batches(level);
  const int j = design.index();
  const Eigen::Index n_draws = draws.draws.rows();

  Rng rng(derive_seed(draws.spec.seed,
                      0xB0B0ull + std::uint64_t(j) * 8 + std::uint64_t(int(level))));
  long inside = 0, total = 0;
  for (Eigen::Index d = 0; d < n_draws; ++d) {
    const ParameterVector pv = model.unflatten(draws.draws.row(d));
    const double mu = mu_of_design(pv, j);
    for (int i = 0; i < ix.n_contrasts; ++i) {
      const int k = ix.k_of[std::size_t(i)];
      double base = mu;
      for (int c = 0; c < kNumCovariates; ++c) base += pv.beta[std::size_t(c)] * ix.X(k, c);
      for (long s = 0; s < sims_per_draw; ++s) {
        double v = base;
        for (int b : batches) {
          const auto [jj, kk] = counterfactual_jk(b, j, k);
          const double scale = std::exp(log_scale_of(pv, ix, b, jj, kk));
          v += scale * rng.student_t(pv.nu[std::size_t(b)]);
        }
        if (std::abs(v) < rope) ++inside;
        ++total;
      }
    }
  }
  return double(inside) / double(total);
}

std::pair<double, double> predictive_interval(const PosteriorDraws& draws, const Dataset& ds,
                                              DesignCell design, Level level, double beta,
                                              long sims_per_draw) {
  if (draws.spec.mean_only)
    throw ConfigError("predictive simulation is undefined for the degenerate mean-only model");
  if (!(beta > 0.0 && beta < 1.0)) throw ConfigError("interval coverage must lie in (0, 1)");
  if (sims_per_draw <= 0) sims_per_draw = draws.spec.predictive_sims;
  BayesModel model(ds, draws.spec);
  const ModelIndex& ix = model.index();
  const std::vector<int> batches = level_batches(level);
  const int j = design.index();
  const Eigen::Index n_draws = draws.draws.rows();

  // thin the draw loop when the full simulation would not fit comfortably
  const long total = long(n_draws) * ix.n_contrasts * sims_per_draw;
  constexpr long kMaxKeep = 2000000;
  const Eigen::Index stride = total > kMaxKeep ? Eigen::Index((total + kMaxKeep - 1) / kMaxKeep) : 1;

  Rng rng(derive_seed(draws.spec.seed,
                      0xB1B1ull + std::uint64_t(j) * 8 + std::uint64_t(int(level))));
  std::vector<double> sims;
  sims.reserve(std::size_t(std::min(total, kMaxKeep) + ix.n_contrasts * sims_per_draw));
  for (Eigen::Index d = 0; d < n_draws; d += stride) {
    const ParameterVector pv = model.unflatten(draws.draws.row(d));
    const double mu = mu_of_design(pv, j);
    for (int i = 0; i < ix.n_contrasts; ++i) {
      const int k = ix.k_of[std::size_t(i)];
      double base = mu;
      for (int c = 0; c < kNumCovariates; ++c) base += pv.beta[std::size_t(c)] * ix.X(k, c);
      for (long s = 0; s < sims_per_draw; ++s) {
        double v = base;
        for (int b : batches) {
          const auto [jj, kk] = counterfactual_jk(b, j, k);
          const double scale = std::exp(log_scale_of(pv, ix, b, jj, kk));
          v += scale * rng.student_t(pv.nu[std::size_t(b)]);
        }
        sims.push_back(v);
      }
    }
  }
  std::sort(sims.begin(), sims.end());
  auto q = [&](double p_) {
    const double h = p_ * double(sims.size() - 1);
    const std::size_t lo = std::size_t(h);
    const double f = h - double(lo);
    return sims[lo] * (1.0 - f) + sims[std::min(lo + 1, sims.size() - 1)] * f;
  };
  return {q(0.5 - beta / 2.0), q(0.5 + beta / 2.0)};
}

std::vector<DesignSummary> design_summaries(const PosteriorDraws& draws, const Dataset& ds,
                                            double pi_level) {
  std::vector<DesignSummary> out;
  for (Level level : {Level::kStudy, Level::kHypothesis, Level::kContrast}) {
    auto rows = marginalize_designs(draws, ds, level);
    for (auto& row : rows) {
      row.rope_prob = predictive_rope(draws, ds, row.design, level, draws.spec.rope);
      const auto [lo, hi] = predictive_interval(draws, ds, row.design, level, pi_level);
      row.pi_lo = lo;
      row.pi_hi = hi;
      out.push_back(row);
    }
  }
  return out;
}

DiagnosticsReport diagnostics(const PosteriorDraws& draws) {
  DiagnosticsReport rep;
  rep.divergences = draws.divergences;
  rep.max_depth_hits = draws.max_depth_hits;
  rep.step_sizes = draws.step_sizes;
  rep.mean_accepts = draws.mean_accepts;
  const Eigen::Index n = draws.draws.rows();
  for (int p = 0; p < int(draws.names.size()); ++p) {
    ParamSummary s;
    s.name = draws.names[std::size_t(p)];
    s.structural = draws.structural[std::size_t(p)];
    Eigen::VectorXd col = draws.draws.col(p);
    s.mean = col.mean();
    s.sd = n > 1 ? std::sqrt((col.array() - s.mean).square().sum() / double(n - 1)) : 0.0;
    std::vector<double> v(col.data(), col.data() + n);
    std::sort(v.begin(), v.end());
    auto q = [&](double p_) {
      const double h = p_ * double(v.size() - 1);
      const std::size_t lo = std::size_t(h);
      const double f = h - double(lo);
      return v[lo] * (1.0 - f) + v[std::min(lo + 1, v.size() - 1)] * f;
    };
    s.q05 = q(0.05);
    s.q50 = q(0.50);
    s.q95 = q(0.95);
    s.rhat = draws.rhat[std::size_t(p)];
    s.ess_bulk = draws.ess_bulk[std::size_t(p)];
    s.ess_tail = draws.ess_tail[std::size_t(p)];
    rep.params.push_back(std::move(s));
  }
  return rep;
}

}  // namespace wsc
