#include "wsc/simgen.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <set>
#include <thread>

#include "json.hpp"
#include "wsc/bayes_meta.hpp"
#include "wsc/errors.hpp"
#include "wsc/freq_meta.hpp"
#include "wsc/rng.hpp"
#include "wsc/stats.hpp"

namespace wsc {

using nlohmann::json;

namespace {

[[noreturn]] void cfg_fail(const std::string& msg) { throw ConfigError("gen config: " + msg); }

std::string pad_id(const char* prefix, std::size_t i, std::size_t total) {
  std::size_t width = 1;
  for (std::size_t t = total; t >= 10; t /= 10) ++width;
  std::string n = std::to_string(i + 1);
  return prefix + std::string(width > n.size() ? width - n.size() : 0, '0') + n;
}

// (design cell, study) of one group of a batch; -1 where the batch has no
// such term. Mirrors the grouping the scale regressions run over.
std::pair<int, int> batch_jk(const ModelIndex& ix, int batch, int g) {
  switch (batch) {
    case kBatchA: return {-1, g};
    case kBatchB: return {-1, -1};
    case kBatchC: return {ix.c_groups[std::size_t(g)].first, ix.c_groups[std::size_t(g)].second};
    case kBatchD: return {ix.d_groups[std::size_t(g)].first, -1};
    case kBatchE: return {-1, ix.e_groups[std::size_t(g)].first};
    case kBatchF: return {ix.f_groups[std::size_t(g)][0], ix.f_groups[std::size_t(g)][1]};
    default: return {ix.j_of[std::size_t(g)], ix.k_of[std::size_t(g)]};
  }
}

Dataset skeleton(const GenConfig& cfg) {
  Dataset ds;
  std::set<std::string> seen;
  std::size_t n_contrasts = 0;
  for (const auto& p : cfg.studies)
    for (const auto& cl : p.cells)
      for (int c : cl.per_domain) n_contrasts += std::size_t(c);

  std::size_t cid = 0;
  for (std::size_t i = 0; i < cfg.studies.size(); ++i) {
    const StudyPlan& p = cfg.studies[i];
    StudyRecord s;
    s.study_id = p.id.empty() ? pad_id("s", i, cfg.studies.size()) : p.id;
    if (!seen.insert(s.study_id).second) cfg_fail("duplicate study id '" + s.study_id + "'");
    s.x_education = p.education;
    s.x_multicell = p.multicell;
    s.x_nu_team = p.nu_team;
    long total = 0;
    for (const auto& cl : p.cells)
      for (int c : cl.per_domain) total += c;
    s.x_n_contrasts = total;
    ds.studies.push_back(s);

    for (const auto& cl : p.cells) {
      for (int d = 0; d < p.domains; ++d) {
        for (int t = 0; t < cl.per_domain[std::size_t(d)]; ++t) {
          ContrastRecord c;
          c.contrast_id = pad_id("c", cid++, n_contrasts);
          c.study_id = s.study_id;
          c.outcome_domain = "dom" + std::to_string(d + 1);
          c.design = DesignCell::from_index(cl.design);
          ds.contrasts.push_back(std::move(c));
        }
      }
    }
  }
  return ds;
}

double quantile_of(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double pos = p * double(v.size() - 1);
  const std::size_t i = std::size_t(pos);
  if (i + 1 >= v.size()) return v.back();
  const double w = pos - double(i);
  return (1.0 - w) * v[i] + w * v[i + 1];
}

// --- JSON helpers -----------------------------------------------------------

void check_keys(const json& j, std::initializer_list<const char*> allowed, const char* where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        ok = true;
        break;
      }
    if (!ok) cfg_fail(std::string(where) + ": unknown key '" + it.key() + "'");
  }
}

template <std::size_t N>
void read_broadcast(const json& j, const char* key, std::array<double, N>& out,
                    const char* where) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (v.is_number()) {
    out.fill(v.get<double>());
    return;
  }
  if (v.is_array() && v.size() == N) {
    for (std::size_t i = 0; i < N; ++i) out[i] = v[i].get<double>();
    return;
  }
  cfg_fail(std::string(where) + "." + key + " must be a number or an array of " +
           std::to_string(N));
}

template <std::size_t R, std::size_t C>
void read_matrix(const json& j, const char* key, std::array<std::array<double, C>, R>& out,
                 const char* where) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (v.is_number()) {
    for (auto& row : out) row.fill(v.get<double>());
    return;
  }
  if (v.is_array() && v.size() == R) {
    for (std::size_t r = 0; r < R; ++r) {
      if (!v[r].is_array() || v[r].size() != C)
        cfg_fail(std::string(where) + "." + key + " rows must have " + std::to_string(C) +
                 " entries");
      for (std::size_t c = 0; c < C; ++c) out[r][c] = v[r][c].get<double>();
    }
    return;
  }
  cfg_fail(std::string(where) + "." + key + " must be a number or a " + std::to_string(R) + "x" +
           std::to_string(C) + " array");
}

void read_sampler(const json& j, BayesSpec& s) {
  check_keys(j,
             {"rho", "nu_floor", "chains", "iterations", "warmup", "seed", "rope",
              "phi_alpha_prior", "phi_alpha_lo", "phi_alpha_hi", "target_accept", "max_treedepth",
              "check_convergence", "rhat_max", "ess_min", "mean_only", "predictive_sims"},
             "sampler");
  s.rho = j.value("rho", s.rho);
  s.nu_floor = j.value("nu_floor", s.nu_floor);
  s.chains = j.value("chains", s.chains);
  s.iterations = j.value("iterations", s.iterations);
  s.warmup = j.value("warmup", s.warmup);
  s.seed = j.value("seed", s.seed);
  s.rope = j.value("rope", s.rope);
  s.phi_alpha_lo = j.value("phi_alpha_lo", s.phi_alpha_lo);
  s.phi_alpha_hi = j.value("phi_alpha_hi", s.phi_alpha_hi);
  s.target_accept = j.value("target_accept", s.target_accept);
  s.max_treedepth = j.value("max_treedepth", s.max_treedepth);
  s.check_convergence = j.value("check_convergence", s.check_convergence);
  s.rhat_max = j.value("rhat_max", s.rhat_max);
  s.ess_min = j.value("ess_min", s.ess_min);
  s.mean_only = j.value("mean_only", s.mean_only);
  s.predictive_sims = j.value("predictive_sims", s.predictive_sims);
  if (j.contains("phi_alpha_prior")) {
    const std::string p = j.at("phi_alpha_prior").get<std::string>();
    if (p == "bounded_uniform")
      s.phi_alpha_prior = PhiAlphaPrior::kBoundedUniform;
    else if (p == "improper_flat")
      s.phi_alpha_prior = PhiAlphaPrior::kImproperFlat;
    else
      cfg_fail("sampler.phi_alpha_prior must be bounded_uniform or improper_flat");
  }
}

void read_bayes_truth(const json& j, ParameterVector& pv) {
  check_keys(j, {"theta", "gamma", "delta", "beta", "alpha", "nu", "zeta", "phivar", "xivar"},
             "bayes");
  pv.theta = j.value("theta", pv.theta);
  read_broadcast(j, "gamma", pv.gamma, "bayes");
  read_broadcast(j, "delta", pv.delta, "bayes");
  read_broadcast(j, "beta", pv.beta, "bayes");
  read_broadcast(j, "alpha", pv.alpha, "bayes");
  read_broadcast(j, "nu", pv.nu, "bayes");
  read_matrix(j, "zeta", pv.zeta, "bayes");
  read_matrix(j, "phivar", pv.phivar, "bayes");
  read_matrix(j, "xivar", pv.xivar, "bayes");
}

}  // namespace

void GenConfig::validate() const {
  if (studies.empty()) cfg_fail("at least one study is required");
  for (std::size_t i = 0; i < studies.size(); ++i) {
    const StudyPlan& p = studies[i];
    const std::string who = "study " + (p.id.empty() ? std::to_string(i + 1) : p.id);
    if (p.domains < 1) cfg_fail(who + ": domains must be >= 1");
    if (p.cells.empty()) cfg_fail(who + ": needs at least one design cell");
    std::set<int> designs;
    long total = 0;
    for (const auto& cl : p.cells) {
      if (cl.design < 0 || cl.design >= kNumDesigns)
        cfg_fail(who + ": design index out of range");
      if (!designs.insert(cl.design).second) cfg_fail(who + ": duplicate design cell");
      if (int(cl.per_domain.size()) != p.domains)
        cfg_fail(who + ": per_domain must have one entry per domain");
      long cell = 0;
      for (int c : cl.per_domain) {
        if (c < 0) cfg_fail(who + ": contrast counts must be >= 0");
        cell += c;
      }
      if (cell < 1) cfg_fail(who + ": each design cell needs at least one contrast");
      total += cell;
    }
    if (total < 1) cfg_fail(who + ": needs at least one contrast");
  }
  if (mode == TruthMode::kFreqFixed) {
    for (int j = 0; j < kNumDesigns; ++j)
      if (freq.tau[std::size_t(j)] < 0.0 || freq.omega[std::size_t(j)] < 0.0 ||
          freq.phi[std::size_t(j)] < 0.0)
        cfg_fail("component SDs must be >= 0");
  } else {
    sampler.validate();
    if (mode == TruthMode::kBayesFixed)
      for (int m = 0; m < kNumBatches; ++m)
        if (!(bayes.nu[std::size_t(m)] > 0.0)) cfg_fail("bayes.nu must be > 0");
  }
  if (!(s_y_median > 0.0)) cfg_fail("s_y_median must be > 0");
  if (!(s_y_log_sd >= 0.0)) cfg_fail("s_y_log_sd must be >= 0");
  if (!(rho >= 0.0 && rho < 1.0)) cfg_fail("rho must lie in [0, 1)");
}

GenConfig default_config() {
  // study memberships and contrast totals per design cell, cells by index
  constexpr std::array<int, kNumDesigns> kCellStudies = {11, 5, 11, 3, 17, 8, 10, 10};
  constexpr std::array<int, kNumDesigns> kCellContrasts = {51, 38, 38, 21, 177, 57, 39, 52};
  constexpr int kStudies = 39;

  // deal the 75 cell slots round-robin: every study gets one, the first 36
  // get a second from the later cells
  std::vector<int> slot_cell;
  for (int j = 0; j < kNumDesigns; ++j)
    for (int t = 0; t < kCellStudies[std::size_t(j)]; ++t) slot_cell.push_back(j);

  GenConfig cfg;
  cfg.studies.resize(kStudies);
  std::array<std::vector<int>, kNumDesigns> members;  // study indices per cell
  for (std::size_t s = 0; s < slot_cell.size(); ++s)
    members[std::size_t(slot_cell[s])].push_back(int(s) % kStudies);

  for (int i = 0; i < kStudies; ++i) {
    StudyPlan& p = cfg.studies[std::size_t(i)];
    p.domains = i < 27 ? 2 : 1;
    p.education = i % 2 == 0;
    p.multicell = i % 3 == 0;
    p.nu_team = i % 5 == 0;
  }

  for (int j = 0; j < kNumDesigns; ++j) {
    const auto& mem = members[std::size_t(j)];
    const int base = kCellContrasts[std::size_t(j)] / int(mem.size());
    const int rem = kCellContrasts[std::size_t(j)] % int(mem.size());
    for (std::size_t t = 0; t < mem.size(); ++t) {
      StudyPlan& p = cfg.studies[std::size_t(mem[t])];
      const int total = base + (int(t) < rem ? 1 : 0);
      CellLoad cl;
      cl.design = j;
      cl.per_domain.resize(std::size_t(p.domains));
      for (int d = 0; d < p.domains; ++d)
        cl.per_domain[std::size_t(d)] = total / p.domains + (d < total % p.domains ? 1 : 0);
      p.cells.push_back(cl);
    }
  }
  return cfg;
}

GenConfig parse_gen_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("gen config: ") + e.what());
  }
  if (!j.is_object()) cfg_fail("top level must be an object");
  check_keys(j, {"seed", "rho", "s_y_median", "s_y_log_sd", "mode", "studies", "truth", "bayes",
                 "sampler"},
             "config");

  GenConfig cfg;
  try {
    cfg.seed = j.value("seed", cfg.seed);
    cfg.rho = j.value("rho", cfg.rho);
    cfg.s_y_median = j.value("s_y_median", cfg.s_y_median);
    cfg.s_y_log_sd = j.value("s_y_log_sd", cfg.s_y_log_sd);

    if (j.contains("mode")) {
      const std::string m = j.at("mode").get<std::string>();
      if (m == "freq")
        cfg.mode = TruthMode::kFreqFixed;
      else if (m == "bayes_fixed")
        cfg.mode = TruthMode::kBayesFixed;
      else if (m == "bayes_hyperdrawn")
        cfg.mode = TruthMode::kBayesHyperdrawn;
      else
        cfg_fail("mode must be freq, bayes_fixed, or bayes_hyperdrawn");
    }

    if (j.contains("studies")) {
      if (!j.at("studies").is_array() || j.at("studies").empty())
        cfg_fail("studies must be a non-empty array");
      for (const json& sj : j.at("studies")) {
        check_keys(sj, {"id", "education", "multicell", "nu_team", "domains", "cells"}, "study");
        StudyPlan p;
        p.id = sj.value("id", std::string());
        p.education = sj.value("education", false);
        p.multicell = sj.value("multicell", false);
        p.nu_team = sj.value("nu_team", false);
        p.domains = sj.value("domains", 1);
        if (!sj.contains("cells")) cfg_fail("study: cells required");
        for (const json& cj : sj.at("cells")) {
          check_keys(cj, {"design", "per_domain"}, "cell");
          CellLoad cl;
          cl.design = cj.at("design").get<int>();
          if (!cj.contains("per_domain")) cfg_fail("cell: per_domain required");
          const json& pd = cj.at("per_domain");
          if (pd.is_number_integer()) {
            cl.per_domain.assign(std::size_t(std::max(p.domains, 0)), pd.get<int>());
          } else if (pd.is_array()) {
            for (const json& e : pd) cl.per_domain.push_back(e.get<int>());
          } else {
            cfg_fail("cell: per_domain must be an integer or an array");
          }
          p.cells.push_back(std::move(cl));
        }
        cfg.studies.push_back(std::move(p));
      }
    } else {
      cfg.studies = default_config().studies;
    }

    if (j.contains("truth")) {
      const json& t = j.at("truth");
      check_keys(t, {"mu", "tau", "omega", "phi", "beta"}, "truth");
      read_broadcast(t, "mu", cfg.freq.mu, "truth");
      read_broadcast(t, "tau", cfg.freq.tau, "truth");
      read_broadcast(t, "omega", cfg.freq.omega, "truth");
      read_broadcast(t, "phi", cfg.freq.phi, "truth");
      read_broadcast(t, "beta", cfg.freq.beta, "truth");
    }
    if (j.contains("bayes")) read_bayes_truth(j.at("bayes"), cfg.bayes);
    if (j.contains("sampler")) read_sampler(j.at("sampler"), cfg.sampler);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("gen config: ") + e.what());
  }

  cfg.validate();
  return cfg;
}

GenResult generate_full(const GenConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  GenResult out;
  out.data = skeleton(cfg);
  Dataset& ds = out.data;

  const double log_med = std::log(cfg.s_y_median);
  for (auto& c : ds.contrasts) c.s_y = rng.lognormal(log_med, cfg.s_y_log_sd);

  const ModelIndex ix = ModelIndex::build(ds);
  const std::size_t n = ds.contrasts.size();
  std::vector<double> y(n, 0.0);

  if (cfg.mode == TruthMode::kFreqFixed) {
    const FreqTruth& t = cfg.freq;
    // normal random effects; a zero SD still consumes one draw so that
    // configs differing only in a scale share the remaining stream
    std::vector<double> c_eff(ix.c_groups.size()), f_eff(ix.f_groups.size());
    for (std::size_t g = 0; g < c_eff.size(); ++g)
      c_eff[g] = t.tau[std::size_t(ix.c_groups[g].first)] * rng.normal();
    for (std::size_t g = 0; g < f_eff.size(); ++g)
      f_eff[g] = t.omega[std::size_t(ix.f_groups[g][0])] * rng.normal();
    for (std::size_t i = 0; i < n; ++i) {
      const int j = ix.j_of[i];
      double v = t.mu[std::size_t(j)] + c_eff[std::size_t(ix.c_of[i])] +
                 f_eff[std::size_t(ix.f_of[i])] + t.phi[std::size_t(j)] * rng.normal();
      for (int c = 0; c < kNumCovariates; ++c)
        v += t.beta[std::size_t(c)] * ix.X(ix.k_of[i], c);
      y[i] = v;
    }
    out.mu_true = t.mu;
  } else {
    ParameterVector pv;
    if (cfg.mode == TruthMode::kBayesHyperdrawn) {
      BayesModel model(ds, cfg.sampler);
      pv = model.prior_draw(rng);
    } else {
      pv = cfg.bayes;
      for (int m = 0; m < kNumBatches; ++m) {
        const int ng = ix.group_count(m);
        pv.effects[std::size_t(m)].assign(std::size_t(ng), 0.0);
        for (int g = 0; g < ng; ++g) {
          const auto [gj, gk] = batch_jk(ix, m, g);
          const double s = std::exp(log_scale_of(pv, ix, m, gj, gk));
          pv.effects[std::size_t(m)][std::size_t(g)] =
              s * rng.student_t(pv.nu[std::size_t(m)]);
        }
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      double v = mu_of_design(pv, ix.j_of[i]);
      const std::array<int, kNumBatches> gid = {
          ix.k_of[i], ix.l_of[i], ix.c_of[i], ix.d_of[i], ix.e_of[i], ix.f_of[i], int(i)};
      for (int m = 0; m < kNumBatches; ++m) {
        const auto& eff = pv.effects[std::size_t(m)];
        if (!eff.empty()) v += eff[std::size_t(gid[std::size_t(m)])];
      }
      for (int c = 0; c < kNumCovariates; ++c)
        v += pv.beta[std::size_t(c)] * ix.X(ix.k_of[i], c);
      y[i] = v;
    }
    out.truth = pv;
    for (int j = 0; j < kNumDesigns; ++j) out.mu_true[std::size_t(j)] = mu_of_design(pv, j);
  }

  // correlated sampling errors, one equicorrelated block per study
  const double w_shared = std::sqrt(cfg.rho), w_own = std::sqrt(1.0 - cfg.rho);
  for (const auto& block : ix.blocks) {
    const double shared = rng.normal();
    for (int i : block.rows)
      y[std::size_t(i)] +=
          ds.contrasts[std::size_t(i)].s_y * (w_shared * shared + w_own * rng.normal());
  }

  // fill the rows so they round-trip through the CSV schema: y reported
  // directly, S = 1 from unit group SDs, and equal group sizes make the
  // SE shrinkage factor exactly 1/2, so se_obs = se_rct = s_y
  for (std::size_t i = 0; i < n; ++i) {
    ContrastRecord& c = ds.contrasts[i];
    c.y = y[i];
    c.y_reported = true;
    c.raw.reported_y = c.y;
    c.raw.se_obs = c.s_y;
    c.raw.se_rct = c.s_y;
    c.raw.sd_trt = 1.0;
    c.raw.sd_contr = 1.0;
    c.raw.n_trt = 100;
    c.raw.n_contr = 100;
    c.raw.n_comp = 100;
  }
  return out;
}

Dataset generate(const GenConfig& cfg) { return generate_full(cfg).data; }

void parallel_reps(int n, const std::function<void(int)>& fn) {
  const unsigned hw = std::thread::hardware_concurrency();
  const int workers = std::max(1, std::min(n, hw ? int(hw) : 1));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(std::size_t(workers));
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  for (auto& t : pool) t.join();
}

namespace {

// one replicate of a frequentist recovery: fit, then one cell per design
std::vector<RecoveryCell> freq_recovery_rep(const GenResult& gr, const GenConfig& cfg, int rep) {
  FreqSpec fs;
  fs.rho = cfg.rho;
  for (double b : cfg.freq.beta)
    if (b != 0.0) fs.use_covariates = true;
  FreqFit fit = fit_freq(gr.data, fs);
  try {
    robust_vcov(fit, gr.data, fs);
  } catch (const TooFewClusters&) {
    // every design is single-study; cells below get inference_ok = false
  }

  std::vector<RecoveryCell> cells;
  for (int j = 0; j < kNumDesigns; ++j) {
    if (!fit.design_present[std::size_t(j)]) continue;
    RecoveryCell cell;
    cell.rep = rep;
    cell.design = j;
    cell.mu_true = gr.mu_true[std::size_t(j)];
    cell.tau_true = cfg.freq.tau[std::size_t(j)];
    cell.omega_true = cfg.freq.omega[std::size_t(j)];
    cell.phi_true = cfg.freq.phi[std::size_t(j)];
    cell.mu_hat = fit.mu_hat[std::size_t(j)];
    cell.tau_hat = std::sqrt(fit.tau2[std::size_t(j)]);
    cell.omega_hat = std::sqrt(fit.omega2[std::size_t(j)]);
    cell.phi_hat = std::sqrt(fit.phi2[std::size_t(j)]);
    if (fit.has_robust && !fit.inference_unavailable[std::size_t(j)]) {
      const double se = std::sqrt(fit.vcov_robust(j, j));
      const double tq = t_quantile(0.975, fit.satterthwaite_df[std::size_t(j)]);
      cell.lo = cell.mu_hat - tq * se;
      cell.hi = cell.mu_hat + tq * se;
      cell.covered = cell.lo <= cell.mu_true && cell.mu_true <= cell.hi;
    } else {
      cell.inference_ok = false;
    }
    cells.push_back(cell);
  }
  return cells;
}

std::vector<RecoveryCell> bayes_recovery_rep(const GenResult& gr, const GenConfig& cfg,
                                             std::uint64_t fit_seed, int rep) {
  BayesSpec bs = cfg.sampler;
  bs.seed = fit_seed;
  const PosteriorDraws draws = sample(gr.data, bs);
  BayesModel model(gr.data, bs);

  std::array<std::vector<double>, kNumDesigns> mu;
  for (auto& v : mu) v.reserve(std::size_t(draws.draws.rows()));
  for (Eigen::Index r = 0; r < draws.draws.rows(); ++r) {
    const ParameterVector pv = model.unflatten(draws.draws.row(r));
    for (int j = 0; j < kNumDesigns; ++j) mu[std::size_t(j)].push_back(mu_of_design(pv, j));
  }

  std::array<bool, kNumDesigns> present{};
  for (const auto& c : gr.data.contrasts) present[std::size_t(c.design.index())] = true;

  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<RecoveryCell> cells;
  for (int j = 0; j < kNumDesigns; ++j) {
    if (!present[std::size_t(j)]) continue;
    RecoveryCell cell;
    cell.rep = rep;
    cell.design = j;
    cell.mu_true = gr.mu_true[std::size_t(j)];
    cell.tau_true = cell.omega_true = cell.phi_true = nan;
    cell.tau_hat = cell.omega_hat = cell.phi_hat = nan;
    const auto& v = mu[std::size_t(j)];
    double sum = 0.0;
    for (double x : v) sum += x;
    cell.mu_hat = sum / double(v.size());
    cell.lo = quantile_of(v, 0.05);
    cell.hi = quantile_of(v, 0.95);
    cell.covered = cell.lo <= cell.mu_true && cell.mu_true <= cell.hi;
    cells.push_back(cell);
  }
  return cells;
}

}  // namespace

RecoveryReport recovery_study(const GenConfig& cfg, Engine engine, int replications) {
  cfg.validate();
  if (replications < 1) throw ConfigError("recovery_study: replications must be >= 1");

  RecoveryReport report;
  report.engine = engine;
  report.replications = replications;

  const auto nrep = std::size_t(replications);
  std::vector<std::vector<RecoveryCell>> per_rep(nrep);
  std::vector<std::string> fail(nrep);
  parallel_reps(replications, [&](int r) {
    try {
      GenConfig c2 = cfg;
      c2.seed = derive_seed(cfg.seed, 0x52EC0000u + std::uint64_t(r));
      const GenResult gr = generate_full(c2);
      per_rep[std::size_t(r)] =
          engine == Engine::kFreq
              ? freq_recovery_rep(gr, cfg, r)
              : bayes_recovery_rep(gr, cfg, derive_seed(cfg.seed, 0xBA7E0000u + std::uint64_t(r)),
                                   r);
    } catch (const std::exception& e) {
      fail[std::size_t(r)] = std::string("rep ") + std::to_string(r) + ": " + e.what();
    }
  });

  for (int r = 0; r < replications; ++r) {
    if (!fail[std::size_t(r)].empty()) {
      report.failures.push_back(fail[std::size_t(r)]);
      continue;
    }
    ++report.usable;
    for (auto& c : per_rep[std::size_t(r)]) report.cells.push_back(c);
  }
  return report;
}

double RecoveryReport::median(int design, double RecoveryCell::*field) const {
  std::vector<double> v;
  for (const auto& c : cells)
    if (c.design == design) v.push_back(c.*field);
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double RecoveryReport::coverage(int design) const {
  long n = 0, hits = 0;
  for (const auto& c : cells) {
    if (c.design != design || !c.inference_ok) continue;
    ++n;
    hits += c.covered ? 1 : 0;
  }
  return n ? double(hits) / double(n) : std::numeric_limits<double>::quiet_NaN();
}

double RecoveryReport::share_at_zero(int design, double RecoveryCell::*field) const {
  long n = 0, zeros = 0;
  for (const auto& c : cells) {
    if (c.design != design) continue;
    ++n;
    zeros += c.*field == 0.0 ? 1 : 0;
  }
  return n ? double(zeros) / double(n) : std::numeric_limits<double>::quiet_NaN();
}

SbcReport sbc(const BayesSpec& spec, const GenConfig& cfg, int replications) {
  spec.validate();
  cfg.validate();
  if (cfg.mode != TruthMode::kBayesHyperdrawn)
    throw ConfigError("sbc: the truth must be hyperdrawn from the prior");
  if (replications < 2) throw ConfigError("sbc: need at least 2 replications");

  SbcReport report;
  report.replications = replications;

  const auto nrep = std::size_t(replications);
  std::vector<std::vector<int>> ranks(nrep);
  std::vector<std::string> fail(nrep);
  std::vector<std::string> names;
  std::atomic<int> thinned{0};
  std::atomic<bool> names_set{false};

  parallel_reps(replications, [&](int r) {
    try {
      GenConfig c2 = cfg;
      c2.sampler = spec;  // data-generating prior must match the fitted one
      c2.seed = derive_seed(cfg.seed, 0x5BC00000u + std::uint64_t(r));
      const GenResult gr = generate_full(c2);

      BayesSpec fs = spec;
      fs.seed = derive_seed(cfg.seed, 0xF1700000u + std::uint64_t(r));
      const PosteriorDraws draws = sample(gr.data, fs);

      BayesModel model(gr.data, fs);
      const Eigen::VectorXd truth = model.flatten(gr.truth);
      const int kept = int(draws.draws.rows());
      const int thin_to = std::min(kept, 100);
      const int stride = kept / thin_to;

      std::vector<int> rk(std::size_t(model.dim()), 0);
      for (int t = 0; t < thin_to; ++t) {
        const auto row = draws.draws.row(Eigen::Index(t) * stride);
        for (int p = 0; p < model.dim(); ++p)
          if (row[p] < truth[p]) ++rk[std::size_t(p)];
      }
      ranks[std::size_t(r)] = std::move(rk);
      thinned.store(thin_to);
      if (!names_set.exchange(true)) names = model.names();
    } catch (const std::exception& e) {
      fail[std::size_t(r)] = std::string("rep ") + std::to_string(r) + ": " + e.what();
    }
  });

  std::vector<const std::vector<int>*> usable;
  for (int r = 0; r < replications; ++r) {
    if (!fail[std::size_t(r)].empty())
      report.failures.push_back(fail[std::size_t(r)]);
    else
      usable.push_back(&ranks[std::size_t(r)]);
  }
  report.usable = int(usable.size());
  if (report.usable * 10 < replications * 9)
    throw NotConverged("sbc: only " + std::to_string(report.usable) + " of " +
                       std::to_string(replications) + " replicates were usable");

  const int L = thinned.load();
  report.max_rank = L;
  report.names = names;
  const int n_ranks = L + 1;
  report.bins = std::max(5, std::min(20, report.usable / 10));

  const std::size_t n_params = names.size();
  report.histogram.assign(n_params, std::vector<int>(std::size_t(report.bins), 0));
  std::vector<double> expected(std::size_t(report.bins), 0.0);
  for (int rk = 0; rk < n_ranks; ++rk)
    expected[std::size_t(rk * report.bins / n_ranks)] += double(report.usable) / double(n_ranks);

  for (const auto* rk : usable)
    for (std::size_t p = 0; p < n_params; ++p)
      ++report.histogram[p][std::size_t((*rk)[p] * report.bins / n_ranks)];

  int live_bins = 0;
  for (int b = 0; b < report.bins; ++b)
    if (expected[std::size_t(b)] > 0.0) ++live_bins;
  report.chi2 = 0.0;
  for (std::size_t p = 0; p < n_params; ++p)
    for (int b = 0; b < report.bins; ++b) {
      const double e = expected[std::size_t(b)];
      if (e <= 0.0) continue;  // more bins than distinct ranks
      const double d = double(report.histogram[p][std::size_t(b)]) - e;
      report.chi2 += d * d / e;
    }
  report.df = long(n_params) * (live_bins - 1);
  report.p_value = chi2_sf(report.chi2, double(report.df));
  return report;
}

double se_oracle(long n_trt, long n_contr, long n_comp, long replications, std::uint64_t seed) {
  if (n_trt < 2 || n_contr < 2 || n_comp < 2)
    throw ConfigError("se_oracle: group sizes must be >= 2");
  if (replications < 2) throw ConfigError("se_oracle: need at least 2 replications");

  // the law of y is symmetric in the two non-shared groups; order them so
  // the estimate is exactly invariant to swapping n_contr and n_comp
  const double inv_lo = 1.0 / std::sqrt(double(std::min(n_contr, n_comp)));
  const double inv_hi = 1.0 / std::sqrt(double(std::max(n_contr, n_comp)));
  const double inv_t = 1.0 / std::sqrt(double(n_trt));

  Rng rng(seed);
  double mean = 0.0, m2 = 0.0;
  for (long r = 0; r < replications; ++r) {
    const double tbar = inv_t * rng.normal();
    const double contr = inv_lo * rng.normal();
    const double comp = inv_hi * rng.normal();
    const double theta_obs = tbar - comp;
    const double theta_rct = tbar - contr;
    const double y = theta_obs - theta_rct;  // S = 1 by construction
    const double d = y - mean;
    mean += d / double(r + 1);
    m2 += d * (y - mean);
  }
  return std::sqrt(m2 / double(replications - 1));
}

}  // namespace wsc
