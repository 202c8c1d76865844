#include "wsc/bayes_model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "wsc/errors.hpp"
#include "wsc/stats.hpp"

namespace wsc {

namespace {

constexpr double kNuRate = 0.1;  // Gamma(2, 0.1) prior on nu excess

void plr_of(int j, double out[3]) {
  const DesignCell c = DesignCell::from_index(j);
  out[0] = c.pretest ? 1.0 : 0.0;
  out[1] = c.local ? 1.0 : 0.0;
  out[2] = c.rich ? 1.0 : 0.0;
}

// design cell and study of one group of a batch (-1 where not applicable)
std::pair<int, int> group_jk(const ModelIndex& ix, int batch, int g) {
  switch (batch) {
    case kBatchA: return {-1, g};
    case kBatchB: return {-1, -1};
    case kBatchC: return {ix.c_groups[std::size_t(g)].first, ix.c_groups[std::size_t(g)].second};
    case kBatchD: return {ix.d_groups[std::size_t(g)].first, -1};
    case kBatchE: return {-1, ix.e_groups[std::size_t(g)].first};
    case kBatchF:
      return {ix.f_groups[std::size_t(g)][0], ix.f_groups[std::size_t(g)][1]};
    default: return {ix.j_of[std::size_t(g)], ix.k_of[std::size_t(g)]};
  }
}

double half_normal_logpdf(double x) {
  if (x < 0.0) return -std::numeric_limits<double>::infinity();
  return 0.5 * std::log(2.0 / M_PI) - 0.5 * x * x;
}

double normal_logpdf(double v, double mu, double sd) {
  const double q = (v - mu) / sd;
  return -0.5 * kLogTwoPi - std::log(sd) - 0.5 * q * q;
}

// shape-2 Gamma density of the excess above the floor
double nu_excess_logpdf(double e) {
  if (!(e > 0.0)) return -std::numeric_limits<double>::infinity();
  return 2.0 * std::log(kNuRate) + std::log(e) - kNuRate * e;
}

double dot4(const std::array<double, kNumCovariates>& a, const Eigen::MatrixXd& X, int k) {
  double s = 0.0;
  for (int c = 0; c < kNumCovariates; ++c) s += a[std::size_t(c)] * X(k, c);
  return s;
}

}  // namespace

void BayesSpec::validate() const {
  if (!(rho >= 0.0) || rho >= 1.0) throw ConfigError("rho must lie in [0, 1)");
  if (!(nu_floor > 2.0)) throw ConfigError("nu_floor must exceed 2");
  if (chains < 2) throw ConfigError("at least 2 chains are required");
  if (warmup < 1) throw ConfigError("warmup must be at least 1");
  if (iterations <= warmup) throw ConfigError("iterations must exceed warmup");
  if (!(rope > 0.0)) throw ConfigError("rope half-width must be positive");
  if (!(target_accept > 0.0) || !(target_accept < 1.0))
    throw ConfigError("target_accept must lie in (0, 1)");
  if (max_treedepth < 1 || max_treedepth > 14) throw ConfigError("max_treedepth out of range");
  if (!(phi_alpha_lo < phi_alpha_hi)) throw ConfigError("phi_alpha bounds are inverted");
  if (!(rhat_max > 1.0)) throw ConfigError("rhat_max must exceed 1");
  if (ess_min < 0.0) throw ConfigError("ess_min must be nonnegative");
  if (predictive_sims < 1) throw ConfigError("predictive_sims must be positive");
}

ModelIndex ModelIndex::build(const Dataset& ds) {
  ModelIndex ix;
  ix.n_studies = int(ds.studies.size());
  ix.n_contrasts = int(ds.contrasts.size());

  std::map<std::string, int> study_id;
  for (int k = 0; k < ix.n_studies; ++k) study_id[ds.studies[std::size_t(k)].study_id] = k;

  std::set<std::string> dom_set;
  for (const auto& c : ds.contrasts) dom_set.insert(c.outcome_domain);
  ix.domains.assign(dom_set.begin(), dom_set.end());
  ix.n_domains = int(ix.domains.size());
  std::map<std::string, int> dom_id;
  for (int l = 0; l < ix.n_domains; ++l) dom_id[ix.domains[std::size_t(l)]] = l;

  std::map<std::pair<int, int>, int> cmap, dmap, emap;
  std::map<std::array<int, 3>, int> fmap;
  auto intern2 = [](std::map<std::pair<int, int>, int>& m,
                    std::vector<std::pair<int, int>>& keys, std::pair<int, int> key) {
    auto it = m.find(key);
    if (it != m.end()) return it->second;
    const int id = int(keys.size());
    m.emplace(key, id);
    keys.push_back(key);
    return id;
  };

  for (const auto& c : ds.contrasts) {
    const int k = study_id.at(c.study_id);
    const int l = dom_id.at(c.outcome_domain);
    const int j = c.design.index();
    ix.k_of.push_back(k);
    ix.l_of.push_back(l);
    ix.j_of.push_back(j);
    ix.c_of.push_back(intern2(cmap, ix.c_groups, {j, k}));
    ix.d_of.push_back(intern2(dmap, ix.d_groups, {j, l}));
    ix.e_of.push_back(intern2(emap, ix.e_groups, {k, l}));
    const std::array<int, 3> fkey{j, k, l};
    auto it = fmap.find(fkey);
    int fid;
    if (it != fmap.end()) {
      fid = it->second;
    } else {
      fid = int(ix.f_groups.size());
      fmap.emplace(fkey, fid);
      ix.f_groups.push_back(fkey);
    }
    ix.f_of.push_back(fid);
  }

  // covariates: binary as 0/1, the contrast count z-scored over studies
  ix.X.resize(ix.n_studies, kNumCovariates);
  double sum = 0.0;
  for (const auto& s : ds.studies) sum += double(s.x_n_contrasts);
  ix.xn_mean = ix.n_studies > 0 ? sum / double(ix.n_studies) : 0.0;
  double ss = 0.0;
  for (const auto& s : ds.studies) {
    const double d = double(s.x_n_contrasts) - ix.xn_mean;
    ss += d * d;
  }
  ix.xn_sd = ix.n_studies > 1 ? std::sqrt(ss / double(ix.n_studies - 1)) : 0.0;
  for (int k = 0; k < ix.n_studies; ++k) {
    const auto& s = ds.studies[std::size_t(k)];
    ix.X(k, 0) = s.x_education ? 1.0 : 0.0;
    ix.X(k, 1) = s.x_multicell ? 1.0 : 0.0;
    ix.X(k, 2) = ix.xn_sd > 1e-12 ? (double(s.x_n_contrasts) - ix.xn_mean) / ix.xn_sd : 0.0;
    ix.X(k, 3) = s.x_nu_team ? 1.0 : 0.0;
  }

  ix.blocks.resize(std::size_t(ix.n_studies));
  for (int i = 0; i < ix.n_contrasts; ++i)
    ix.blocks[std::size_t(ix.k_of[std::size_t(i)])].rows.push_back(i);
  return ix;
}

int ModelIndex::group_count(int batch) const {
  switch (batch) {
    case kBatchA: return n_studies;
    case kBatchB: return n_domains;
    case kBatchC: return int(c_groups.size());
    case kBatchD: return int(d_groups.size());
    case kBatchE: return int(e_groups.size());
    case kBatchF: return int(f_groups.size());
    default: return n_contrasts;
  }
}

double mu_of_design(const ParameterVector& pv, int design) {
  double plr[3];
  plr_of(design, plr);
  return pv.theta + pv.gamma[0] * plr[0] + pv.gamma[1] * plr[1] + pv.gamma[2] * plr[2] +
         pv.delta[std::size_t(design)];
}

double log_scale_of(const ParameterVector& pv, const ModelIndex& ix, int batch, int j, int k) {
  double ls = pv.alpha[std::size_t(batch)];
  const int zr = kZetaRow[std::size_t(batch)];
  if (zr >= 0 && k >= 0) ls += dot4(pv.zeta[std::size_t(zr)], ix.X, k);
  const int pr = kPhiRow[std::size_t(batch)];
  if (pr >= 0 && j >= 0) {
    double plr[3];
    plr_of(j, plr);
    for (int m = 0; m < 3; ++m) ls += pv.phivar[std::size_t(pr)][std::size_t(m)] * plr[m];
    ls += pv.xivar[std::size_t(pr)][std::size_t(j)];
  }
  return ls;
}

BayesModel::BayesModel(const Dataset& ds, const BayesSpec& spec) : spec_(spec) {
  spec_.validate();
  if (ds.contrasts.empty()) throw ConfigError("dataset has no contrasts");
  ix_ = ModelIndex::build(ds);

  y_.resize(ix_.n_contrasts);
  for (int i = 0; i < ix_.n_contrasts; ++i) y_[i] = ds.contrasts[std::size_t(i)].y;

  // per-study error covariance, factored once
  for (const auto& bix : ix_.blocks) {
    Block b;
    b.rows = bix.rows;
    const int m = int(b.rows.size());
    Eigen::MatrixXd S(m, m);
    for (int a = 0; a < m; ++a) {
      const double sa = ds.contrasts[std::size_t(b.rows[std::size_t(a)])].s_y;
      for (int c = 0; c < m; ++c) {
        const double sc = ds.contrasts[std::size_t(b.rows[std::size_t(c)])].s_y;
        S(a, c) = (a == c ? 1.0 : spec_.rho) * sa * sc;
      }
    }
    Eigen::LLT<Eigen::MatrixXd> llt(S);
    if (llt.info() != Eigen::Success)
      throw NotPositiveDefinite("sampling-error block is not positive definite");
    b.L = llt.matrixL();
    b.logdet = 0.0;
    for (int i = 0; i < m; ++i) b.logdet += 2.0 * std::log(b.L(i, i));
    blocks_.push_back(std::move(b));
  }

  if (spec_.mean_only) {
    dim_ = 1;
    names_ = {"theta"};
    structural_ = {true};
    return;
  }

  // flat layout: mean block, effect z's, nu, variance regression, hypers
  names_.push_back("theta");
  off_gamma_ = 1;
  names_.push_back("gamma_P");
  names_.push_back("gamma_L");
  names_.push_back("gamma_R");
  off_delta_ = int(names_.size());
  for (int j = 0; j < kNumDesigns; ++j) names_.push_back("delta[" + std::to_string(j) + "]");
  off_beta_ = int(names_.size());
  for (int c = 0; c < kNumCovariates; ++c) names_.push_back("beta[" + std::to_string(c) + "]");

  static const char* batch_tag = "abcdefg";
  for (int m = 0; m < kNumBatches; ++m) {
    off_z_[std::size_t(m)] = int(names_.size());
    const int ng = ix_.group_count(m);
    for (int g = 0; g < ng; ++g)
      names_.push_back(std::string(1, batch_tag[m]) + "[" + std::to_string(g) + "]");
  }
  off_eta_ = int(names_.size());
  for (int m = 0; m < kNumBatches; ++m) names_.push_back(std::string("nu_") + batch_tag[m]);
  off_alpha_ = int(names_.size());
  for (int m = 0; m < kNumBatches; ++m) names_.push_back(std::string("alpha_") + batch_tag[m]);
  off_zeta_ = int(names_.size());
  static const char* zeta_tag = "acefg";
  for (int r = 0; r < kNumZetaRows; ++r)
    for (int c = 0; c < kNumCovariates; ++c)
      names_.push_back(std::string("zeta_") + zeta_tag[r] + "[" + std::to_string(c) + "]");
  off_phi_ = int(names_.size());
  static const char* phi_tag = "cdfg";
  static const char* elem_tag[3] = {"P", "L", "R"};
  for (int r = 0; r < kNumPhiRows; ++r)
    for (int m = 0; m < 3; ++m)
      names_.push_back(std::string("phi_") + phi_tag[r] + "_" + elem_tag[m]);
  off_xi_ = int(names_.size());
  for (int r = 0; r < kNumPhiRows; ++r)
    for (int j = 0; j < kNumDesigns; ++j)
      names_.push_back(std::string("xi_") + phi_tag[r] + "[" + std::to_string(j) + "]");
  off_hyper_ = int(names_.size());
  for (const char* h : {"tau_beta", "phi_gamma", "tau_gamma", "tau_delta", "phi_alpha",
                        "tau_alpha", "tau_zeta", "phi_phi", "tau_phi", "tau_xi"})
    names_.push_back(h);
  dim_ = int(names_.size());

  structural_.assign(std::size_t(dim_), true);
  for (int m = 0; m < kNumBatches; ++m) {
    const int ng = ix_.group_count(m);
    for (int g = 0; g < ng; ++g) structural_[std::size_t(off_z_[std::size_t(m)] + g)] = false;
  }
}

double BayesModel::logp_grad(const Eigen::VectorXd& u, Eigen::VectorXd* grad) const {
  if (u.size() != dim_) throw NonFinite("parameter vector does not match the model dimension");
  return spec_.mean_only ? logp_grad_mean_only(u, grad) : logp_grad_full(u, grad);
}

double BayesModel::logp_grad_mean_only(const Eigen::VectorXd& u, Eigen::VectorXd* grad) const {
  const double theta = u[0];
  double lp = -0.5 * kLogTwoPi - 0.5 * theta * theta;  // N(0,1) prior
  double g = -theta;
  for (const auto& b : blocks_) {
    const int m = int(b.rows.size());
    Eigen::VectorXd r(m);
    for (int i = 0; i < m; ++i) r[i] = y_[b.rows[std::size_t(i)]] - theta;
    Eigen::VectorXd w = b.L.triangularView<Eigen::Lower>().solve(r);
    lp += -0.5 * w.squaredNorm() - 0.5 * b.logdet - 0.5 * m * kLogTwoPi;
    b.L.transpose().triangularView<Eigen::Upper>().solveInPlace(w);
    g += w.sum();
  }
  if (grad) (*grad) = Eigen::VectorXd::Constant(1, g);
  return lp;
}

double BayesModel::logp_grad_full(const Eigen::VectorXd& u, Eigen::VectorXd* grad) const {
  const ModelIndex& ix = ix_;
  const double neg_inf = -std::numeric_limits<double>::infinity();

  const double tau_beta = std::exp(u[off_hyper_ + 0]);
  const double phi_gamma = u[off_hyper_ + 1];
  const double tau_gamma = std::exp(u[off_hyper_ + 2]);
  const double tau_delta = std::exp(u[off_hyper_ + 3]);
  const double tau_alpha = std::exp(u[off_hyper_ + 5]);
  const double tau_zeta = std::exp(u[off_hyper_ + 6]);
  const double phi_phi = u[off_hyper_ + 7];
  const double tau_phi = std::exp(u[off_hyper_ + 8]);
  const double tau_xi = std::exp(u[off_hyper_ + 9]);
  double phi_alpha, dphialpha_du, phi_alpha_jac, phi_alpha_jac_du;
  if (spec_.phi_alpha_prior == PhiAlphaPrior::kBoundedUniform) {
    const double w = spec_.phi_alpha_hi - spec_.phi_alpha_lo;
    const double t = u[off_hyper_ + 4];
    const double s = 1.0 / (1.0 + std::exp(-t));
    phi_alpha = spec_.phi_alpha_lo + w * s;
    dphialpha_du = w * s * (1.0 - s);
    // uniform density and logistic Jacobian; the width cancels
    phi_alpha_jac = std::log(s) + std::log1p(-s);
    phi_alpha_jac_du = 1.0 - 2.0 * s;
  } else {
    phi_alpha = u[off_hyper_ + 4];
    dphialpha_du = 1.0;
    phi_alpha_jac = 0.0;
    phi_alpha_jac_du = 0.0;
  }

  // unpack; coefficient slots hold standard-normal raws, the effective
  // coefficient is loc + scale * raw so the sampler never sees the funnel
  // between a block and its own scale
  ParameterVector pv;
  pv.theta = u[0];
  for (int m = 0; m < 3; ++m)
    pv.gamma[std::size_t(m)] = phi_gamma + tau_gamma * u[off_gamma_ + m];
  for (int j = 0; j < kNumDesigns; ++j)
    pv.delta[std::size_t(j)] = tau_delta * u[off_delta_ + j];
  for (int c = 0; c < kNumCovariates; ++c) pv.beta[std::size_t(c)] = tau_beta * u[off_beta_ + c];
  for (int m = 0; m < kNumBatches; ++m)
    pv.nu[std::size_t(m)] = spec_.nu_floor + std::exp(u[off_eta_ + m]);
  for (int m = 0; m < kNumBatches; ++m)
    pv.alpha[std::size_t(m)] = phi_alpha + tau_alpha * u[off_alpha_ + m];
  for (int r = 0; r < kNumZetaRows; ++r)
    for (int c = 0; c < kNumCovariates; ++c)
      pv.zeta[std::size_t(r)][std::size_t(c)] = tau_zeta * u[off_zeta_ + r * kNumCovariates + c];
  for (int r = 0; r < kNumPhiRows; ++r)
    for (int m = 0; m < 3; ++m)
      pv.phivar[std::size_t(r)][std::size_t(m)] = phi_phi + tau_phi * u[off_phi_ + 3 * r + m];
  for (int r = 0; r < kNumPhiRows; ++r)
    for (int j = 0; j < kNumDesigns; ++j)
      pv.xivar[std::size_t(r)][std::size_t(j)] = tau_xi * u[off_xi_ + kNumDesigns * r + j];

  double lp = 0.0;

  // per-group scales and effects
  std::array<std::vector<double>, kNumBatches> sig, eff, wsum;
  for (int m = 0; m < kNumBatches; ++m) {
    const int ng = ix.group_count(m);
    sig[std::size_t(m)].resize(std::size_t(ng));
    eff[std::size_t(m)].resize(std::size_t(ng));
    wsum[std::size_t(m)].assign(std::size_t(ng), 0.0);
    for (int g = 0; g < ng; ++g) {
      const auto [j, k] = group_jk(ix, m, g);
      const double s = std::exp(log_scale_of(pv, ix, m, j, k));
      sig[std::size_t(m)][std::size_t(g)] = s;
      eff[std::size_t(m)][std::size_t(g)] = s * u[off_z_[std::size_t(m)] + g];
    }
  }

  // means and block likelihood
  Eigen::VectorXd mean(ix.n_contrasts);
  for (int i = 0; i < ix.n_contrasts; ++i) {
    const auto ii = std::size_t(i);
    double mi = mu_of_design(pv, ix.j_of[ii]);
    mi += eff[kBatchA][std::size_t(ix.k_of[ii])];
    mi += eff[kBatchB][std::size_t(ix.l_of[ii])];
    mi += eff[kBatchC][std::size_t(ix.c_of[ii])];
    mi += eff[kBatchD][std::size_t(ix.d_of[ii])];
    mi += eff[kBatchE][std::size_t(ix.e_of[ii])];
    mi += eff[kBatchF][std::size_t(ix.f_of[ii])];
    mi += eff[kBatchG][ii];
    mi += dot4(pv.beta, ix.X, ix.k_of[ii]);
    mean[i] = mi;
  }

  Eigen::VectorXd w_all(ix.n_contrasts);
  for (const auto& b : blocks_) {
    const int m = int(b.rows.size());
    Eigen::VectorXd r(m);
    for (int i = 0; i < m; ++i) {
      const int row = b.rows[std::size_t(i)];
      r[i] = y_[row] - mean[row];
    }
    Eigen::VectorXd w = b.L.triangularView<Eigen::Lower>().solve(r);
    lp += -0.5 * w.squaredNorm() - 0.5 * b.logdet - 0.5 * m * kLogTwoPi;
    b.L.transpose().triangularView<Eigen::Upper>().solveInPlace(w);
    for (int i = 0; i < m; ++i) w_all[b.rows[std::size_t(i)]] = w[i];
  }

  // z priors: standard t per element, with accumulation for nu gradients
  std::array<double, kNumBatches> dnu{};
  for (int m = 0; m < kNumBatches; ++m) {
    const double nu = pv.nu[std::size_t(m)];
    const int ng = ix.group_count(m);
    for (int g = 0; g < ng; ++g) {
      const double z = u[off_z_[std::size_t(m)] + g];
      lp += log_t_pdf(z, nu);
      if (grad) {
        const double z2 = z * z;
        dnu[std::size_t(m)] += 0.5 * digamma(0.5 * (nu + 1.0)) - 0.5 * digamma(0.5 * nu) -
                               0.5 / nu - 0.5 * std::log1p(z2 / nu) +
                               (nu + 1.0) * z2 / (2.0 * nu * (nu + z2));
      }
    }
    const double excess = nu - spec_.nu_floor;
    lp += nu_excess_logpdf(excess) + u[off_eta_ + m];  // prior plus Jacobian
  }

  // structural priors: theta directly, every other coefficient via its raw
  lp += normal_logpdf(pv.theta, 0.0, 1.0);
  {
    double ss = 0.0;
    int nraw = 0;
    auto raw_range = [&](int off, int n) {
      for (int i = 0; i < n; ++i) ss += u[off + i] * u[off + i];
      nraw += n;
    };
    raw_range(off_gamma_, 3);
    raw_range(off_delta_, kNumDesigns);
    raw_range(off_beta_, kNumCovariates);
    raw_range(off_alpha_, kNumBatches);
    raw_range(off_zeta_, kNumZetaRows * kNumCovariates);
    raw_range(off_phi_, kNumPhiRows * 3);
    raw_range(off_xi_, kNumPhiRows * kNumDesigns);
    lp += -0.5 * nraw * kLogTwoPi - 0.5 * ss;
  }

  lp += normal_logpdf(phi_gamma, 0.0, 1.0) + normal_logpdf(phi_phi, 0.0, 1.0);
  lp += phi_alpha_jac;
  // half-normal scale priors with their exp-transform Jacobians
  for (int h : {0, 2, 3, 5, 6, 8, 9}) lp += half_normal_logpdf(std::exp(u[off_hyper_ + h])) + u[off_hyper_ + h];

  if (!std::isfinite(lp)) {
    if (grad) grad->setZero();
    return neg_inf;
  }
  if (!grad) return lp;

  grad->setZero();
  Eigen::VectorXd& gr = *grad;

  // likelihood pull on the mean parameters
  for (int i = 0; i < ix.n_contrasts; ++i) {
    const auto ii = std::size_t(i);
    const double w = w_all[i];
    const int j = ix.j_of[ii];
    double plr[3];
    plr_of(j, plr);
    gr[0] += w;
    for (int m = 0; m < 3; ++m) gr[off_gamma_ + m] += w * plr[m];
    gr[off_delta_ + j] += w;
    for (int c = 0; c < kNumCovariates; ++c) gr[off_beta_ + c] += w * ix.X(ix.k_of[ii], c);
    wsum[kBatchA][std::size_t(ix.k_of[ii])] += w;
    wsum[kBatchB][std::size_t(ix.l_of[ii])] += w;
    wsum[kBatchC][std::size_t(ix.c_of[ii])] += w;
    wsum[kBatchD][std::size_t(ix.d_of[ii])] += w;
    wsum[kBatchE][std::size_t(ix.e_of[ii])] += w;
    wsum[kBatchF][std::size_t(ix.f_of[ii])] += w;
    wsum[kBatchG][ii] += w;
  }

  // z gradients and variance-regression gradients
  for (int m = 0; m < kNumBatches; ++m) {
    const auto mm = std::size_t(m);
    const double nu = pv.nu[mm];
    const int ng = ix.group_count(m);
    const int zr = kZetaRow[mm];
    const int pr = kPhiRow[mm];
    for (int g = 0; g < ng; ++g) {
      const auto gg = std::size_t(g);
      const double z = u[off_z_[mm] + g];
      const double W = wsum[mm][gg];
      gr[off_z_[mm] + g] += sig[mm][gg] * W - (nu + 1.0) * z / (nu + z * z);
      const double pull = W * eff[mm][gg];  // d lp / d log sigma_g
      gr[off_alpha_ + m] += pull;
      const auto [j, k] = group_jk(ix, m, g);
      if (zr >= 0 && k >= 0)
        for (int c = 0; c < kNumCovariates; ++c)
          gr[off_zeta_ + zr * kNumCovariates + c] += pull * ix.X(k, c);
      if (pr >= 0 && j >= 0) {
        double plr[3];
        plr_of(j, plr);
        for (int e = 0; e < 3; ++e) gr[off_phi_ + 3 * pr + e] += pull * plr[e];
        gr[off_xi_ + kNumDesigns * pr + j] += pull;
      }
    }
    const double excess = nu - spec_.nu_floor;
    gr[off_eta_ + m] += dnu[mm] * excess + 2.0 - kNuRate * excess;
  }

  // the coefficient slots now hold pure likelihood pulls on the effective
  // values; rescale them into raw space, add the standard-normal pull, and
  // route the effective pull into the location and log-scale hypers
  double g_phi_gamma = 0, g_phi_alpha = 0, g_phi_phi = 0;
  double a_beta = 0, a_gamma = 0, a_delta = 0, a_alpha = 0, a_zeta = 0, a_phi = 0, a_xi = 0;
  auto recenter = [&gr](int slot, double raw, double scale, double* g_loc, double* acc) {
    const double ge = gr[slot];
    if (g_loc) *g_loc += ge;
    *acc += ge * raw;
    gr[slot] = ge * scale - raw;
  };

  gr[0] += -pv.theta;
  for (int m = 0; m < 3; ++m)
    recenter(off_gamma_ + m, u[off_gamma_ + m], tau_gamma, &g_phi_gamma, &a_gamma);
  for (int j = 0; j < kNumDesigns; ++j)
    recenter(off_delta_ + j, u[off_delta_ + j], tau_delta, nullptr, &a_delta);
  for (int c = 0; c < kNumCovariates; ++c)
    recenter(off_beta_ + c, u[off_beta_ + c], tau_beta, nullptr, &a_beta);
  for (int m = 0; m < kNumBatches; ++m)
    recenter(off_alpha_ + m, u[off_alpha_ + m], tau_alpha, &g_phi_alpha, &a_alpha);
  for (int r = 0; r < kNumZetaRows; ++r)
    for (int c = 0; c < kNumCovariates; ++c) {
      const int s = off_zeta_ + r * kNumCovariates + c;
      recenter(s, u[s], tau_zeta, nullptr, &a_zeta);
    }
  for (int r = 0; r < kNumPhiRows; ++r)
    for (int m = 0; m < 3; ++m) {
      const int s = off_phi_ + 3 * r + m;
      recenter(s, u[s], tau_phi, &g_phi_phi, &a_phi);
    }
  for (int r = 0; r < kNumPhiRows; ++r)
    for (int j = 0; j < kNumDesigns; ++j) {
      const int s = off_xi_ + kNumDesigns * r + j;
      recenter(s, u[s], tau_xi, nullptr, &a_xi);
    }

  g_phi_gamma += -phi_gamma;
  g_phi_phi += -phi_phi;

  // chain through tau = exp(u): effective pull * tau * raw, half-normal
  // pull, Jacobian
  auto scale_grad = [](double tau, double acc) { return tau * acc - tau * tau + 1.0; };
  gr[off_hyper_ + 0] += scale_grad(tau_beta, a_beta);
  gr[off_hyper_ + 1] += g_phi_gamma;
  gr[off_hyper_ + 2] += scale_grad(tau_gamma, a_gamma);
  gr[off_hyper_ + 3] += scale_grad(tau_delta, a_delta);
  gr[off_hyper_ + 4] += g_phi_alpha * dphialpha_du + phi_alpha_jac_du;
  gr[off_hyper_ + 5] += scale_grad(tau_alpha, a_alpha);
  gr[off_hyper_ + 6] += scale_grad(tau_zeta, a_zeta);
  gr[off_hyper_ + 7] += g_phi_phi;
  gr[off_hyper_ + 8] += scale_grad(tau_phi, a_phi);
  gr[off_hyper_ + 9] += scale_grad(tau_xi, a_xi);

  return lp;
}

ParameterVector BayesModel::constrain(const Eigen::VectorXd& u) const {
  if (u.size() != dim_) throw NonFinite("parameter vector does not match the model dimension");
  ParameterVector pv;
  if (spec_.mean_only) {
    pv.theta = u[0];
    for (int m = 0; m < kNumBatches; ++m) pv.effects[std::size_t(m)].clear();
    return pv;
  }
  pv.theta = u[0];
  pv.tau_beta = std::exp(u[off_hyper_ + 0]);
  pv.phi_gamma = u[off_hyper_ + 1];
  pv.tau_gamma = std::exp(u[off_hyper_ + 2]);
  pv.tau_delta = std::exp(u[off_hyper_ + 3]);
  if (spec_.phi_alpha_prior == PhiAlphaPrior::kBoundedUniform) {
    const double s = 1.0 / (1.0 + std::exp(-u[off_hyper_ + 4]));
    pv.phi_alpha = spec_.phi_alpha_lo + (spec_.phi_alpha_hi - spec_.phi_alpha_lo) * s;
  } else {
    pv.phi_alpha = u[off_hyper_ + 4];
  }
  pv.tau_alpha = std::exp(u[off_hyper_ + 5]);
  pv.tau_zeta = std::exp(u[off_hyper_ + 6]);
  pv.phi_phi = u[off_hyper_ + 7];
  pv.tau_phi = std::exp(u[off_hyper_ + 8]);
  pv.tau_xi = std::exp(u[off_hyper_ + 9]);
  // the same non-centered map as the density
  for (int m = 0; m < 3; ++m)
    pv.gamma[std::size_t(m)] = pv.phi_gamma + pv.tau_gamma * u[off_gamma_ + m];
  for (int j = 0; j < kNumDesigns; ++j)
    pv.delta[std::size_t(j)] = pv.tau_delta * u[off_delta_ + j];
  for (int c = 0; c < kNumCovariates; ++c)
    pv.beta[std::size_t(c)] = pv.tau_beta * u[off_beta_ + c];
  for (int m = 0; m < kNumBatches; ++m)
    pv.nu[std::size_t(m)] = spec_.nu_floor + std::exp(u[off_eta_ + m]);
  for (int m = 0; m < kNumBatches; ++m)
    pv.alpha[std::size_t(m)] = pv.phi_alpha + pv.tau_alpha * u[off_alpha_ + m];
  for (int r = 0; r < kNumZetaRows; ++r)
    for (int c = 0; c < kNumCovariates; ++c)
      pv.zeta[std::size_t(r)][std::size_t(c)] =
          pv.tau_zeta * u[off_zeta_ + r * kNumCovariates + c];
  for (int r = 0; r < kNumPhiRows; ++r)
    for (int m = 0; m < 3; ++m)
      pv.phivar[std::size_t(r)][std::size_t(m)] = pv.phi_phi + pv.tau_phi * u[off_phi_ + 3 * r + m];
  for (int r = 0; r < kNumPhiRows; ++r)
    for (int j = 0; j < kNumDesigns; ++j)
      pv.xivar[std::size_t(r)][std::size_t(j)] = pv.tau_xi * u[off_xi_ + kNumDesigns * r + j];

  for (int m = 0; m < kNumBatches; ++m) {
    const int ng = ix_.group_count(m);
    pv.effects[std::size_t(m)].resize(std::size_t(ng));
    for (int g = 0; g < ng; ++g) {
      const auto [j, k] = group_jk(ix_, m, g);
      const double s = std::exp(log_scale_of(pv, ix_, m, j, k));
      pv.effects[std::size_t(m)][std::size_t(g)] = s * u[off_z_[std::size_t(m)] + g];
    }
  }
  return pv;
}

Eigen::VectorXd BayesModel::constrain_row(const Eigen::VectorXd& u) const {
  return flatten(constrain(u));
}

Eigen::VectorXd BayesModel::flatten(const ParameterVector& pv) const {
  Eigen::VectorXd row(dim_);
  if (spec_.mean_only) {
    row[0] = pv.theta;
    return row;
  }
  row[0] = pv.theta;
  for (int m = 0; m < 3; ++m) row[off_gamma_ + m] = pv.gamma[std::size_t(m)];
  for (int j = 0; j < kNumDesigns; ++j) row[off_delta_ + j] = pv.delta[std::size_t(j)];
  for (int c = 0; c < kNumCovariates; ++c) row[off_beta_ + c] = pv.beta[std::size_t(c)];
  for (int m = 0; m < kNumBatches; ++m) {
    const int ng = ix_.group_count(m);
    if (int(pv.effects[std::size_t(m)].size()) != ng)
      throw NonFinite("random-effect batch size does not match the dataset");
    for (int g = 0; g < ng; ++g)
      row[off_z_[std::size_t(m)] + g] = pv.effects[std::size_t(m)][std::size_t(g)];
  }
  for (int m = 0; m < kNumBatches; ++m) row[off_eta_ + m] = pv.nu[std::size_t(m)];
  for (int m = 0; m < kNumBatches; ++m) row[off_alpha_ + m] = pv.alpha[std::size_t(m)];
  for (int r = 0; r < kNumZetaRows; ++r)
    for (int c = 0; c < kNumCovariates; ++c)
      row[off_zeta_ + r * kNumCovariates + c] = pv.zeta[std::size_t(r)][std::size_t(c)];
  for (int r = 0; r < kNumPhiRows; ++r)
    for (int m = 0; m < 3; ++m) row[off_phi_ + 3 * r + m] = pv.phivar[std::size_t(r)][std::size_t(m)];
  for (int r = 0; r < kNumPhiRows; ++r)
    for (int j = 0; j < kNumDesigns; ++j)
      row[off_xi_ + kNumDesigns * r + j] = pv.xivar[std::size_t(r)][std::size_t(j)];
  row[off_hyper_ + 0] = pv.tau_beta;
  row[off_hyper_ + 1] = pv.phi_gamma;
  row[off_hyper_ + 2] = pv.tau_gamma;
  row[off_hyper_ + 3] = pv.tau_delta;
  row[off_hyper_ + 4] = pv.phi_alpha;
  row[off_hyper_ + 5] = pv.tau_alpha;
  row[off_hyper_ + 6] = pv.tau_zeta;
  row[off_hyper_ + 7] = pv.phi_phi;
  row[off_hyper_ + 8] = pv.tau_phi;
  row[off_hyper_ + 9] = pv.tau_xi;
  return row;
}

ParameterVector BayesModel::unflatten(const Eigen::VectorXd& row) const {
  if (row.size() != dim_) throw NonFinite("draw row does not match the model dimension");
  ParameterVector pv;
  if (spec_.mean_only) {
    pv.theta = row[0];
    return pv;
  }
  pv.theta = row[0];
  for (int m = 0; m < 3; ++m) pv.gamma[std::size_t(m)] = row[off_gamma_ + m];
  for (int j = 0; j < kNumDesigns; ++j) pv.delta[std::size_t(j)] = row[off_delta_ + j];
  for (int c = 0; c < kNumCovariates; ++c) pv.beta[std::size_t(c)] = row[off_beta_ + c];
  for (int m = 0; m < kNumBatches; ++m) {
    const int ng = ix_.group_count(m);
    pv.effects[std::size_t(m)].resize(std::size_t(ng));
    for (int g = 0; g < ng; ++g)
      pv.effects[std::size_t(m)][std::size_t(g)] = row[off_z_[std::size_t(m)] + g];
  }
  for (int m = 0; m < kNumBatches; ++m) pv.nu[std::size_t(m)] = row[off_eta_ + m];
  for (int m = 0; m < kNumBatches; ++m) pv.alpha[std::size_t(m)] = row[off_alpha_ + m];
  for (int r = 0; r < kNumZetaRows; ++r)
    for (int c = 0; c < kNumCovariates; ++c)
      pv.zeta[std::size_t(r)][std::size_t(c)] = row[off_zeta_ + r * kNumCovariates + c];
  for (int r = 0; r < kNumPhiRows; ++r)
    for (int m = 0; m < 3; ++m) pv.phivar[std::size_t(r)][std::size_t(m)] = row[off_phi_ + 3 * r + m];
  for (int r = 0; r < kNumPhiRows; ++r)
    for (int j = 0; j < kNumDesigns; ++j)
      pv.xivar[std::size_t(r)][std::size_t(j)] = row[off_xi_ + kNumDesigns * r + j];
  pv.tau_beta = row[off_hyper_ + 0];
  pv.phi_gamma = row[off_hyper_ + 1];
  pv.tau_gamma = row[off_hyper_ + 2];
  pv.tau_delta = row[off_hyper_ + 3];
  pv.phi_alpha = row[off_hyper_ + 4];
  pv.tau_alpha = row[off_hyper_ + 5];
  pv.tau_zeta = row[off_hyper_ + 6];
  pv.phi_phi = row[off_hyper_ + 7];
  pv.tau_phi = row[off_hyper_ + 8];
  pv.tau_xi = row[off_hyper_ + 9];
  return pv;
}

ParameterVector BayesModel::prior_draw(Rng& rng) const {
  ParameterVector pv;
  if (spec_.mean_only) {
    pv.theta = rng.normal();
    return pv;
  }
  pv.tau_beta = std::abs(rng.normal());
  pv.phi_gamma = rng.normal();
  pv.tau_gamma = std::abs(rng.normal());
  pv.tau_delta = std::abs(rng.normal());
  pv.phi_alpha = rng.uniform(spec_.phi_alpha_lo, spec_.phi_alpha_hi);
  pv.tau_alpha = std::abs(rng.normal());
  pv.tau_zeta = std::abs(rng.normal());
  pv.phi_phi = rng.normal();
  pv.tau_phi = std::abs(rng.normal());
  pv.tau_xi = std::abs(rng.normal());

  pv.theta = rng.normal();
  for (int m = 0; m < 3; ++m) pv.gamma[std::size_t(m)] = rng.normal(pv.phi_gamma, pv.tau_gamma);
  for (int j = 0; j < kNumDesigns; ++j) pv.delta[std::size_t(j)] = rng.normal(0.0, pv.tau_delta);
  for (int c = 0; c < kNumCovariates; ++c) pv.beta[std::size_t(c)] = rng.normal(0.0, pv.tau_beta);
  for (int m = 0; m < kNumBatches; ++m)
    pv.alpha[std::size_t(m)] = rng.normal(pv.phi_alpha, pv.tau_alpha);
  for (int r = 0; r < kNumZetaRows; ++r)
    for (int c = 0; c < kNumCovariates; ++c)
      pv.zeta[std::size_t(r)][std::size_t(c)] = rng.normal(0.0, pv.tau_zeta);
  for (int r = 0; r < kNumPhiRows; ++r)
    for (int m = 0; m < 3; ++m)
      pv.phivar[std::size_t(r)][std::size_t(m)] = rng.normal(pv.phi_phi, pv.tau_phi);
  for (int r = 0; r < kNumPhiRows; ++r)
    for (int j = 0; j < kNumDesigns; ++j)
      pv.xivar[std::size_t(r)][std::size_t(j)] = rng.normal(0.0, pv.tau_xi);
  for (int m = 0; m < kNumBatches; ++m)
    pv.nu[std::size_t(m)] = spec_.nu_floor + rng.gamma(2.0, kNuRate);

  for (int m = 0; m < kNumBatches; ++m) {
    const int ng = ix_.group_count(m);
    pv.effects[std::size_t(m)].resize(std::size_t(ng));
    for (int g = 0; g < ng; ++g) {
      const auto [j, k] = group_jk(ix_, m, g);
      const double s = std::exp(log_scale_of(pv, ix_, m, j, k));
      pv.effects[std::size_t(m)][std::size_t(g)] = s * rng.student_t(pv.nu[std::size_t(m)]);
    }
  }
  return pv;
}

Eigen::VectorXd BayesModel::mean_vector(const ParameterVector& pv) const {
  Eigen::VectorXd mean(ix_.n_contrasts);
  if (spec_.mean_only) {
    mean.setConstant(pv.theta);
    return mean;
  }
  for (int m = 0; m < kNumBatches; ++m)
    if (int(pv.effects[std::size_t(m)].size()) != ix_.group_count(m))
      throw NonFinite("random-effect batch size does not match the dataset");
  for (int i = 0; i < ix_.n_contrasts; ++i) {
    const auto ii = std::size_t(i);
    double mi = mu_of_design(pv, ix_.j_of[ii]);
    mi += pv.effects[kBatchA][std::size_t(ix_.k_of[ii])];
    mi += pv.effects[kBatchB][std::size_t(ix_.l_of[ii])];
    mi += pv.effects[kBatchC][std::size_t(ix_.c_of[ii])];
    mi += pv.effects[kBatchD][std::size_t(ix_.d_of[ii])];
    mi += pv.effects[kBatchE][std::size_t(ix_.e_of[ii])];
    mi += pv.effects[kBatchF][std::size_t(ix_.f_of[ii])];
    mi += pv.effects[kBatchG][ii];
    mi += dot4(pv.beta, ix_.X, ix_.k_of[ii]);
    mean[i] = mi;
  }
  return mean;
}

double BayesModel::log_posterior_centered(const ParameterVector& pv) const {
  double lp = 0.0;
  const Eigen::VectorXd mean = mean_vector(pv);
  for (const auto& b : blocks_) {
    const int m = int(b.rows.size());
    Eigen::VectorXd r(m);
    for (int i = 0; i < m; ++i) {
      const int row = b.rows[std::size_t(i)];
      r[i] = y_[row] - mean[row];
    }
    Eigen::VectorXd w = b.L.triangularView<Eigen::Lower>().solve(r);
    lp += -0.5 * w.squaredNorm() - 0.5 * b.logdet - 0.5 * m * kLogTwoPi;
  }

  if (spec_.mean_only) {
    lp += normal_logpdf(pv.theta, 0.0, 1.0);
    if (!std::isfinite(lp)) throw NonFinite("log posterior is not finite");
    return lp;
  }

  for (int m = 0; m < kNumBatches; ++m) {
    const double nu = pv.nu[std::size_t(m)];
    const int ng = ix_.group_count(m);
    for (int g = 0; g < ng; ++g) {
      const auto [j, k] = group_jk(ix_, m, g);
      const double s = std::exp(log_scale_of(pv, ix_, m, j, k));
      lp += log_t_pdf(pv.effects[std::size_t(m)][std::size_t(g)] / s, nu) - std::log(s);
    }
    lp += nu_excess_logpdf(nu - spec_.nu_floor);
  }

  lp += normal_logpdf(pv.theta, 0.0, 1.0);
  for (int m = 0; m < 3; ++m)
    lp += normal_logpdf(pv.gamma[std::size_t(m)], pv.phi_gamma, pv.tau_gamma);
  for (int j = 0; j < kNumDesigns; ++j)
    lp += normal_logpdf(pv.delta[std::size_t(j)], 0.0, pv.tau_delta);
  for (int c = 0; c < kNumCovariates; ++c)
    lp += normal_logpdf(pv.beta[std::size_t(c)], 0.0, pv.tau_beta);
  for (int m = 0; m < kNumBatches; ++m)
    lp += normal_logpdf(pv.alpha[std::size_t(m)], pv.phi_alpha, pv.tau_alpha);
  for (int r = 0; r < kNumZetaRows; ++r)
    for (int c = 0; c < kNumCovariates; ++c)
      lp += normal_logpdf(pv.zeta[std::size_t(r)][std::size_t(c)], 0.0, pv.tau_zeta);
  for (int r = 0; r < kNumPhiRows; ++r)
    for (int m = 0; m < 3; ++m)
      lp += normal_logpdf(pv.phivar[std::size_t(r)][std::size_t(m)], pv.phi_phi, pv.tau_phi);
  for (int r = 0; r < kNumPhiRows; ++r)
    for (int j = 0; j < kNumDesigns; ++j)
      lp += normal_logpdf(pv.xivar[std::size_t(r)][std::size_t(j)], 0.0, pv.tau_xi);

  lp += normal_logpdf(pv.phi_gamma, 0.0, 1.0) + normal_logpdf(pv.phi_phi, 0.0, 1.0);
  if (spec_.phi_alpha_prior == PhiAlphaPrior::kBoundedUniform) {
    if (pv.phi_alpha < spec_.phi_alpha_lo || pv.phi_alpha > spec_.phi_alpha_hi)
      throw NonFinite("phi_alpha lies outside its prior support");
    lp += -std::log(spec_.phi_alpha_hi - spec_.phi_alpha_lo);
  }
  for (double t : {pv.tau_beta, pv.tau_gamma, pv.tau_delta, pv.tau_alpha, pv.tau_zeta, pv.tau_phi,
                   pv.tau_xi})
    lp += half_normal_logpdf(t);

  if (!std::isfinite(lp)) throw NonFinite("log posterior is not finite");
  return lp;
}

double log_posterior(const ParameterVector& pv, const Dataset& ds, const BayesSpec& spec) {
  BayesModel model(ds, spec);
  return model.log_posterior_centered(pv);
}

}  // namespace wsc
