#include "wsc/freq_meta.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <string>

#include "wsc/errors.hpp"
#include "wsc/stats.hpp"

namespace wsc {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kVarFloor = 1e-10;        // below this a component reports as exact 0
const double kLogFloor = std::log(1e-12);  // box bound for log-variance parameters

enum class Comp { kTau, kOmega, kPhi };

struct Component {
  Comp type;
  int design;
};

// One study = one covariance block. Local index lists drive both the random
// effect contributions and the gradient traces.
struct StudyBlock {
  std::vector<int> rows;                              // global contrast indices
  Eigen::MatrixXd sig_eps;                            // sampling-error covariance
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  std::map<int, std::vector<int>> by_design;          // design -> local positions
  std::map<std::pair<int, int>, std::vector<int>> by_fgroup;  // (design, group) -> positions
};

struct Problem {
  int n = 0;
  int p = 0;
  int n_design_cols = 0;
  std::vector<StudyBlock> blocks;
  std::vector<Component> comps;
  std::array<bool, kNumDesigns> present{};
  std::array<int, kNumDesigns> n_contrasts{};
  std::array<int, kNumDesigns> n_fgroups{};
  std::array<int, kNumDesigns> n_cgroups{};
  std::vector<int> design_column;  // design index -> X column (-1 absent)
};

// X columns: indicator per present design (ascending design index), then the
// four study covariates centered at their contrast-level means so that the
// design coefficients are mean bias at the average covariate profile.
Problem build_problem(const Dataset& ds, const FreqSpec& spec) {
  Problem pb;
  pb.n = int(ds.contrasts.size());
  if (pb.n == 0) throw ValidationError("dataset has no contrasts");

  pb.design_column.assign(kNumDesigns, -1);
  for (const auto& c : ds.contrasts) pb.present[std::size_t(c.design.index())] = true;
  int col = 0;
  for (int d = 0; d < kNumDesigns; ++d)
    if (pb.present[std::size_t(d)]) pb.design_column[std::size_t(d)] = col++;
  pb.n_design_cols = col;
  pb.p = col + (spec.use_covariates ? 4 : 0);

  // study lookup and per-study contrast lists, studies in table order
  std::map<std::string, int> study_of;
  for (std::size_t k = 0; k < ds.studies.size(); ++k)
    study_of[ds.studies[k].study_id] = int(k);
  std::vector<std::vector<int>> rows_by_study(ds.studies.size());
  for (std::size_t i = 0; i < ds.contrasts.size(); ++i)
    rows_by_study[std::size_t(study_of.at(ds.contrasts[i].study_id))].push_back(int(i));

  Eigen::RowVector4d xbar = Eigen::RowVector4d::Zero();
  if (spec.use_covariates) {
    for (const auto& c : ds.contrasts) {
      const auto& s = ds.studies[std::size_t(study_of.at(c.study_id))];
      xbar += Eigen::RowVector4d(double(s.x_education), double(s.x_multicell),
                                 double(s.x_n_contrasts), double(s.x_nu_team));
    }
    xbar /= double(pb.n);
  }

  std::array<std::set<std::string>, kNumDesigns> cgroups_seen;

  for (std::size_t k = 0; k < ds.studies.size(); ++k) {
    const auto& rows = rows_by_study[k];
    if (rows.empty()) continue;
    StudyBlock b;
    b.rows = rows;
    const int nb = int(rows.size());
    b.X = Eigen::MatrixXd::Zero(nb, pb.p);
    b.y = Eigen::VectorXd(nb);
    b.sig_eps = Eigen::MatrixXd(nb, nb);
    std::map<std::string, int> fgroup_ids;  // domain -> group id within (study, design)
    for (int a = 0; a < nb; ++a) {
      const auto& c = ds.contrasts[std::size_t(rows[std::size_t(a)])];
      const int d = c.design.index();
      b.y[a] = c.y;
      b.X(a, pb.design_column[std::size_t(d)]) = 1.0;
      if (spec.use_covariates) {
        const auto& s = ds.studies[k];
        b.X(a, pb.n_design_cols + 0) = double(s.x_education) - xbar[0];
        b.X(a, pb.n_design_cols + 1) = double(s.x_multicell) - xbar[1];
        b.X(a, pb.n_design_cols + 2) = double(s.x_n_contrasts) - xbar[2];
        b.X(a, pb.n_design_cols + 3) = double(s.x_nu_team) - xbar[3];
      }
      b.by_design[d].push_back(a);
      const std::string key = std::to_string(d) + "\x1f" + c.outcome_domain;
      auto [it, fresh] = fgroup_ids.try_emplace(key, int(fgroup_ids.size()));
      b.by_fgroup[{d, it->second}].push_back(a);
      if (fresh) pb.n_fgroups[std::size_t(d)] += 1;
      cgroups_seen[std::size_t(d)].insert(c.study_id);
      pb.n_contrasts[std::size_t(d)] += 1;
      for (int a2 = 0; a2 <= a; ++a2) {
        const auto& c2 = ds.contrasts[std::size_t(rows[std::size_t(a2)])];
        const double cov = (a == a2 ? 1.0 : spec.rho) * c.s_y * c2.s_y;
        b.sig_eps(a, a2) = cov;
        b.sig_eps(a2, a) = cov;
      }
    }
    pb.blocks.push_back(std::move(b));
  }
  for (int d = 0; d < kNumDesigns; ++d)
    pb.n_cgroups[std::size_t(d)] = int(cgroups_seen[std::size_t(d)].size());

  // a component is identified only when its grouping strictly refines the
  // next coarser one; aliased components are pinned at zero
  if (spec.estimate_components) {
    for (int d = 0; d < kNumDesigns; ++d) {
      if (!pb.present[std::size_t(d)]) continue;
      if (pb.n_cgroups[std::size_t(d)] >= 2) pb.comps.push_back({Comp::kTau, d});
      if (pb.n_fgroups[std::size_t(d)] > pb.n_cgroups[std::size_t(d)])
        pb.comps.push_back({Comp::kOmega, d});
      if (pb.n_contrasts[std::size_t(d)] > pb.n_fgroups[std::size_t(d)])
        pb.comps.push_back({Comp::kPhi, d});
    }
  }

  // the design part of X always has full rank; covariates can be collinear
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr;
  Eigen::MatrixXd xfull(pb.n, pb.p);
  int at = 0;
  for (const auto& b : pb.blocks) {
    xfull.middleRows(at, b.X.rows()) = b.X;
    at += int(b.X.rows());
  }
  qr.compute(xfull);
  qr.setThreshold(1e-10);
  if (qr.rank() < pb.p)
    throw SingularDesign("fixed-effect design matrix is rank deficient (collinear covariates)");

  return pb;
}

struct Evaluation {
  double f = 0.0;               // negative restricted log-likelihood
  Eigen::VectorXd grad;         // d f / d log(sigma2)
  Eigen::VectorXd beta;
  Eigen::MatrixXd M;            // (X' V^-1 X)^-1
};

// V for one block at the given component variances
Eigen::MatrixXd block_cov(const StudyBlock& b,
                          const std::array<double, kNumDesigns>& tau2,
                          const std::array<double, kNumDesigns>& omega2,
                          const std::array<double, kNumDesigns>& phi2) {
  Eigen::MatrixXd V = b.sig_eps;
  for (const auto& [d, idx] : b.by_design) {
    const double t2 = tau2[std::size_t(d)];
    const double p2 = phi2[std::size_t(d)];
    if (t2 > 0.0)
      for (int a : idx)
        for (int a2 : idx) V(a, a2) += t2;
    if (p2 > 0.0)
      for (int a : idx) V(a, a) += p2;
  }
  for (const auto& [key, idx] : b.by_fgroup) {
    const double o2 = omega2[std::size_t(key.first)];
    if (o2 > 0.0)
      for (int a : idx)
        for (int a2 : idx) V(a, a2) += o2;
  }
  return V;
}

void scatter_components(const Problem& pb, const Eigen::VectorXd& u,
                        std::array<double, kNumDesigns>& tau2,
                        std::array<double, kNumDesigns>& omega2,
                        std::array<double, kNumDesigns>& phi2) {
  tau2.fill(0.0);
  omega2.fill(0.0);
  phi2.fill(0.0);
  for (std::size_t m = 0; m < pb.comps.size(); ++m) {
    const double s2 = std::exp(u[Eigen::Index(m)]);
    switch (pb.comps[m].type) {
      case Comp::kTau: tau2[std::size_t(pb.comps[m].design)] = s2; break;
      case Comp::kOmega: omega2[std::size_t(pb.comps[m].design)] = s2; break;
      case Comp::kPhi: phi2[std::size_t(pb.comps[m].design)] = s2; break;
    }
  }
}

Evaluation evaluate(const Problem& pb, const Eigen::VectorXd& u, bool want_grad) {
  std::array<double, kNumDesigns> tau2, omega2, phi2;
  scatter_components(pb, u, tau2, omega2, phi2);

  const int p = pb.p;
  const std::size_t nb = pb.blocks.size();
  std::vector<Eigen::MatrixXd> Vinv(nb), WX(nb);
  std::vector<Eigen::VectorXd> wy(nb);
  double logdetV = 0.0;
  Eigen::MatrixXd Across = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd ay = Eigen::VectorXd::Zero(p);

  for (std::size_t g = 0; g < nb; ++g) {
    const auto& b = pb.blocks[g];
    Eigen::MatrixXd V = block_cov(b, tau2, omega2, phi2);
    Eigen::LLT<Eigen::MatrixXd> llt(V);
    if (llt.info() != Eigen::Success)
      throw NumericalFailure("covariance block is not positive definite");
    const auto& L = llt.matrixLLT();
    for (Eigen::Index i = 0; i < L.rows(); ++i) logdetV += 2.0 * std::log(L(i, i));
    Vinv[g] = llt.solve(Eigen::MatrixXd::Identity(V.rows(), V.cols()));
    WX[g] = Vinv[g] * b.X;
    wy[g] = Vinv[g] * b.y;
    Across += b.X.transpose() * WX[g];
    ay += b.X.transpose() * wy[g];
  }

  Eigen::LLT<Eigen::MatrixXd> lltA(Across);
  if (lltA.info() != Eigen::Success)
    throw SingularDesign("fixed-effect information matrix is singular");
  double logdetA = 0.0;
  for (Eigen::Index i = 0; i < p; ++i) logdetA += 2.0 * std::log(lltA.matrixLLT()(i, i));
  Evaluation ev;
  ev.beta = lltA.solve(ay);
  ev.M = lltA.solve(Eigen::MatrixXd::Identity(p, p));

  double quad = 0.0;
  std::vector<Eigen::VectorXd> w(nb);  // V^-1 (y - X beta), i.e. Py per block
  for (std::size_t g = 0; g < nb; ++g) {
    const auto& b = pb.blocks[g];
    w[g] = wy[g] - WX[g] * ev.beta;
    quad += (b.y - b.X * ev.beta).dot(w[g]);
  }
  ev.f = 0.5 * (logdetV + logdetA + quad) +
         0.5 * double(pb.n - p) * std::log(2.0 * M_PI);

  if (!want_grad) return ev;
  ev.grad = Eigen::VectorXd::Zero(Eigen::Index(pb.comps.size()));
  if (pb.comps.empty()) return ev;

  // per-block P = V^-1 - WX M WX'; d(-lR)/d sigma2 = 0.5 [tr(P G) - w' G w]
  for (std::size_t g = 0; g < nb; ++g) {
    const auto& b = pb.blocks[g];
    Eigen::MatrixXd P = Vinv[g] - WX[g] * ev.M * WX[g].transpose();
    for (std::size_t m = 0; m < pb.comps.size(); ++m) {
      const auto& cm = pb.comps[m];
      double tr = 0.0, qd = 0.0;
      if (cm.type == Comp::kPhi) {
        auto it = b.by_design.find(cm.design);
        if (it == b.by_design.end()) continue;
        for (int a : it->second) {
          tr += P(a, a);
          qd += w[g][a] * w[g][a];
        }
      } else if (cm.type == Comp::kTau) {
        auto it = b.by_design.find(cm.design);
        if (it == b.by_design.end()) continue;
        double sw = 0.0;
        for (int a : it->second) {
          sw += w[g][a];
          for (int a2 : it->second) tr += P(a, a2);
        }
        qd = sw * sw;
      } else {
        for (const auto& [key, idx] : b.by_fgroup) {
          if (key.first != cm.design) continue;
          double sw = 0.0;
          for (int a : idx) {
            sw += w[g][a];
            for (int a2 : idx) tr += P(a, a2);
          }
          qd += sw * sw;
        }
      }
      ev.grad[Eigen::Index(m)] += 0.5 * (tr - qd);
    }
  }
  // chain rule to the log scale
  for (std::size_t m = 0; m < pb.comps.size(); ++m)
    ev.grad[Eigen::Index(m)] *= std::exp(u[Eigen::Index(m)]);
  return ev;
}

// sup-norm of the gradient ignoring components pinned at the lower box bound
// that still push downhill
double projected_gnorm(const Eigen::VectorXd& u, const Eigen::VectorXd& g) {
  double nrm = 0.0;
  for (Eigen::Index i = 0; i < u.size(); ++i) {
    if (u[i] <= kLogFloor + 1e-9 && g[i] > 0.0) continue;
    nrm = std::max(nrm, std::abs(g[i]));
  }
  return nrm;
}

}  // namespace

void FreqSpec::validate() const {
  if (!(rho >= 0.0 && rho < 1.0)) throw ConfigError("rho must lie in [0, 1)");
  if (!(rope > 0.0)) throw ConfigError("rope must be > 0");
  if (!(pi_level > 0.0 && pi_level < 1.0)) throw ConfigError("pi_level must lie in (0, 1)");
}

Eigen::MatrixXd build_error_cov(const Dataset& ds, double rho) {
  if (!(rho >= 0.0 && rho < 1.0)) throw ConfigError("rho must lie in [0, 1)");
  FreqSpec spec;
  spec.rho = rho;
  spec.estimate_components = false;
  Problem pb = build_problem(ds, spec);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(pb.n, pb.n);
  int at = 0;
  for (const auto& b : pb.blocks) {
    const int nb = int(b.sig_eps.rows());
    Eigen::LLT<Eigen::MatrixXd> llt(b.sig_eps);
    if (llt.info() != Eigen::Success)
      throw NotPositiveDefinite("sampling-error block is not positive definite");
    out.block(at, at, nb, nb) = b.sig_eps;
    at += nb;
  }
  return out;
}

FreqFit fit_freq(const Dataset& ds, const FreqSpec& spec) {
  spec.validate();
  Problem pb = build_problem(ds, spec);
  const std::size_t q = pb.comps.size();

  // starting value: a third of the dispersion of y in each component
  double ymean = 0.0, yvar = 0.0;
  for (const auto& c : ds.contrasts) ymean += c.y;
  ymean /= double(pb.n);
  for (const auto& c : ds.contrasts) yvar += (c.y - ymean) * (c.y - ymean);
  yvar = pb.n > 1 ? yvar / double(pb.n - 1) : 1.0;
  const double s2_init = std::max(yvar / 3.0, 1e-4);

  Eigen::VectorXd u = Eigen::VectorXd::Constant(Eigen::Index(q), std::log(s2_init));
  Evaluation ev = evaluate(pb, u, q > 0);

  int iter = 0;
  bool converged = q == 0;
  if (q > 0) {
    Eigen::MatrixXd H = Eigen::MatrixXd::Identity(Eigen::Index(q), Eigen::Index(q));
    for (iter = 0; iter < 500; ++iter) {
      if (projected_gnorm(u, ev.grad) < 1e-6) {
        converged = true;
        break;
      }
      // coordinates sitting on the box bound with an uphill-only escape are
      // frozen for this step so they neither distort the direction nor the
      // curvature model
      Eigen::VectorXd gm = ev.grad;
      for (Eigen::Index i = 0; i < u.size(); ++i)
        if (u[i] <= kLogFloor + 1e-9 && ev.grad[i] > 0.0) gm[i] = 0.0;
      Eigen::VectorXd dir = -(H * gm);
      for (Eigen::Index i = 0; i < u.size(); ++i)
        if (u[i] <= kLogFloor + 1e-9 && ev.grad[i] > 0.0) dir[i] = 0.0;
      if (dir.dot(gm) > -1e-14) {
        H.setIdentity();
        dir = -gm;
      }
      // backtracking Armijo search with box projection
      double alpha = 1.0;
      const double slope = dir.dot(gm);
      Evaluation trial;
      Eigen::VectorXd u_new;
      bool accepted = false;
      for (int ls = 0; ls < 60; ++ls) {
        u_new = (u + alpha * dir).cwiseMax(kLogFloor);
        // an overlong step can overflow the covariance; shrink and retry
        try {
          trial = evaluate(pb, u_new, true);
        } catch (const NumericalFailure&) {
          alpha *= 0.5;
          continue;
        }
        if (std::isfinite(trial.f) && trial.f <= ev.f + 1e-4 * alpha * slope) {
          accepted = true;
          break;
        }
        alpha *= 0.5;
      }
      if (!accepted) {
        if (projected_gnorm(u, ev.grad) < 1e-4) {
          converged = true;  // flat to numerical precision
          break;
        }
        throw NonConvergence("line search failed in the restricted-likelihood optimizer");
      }
      const double rel_df = std::abs(ev.f - trial.f) / (1.0 + std::abs(trial.f));
      Eigen::VectorXd s = u_new - u;
      Eigen::VectorXd yv = trial.grad - ev.grad;
      bool newly_pinned = false;
      for (Eigen::Index i = 0; i < u.size(); ++i)
        if (u_new[i] <= kLogFloor + 1e-9 && u[i] > kLogFloor + 1e-9) newly_pinned = true;
      u = u_new;
      ev = trial;
      if (rel_df < 1e-9 && projected_gnorm(u, ev.grad) < 1e-6) {
        converged = true;
        ++iter;
        break;
      }
      if (newly_pinned) {
        // a clamped step carries no curvature information
        H.setIdentity();
        continue;
      }
      const double sy = s.dot(yv);
      if (sy > 1e-12) {
        // BFGS update of the inverse Hessian
        Eigen::VectorXd Hy = H * yv;
        const double yHy = yv.dot(Hy);
        H += ((sy + yHy) / (sy * sy)) * (s * s.transpose()) -
             (Hy * s.transpose() + s * Hy.transpose()) / sy;
      }
    }
    // boundary refinement: a component whose removal costs nothing beyond
    // numerical noise belongs on the floor exactly, not at some tiny positive
    // value the line search happened to stall on
    bool moved = true;
    int sweeps = 0;
    while (moved && sweeps++ <= int(q)) {
      moved = false;
      for (Eigen::Index i = 0; i < u.size(); ++i) {
        if (u[i] <= kLogFloor + 1e-9) continue;
        Eigen::VectorXd u_try = u;
        u_try[i] = kLogFloor;
        Evaluation trial;
        try {
          trial = evaluate(pb, u_try, true);
        } catch (const NumericalFailure&) {
          continue;
        }
        if (std::isfinite(trial.f) && trial.f <= ev.f + 1e-3) {
          u = u_try;
          ev = trial;
          moved = true;
        }
      }
    }
    if (!converged && projected_gnorm(u, ev.grad) < 1e-4) converged = true;
    if (!converged) throw NonConvergence("restricted-likelihood optimizer exhausted its budget");
  }

  FreqFit fit;
  fit.design_present = pb.present;
  fit.design_column = pb.design_column;
  fit.mu_hat.fill(kNaN);
  fit.satterthwaite_df.fill(kNaN);
  std::array<double, kNumDesigns> tau2, omega2, phi2;
  scatter_components(pb, u, tau2, omega2, phi2);
  for (int d = 0; d < kNumDesigns; ++d) {
    const auto dd = std::size_t(d);
    fit.tau2[dd] = tau2[dd] < kVarFloor ? 0.0 : tau2[dd];
    fit.omega2[dd] = omega2[dd] < kVarFloor ? 0.0 : omega2[dd];
    fit.phi2[dd] = phi2[dd] < kVarFloor ? 0.0 : phi2[dd];
    fit.n_studies[dd] = pb.n_cgroups[dd];
    if (pb.present[dd]) fit.mu_hat[dd] = ev.beta[pb.design_column[dd]];
  }
  for (const auto& cm : pb.comps) {
    const auto dd = std::size_t(cm.design);
    if (cm.type == Comp::kTau) fit.tau_active[dd] = true;
    if (cm.type == Comp::kOmega) fit.omega_active[dd] = true;
    if (cm.type == Comp::kPhi) fit.phi_active[dd] = true;
  }
  if (spec.use_covariates) {
    fit.beta_hat.assign(4, 0.0);
    for (int j = 0; j < 4; ++j) fit.beta_hat[std::size_t(j)] = ev.beta[pb.n_design_cols + j];
  }
  fit.reml_loglik = -ev.f;
  fit.iterations = iter;
  fit.model_vcov = ev.M;
  return fit;
}

double reml_loglik_at(const Dataset& ds, const FreqSpec& spec,
                      const std::array<double, kNumDesigns>& tau2,
                      const std::array<double, kNumDesigns>& omega2,
                      const std::array<double, kNumDesigns>& phi2) {
  Problem pb = build_problem(ds, spec);
  pb.comps.clear();
  for (int d = 0; d < kNumDesigns; ++d) {
    if (tau2[std::size_t(d)] > 0.0) pb.comps.push_back({Comp::kTau, d});
    if (omega2[std::size_t(d)] > 0.0) pb.comps.push_back({Comp::kOmega, d});
    if (phi2[std::size_t(d)] > 0.0) pb.comps.push_back({Comp::kPhi, d});
  }
  Eigen::VectorXd u(Eigen::Index(pb.comps.size()));
  for (std::size_t m = 0; m < pb.comps.size(); ++m) {
    const auto& cm = pb.comps[m];
    const auto dd = std::size_t(cm.design);
    const double s2 = cm.type == Comp::kTau    ? tau2[dd]
                      : cm.type == Comp::kOmega ? omega2[dd]
                                                : phi2[dd];
    u[Eigen::Index(m)] = std::log(s2);
  }
  return -evaluate(pb, u, false).f;
}

void robust_vcov(FreqFit& fit, const Dataset& ds, const FreqSpec& spec) {
  Problem pb = build_problem(ds, spec);
  const int p = pb.p;
  const std::size_t nb = pb.blocks.size();

  std::vector<Eigen::MatrixXd> Vb(nb), Wb(nb);
  Eigen::MatrixXd Across = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd ay = Eigen::VectorXd::Zero(p);
  for (std::size_t g = 0; g < nb; ++g) {
    const auto& b = pb.blocks[g];
    Vb[g] = block_cov(b, fit.tau2, fit.omega2, fit.phi2);
    Eigen::LLT<Eigen::MatrixXd> llt(Vb[g]);
    if (llt.info() != Eigen::Success)
      throw NumericalFailure("covariance block is not positive definite");
    Wb[g] = llt.solve(Eigen::MatrixXd::Identity(Vb[g].rows(), Vb[g].cols()));
    Across += b.X.transpose() * Wb[g] * b.X;
    ay += b.X.transpose() * Wb[g] * b.y;
  }
  Eigen::LLT<Eigen::MatrixXd> lltA(Across);
  if (lltA.info() != Eigen::Success)
    throw SingularDesign("fixed-effect information matrix is singular");
  const Eigen::MatrixXd M = lltA.solve(Eigen::MatrixXd::Identity(p, p));
  const Eigen::VectorXd beta = lltA.solve(ay);

  // bias-reduced adjustment: A_g S_g A_g = V_g with S_g the working-model
  // covariance of the cluster residuals
  std::vector<Eigen::MatrixXd> adj(nb);
  std::vector<Eigen::VectorXd> resid(nb);
  Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(p, p);
  for (std::size_t g = 0; g < nb; ++g) {
    const auto& b = pb.blocks[g];
    resid[g] = b.y - b.X * beta;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ev(Vb[g]);
    if (ev.info() != Eigen::Success) throw NumericalFailure("eigendecomposition failed");
    Eigen::VectorXd lam = ev.eigenvalues();
    Eigen::MatrixXd Vhalf =
        ev.eigenvectors() * lam.cwiseMax(0.0).cwiseSqrt().asDiagonal() * ev.eigenvectors().transpose();
    Eigen::MatrixXd S = Vb[g] - b.X * M * b.X.transpose();
    Eigen::MatrixXd T = Vhalf * S * Vhalf;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> evT(T);
    if (evT.info() != Eigen::Success) throw NumericalFailure("eigendecomposition failed");
    Eigen::VectorXd lt = evT.eigenvalues();
    const double tol = std::max(lt.cwiseAbs().maxCoeff(), 1e-300) * 1e-11 * double(T.rows());
    Eigen::VectorXd inv_sqrt(lt.size());
    for (Eigen::Index i = 0; i < lt.size(); ++i)
      inv_sqrt[i] = lt[i] > tol ? 1.0 / std::sqrt(lt[i]) : 0.0;
    adj[g] = Vhalf * evT.eigenvectors() * inv_sqrt.asDiagonal() *
             evT.eigenvectors().transpose() * Vhalf;
    const Eigen::VectorXd z = b.X.transpose() * (Wb[g] * (adj[g] * resid[g]));
    meat += z * z.transpose();
  }
  const Eigen::MatrixXd vcr = M * meat * M;

  fit.vcov_robust = Eigen::MatrixXd::Constant(kNumDesigns, kNumDesigns, kNaN);
  for (int d = 0; d < kNumDesigns; ++d) {
    for (int d2 = 0; d2 < kNumDesigns; ++d2) {
      const int cd = fit.design_column[std::size_t(d)];
      const int cd2 = fit.design_column[std::size_t(d2)];
      if (cd >= 0 && cd2 >= 0) fit.vcov_robust(d, d2) = vcr(cd, cd2);
    }
  }

  // Satterthwaite df per design mean: the robust variance is a quadratic form
  // sum_g (t_g' y)^2; its chi-square moments give nu = (tr B)^2 / tr(B^2)
  // with B_ab = delta_ab p_a' V_a p_a - h_a' M h_b.
  int usable = 0;
  for (int d = 0; d < kNumDesigns; ++d) {
    const auto dd = std::size_t(d);
    if (!pb.present[dd]) continue;
    if (pb.n_cgroups[dd] < 2) {
      fit.inference_unavailable[dd] = true;
      continue;
    }
    Eigen::VectorXd cvec = Eigen::VectorXd::Zero(p);
    cvec[fit.design_column[dd]] = 1.0;
    const auto nbi = static_cast<Eigen::Index>(nb);
    Eigen::VectorXd diag_term(nbi);
    Eigen::MatrixXd hmat(p, nbi);
    for (std::size_t g = 0; g < nb; ++g) {
      const auto& b = pb.blocks[g];
      const Eigen::VectorXd pg = adj[g] * (Wb[g] * (b.X * (M * cvec)));
      diag_term[Eigen::Index(g)] = pg.dot(Vb[g] * pg);
      hmat.col(Eigen::Index(g)) = b.X.transpose() * pg;
    }
    const Eigen::MatrixXd HMH = hmat.transpose() * M * hmat;
    Eigen::MatrixXd B = -HMH;
    B.diagonal() += diag_term;
    const double trB = B.trace();
    const double trB2 = (B * B).trace();
    if (!(trB > 0.0) || !(trB2 > 0.0)) {
      fit.inference_unavailable[dd] = true;
      continue;
    }
    fit.satterthwaite_df[dd] = trB * trB / trB2;
    ++usable;
  }
  if (usable == 0) throw TooFewClusters("no design is supported by at least 2 studies");
  fit.has_robust = true;
}

namespace {

double total_sd(const FreqFit& fit, int d, Level level) {
  const auto dd = std::size_t(d);
  double v = fit.vcov_robust(d, d) + fit.tau2[dd];
  if (level != Level::kStudy) v += fit.omega2[dd];
  if (level == Level::kContrast) v += fit.phi2[dd];
  return std::sqrt(v);
}

int checked_design(const FreqFit& fit, DesignCell design) {
  const int d = design.index();
  if (!fit.has_robust) throw Error("robust variance has not been computed");
  if (!fit.design_present[std::size_t(d)])
    throw ValidationError("design cell absent from the data");
  if (fit.inference_unavailable[std::size_t(d)])
    throw TooFewClusters("design is supported by fewer than 2 studies");
  return d;
}

}  // namespace

double sd_of_bias(const FreqFit& fit, DesignCell design, Level level) {
  return total_sd(fit, checked_design(fit, design), level);
}

std::pair<double, double> prediction_interval(const FreqFit& fit, DesignCell design, Level level,
                                              double beta) {
  const int d = checked_design(fit, design);
  if (!(beta >= 0.0 && beta < 1.0)) throw ConfigError("interval level must lie in [0, 1)");
  const double mu = fit.mu_hat[std::size_t(d)];
  if (beta == 0.0) return {mu, mu};
  const double s = total_sd(fit, d, level);
  const double t = t_quantile(0.5 * (1.0 + beta), fit.satterthwaite_df[std::size_t(d)]);
  return {mu - t * s, mu + t * s};
}

double rope_probability(const FreqFit& fit, DesignCell design, Level level, double rope) {
  const int d = checked_design(fit, design);
  if (!(rope > 0.0)) throw ConfigError("rope must be > 0");
  const double mu = fit.mu_hat[std::size_t(d)];
  const double s = total_sd(fit, d, level);
  if (s == 0.0) return std::abs(mu) < rope ? 1.0 : 0.0;
  return norm_cdf((rope - mu) / s) - norm_cdf((-rope - mu) / s);
}

std::vector<LevelSummary> level_summaries(const FreqFit& fit, double rope, double pi_level) {
  std::vector<LevelSummary> out;
  for (int d = 0; d < kNumDesigns; ++d) {
    const auto dd = std::size_t(d);
    if (!fit.design_present[dd]) continue;
    for (Level level : {Level::kStudy, Level::kHypothesis, Level::kContrast}) {
      LevelSummary row;
      row.design = DesignCell::from_index(d);
      row.level = level;
      row.mean = fit.mu_hat[dd];
      if (fit.inference_unavailable[dd]) {
        row.available = false;
        row.sd = kNaN;
        row.pi_lo = kNaN;
        row.pi_hi = kNaN;
        row.rope_prob = kNaN;
      } else {
        row.sd = sd_of_bias(fit, row.design, level);
        auto pi = prediction_interval(fit, row.design, level, pi_level);
        row.pi_lo = pi.first;
        row.pi_hi = pi.second;
        row.rope_prob = rope_probability(fit, row.design, level, rope);
      }
      out.push_back(row);
    }
  }
  return out;
}

}  // namespace wsc
