#include "wsc/mcmc_diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "wsc/stats.hpp"

namespace wsc {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// halve every chain so within- and between-half drift both register
Eigen::MatrixXd split_chains(const Eigen::MatrixXd& x) {
  const Eigen::Index n = x.rows(), c = x.cols();
  const Eigen::Index m = n / 2;
  Eigen::MatrixXd out(m, 2 * c);
  for (Eigen::Index j = 0; j < c; ++j) {
    out.col(2 * j) = x.col(j).head(m);
    out.col(2 * j + 1) = x.col(j).tail(m);
  }
  return out;
}

// pooled average ranks mapped through the normal quantile function
Eigen::MatrixXd rank_normalize(const Eigen::MatrixXd& x) {
  const Eigen::Index n = x.size();
  std::vector<std::pair<double, Eigen::Index>> v(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) v[std::size_t(i)] = {x(i), i};
  std::sort(v.begin(), v.end());
  Eigen::VectorXd rank(n);
  Eigen::Index i = 0;
  while (i < n) {
    Eigen::Index j = i;
    while (j + 1 < n && v[std::size_t(j + 1)].first == v[std::size_t(i)].first) ++j;
    const double avg = 0.5 * double(i + j) + 1.0;  // 1-based average rank
    for (Eigen::Index t = i; t <= j; ++t) rank[v[std::size_t(t)].second] = avg;
    i = j + 1;
  }
  Eigen::MatrixXd z(x.rows(), x.cols());
  for (Eigen::Index t = 0; t < n; ++t)
    z(t) = norm_quantile((rank[t] - 0.375) / (double(n) + 0.25));
  return z;
}

struct Moments {
  double w = 0.0;         // mean within-sequence variance
  double var_plus = 0.0;  // pooled variance estimate
  Eigen::VectorXd means;
};

Moments moments_of(const Eigen::MatrixXd& x) {
  const Eigen::Index n = x.rows(), s = x.cols();
  Moments m;
  m.means = x.colwise().mean();
  double w = 0.0;
  for (Eigen::Index j = 0; j < s; ++j)
    w += (x.col(j).array() - m.means[j]).square().sum() / double(n - 1);
  m.w = w / double(s);
  const double grand = m.means.mean();
  double b_over_n = 0.0;
  if (s > 1) b_over_n = (m.means.array() - grand).square().sum() / double(s - 1);
  m.var_plus = m.w * double(n - 1) / double(n) + b_over_n;
  return m;
}

double rhat_of(const Eigen::MatrixXd& seqs) {
  if (seqs.rows() < 2) return kNaN;
  const Moments m = moments_of(seqs);
  if (!(m.w > 0.0)) return kNaN;
  return std::sqrt(m.var_plus / m.w);
}

// autocovariance of one sequence at a given lag (biased, 1/n)
double autocov(const Eigen::VectorXd& x, double mean, Eigen::Index lag) {
  const Eigen::Index n = x.size();
  double s = 0.0;
  for (Eigen::Index i = 0; i + lag < n; ++i) s += (x[i] - mean) * (x[i + lag] - mean);
  return s / double(n);
}

}  // namespace

double ess_of(const Eigen::MatrixXd& x) {
  const Eigen::Index n = x.rows(), s = x.cols();
  if (n < 4) return kNaN;
  const Moments m = moments_of(x);
  if (!(m.var_plus > 0.0)) return kNaN;

  // Geyer initial monotone sequence over paired autocorrelations
  double tau = 1.0;  // rho_0 = 1 contributes once
  double prev_pair = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 1; k + 1 < n; k += 2) {
    double acov_k = 0.0, acov_k1 = 0.0;
    for (Eigen::Index j = 0; j < s; ++j) {
      acov_k += autocov(x.col(j), m.means[j], k);
      acov_k1 += autocov(x.col(j), m.means[j], k + 1);
    }
    acov_k /= double(s);
    acov_k1 /= double(s);
    const double rho_k = 1.0 - (m.w - acov_k) / m.var_plus;
    const double rho_k1 = 1.0 - (m.w - acov_k1) / m.var_plus;
    double pair = rho_k + rho_k1;
    if (pair < 0.0) break;
    pair = std::min(pair, prev_pair);  // enforce monotone decay
    prev_pair = pair;
    tau += 2.0 * pair;
  }
  const double total = double(n) * double(s);
  const double ess = total / tau;
  return std::min(ess, total * std::log10(std::max(total, 10.0)));
}

ParamDiag param_diagnostics(const Eigen::MatrixXd& x) {
  ParamDiag d;
  d.rhat = kNaN;
  d.ess_bulk = kNaN;
  d.ess_tail = kNaN;
  if (x.rows() < 4 || x.cols() < 1) return d;

  const Eigen::MatrixXd halves = split_chains(x);
  const double spread = (halves.maxCoeff() - halves.minCoeff());
  if (!(spread > 0.0)) return d;  // constant draws: everything undefined

  const Eigen::MatrixXd bulk = rank_normalize(halves);
  const double rhat_bulk = rhat_of(bulk);

  // fold around the median to catch scale disagreement
  std::vector<double> pool(halves.data(), halves.data() + halves.size());
  std::nth_element(pool.begin(), pool.begin() + pool.size() / 2, pool.end());
  const double med = pool[pool.size() / 2];
  const Eigen::MatrixXd folded = rank_normalize((halves.array() - med).abs().matrix());
  const double rhat_fold = rhat_of(folded);
  d.rhat = std::max(rhat_bulk, rhat_fold);

  d.ess_bulk = ess_of(bulk);

  // tail health: ESS of the 5% and 95% exceedance indicators
  std::vector<double> sorted(halves.data(), halves.data() + halves.size());
  std::sort(sorted.begin(), sorted.end());
  auto quantile = [&](double p) {
    const double h = p * double(sorted.size() - 1);
    const std::size_t lo = std::size_t(h);
    const double frac = h - double(lo);
    return sorted[lo] * (1.0 - frac) + sorted[std::min(lo + 1, sorted.size() - 1)] * frac;
  };
  double tail = std::numeric_limits<double>::infinity();
  for (double p : {0.05, 0.95}) {
    const double q = quantile(p);
    Eigen::MatrixXd ind = (halves.array() <= q).cast<double>();
    const double e = ess_of(ind);
    tail = std::isnan(e) ? kNaN : std::min(tail, e);
    if (std::isnan(tail)) break;
  }
  d.ess_tail = tail;
  return d;
}

}  // namespace wsc
