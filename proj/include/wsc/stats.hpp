#ifndef WSC_STATS_HPP
#define WSC_STATS_HPP

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <boost/math/special_functions/digamma.hpp>
#include <cmath>

namespace wsc {

inline double norm_cdf(double z) { return boost::math::cdf(boost::math::normal_distribution<>(), z); }

inline double norm_quantile(double p) { return boost::math::quantile(boost::math::normal_distribution<>(), p); }

inline double t_cdf(double x, double df) {
  return boost::math::cdf(boost::math::students_t_distribution<>(df), x);
}

inline double t_quantile(double p, double df) {
  return boost::math::quantile(boost::math::students_t_distribution<>(df), p);
}

inline double chi2_cdf(double x, double df) {
  return boost::math::cdf(boost::math::chi_squared_distribution<>(df), x);
}

// upper-tail p-value of a chi-squared statistic
inline double chi2_sf(double x, double df) {
  return boost::math::cdf(boost::math::complement(boost::math::chi_squared_distribution<>(df), x));
}

inline double digamma(double x) { return boost::math::digamma(x); }

// log density of the standard Student t
inline double log_t_pdf(double x, double nu) {
  return std::lgamma(0.5 * (nu + 1.0)) - std::lgamma(0.5 * nu) - 0.5 * std::log(nu * M_PI) -
         0.5 * (nu + 1.0) * std::log1p(x * x / nu);
}

constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

}  // namespace wsc

#endif
