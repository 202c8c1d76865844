#ifndef WSC_RNG_HPP
#define WSC_RNG_HPP

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <utility>
#include <vector>

namespace wsc {

// splitmix64; used to derive independent stream seeds from (master, stream id).
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  return splitmix64(splitmix64(master) ^ splitmix64(stream * 0x9e3779b97f4a7c15ULL + 1));
}

// Deterministic RNG with hand-rolled samplers. std::<distribution> objects are
// implementation-defined, so everything that must reproduce byte-identically
// is generated from raw engine output here.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t bits() { return eng_(); }

  // uniform on [0, 1)
  double uniform() { return (eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform on (0, 1)
  double uniform_pos() {
    double u;
    do {
      u = uniform();
    } while (u <= 0.0);
    return u;
  }

  std::uint64_t uniform_int(std::uint64_t n) {
    // rejection to avoid modulo bias
    const std::uint64_t lim = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v;
    do {
      v = eng_();
    } while (v >= lim);
    return v % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Marsaglia polar method; caches the spare deviate.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    have_spare_ = true;
    return u * m;
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  double lognormal(double log_mean, double log_sd) { return std::exp(normal(log_mean, log_sd)); }

  double exponential() { return -std::log(uniform_pos()); }

  // Marsaglia-Tsang; shape > 0, unit scale.
  double gamma(double shape) {
    if (shape < 1.0) {
      const double g = gamma(shape + 1.0);
      return g * std::pow(uniform_pos(), 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform_pos();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  double gamma(double shape, double rate) { return gamma(shape) / rate; }

  double chi_squared(double df) { return 2.0 * gamma(0.5 * df); }

  // standard Student t with nu degrees of freedom
  double student_t(double nu) { return normal() / std::sqrt(chi_squared(nu) / nu); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[uniform_int(i)]);
    }
  }

private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace wsc

#endif
