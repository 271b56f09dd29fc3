#pragma once

// Seeded randomness with bit-exact reproducibility: identical seed and call
// sequence give identical draws on every platform. All transforms are
// deterministic functions of mt19937_64 output (no implementation-defined
// library distributions).

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>

namespace impflow {

class RandomState {
 public:
  explicit RandomState(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0,1) with 53 bits of mantissa.
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Standard normal via Box-Muller on a fresh uniform pair.
  double normal() {
    double u1 = uniform01();
    while (u1 == 0.0) u1 = uniform01();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  Eigen::VectorXd normal_vec(Eigen::Index d) {
    Eigen::VectorXd v(d);
    for (Eigen::Index i = 0; i < d; ++i) v[i] = normal();
    return v;
  }

  Eigen::MatrixXd normal_mat(Eigen::Index rows, Eigen::Index cols) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal();
    return m;
  }

  /// Geometric on {1,2,...} with P(N=k) = p(1-p)^{k-1}, by inversion.
  int geometric(double p) {
    if (!(p > 0.0 && p <= 1.0)) throw std::invalid_argument("geometric: p must be in (0,1]");
    if (p == 1.0) return 1;
    double u = uniform01();
    while (u == 0.0) u = uniform01();
    return 1 + static_cast<int>(std::floor(std::log(u) / std::log1p(-p)));
  }

  /// Poisson(lambda) by Knuth's product method (lambda is small here).
  int poisson(double lambda) {
    if (!(lambda > 0.0)) throw std::invalid_argument("poisson: lambda must be positive");
    const double limit = std::exp(-lambda);
    int k = 0;
    double prod = 1.0;
    do {
      ++k;
      prod *= uniform01();
    } while (prod > limit);
    return k - 1;
  }

  /// Independent child stream, deterministic in (seed, key).
  RandomState fork(std::uint64_t key) const {
    return RandomState(splitmix64(seed_ ^ (0x9e3779b97f4a7c15ULL + key * 0xbf58476d1ce4e5b9ULL)));
  }

 private:
  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace impflow
