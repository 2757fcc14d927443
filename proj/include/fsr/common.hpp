#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>

namespace fsr {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Callback used by model components to expose their parameters in a fixed
// order (optimizer, EMA, checkpoints, finite-difference sweeps).
using ParamVisitor = std::function<void(const std::string&, MatrixXd&)>;

// Error taxonomy. The CLI maps ConfigError/DataError to exit code 1 and
// NumericError (plus anything else thrown at runtime) to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent per-image / per-step
// RNG streams from a base seed so results do not depend on scheduling.
inline uint64_t mix_bits(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) { return mix_bits(a ^ mix_bits(b)); }

inline Rng make_rng(uint64_t seed) { return Rng(mix_bits(seed)); }

inline double uniform(Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  return d(rng);
}

inline int uniform_int(Rng& rng, int lo, int hi) {  // inclusive bounds
  std::uniform_int_distribution<int> d(lo, hi);
  return d(rng);
}

inline double normal(Rng& rng, double mean, double stddev) {
  std::normal_distribution<double> d(mean, stddev);
  return d(rng);
}

// Truncated normal draw: resample until within two standard deviations.
inline double trunc_normal(Rng& rng, double stddev) {
  for (;;) {
    double x = normal(rng, 0.0, stddev);
    if (std::abs(x) <= 2.0 * stddev) return x;
  }
}

inline MatrixXd trunc_normal_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols,
                                    double stddev) {
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = trunc_normal(rng, stddev);
  return m;
}

}  // namespace fsr
