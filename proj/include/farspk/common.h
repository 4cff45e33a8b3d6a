#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace farspk {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Bad parameters, malformed config, or inconsistent stage setup.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad or inconsistent input data (audio, archives, trial lists, labels).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

uint64_t fnv1a64(std::string_view text);

// Seeded generator with named, order-independent sub-streams. A sub-stream
// depends only on (parent seed, name), never on how much of the parent has
// been consumed.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0);

  Rng derive(std::string_view name) const;
  uint64_t seed() const { return seed_; }

  double uniform(double lo, double hi);
  // Uniform integer in [0, n).
  std::size_t index(std::size_t n);
  // Uniform integer in [lo, hi].
  int64_t integer(int64_t lo, int64_t hi);
  double normal(double mean = 0.0, double stddev = 1.0);

  std::mt19937_64& engine() { return engine_; }

 private:
  uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace farspk
