// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace umseg {

using Index = Eigen::Index;

/// Rejected input: malformed files, violated preconditions, shape mismatches.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Failure while executing a well-formed request (non-finite values, I/O).
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Voxel extents, x fastest in memory.
struct Dims3 {
  std::array<Index, 3> n{1, 1, 1};

  Dims3() = default;
  Dims3(Index x, Index y, Index z) : n{x, y, z} {}

  Index operator[](int axis) const { return n[axis]; }
  Index& operator[](int axis) { return n[axis]; }
  Index voxels() const { return n[0] * n[1] * n[2]; }
  Index offset(Index x, Index y, Index z) const { return x + n[0] * (y + n[1] * z); }
  bool contains(Index x, Index y, Index z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < n[0] && y < n[1] && z < n[2];
  }
  std::array<Index, 3> coords(Index offset) const {
    return {offset % n[0], (offset / n[0]) % n[1], offset / (n[0] * n[1])};
  }
  friend bool operator==(const Dims3& a, const Dims3& b) { return a.n == b.n; }
  friend bool operator!=(const Dims3& a, const Dims3& b) { return !(a == b); }
};

std::string to_string(const Dims3& d);

/// Seeded generator with library-independent real draws, so a seed yields
/// the same stream regardless of the standard library's distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}
  Rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    engine_.seed(seq);
  }

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  Index below(Index n) { return static_cast<Index>(uniform() * static_cast<double>(n)); }
  bool bernoulli(double p) { return uniform() < p; }
  double normal();

 private:
  std::mt19937_64 engine_;
};

}  // namespace umseg
