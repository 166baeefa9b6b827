#pragma once

#include <cstdint>
#include <vector>

#include "mbdl/tensor.hpp"

namespace mbdl {

/// Counter-based generator: draw i of stream `key` is mix(key, i), so a
/// stream can be split into independent child streams without shared state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x6a09e667f3bcc909ULL)) {}

  /// Child stream identified by `stream`; does not advance this generator.
  Rng split(std::uint64_t stream) const;

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);
  double normal();

  Tensor normal_tensor(Tensor::Shape shape, double stddev = 1.0);
  std::vector<std::size_t> permutation(std::size_t n);

  static std::uint64_t mix(std::uint64_t x);

 private:
  Rng(std::uint64_t key, int) : key_(key) {}

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace mbdl
