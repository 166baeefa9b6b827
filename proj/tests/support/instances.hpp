#pragma once

#include <cmath>

#include "mbdl/random.hpp"
#include "mbdl/sparse.hpp"

namespace mbdl::oracle {

struct LassoInstance {
  SparseProblem problem;
  Tensor x;
  Tensor truth;
};

/// Column-normalized Gaussian H, k-sparse N(0,1) truth, x = H s + sigma w.
inline LassoInstance random_lasso(std::uint64_t seed, std::size_t m = 32, std::size_t n = 64, std::size_t k = 5,
                                  double sigma = 0.05, double rho = 0.1) {
  Rng rng(seed);
  Tensor h = rng.normal_tensor({m, n});
  for (std::size_t j = 0; j < n; ++j) {
    double c = 0.0;
    for (std::size_t i = 0; i < m; ++i) c += h(i, j) * h(i, j);
    c = std::sqrt(c);
    for (std::size_t i = 0; i < m; ++i) h(i, j) /= c;
  }
  Tensor s({n});
  const auto perm = rng.permutation(n);
  for (std::size_t i = 0; i < k; ++i) s[perm[i]] = rng.normal();
  Tensor x = matmul(h, s) + rng.normal_tensor({m}, sigma);
  SparseProblem p;
  p.H = std::move(h);
  p.rho = rho;
  p.sigma2 = sigma * sigma;
  return {std::move(p), std::move(x), std::move(s)};
}

}  // namespace mbdl::oracle
