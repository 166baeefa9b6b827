#pragma once

#include <algorithm>
#include <functional>
#include <vector>

#include "mbdl/autodiff.hpp"
#include "support/oracles.hpp"

namespace mbdl::oracle {

using GraphBuilder = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

/// Worst relative error between taped gradients and central differences over all inputs.
inline double gradient_check(const GraphBuilder& build, const std::vector<Tensor>& inputs, double h = 1e-5) {
  ad::Tape tape;
  std::vector<ad::Var> leaves;
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t));
  const ad::Var root = build(tape, leaves);
  const ad::Gradients grads = tape.backward(root);

  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto f = [&](const Tensor& xk) {
      ad::Tape t2;
      std::vector<ad::Var> l2;
      for (std::size_t j = 0; j < inputs.size(); ++j) l2.push_back(t2.constant(j == k ? xk : inputs[j]));
      return build(t2, l2).value().item();
    };
    const Tensor fd = finite_difference(f, inputs[k], h);
    worst = std::max(worst, relative_error(grads[leaves[k]], fd));
  }
  return worst;
}

}  // namespace mbdl::oracle
