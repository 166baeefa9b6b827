#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mbdl/autodiff.hpp"
#include "mbdl/random.hpp"
#include "mbdl/tensor.hpp"

namespace mbdl {

enum class Activation { relu, tanh };

/// Fully connected network, hidden layers activated, last layer linear.
struct Mlp {
  std::vector<Tensor> weights;  // [out x in]
  std::vector<Tensor> biases;   // [out]
  Activation activation = Activation::relu;

  /// widths = {in, hidden..., out}. He init for relu, Xavier for tanh; the
  /// last layer is scaled by `output_gain`.
  static Mlp create(const std::vector<std::size_t>& widths, Activation act, Rng& rng, double output_gain = 1.0);

  std::size_t depth() const { return weights.size(); }
  std::size_t input_dim() const { return weights.front().cols(); }
  std::size_t output_dim() const { return weights.back().rows(); }

  /// x is [in] or [in x B].
  Tensor forward(const Tensor& x) const;

  /// W0, b0, W1, b1, ...
  std::vector<Tensor> pack() const;
  static Mlp unpack(const Mlp& like, std::span<const Tensor> packed);
  std::size_t packed_count() const { return 2 * depth(); }
};

/// Forward on the tape over packed leaves; x is [in x B].
ad::Var mlp_forward(const Mlp& like, std::span<const ad::Var> packed, const ad::Var& x);

std::string activation_name(Activation a);
Activation parse_activation(const std::string& name);

/// <stem>_W<i>.bin and <stem>_b<i>.bin under dir.
void save_mlp_tensors(const std::filesystem::path& dir, const std::string& stem, const Mlp& net);
Mlp load_mlp_tensors(const std::filesystem::path& dir, const std::string& stem, std::size_t depth, Activation act);

}  // namespace mbdl
