#include "mbdl/nn.hpp"

#include <cmath>

#include "mbdl/error.hpp"
#include "mbdl/tensor_io.hpp"

namespace mbdl {

Mlp Mlp::create(const std::vector<std::size_t>& widths, Activation act, Rng& rng, double output_gain) {
  if (widths.size() < 2) throw std::invalid_argument("an MLP needs at least input and output widths");
  Mlp net;
  net.activation = act;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::size_t in = widths[l], out = widths[l + 1];
    if (in == 0 || out == 0) throw std::invalid_argument("MLP widths must be positive");
    double sd = act == Activation::relu ? std::sqrt(2.0 / static_cast<double>(in))
                                        : std::sqrt(1.0 / static_cast<double>(in));
    if (l + 2 == widths.size()) sd = output_gain / std::sqrt(static_cast<double>(in));
    net.weights.push_back(rng.normal_tensor({out, in}, sd));
    net.biases.emplace_back(Tensor::Shape{out});
  }
  return net;
}

Tensor Mlp::forward(const Tensor& x) const {
  if (x.rows() != input_dim()) {
    throw ShapeError("MLP input " + shape_string(x.shape()) + " for width " + std::to_string(input_dim()));
  }
  Tensor h = x.as_column();
  for (std::size_t l = 0; l < depth(); ++l) {
    Tensor z = matmul(weights[l], h);
    for (std::size_t r = 0; r < z.rows(); ++r)
      for (std::size_t c = 0; c < z.cols(); ++c) {
        double v = z(r, c) + biases[l][r];
        if (l + 1 < depth()) v = activation == Activation::relu ? std::max(v, 0.0) : std::tanh(v);
        z(r, c) = v;
      }
    h = std::move(z);
  }
  return x.is_vector() ? h.reshaped({h.rows()}) : h;
}

std::vector<Tensor> Mlp::pack() const {
  std::vector<Tensor> out;
  for (std::size_t l = 0; l < depth(); ++l) {
    out.push_back(weights[l]);
    out.push_back(biases[l]);
  }
  return out;
}

Mlp Mlp::unpack(const Mlp& like, std::span<const Tensor> packed) {
  if (packed.size() != like.packed_count()) throw ShapeError("MLP parameter count mismatch");
  Mlp net;
  net.activation = like.activation;
  for (std::size_t l = 0; l < like.depth(); ++l) {
    net.weights.push_back(packed[2 * l]);
    net.biases.push_back(packed[2 * l + 1]);
  }
  return net;
}

ad::Var mlp_forward(const Mlp& like, std::span<const ad::Var> packed, const ad::Var& x) {
  if (packed.size() != like.packed_count()) throw ShapeError("MLP parameter count mismatch");
  ad::Var h = x;
  for (std::size_t l = 0; l < like.depth(); ++l) {
    h = ad::add_column(ad::matmul(packed[2 * l], h), packed[2 * l + 1]);
    if (l + 1 < like.depth()) h = like.activation == Activation::relu ? ad::relu(h) : ad::tanh(h);
  }
  return h;
}

std::string activation_name(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + name + "' (relu, tanh)");
}

void save_mlp_tensors(const std::filesystem::path& dir, const std::string& stem, const Mlp& net) {
  for (std::size_t l = 0; l < net.depth(); ++l) {
    write_tensor(dir / (stem + "_W" + std::to_string(l) + ".bin"), net.weights[l]);
    write_tensor(dir / (stem + "_b" + std::to_string(l) + ".bin"), net.biases[l]);
  }
}

Mlp load_mlp_tensors(const std::filesystem::path& dir, const std::string& stem, std::size_t depth, Activation act) {
  Mlp net;
  net.activation = act;
  for (std::size_t l = 0; l < depth; ++l) {
    net.weights.push_back(read_tensor(dir / (stem + "_W" + std::to_string(l) + ".bin")));
    net.biases.push_back(read_tensor(dir / (stem + "_b" + std::to_string(l) + ".bin")));
    if (net.weights[l].rows() != net.biases[l].size() || (l > 0 && net.weights[l].cols() != net.weights[l - 1].rows())) {
      throw ConfigError("inconsistent MLP layer shapes in " + dir.string());
    }
  }
  return net;
}

}  // namespace mbdl
