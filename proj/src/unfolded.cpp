#include "mbdl/unfolded.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "mbdl/error.hpp"
#include "mbdl/tensor_io.hpp"

namespace mbdl {

namespace {

// inverse softplus with a floor so zero thresholds stay representable
double to_raw(double v) { return ad::softplus_inverse(std::max(v, 1e-12)); }

Tensor admm_inverse(const Tensor& a, double lambda) {
  Tensor g = matmul(transpose(a), a);
  for (std::size_t i = 0; i < g.rows(); ++i) g(i, i) += 2.0 * lambda;
  return Cholesky(g).inverse();
}

std::size_t layer_count(const UnfoldedParams& p) { return p.tied ? 1 : p.K; }

std::size_t per_layer(TrainMode mode) { return mode == TrainMode::full ? 4 : 2; }

}  // namespace

void UnfoldedParams::validate() const {
  if (layers.size() != (tied ? std::size_t{1} : K) && !(K == 0 && layers.size() <= 1)) {
    throw ShapeError("unfolded network has " + std::to_string(layers.size()) + " layers for K=" + std::to_string(K));
  }
  if (layers.empty()) return;
  const auto& first = layers.front();
  const std::size_t n = first.W1.rows();
  for (const auto& l : layers) {
    if (!l.W1.is_matrix() || l.W1.shape() != first.W1.shape() || l.W2.shape() != Tensor::Shape{n, n}) {
      throw ShapeError("inconsistent layer shapes W1 " + shape_string(l.W1.shape()) + ", W2 " + shape_string(l.W2.shape()));
    }
    if (!(l.lambda >= 0.0)) throw std::invalid_argument("layer lambda must be non-negative");
    if (kind == UnfoldedKind::admm && !(l.lambda > 0.0)) throw std::invalid_argument("ADMM layer lambda must be positive");
  }
}

UnfoldedParams lista_init(const SparseProblem& p, double mu, std::size_t K, bool tied) {
  p.validate();
  if (!(mu > 0.0)) throw std::invalid_argument("step size mu must be positive");
  const Tensor a = p.effective_operator();
  const Tensor at = transpose(a);
  UnfoldedParams out;
  out.kind = UnfoldedKind::lista;
  out.K = K;
  out.tied = tied;
  out.rho = p.rho;
  out.A = a;
  const UnfoldedLayer layer{scale(mu, at), Tensor::identity(p.dim()) - scale(mu, matmul(at, a)), mu * p.rho, 1.0};
  out.layers.assign(tied ? 1 : K, layer);
  if (K == 0) out.layers.assign(1, layer);
  return out;
}

namespace {

Tensor zero_state(const UnfoldedParams& params, const Tensor& x) {
  const std::size_t n = params.output_dim();
  if (x.is_vector()) {
    if (x.size() != params.input_dim()) {
      throw ShapeError("input " + shape_string(x.shape()) + " for W1 " + shape_string(params.layers.at(0).W1.shape()));
    }
    return Tensor({n});
  }
  if (!x.is_matrix() || x.rows() != params.input_dim()) {
    throw ShapeError("input " + shape_string(x.shape()) + " for W1 " + shape_string(params.layers.at(0).W1.shape()));
  }
  return Tensor({n, x.cols()});
}

}  // namespace

Tensor lista_forward(const UnfoldedParams& params, const Tensor& x) {
  if (params.layers.empty()) throw ShapeError("unfolded network has no layers");
  Tensor s = zero_state(params, x);
  for (std::size_t k = 0; k < params.K; ++k) {
    const auto& l = params.layer(k);
    s = soft_threshold(axpy(matmul(l.W1, x), l.mu, matmul(l.W2, s)), l.lambda);
  }
  return s;
}

UnfoldedParams unfolded_admm_init(const SparseProblem& p, const AdmmHyper& hyper, std::size_t K, bool tied) {
  p.validate();
  hyper.validate();
  UnfoldedParams out;
  out.kind = UnfoldedKind::admm;
  out.K = K;
  out.tied = tied;
  out.rho = p.rho;
  out.A = p.effective_operator();
  UnfoldedLayer layer;
  layer.lambda = hyper.lambda;
  layer.mu = hyper.mu;
  out.layers.assign(std::max<std::size_t>(1, tied ? 1 : K), layer);
  rebuild_admm_weights(out);
  return out;
}

void rebuild_admm_weights(UnfoldedParams& params) {
  const Tensor at = transpose(params.A);
  for (auto& l : params.layers) {
    if (!(l.lambda > 0.0)) throw std::invalid_argument("ADMM layer lambda must be positive");
    const Tensor inv = admm_inverse(params.A, l.lambda);
    l.W1 = matmul(inv, at);
    l.W2 = scale(2.0 * l.lambda, inv);
  }
}

Tensor unfolded_admm_forward(const UnfoldedParams& params, const Tensor& x, const Prior& prior) {
  if (params.layers.empty()) throw ShapeError("unfolded network has no layers");
  if (!prior.prox) throw std::invalid_argument("prior has no proximal map");
  Tensor s = zero_state(params, x);
  Tensor v = s;
  Tensor u = s;
  for (std::size_t k = 0; k < params.K; ++k) {
    const auto& l = params.layer(k);
    s = matmul(l.W1, x) + matmul(l.W2, v - u);
    v = prior.prox(s + u, 1.0 / (2.0 * l.lambda));
    u = axpy(u, l.mu, s - v);
  }
  return s;
}

Tensor unfolded_admm_forward(const UnfoldedParams& params, const Tensor& x) {
  return unfolded_admm_forward(params, x, l1_prior(params.rho));
}

Tensor unfolded_forward(const UnfoldedParams& params, const Tensor& x) {
  return params.kind == UnfoldedKind::lista ? lista_forward(params, x) : unfolded_admm_forward(params, x);
}

std::vector<Tensor> pack_unfolded(const UnfoldedParams& params, TrainMode mode) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < layer_count(params); ++i) {
    const auto& l = params.layers.at(i);
    if (mode == TrainMode::full) {
      out.push_back(l.W1);
      out.push_back(l.W2);
    }
    out.push_back(Tensor::scalar(to_raw(l.lambda)));
    out.push_back(Tensor::scalar(to_raw(l.mu)));
  }
  return out;
}

UnfoldedParams unpack_unfolded(const UnfoldedParams& like, const std::vector<Tensor>& packed, TrainMode mode) {
  const std::size_t stride = per_layer(mode);
  if (packed.size() != stride * layer_count(like)) throw ShapeError("packed parameter count does not match network");
  UnfoldedParams out = like;
  for (std::size_t i = 0; i < layer_count(like); ++i) {
    auto& l = out.layers.at(i);
    std::size_t at = i * stride;
    if (mode == TrainMode::full) {
      l.W1 = packed[at++];
      l.W2 = packed[at++];
    }
    l.lambda = ad::softplus(packed[at++].item());
    l.mu = ad::softplus(packed[at++].item());
  }
  if (mode == TrainMode::hyper_only && like.kind == UnfoldedKind::admm) rebuild_admm_weights(out);
  return out;
}

ad::Var unfolded_forward(ad::Tape& tape, const UnfoldedParams& like, std::span<const ad::Var> packed, const ad::Var& x,
                         TrainMode mode) {
  const std::size_t stride = per_layer(mode);
  const std::size_t layers = layer_count(like);
  if (packed.size() != stride * layers) throw ShapeError("packed parameter count does not match network");
  const std::size_t n = like.output_dim();
  const std::size_t cols = x.value().is_matrix() ? x.value().cols() : 1;
  const Tensor::Shape state_shape = x.value().is_matrix() ? Tensor::Shape{n, cols} : Tensor::Shape{n};

  struct LayerVars {
    ad::Var W1, W2, lambda, mu;
  };
  std::vector<LayerVars> vars(layers);
  for (std::size_t i = 0; i < layers; ++i) {
    std::size_t at = i * stride;
    if (mode == TrainMode::full) {
      vars[i].W1 = packed[at++];
      vars[i].W2 = packed[at++];
    } else if (like.kind == UnfoldedKind::lista) {
      vars[i].W1 = tape.constant(like.layers.at(i).W1);
      vars[i].W2 = tape.constant(like.layers.at(i).W2);
    }
    vars[i].lambda = ad::softplus(packed[at++]);
    vars[i].mu = ad::softplus(packed[at++]);
  }

  ad::Var s = tape.constant(Tensor(state_shape));
  if (like.kind == UnfoldedKind::lista) {
    for (std::size_t k = 0; k < like.K; ++k) {
      const auto& l = vars[like.tied ? 0 : k];
      s = ad::soft_threshold(ad::matmul(l.W1, x) + ad::scale(l.mu, ad::matmul(l.W2, s)), l.lambda);
    }
    return s;
  }

  ad::Var v = s;
  ad::Var u = s;
  const bool recompute = mode == TrainMode::hyper_only;
  ad::Var gram, eye, atx;
  if (recompute) {
    const Tensor at = transpose(like.A);
    gram = tape.constant(matmul(at, like.A));
    eye = tape.constant(Tensor::identity(n));
    atx = ad::matmul(tape.constant(at), x);
  }
  for (std::size_t k = 0; k < like.K; ++k) {
    const auto& l = vars[like.tied ? 0 : k];
    if (recompute) {
      const ad::Var two_lambda = ad::scale(2.0, l.lambda);
      s = ad::spd_solve(gram + ad::scale(two_lambda, eye), atx + ad::scale(two_lambda, v - u));
    } else {
      s = ad::matmul(l.W1, x) + ad::matmul(l.W2, v - u);
    }
    // prox of (rho / (2 lambda)) ||.||_1
    const ad::Var threshold = ad::scale(0.5 * like.rho, ad::reciprocal(l.lambda));
    v = ad::soft_threshold(s + u, threshold);
    u = u + ad::scale(l.mu, s - v);
  }
  return s;
}

double unfolded_loss(const UnfoldedParams& like, const std::vector<Tensor>& packed, const Tensor& X, const Tensor& S,
                     TrainMode mode, std::vector<Tensor>* grads) {
  ad::Tape tape;
  std::vector<ad::Var> leaves;
  leaves.reserve(packed.size());
  for (const auto& t : packed) leaves.push_back(grads ? tape.leaf(t) : tape.constant(t));
  const ad::Var out = unfolded_forward(tape, like, leaves, tape.constant(X), mode);
  const double cols = X.is_matrix() ? static_cast<double>(X.cols()) : 1.0;
  const ad::Var loss = ad::scale(1.0 / cols, ad::squared_norm(out - tape.constant(S.reshaped(out.shape()))));
  if (grads) {
    const auto g = tape.backward(loss);
    grads->clear();
    for (const auto& leaf : leaves) grads->push_back(g[leaf]);
  }
  return loss.value().item();
}

UnfoldedTrainResult train_unfolded(const UnfoldedParams& init, const Dataset& data, const TrainConfig& config,
                                   TrainMode mode) {
  init.validate();
  BatchObjective objective = [&](const std::vector<Tensor>& packed, std::span<const std::size_t> batch,
                                 std::vector<Tensor>* grads) {
    return unfolded_loss(init, packed, data.input_columns(batch), data.target_columns(batch), mode, grads);
  };
  const std::vector<Tensor> start = pack_unfolded(init, mode);
  TrainResult report = train_loop(start, objective, data.train, data.validation, config);
  // an untouched network keeps its exact initial values rather than a softplus round trip
  UnfoldedParams params = report.best_epoch == 0 && config.keep_best_validation
                              ? init
                              : unpack_unfolded(init, report.params, mode);
  return {std::move(params), std::move(report)};
}

double unfolded_mse(const UnfoldedParams& params, const Dataset& data, Split split) {
  const auto& idx = data.indices(split);
  if (idx.empty()) throw std::invalid_argument("empty split");
  const Tensor out = unfolded_forward(params, data.input_columns(idx));
  return squared_norm(out - data.target_columns(idx)) / static_cast<double>(idx.size());
}

TuneResult learned_admm_tune(const SparseProblem& p, const AdmmHyper& hyper0, const Dataset& data,
                             const TrainConfig& config, std::size_t budget) {
  if (budget == 0) throw std::invalid_argument("unroll budget must be positive");
  const UnfoldedParams init = unfolded_admm_init(p, hyper0, budget, true);
  auto trained = train_unfolded(init, data, config, TrainMode::hyper_only);
  AdmmHyper tuned = hyper0;
  tuned.lambda = trained.params.layers.at(0).lambda;
  tuned.mu = trained.params.layers.at(0).mu;
  return {tuned, std::move(trained.report)};
}

double admm_unrolled_loss(const SparseProblem& p, const AdmmHyper& hyper, const Tensor& X, const Tensor& S,
                          std::size_t budget, double* d_lambda, double* d_mu) {
  const UnfoldedParams like = unfolded_admm_init(p, hyper, budget, true);
  const std::vector<Tensor> packed = pack_unfolded(like, TrainMode::hyper_only);
  std::vector<Tensor> grads;
  const bool want = d_lambda || d_mu;
  const double loss = unfolded_loss(like, packed, X, S, TrainMode::hyper_only, want ? &grads : nullptr);
  // chain rule through the softplus: d value / d raw = 1 - exp(-value)
  if (d_lambda) *d_lambda = grads[0].item() / -std::expm1(-hyper.lambda);
  if (d_mu) *d_mu = grads[1].item() / -std::expm1(-hyper.mu);
  return loss;
}

void save_unfolded(const std::filesystem::path& dir, const UnfoldedParams& params) {
  params.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["kind"] = params.kind == UnfoldedKind::lista ? "lista" : "admm";
  j["K"] = params.K;
  j["tied"] = params.tied;
  j["rho"] = params.rho;
  std::vector<double> lambdas, mus;
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    const auto& l = params.layers[i];
    lambdas.push_back(l.lambda);
    mus.push_back(l.mu);
    const std::string w1 = "layer" + std::to_string(i) + "_W1.bin";
    const std::string w2 = "layer" + std::to_string(i) + "_W2.bin";
    write_tensor(dir / w1, l.W1);
    write_tensor(dir / w2, l.W2);
    files.push_back({{"W1", w1}, {"W2", w2}});
  }
  j["lambda"] = lambdas;
  j["mu"] = mus;
  j["layers"] = files;
  if (params.A.is_matrix()) {
    write_tensor(dir / "A.bin", params.A);
    j["A"] = "A.bin";
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw ConfigError("cannot write manifest in " + dir.string());
  out << j.dump(2) << '\n';
}

UnfoldedParams load_unfolded(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ConfigError("no manifest.json in " + dir.string());
  UnfoldedParams p;
  try {
    const auto j = nlohmann::json::parse(in);
    const std::string kind = j.at("kind").get<std::string>();
    if (kind != "lista" && kind != "admm") throw ConfigError("unknown unfolded kind '" + kind + "' (lista, admm)");
    p.kind = kind == "lista" ? UnfoldedKind::lista : UnfoldedKind::admm;
    p.K = j.at("K").get<std::size_t>();
    p.tied = j.at("tied").get<bool>();
    p.rho = j.value("rho", 0.0);
    const auto lambdas = j.at("lambda").get<std::vector<double>>();
    const auto mus = j.at("mu").get<std::vector<double>>();
    const auto& files = j.at("layers");
    if (lambdas.size() != files.size() || mus.size() != files.size()) {
      throw ConfigError("manifest lambda/mu/layers lengths differ");
    }
    for (std::size_t i = 0; i < files.size(); ++i) {
      p.layers.push_back({read_tensor(dir / files[i].at("W1").get<std::string>()),
                          read_tensor(dir / files[i].at("W2").get<std::string>()), lambdas[i], mus[i]});
    }
    if (j.contains("A")) p.A = read_tensor(dir / j.at("A").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("manifest in " + dir.string() + ": " + e.what());
  }
  p.validate();
  return p;
}

}  // namespace mbdl
