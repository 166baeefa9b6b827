#include "mbdl/hybrid.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "mbdl/error.hpp"
#include "mbdl/random.hpp"
#include "mbdl/tensor_io.hpp"

namespace mbdl {

namespace {

Tensor with_alpha(const Tensor& v, std::span<const double> alpha) {
  const std::size_t n = v.rows(), B = v.cols();
  Tensor in({n + 1, B});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < n; ++i) in(i, b) = v(i, b);
    in(n, b) = alpha[b];
  }
  return in;
}

void write_manifest(const std::filesystem::path& dir, const nlohmann::json& j) {
  std::ofstream out(dir / "manifest.json");
  if (!out) throw ConfigError("cannot write manifest in " + dir.string());
  out << j.dump(2) << '\n';
}

nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ConfigError("no manifest.json in " + dir.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad manifest in " + dir.string() + ": " + e.what());
  }
}

}  // namespace

Denoiser Denoiser::shrinkage() { return {}; }

Denoiser Denoiser::learned(Mlp net) {
  if (net.depth() == 0 || net.input_dim() != net.output_dim() + 1) {
    throw ShapeError("learned denoiser maps [v; alpha] (n + 1) to n");
  }
  Denoiser d;
  d.kind = DenoiserKind::learned_mlp;
  d.net = std::move(net);
  return d;
}

Denoiser Denoiser::from_function(std::function<Tensor(const Tensor&, double)> fn) {
  if (!fn) throw std::invalid_argument("external denoiser needs a callable");
  Denoiser d;
  d.kind = DenoiserKind::external;
  d.external = std::move(fn);
  return d;
}

Tensor Denoiser::denoise(const Tensor& v, double alpha) const {
  switch (kind) {
    case DenoiserKind::shrinkage: return soft_threshold(v, alpha);
    case DenoiserKind::learned_mlp: {
      if (!v.is_vector() || v.size() + 1 != net.input_dim()) {
        throw ShapeError("denoiser input " + shape_string(v.shape()) + " for width " + std::to_string(net.output_dim()));
      }
      const double a[1] = {alpha};
      return v + net.forward(with_alpha(v.as_column(), a)).reshaped(v.shape());
    }
    case DenoiserKind::external: {
      Tensor out = external(v, alpha);
      if (out.shape() != v.shape()) throw ShapeError("external denoiser changed the shape");
      return out;
    }
  }
  throw std::logic_error("unknown denoiser kind");
}

Tensor Denoiser::denoise_columns(const Tensor& v, std::span<const double> alpha) const {
  if (!v.is_matrix() || alpha.size() != v.cols()) throw ShapeError("one alpha per column expected");
  if (kind == DenoiserKind::learned_mlp) return v + net.forward(with_alpha(v, alpha));
  Tensor out(v.shape());
  for (std::size_t b = 0; b < v.cols(); ++b) {
    const Tensor col = denoise(v.column(b), alpha[b]);
    for (std::size_t i = 0; i < v.rows(); ++i) out(i, b) = col[i];
  }
  return out;
}

std::string denoiser_kind_name(DenoiserKind k) {
  switch (k) {
    case DenoiserKind::shrinkage: return "shrinkage";
    case DenoiserKind::learned_mlp: return "learned-mlp";
    case DenoiserKind::external: return "external";
  }
  return "unknown";
}

double AlphaSchedule::at(int k, double rho, double lambda) const {
  const double a0 = alpha0.value_or(rho / (2.0 * lambda));
  return kind == Kind::constant ? a0 : a0 * std::pow(decay, k);
}

SolverResult pnp_admm(const SparseProblem& p, const Tensor& x, const AdmmHyper& hyper, const Denoiser& denoiser,
                      const AlphaSchedule& schedule, const SolverOptions& opts) {
  const Tensor a = p.effective_operator();
  auto objective = [&](const Tensor& r) { return 0.5 * squared_norm(x - matmul(a, r)); };
  return admm_with(
      p, x, hyper,
      [&](const Tensor& w, int k) { return denoiser.denoise(w, schedule.at(k, p.rho, hyper.lambda)); }, objective,
      opts);
}

Denoiser initial_denoiser(std::size_t n, const DenoiserTraining& setup) {
  Rng rng = Rng(setup.seed).split(0xde);
  std::vector<std::size_t> widths{n + 1};
  widths.insert(widths.end(), setup.hidden.begin(), setup.hidden.end());
  widths.push_back(n);
  return Denoiser::learned(Mlp::create(widths, Activation::relu, rng, 0.01));
}

DenoiserFit train_denoiser(const Tensor& clean, const DenoiserTraining& setup, const TrainConfig& config) {
  if (!clean.is_matrix() || clean.rows() == 0) throw ShapeError("clean signals must be a non-empty [N x n] matrix");
  if (!(setup.sigma_min >= 0.0) || setup.sigma_max < setup.sigma_min || setup.copies == 0) {
    throw std::invalid_argument("noise range must satisfy 0 <= sigma_min <= sigma_max, copies >= 1");
  }
  const std::size_t N = clean.rows(), n = clean.cols(), M = N * setup.copies;
  Dataset d;
  d.inputs = Tensor({M, n + 1});
  d.targets = Tensor({M, n});
  const Rng base = Rng(setup.seed).split(0x401);
  for (std::size_t i = 0; i < M; ++i) {
    Rng r = base.split(i);
    const double sigma = r.uniform(setup.sigma_min, setup.sigma_max);
    const std::size_t src = i % N;
    for (std::size_t j = 0; j < n; ++j) {
      d.targets(i, j) = clean(src, j);
      d.inputs(i, j) = clean(src, j) + sigma * r.normal();
    }
    d.inputs(i, n) = sigma;
  }
  assign_splits(d, setup.seed, 0.85, 0.15);
  const Denoiser init = initial_denoiser(n, setup);
  BatchObjective objective = [&](const std::vector<Tensor>& packed, std::span<const std::size_t> batch,
                                 std::vector<Tensor>* grads) {
    const Tensor in = d.input_columns(batch);
    Tensor noisy({n, batch.size()});
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t b = 0; b < batch.size(); ++b) noisy(j, b) = in(j, b);
    ad::Tape tape;
    std::vector<ad::Var> w;
    for (const Tensor& p : packed) w.push_back(grads ? tape.leaf(p) : tape.constant(p));
    const ad::Var out = tape.constant(noisy) + mlp_forward(init.net, w, tape.constant(in));
    const ad::Var loss =
        ad::scale(1.0 / static_cast<double>(batch.size()), ad::squared_norm(out - tape.constant(d.target_columns(batch))));
    if (grads) {
      const auto g = tape.backward(loss);
      grads->clear();
      for (const ad::Var& v : w) grads->push_back(g[v]);
    }
    return loss.value().item();
  };
  TrainResult report = train_loop(init.net.pack(), objective, d.train, d.validation, config);
  Denoiser out = Denoiser::learned(Mlp::unpack(init.net, report.params));
  return {std::move(out), std::move(report)};
}

double psnr(const Tensor& clean, const Tensor& estimate) {
  if (clean.shape() != estimate.shape()) throw ShapeError("psnr needs equal shapes");
  const double peak = max_abs(clean);
  const double mse = squared_norm(clean - estimate) / static_cast<double>(clean.size());
  return 10.0 * std::log10(peak * peak / mse);
}

Generator Generator::linear(Tensor G) {
  if (!G.is_matrix()) throw ShapeError("linear generator needs an [n x d] matrix");
  Generator g;
  g.G = std::move(G);
  return g;
}

Generator Generator::decoder(Mlp net) {
  Generator g;
  g.kind = GeneratorKind::mlp;
  g.net = std::move(net);
  return g;
}

std::size_t Generator::latent_dim() const { return kind == GeneratorKind::linear ? G.cols() : net.input_dim(); }
std::size_t Generator::output_dim() const { return kind == GeneratorKind::linear ? G.rows() : net.output_dim(); }

Tensor Generator::generate(const Tensor& z) const {
  if (z.rows() != latent_dim()) throw ShapeError("latent " + shape_string(z.shape()) + " for d=" + std::to_string(latent_dim()));
  return kind == GeneratorKind::linear ? matmul(G, z) : net.forward(z);
}

ad::Var Generator::generate(ad::Tape& tape, const ad::Var& z) const {
  if (kind == GeneratorKind::linear) return ad::matmul(tape.constant(G), z);
  std::vector<ad::Var> w;
  for (const Tensor& p : net.pack()) w.push_back(tape.constant(p));
  const ad::Var zc = z.value().is_vector() ? ad::reshape(z, {z.value().size(), 1}) : z;
  const ad::Var out = mlp_forward(net, w, zc);
  return z.value().is_vector() ? ad::reshape(out, {output_dim()}) : out;
}

Tensor gen_manifold_signals(std::size_t n, std::size_t latent, std::size_t count, std::uint64_t seed) {
  if (n == 0 || latent == 0) throw std::invalid_argument("manifold signals need n, d >= 1");
  const Rng base(seed);
  Rng wr = base.split(1);
  const std::size_t h = 2 * latent;
  const Tensor A1 = wr.normal_tensor({h, latent}, 1.0 / std::sqrt(static_cast<double>(latent)));
  const Tensor A2 = wr.normal_tensor({n, h}, 1.0 / std::sqrt(static_cast<double>(h)));
  Tensor out({count, n});
  for (std::size_t i = 0; i < count; ++i) {
    Rng r = base.split(2).split(i);
    Tensor u = matmul(A1, r.normal_tensor({latent}));
    for (double& e : u.data()) e = std::tanh(e);
    const Tensor s = matmul(A2, u);
    for (std::size_t j = 0; j < n; ++j) out(i, j) = s[j];
  }
  return out;
}

GeneratorFit train_generator(const Tensor& signals, std::size_t latent, std::size_t hidden, const TrainConfig& config) {
  if (!signals.is_matrix() || signals.rows() == 0) throw ShapeError("signals must be a non-empty [N x n] matrix");
  const std::size_t n = signals.cols();
  Rng rng = Rng(config.seed).split(0x9e);
  const Mlp enc = Mlp::create({n, hidden, latent}, Activation::tanh, rng);
  const Mlp dec = Mlp::create({latent, hidden, n}, Activation::tanh, rng);
  Dataset d;
  d.inputs = signals;
  d.targets = signals;
  assign_splits(d, config.seed, 0.85, 0.15);
  std::vector<Tensor> init = enc.pack();
  for (const Tensor& t : dec.pack()) init.push_back(t);
  const std::size_t ne = enc.packed_count();
  BatchObjective objective = [&](const std::vector<Tensor>& packed, std::span<const std::size_t> batch,
                                 std::vector<Tensor>* grads) {
    ad::Tape tape;
    std::vector<ad::Var> w;
    for (const Tensor& p : packed) w.push_back(grads ? tape.leaf(p) : tape.constant(p));
    const std::span<const ad::Var> all(w);
    const ad::Var s = tape.constant(d.input_columns(batch));
    const ad::Var rec = mlp_forward(dec, all.subspan(ne), mlp_forward(enc, all.subspan(0, ne), s));
    const ad::Var loss = ad::scale(1.0 / static_cast<double>(batch.size()), ad::squared_norm(rec - s));
    if (grads) {
      const auto g = tape.backward(loss);
      grads->clear();
      for (const ad::Var& v : w) grads->push_back(g[v]);
    }
    return loss.value().item();
  };
  TrainResult report = train_loop(init, objective, d.train, d.validation, config);
  const std::span<const Tensor> fitted(report.params);
  GeneratorFit out{Generator::decoder(Mlp::unpack(dec, fitted.subspan(ne))), Mlp::unpack(enc, fitted.subspan(0, ne)),
                   std::move(report)};
  return out;
}

double deep_prior_objective(const Generator& g, const Tensor& H, const Tensor& x, double lambda, const Tensor& z,
                            Tensor* grad) {
  ad::Tape tape;
  const ad::Var zv = grad ? tape.leaf(z) : tape.constant(z);
  const ad::Var r = tape.constant(x) - ad::matmul(tape.constant(H), g.generate(tape, zv));
  const ad::Var J = ad::scale(0.5, ad::squared_norm(r)) + ad::scale(lambda, ad::squared_norm(zv));
  if (grad) *grad = tape.backward(J)[zv];
  return J.value().item();
}

namespace {

InversionResult descend(const Generator& g, const Tensor& H, const Tensor& x, double lambda, Tensor z,
                        const InversionOptions& opts) {
  InversionResult res;
  const auto start = std::chrono::steady_clock::now();
  const auto record = [&](double f, const Tensor& grad) {
    res.trace.push_back(f);
    res.grad_norm.push_back(norm(grad));
    res.wall_ns.push_back(
        std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - start).count());
  };
  Tensor grad;
  double f = deep_prior_objective(g, H, x, lambda, z, &grad);
  if (!std::isfinite(f)) throw NumericalError("deep-prior objective is not finite at the start");
  record(f, grad);
  double step = opts.initial_step;
  int k = 0;
  for (; k < opts.max_steps; ++k) {
    const double g2 = squared_norm(grad);
    if (std::sqrt(g2) <= opts.grad_tol) break;
    bool accepted = false;
    while (step > 1e-30) {
      const Tensor trial = axpy(z, -step, grad);
      const double ft = deep_prior_objective(g, H, x, lambda, trial);
      if (std::isnan(ft)) throw NumericalError("deep-prior objective became NaN");
      if (ft <= f - opts.armijo * step * g2) {
        z = trial;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    f = deep_prior_objective(g, H, x, lambda, z, &grad);
    record(f, grad);
    step *= 2.0;
  }
  res.steps = k;
  res.objective = f;
  res.signal = g.generate(z);
  res.z = std::move(z);
  return res;
}

}  // namespace

InversionResult deep_prior_invert(const Generator& g, const Tensor& H, const Tensor& x, double lambda,
                                  const InversionOptions& opts) {
  if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be non-negative");
  if (!H.is_matrix() || H.cols() != g.output_dim() || x.shape() != Tensor::Shape{H.rows()}) {
    throw ShapeError("H " + shape_string(H.shape()) + ", x " + shape_string(x.shape()) + " for generator output " +
                     std::to_string(g.output_dim()));
  }
  const std::size_t d = g.latent_dim();
  std::vector<InversionResult> runs(static_cast<std::size_t>(opts.restarts) + 1);
  parallel_for(runs.size(), [&](std::size_t r) {
    Tensor z0({d});
    if (r > 0) z0 = Rng(opts.seed).split(r).normal_tensor({d});
    runs[r] = descend(g, H, x, lambda, z0, opts);
  });
  std::size_t best = 0;
  for (std::size_t r = 1; r < runs.size(); ++r)
    if (runs[r].objective < runs[best].objective) best = r;
  return std::move(runs[best]);
}

void save_denoiser(const std::filesystem::path& dir, const Denoiser& d) {
  if (d.kind == DenoiserKind::external) throw ConfigError("external denoisers cannot be saved");
  std::filesystem::create_directories(dir);
  nlohmann::json j{{"kind", denoiser_kind_name(d.kind)}};
  if (d.kind == DenoiserKind::learned_mlp) {
    save_mlp_tensors(dir, "net", d.net);
    j["depth"] = d.net.depth();
    j["activation"] = activation_name(d.net.activation);
  }
  write_manifest(dir, j);
}

Denoiser load_denoiser(const std::filesystem::path& dir) {
  const auto j = read_manifest(dir);
  try {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "shrinkage") return Denoiser::shrinkage();
    if (kind == "learned-mlp") {
      return Denoiser::learned(load_mlp_tensors(dir, "net", j.at("depth").get<std::size_t>(),
                                                parse_activation(j.at("activation").get<std::string>())));
    }
    throw ConfigError("unknown denoiser kind '" + kind + "' (shrinkage, learned-mlp)");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad denoiser manifest: " + std::string(e.what()));
  }
}

void save_generator(const std::filesystem::path& dir, const Generator& g) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  if (g.kind == GeneratorKind::linear) {
    write_tensor(dir / "G.bin", g.G);
    j = {{"kind", "linear-generator"}, {"G", "G.bin"}};
  } else {
    save_mlp_tensors(dir, "net", g.net);
    j = {{"kind", "mlp-generator"}, {"depth", g.net.depth()}, {"activation", activation_name(g.net.activation)}};
  }
  write_manifest(dir, j);
}

Generator load_generator(const std::filesystem::path& dir) {
  const auto j = read_manifest(dir);
  try {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "linear-generator") return Generator::linear(read_tensor(dir / j.at("G").get<std::string>()));
    if (kind == "mlp-generator") {
      return Generator::decoder(load_mlp_tensors(dir, "net", j.at("depth").get<std::size_t>(),
                                                 parse_activation(j.at("activation").get<std::string>())));
    }
    throw ConfigError("unknown generator kind '" + kind + "' (linear-generator, mlp-generator)");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad generator manifest: " + std::string(e.what()));
  }
}

}  // namespace mbdl
