#include "mbdl/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "mbdl/error.hpp"
#include "mbdl/hybrid.hpp"
#include "mbdl/kalmannet.hpp"
#include "mbdl/random.hpp"
#include "mbdl/tensor_io.hpp"
#include "mbdl/unfolded.hpp"

namespace mbdl {
namespace {

namespace fs = std::filesystem;

const std::vector<std::pair<std::string, std::vector<std::string>>>& task_table() {
  static const std::vector<std::pair<std::string, std::vector<std::string>>> table{
      {"sparse", {"ista", "fista", "admm", "lista", "unfolded-admm", "learned-admm", "pnp-admm"}},
      {"linear-gaussian", {"kf", "kalmannet", "fit-covariances", "lqg", "mpc"}},
      {"lorenz", {"ekf", "kf", "kalmannet"}},
      {"deep-prior", {"deep-prior", "least-squares"}},
  };
  return table;
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& s : items) out += (out.empty() ? "" : ", ") + s;
  return out;
}

const std::vector<std::string> kTopLevel{"schema_version", "task", "method", "seed", "dataset", "solver",
                                         "train", "quick", "problem", "input", "artifacts", "methods", "name"};

// Sections are flat objects; a null default accepts a number.
Json train_defaults() {
  return {{"learning_rate", 1e-2}, {"schedule", "constant"}, {"decay_factor", 0.5}, {"decay_every", 50},
          {"batch_size", 32},      {"epochs", 100},          {"momentum", 0.0},     {"clip_norm", nullptr},
          {"optimizer", "sgd"},    {"keep_best_validation", true}};
}

bool trainable(const std::string& task, const std::string& method) {
  static const std::set<std::string> sparse{"lista", "unfolded-admm", "learned-admm", "pnp-admm"};
  if (task == "sparse") return sparse.contains(method);
  if (task == "deep-prior") return method == "deep-prior";
  return method == "kalmannet" || method == "fit-covariances";
}

Json dataset_defaults(const std::string& task) {
  if (task == "sparse") return {{"m", 32}, {"n", 64}, {"sparsity", 5}, {"sigma", 0.05}, {"count", 1000}};
  if (task == "linear-gaussian") return {{"model", "tracking"}, {"T", 100}, {"count", 600}};
  if (task == "lorenz") {
    return {{"T", 200},       {"count", 200},       {"test_T", 3000},         {"test_count", 5},
            {"dt", 0.02},     {"J", 5},             {"truth_substeps", 20},   {"process_var", 1e-2},
            {"obs_var", 1e-1}};
  }
  return {{"n", 32}, {"latent", 4}, {"m", 16}, {"count", 2000}, {"sigma", 0.05}, {"test_signals", 20}};
}

Json solver_defaults(const std::string& task, const std::string& method) {
  if (task == "sparse") {
    Json s{{"rho", 0.1}};
    if (method == "ista" || method == "fista") s.update({{"iterations", 50}, {"mu", nullptr}});
    if (method == "admm") s.update({{"lambda", 1.0}, {"mu", 1.0}, {"iterations", 500}, {"tol", 1e-8}});
    if (method == "lista") s.update({{"K", 10}, {"tied", false}, {"mu", nullptr}});
    if (method == "unfolded-admm") {
      s.update({{"K", 10}, {"tied", false}, {"lambda", 1.0}, {"mu", 1.0}, {"mode", "full"}});
    }
    if (method == "learned-admm") s.update({{"lambda", 10.0}, {"mu", 0.01}, {"budget", 100}});
    if (method == "pnp-admm") {
      s.update({{"lambda", 0.3},       {"mu", 1.0},          {"alpha", 0.1},         {"alpha_schedule", "constant"},
                {"alpha_decay", 0.97}, {"iterations", 300},  {"tol", 1e-8},          {"hidden", Json::array({128, 128})},
                {"sigma_min", 0.0},    {"sigma_max", 0.15},  {"clean_count", 20000}});
    }
    return s;
  }
  if (method == "kalmannet") return {{"hidden", 32}, {"window", 50}};
  if (method == "fit-covariances") return {{"init_scale", 10.0}};
  if (method == "lqg") return {{"horizon", 0}};
  if (method == "mpc") return {{"horizon", 20}};
  if (method == "deep-prior") return {{"lambda", 1e-3}, {"hidden", 64}, {"max_steps", 300}, {"restarts", 0}};
  return Json::object();
}

Json method_train_overrides(const std::string& task, const std::string& method) {
  if (method == "lista" || method == "unfolded-admm") {
    return {{"learning_rate", 1e-3}, {"momentum", 0.9}, {"epochs", 50}};
  }
  if (method == "learned-admm") return {{"learning_rate", 0.1}, {"momentum", 0.9}, {"epochs", 10}, {"batch_size", 100}};
  if (method == "pnp-admm") {
    return {{"learning_rate", 3e-3}, {"optimizer", "adam"}, {"schedule", "step-decay"},
            {"decay_every", 20},     {"epochs", 60},        {"batch_size", 128}};
  }
  if (method == "kalmannet") {
    return {{"learning_rate", 1e-3}, {"optimizer", "adam"}, {"clip_norm", 1.0},
            {"epochs", task == "lorenz" ? 40 : 30}, {"batch_size", task == "lorenz" ? 16 : 32}};
  }
  if (method == "fit-covariances") {
    return {{"learning_rate", 0.05}, {"optimizer", "adam"}, {"epochs", 30}, {"batch_size", 30}};
  }
  if (method == "deep-prior") return {{"learning_rate", 3e-3}, {"optimizer", "adam"}, {"epochs", 30}, {"batch_size", 64}};
  return Json::object();
}

bool same_kind(const Json& def, const Json& val) {
  if (def.is_null()) return val.is_null() || val.is_number();
  if (def.is_number()) return val.is_number();
  return def.type() == val.type();
}

std::string kind_name(const Json& def) {
  if (def.is_null()) return "number or null";
  if (def.is_number()) return "number";
  return def.type_name();
}

Json merge_section(const std::string& section, Json defaults, const Json& user) {
  if (user.is_null()) return defaults;
  if (!user.is_object()) throw ConfigError("'" + section + "' must be an object");
  for (const auto& [key, val] : user.items()) {
    if (!defaults.contains(key)) {
      std::vector<std::string> keys;
      for (const auto& [k, _] : defaults.items()) keys.push_back(k);
      throw ConfigError("unknown key '" + section + "." + key + "' (valid: " + join(keys) + ")");
    }
    if (!same_kind(defaults[key], val)) {
      throw ConfigError("'" + section + "." + key + "' must be a " + kind_name(defaults[key]));
    }
    defaults[key] = val;
  }
  return defaults;
}

void shrink(Json& j, const char* key, double cap) {
  if (j.contains(key) && j[key].is_number() && j[key].get<double>() > cap) j[key] = cap;
}

void apply_quick(Json& c) {
  const std::string task = c["task"];
  Json& d = c["dataset"];
  if (task == "sparse") {
    shrink(d, "count", 300);
    shrink(c["solver"], "clean_count", 2000);
  } else if (task == "linear-gaussian") {
    shrink(d, "count", 120);
    shrink(d, "T", 50);
  } else if (task == "lorenz") {
    shrink(d, "count", 40);
    shrink(d, "T", 100);
    shrink(d, "test_T", 500);
    shrink(d, "test_count", 2);
  } else {
    shrink(d, "count", 400);
    shrink(d, "test_signals", 5);
    shrink(c["solver"], "max_steps", 100);
  }
  if (c.contains("train")) shrink(c["train"], "epochs", 3);
}

std::size_t get_size(const Json& section, const char* key) {
  const double v = section.at(key).get<double>();
  if (!(v >= 0.0) || v != std::floor(v)) {
    throw ConfigError(std::string("'") + key + "' must be a non-negative integer");
  }
  return static_cast<std::size_t>(v);
}

double get_double(const Json& section, const char* key) { return section.at(key).get<double>(); }

std::uint64_t get_seed(const Json& c) { return c.at("seed").get<std::uint64_t>(); }

// --- output helpers ---

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void add(const std::vector<double>& values) {
    std::vector<std::string> r;
    for (double v : values) r.push_back(format_double(v));
    rows.push_back(std::move(r));
  }
  std::string str() const {
    std::string out;
    const auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + csv_field(cells[i]);
      out += "\r\n";
    };
    line(header);
    for (const auto& r : rows) line(r);
    return out;
  }
  void write(const fs::path& path) const { write_text(path, str()); }
};

Csv trace_csv(const std::vector<EpochRecord>& trace) {
  Csv csv{{"epoch", "train_loss", "validation_loss", "learning_rate"}, {}};
  for (const auto& r : trace) csv.add({static_cast<double>(r.epoch), r.train_loss, r.validation_loss, r.learning_rate});
  return csv;
}

Json training_json(const TrainResult& r) {
  return {{"epochs_run", r.trace.empty() ? 0 : r.trace.back().epoch},
          {"best_epoch", r.best_epoch},
          {"diverged", r.diverged},
          {"message", r.message},
          {"initial_validation_loss", r.trace.empty() ? 0.0 : r.trace.front().validation_loss}};
}

double finite_or_throw(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericalError(std::string(what) + " is not finite");
  return v;
}

Json mse_json(double mse) {
  finite_or_throw(mse, "test MSE");
  return {{"test_mse", mse}, {"test_mse_db", to_db(mse)}};
}

std::vector<int> checkpoints(int total) {
  std::vector<int> out;
  for (int k = 1; k <= std::min(10, total); ++k) out.push_back(k);
  int k = 10;
  while (k < total) {
    k = std::min(total, static_cast<int>(std::ceil(k * 1.25)));
    out.push_back(k);
  }
  return out;
}

// Mean per-sample squared error of rule over idx, samples evaluated in parallel.
double mean_error(const Dataset& d, std::span<const std::size_t> idx, const Rule& rule) {
  if (idx.empty()) throw ConfigError("evaluation split is empty");
  std::vector<double> err(idx.size());
  parallel_for(idx.size(), [&](std::size_t i) { err[i] = squared_norm(rule(d.input(idx[i])) - d.target(idx[i])); });
  double total = 0.0;
  for (double e : err) total += e;
  return total / static_cast<double>(idx.size());
}

struct Outcome {
  Json metrics = Json::object();
  std::optional<TrainResult> report;
  Csv curve;
};

// --- sparse ---

UnfoldedParams truncate(const UnfoldedParams& p, std::size_t k) {
  UnfoldedParams out = p;
  out.K = k;
  if (!out.tied) out.layers.resize(k);
  return out;
}

double unfolded_error(const UnfoldedParams& params, const Dataset& d, std::span<const std::size_t> idx) {
  const Tensor out = unfolded_forward(params, d.input_columns(idx));
  return squared_norm(out - d.target_columns(idx)) / static_cast<double>(idx.size());
}

AdmmHyper hyper_from(const Json& s, const char* iter_key) {
  AdmmHyper h;
  h.lambda = get_double(s, "lambda");
  h.mu = get_double(s, "mu");
  if (iter_key) h.max_iter = static_cast<int>(get_size(s, iter_key));
  if (s.contains("tol")) h.tol = get_double(s, "tol");
  h.validate();
  return h;
}

AlphaSchedule alpha_from(const Json& s) {
  AlphaSchedule a;
  const std::string kind = s.at("alpha_schedule");
  if (kind == "constant") a.kind = AlphaSchedule::Kind::constant;
  else if (kind == "geometric") a.kind = AlphaSchedule::Kind::geometric;
  else throw ConfigError("unknown alpha_schedule '" + kind + "' (constant, geometric)");
  a.alpha0 = get_double(s, "alpha");
  a.decay = get_double(s, "alpha_decay");
  return a;
}

Dataset sparse_data(const Json& c) {
  const Json& d = c["dataset"];
  const std::size_t m = get_size(d, "m"), n = get_size(d, "n"), k = get_size(d, "sparsity");
  if (k > n) throw ConfigError("dataset.sparsity exceeds dataset.n");
  return gen_sparse_dataset(m, n, k, get_double(d, "sigma"), get_size(d, "count"), get_seed(c));
}

SparseProblem sparse_problem(const Json& c, const Tensor& H) {
  const double sigma = get_double(c["dataset"], "sigma");
  return SparseProblem{H, std::nullopt, get_double(c["solver"], "rho"), sigma * sigma};
}

UnfoldedParams unfolded_init(const Json& c, const SparseProblem& p) {
  const Json& s = c["solver"];
  const std::size_t K = get_size(s, "K");
  if (K == 0) throw ConfigError("solver.K must be positive");
  if (c["method"] == "lista") {
    const double mu = s["mu"].is_null() ? default_step(p) : get_double(s, "mu");
    return lista_init(p, mu, K, s["tied"].get<bool>());
  }
  AdmmHyper h;
  h.lambda = get_double(s, "lambda");
  h.mu = get_double(s, "mu");
  return unfolded_admm_init(p, h, K, s["tied"].get<bool>());
}

TrainMode train_mode(const Json& s) {
  if (!s.contains("mode")) return TrainMode::full;
  const std::string mode = s["mode"];
  if (mode == "full") return TrainMode::full;
  if (mode == "hyper-only") return TrainMode::hyper_only;
  throw ConfigError("unknown solver.mode '" + mode + "' (full, hyper-only)");
}

Denoiser pnp_denoiser(const Json& c, const Tensor& H, const fs::path& load, const fs::path& artifacts,
                      std::optional<TrainResult>& report) {
  if (!load.empty()) return load_denoiser(load / "denoiser");
  const Json& s = c["solver"];
  DenoiserTraining setup;
  setup.hidden.clear();
  for (const auto& w : s["hidden"]) setup.hidden.push_back(w.get<std::size_t>());
  setup.sigma_min = get_double(s, "sigma_min");
  setup.sigma_max = get_double(s, "sigma_max");
  setup.copies = 1;
  setup.seed = get_seed(c);
  const Tensor clean =
      gen_sparse_dataset(H, get_size(c["dataset"], "sparsity"), 0.0, get_size(s, "clean_count"), get_seed(c) + 1)
          .targets;
  auto fit = train_denoiser(clean, setup, train_config_from_json(c["train"]));
  report = fit.report;
  save_denoiser(artifacts / "denoiser", fit.denoiser);
  return fit.denoiser;
}

Outcome run_sparse(const Json& c, const fs::path& artifacts, const fs::path& load) {
  const std::string method = c["method"];
  const Json& s = c["solver"];
  const Dataset ds = sparse_data(c);
  const SparseProblem p = sparse_problem(c, *ds.H);
  save_problem(artifacts / "problem.json", p);
  Outcome out;
  out.curve.header = {"step", "mse", "mse_db"};
  const auto& test = ds.test;

  if (method == "lista" || method == "unfolded-admm") {
    const UnfoldedParams init = unfolded_init(c, p);
    UnfoldedParams params = init;
    if (!load.empty()) {
      params = load_unfolded(load / "unfolded");
    } else {
      auto fit = train_unfolded(init, ds, train_config_from_json(c["train"]), train_mode(s));
      params = std::move(fit.params);
      out.report = std::move(fit.report);
    }
    save_unfolded(artifacts / "unfolded", params);
    for (std::size_t k = 1; k <= params.K; ++k) {
      const double e = unfolded_error(truncate(params, k), ds, test);
      out.curve.add({static_cast<double>(k), e, to_db(e)});
    }
    out.metrics = mse_json(unfolded_error(params, ds, test));
    out.metrics["validation_mse"] = unfolded_error(params, ds, ds.validation);
    out.metrics["initial_test_mse"] = unfolded_error(init, ds, test);
    return out;
  }

  std::function<Tensor(const Tensor&, int)> solve;
  int full = 0;
  if (method == "ista" || method == "fista") {
    const double mu = s["mu"].is_null() ? default_step(p) : get_double(s, "mu");
    full = static_cast<int>(get_size(s, "iterations"));
    const bool fast = method == "fista";
    solve = [&p, mu, fast](const Tensor& x, int k) { return (fast ? fista : ista)(p, x, mu, k, {}).signal; };
  } else if (method == "admm") {
    const AdmmHyper h = hyper_from(s, "iterations");
    full = h.max_iter;
    solve = [&p, h, full](const Tensor& x, int k) {
      AdmmHyper hk = h;
      hk.max_iter = k;
      if (k < full) hk.tol = 0.0;
      return admm(p, x, hk).signal;
    };
  } else if (method == "learned-admm") {
    const AdmmHyper h0 = hyper_from(s, nullptr);
    const std::size_t budget = get_size(s, "budget");
    AdmmHyper h = h0;
    if (!load.empty()) {
      std::ifstream in(load / "hyper.json");
      if (!in) throw ConfigError("missing " + (load / "hyper.json").string());
      const Json j = Json::parse(in);
      h.lambda = j.at("lambda").get<double>();
      h.mu = j.at("mu").get<double>();
    } else {
      auto tuned = learned_admm_tune(p, h0, ds, train_config_from_json(c["train"]), budget);
      h.lambda = tuned.hyper.lambda;
      h.mu = tuned.hyper.mu;
      out.report = std::move(tuned.report);
    }
    write_text(artifacts / "hyper.json", Json{{"lambda", h.lambda}, {"mu", h.mu}}.dump(2) + "\n");
    out.metrics["lambda"] = h.lambda;
    out.metrics["mu"] = h.mu;
    full = static_cast<int>(budget);
    solve = [&p, h](const Tensor& x, int k) {
      AdmmHyper hk = h;
      hk.max_iter = k;
      hk.tol = 0.0;
      return admm(p, x, hk).signal;
    };
  } else if (method == "pnp-admm") {
    const AdmmHyper h = hyper_from(s, "iterations");
    const AlphaSchedule sched = alpha_from(s);
    auto den = std::make_shared<Denoiser>(pnp_denoiser(c, p.H, load, artifacts, out.report));
    full = h.max_iter;
    solve = [&p, h, sched, den, full](const Tensor& x, int k) {
      AdmmHyper hk = h;
      hk.max_iter = k;
      if (k < full) hk.tol = 0.0;
      return pnp_admm(p, x, hk, *den, sched).signal;
    };
  } else {
    throw ConfigError("unknown sparse method '" + method + "' (" + join(experiment_methods("sparse")) + ")");
  }
  if (full <= 0) throw ConfigError("iteration count must be positive");
  for (int k : checkpoints(full)) {
    const double e = mean_error(ds, test, [&](const Tensor& x) { return solve(x, k); });
    out.curve.add({static_cast<double>(k), e, to_db(e)});
  }
  const Json extra = out.metrics;
  out.metrics = mse_json(mean_error(ds, test, [&](const Tensor& x) { return solve(x, full); }));
  out.metrics.update(extra);
  if (out.report) {
    out.metrics["validation_mse"] = mean_error(ds, ds.validation, [&](const Tensor& x) { return solve(x, full); });
  }
  return out;
}

// --- state space ---

Tensor tensor_from_json(const Json& j, const std::string& what) {
  try {
    if (j.is_number()) return Tensor::matrix(1, 1, {j.get<double>()});
    if (j.is_array() && !j.empty() && j[0].is_array()) {
      const std::size_t r = j.size(), cols = j[0].size();
      std::vector<double> v;
      for (const auto& row : j) {
        if (row.size() != cols) throw ConfigError("ragged matrix '" + what + "'");
        for (const auto& x : row) v.push_back(x.get<double>());
      }
      return Tensor::matrix(r, cols, std::move(v));
    }
    return Tensor::vector(j.get<std::vector<double>>());
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("'" + what + "' must be a number, a list or a list of rows");
  }
}

StateSpaceModel model_from(const Json& spec) {
  if (spec.is_string()) return model_preset(spec.get<std::string>());
  if (!spec.is_object()) throw ConfigError("dataset.model must be a preset name or an object of matrices");
  StateSpaceModel m;
  const std::vector<std::pair<const char*, Tensor*>> fields{{"A", &m.A}, {"B", &m.B}, {"C", &m.C}, {"Q", &m.Q},
                                                            {"R", &m.R}, {"V", &m.V}, {"W", &m.W}, {"z0", &m.z0},
                                                            {"P0", &m.P0}};
  for (const auto& [key, dst] : fields) {
    if (!spec.contains(key)) throw ConfigError(std::string("dataset.model is missing '") + key + "'");
    *dst = tensor_from_json(spec[key], std::string("dataset.model.") + key);
  }
  if (m.z0.is_matrix()) m.z0 = m.z0.reshaped({m.z0.size()});
  try {
    m.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("dataset.model: ") + e.what());
  }
  return m;
}

struct Estimates {
  std::vector<Tensor> Z;       // truth [T x n] per trajectory
  std::vector<Tensor> Z_hat;   // estimates
  std::vector<Tensor> S;       // actions [T x p]
};

void add_time_curve(Outcome& out, const Estimates& e, const StateSpaceModel* cost_model) {
  out.curve.header = {"step", "mse", "mse_db"};
  if (cost_model) out.curve.header.push_back("cost");
  const std::size_t T = e.Z.front().rows(), n = e.Z.front().cols();
  double total = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    double err = 0.0, cost = 0.0;
    for (std::size_t i = 0; i < e.Z.size(); ++i) {
      const Tensor z = e.Z[i].slice(t);
      err += squared_norm(e.Z_hat[i].slice(t) - z) / static_cast<double>(n);
      if (cost_model) {
        const Tensor s = e.S[i].slice(t);
        cost += dot(z, matmul(cost_model->Q, z)) + dot(s, matmul(cost_model->R, s));
      }
    }
    err /= static_cast<double>(e.Z.size());
    total += err;
    std::vector<double> row{static_cast<double>(t + 1), err, to_db(err)};
    if (cost_model) row.push_back(cost / static_cast<double>(e.Z.size()));
    out.curve.add(row);
  }
  const Json extra = out.metrics;
  out.metrics = mse_json(total / static_cast<double>(T));
  out.metrics.update(extra);
}

Estimates estimate_all(const TrajectoryDataset& data, std::span<const std::size_t> idx,
                       const std::function<Tensor(const Trajectory&)>& filter) {
  Estimates e;
  e.Z.resize(idx.size());
  e.Z_hat.resize(idx.size());
  e.S.resize(idx.size());
  parallel_for(idx.size(), [&](std::size_t i) {
    const Trajectory tr = data.trajectory(idx[i]);
    e.Z_hat[i] = filter(tr);
    e.Z[i] = tr.Z;
    e.S[i] = tr.S;
  });
  return e;
}

Policy control_policy(const StateSpaceModel& model, const std::string& method, std::size_t horizon) {
  if (method == "lqg") return lqg_policy(model, horizon);
  if (horizon == 0) throw ConfigError("solver.horizon must be positive for mpc");
  return mpc_policy(model, horizon);
}

// Estimates for a controlled trajectory are rebuilt by refiltering the
// recorded observations and actions, which is exactly what the policy saw.
Outcome run_linear(const Json& c, const fs::path& artifacts, const fs::path& load) {
  const std::string method = c["method"];
  const Json& d = c["dataset"];
  const Json& s = c["solver"];
  const StateSpaceModel model = model_from(d["model"]);
  const std::size_t T = get_size(d, "T"), N = get_size(d, "count");
  const std::uint64_t seed = get_seed(c);
  Outcome out;

  if (method == "lqg" || method == "mpc") {
    const std::size_t horizon = get_size(s, "horizon");
    const auto data = gen_trajectory_dataset(
        model, T, N, std::function<Policy()>([&] { return control_policy(model, method, horizon); }), seed);
    const Estimates e = estimate_all(data, data.data.test, [&](const Trajectory& tr) { return kalman_filter(model, tr); });
    double cost = 0.0;
    for (std::size_t i : data.data.test) cost += quadratic_cost(model, data.trajectory(i));
    out.metrics["test_cost"] = cost / static_cast<double>(data.data.test.size());
    add_time_curve(out, e, &model);
    return out;
  }

  const auto data = gen_trajectory_dataset(model, T, N, zero_policy(model.action_dim()), seed);
  const Estimates kf = estimate_all(data, data.data.test, [&](const Trajectory& tr) { return kalman_filter(model, tr); });
  Outcome kf_out;
  add_time_curve(kf_out, kf, nullptr);
  const double kf_mse = kf_out.metrics["test_mse"];
  if (method == "kf") return kf_out;

  if (method == "kalmannet") {
    const Dynamics dyn = linear_dynamics(model);
    GainNetwork net;
    if (!load.empty()) {
      net = load_gain_network(load / "gain_network");
    } else {
      Rng rng(seed);
      net = GainNetwork::create(model.state_dim(), model.action_dim(), model.obs_dim(), get_size(s, "hidden"), rng);
      calibrate_features(net, dyn, data);
      auto fit = train_kalmannet(dyn, net, model.z0, data, train_config_from_json(c["train"]), get_size(s, "window"));
      net = std::move(fit.net);
      out.report = std::move(fit.report);
    }
    save_gain_network(artifacts / "gain_network", net);
    const Estimates e =
        estimate_all(data, data.data.test, [&](const Trajectory& tr) { return kalmannet_filter(dyn, net, model.z0, tr); });
    out.metrics["validation_mse"] = kalmannet_mse(dyn, net, model.z0, data, Split::validation);
    out.metrics["kf_test_mse_db"] = to_db(kf_mse);
    add_time_curve(out, e, nullptr);
    out.metrics["gap_db"] = out.metrics["test_mse_db"].get<double>() - to_db(kf_mse);
    return out;
  }

  if (method == "fit-covariances") {
    StateSpaceModel fitted = model;
    if (!load.empty()) {
      fitted.V = read_tensor(load / "V.bin");
      fitted.W = read_tensor(load / "W.bin");
    } else {
      StateSpaceModel init = model;
      const double k = get_double(s, "init_scale");
      if (!(k > 0.0)) throw ConfigError("solver.init_scale must be positive");
      init.V = scale(k, model.V);
      init.W = scale(k, model.W);
      auto fit = fit_covariances(init, data, train_config_from_json(c["train"]));
      fitted.V = fit.V;
      fitted.W = fit.W;
      out.report = std::move(fit.report);
    }
    write_tensor(artifacts / "V.bin", fitted.V);
    write_tensor(artifacts / "W.bin", fitted.W);
    const Estimates e =
        estimate_all(data, data.data.test, [&](const Trajectory& tr) { return kalman_filter(fitted, tr); });
    out.metrics["kf_test_mse"] = kf_mse;
    add_time_curve(out, e, nullptr);
    out.metrics["relative_gap"] = out.metrics["test_mse"].get<double>() / kf_mse - 1.0;
    return out;
  }
  throw ConfigError("unknown linear-gaussian method '" + method + "' (" + join(experiment_methods("linear-gaussian")) +
                    ")");
}

LorenzConfig lorenz_config(const Json& d, std::size_t substeps) {
  LorenzConfig lc;
  lc.dt = get_double(d, "dt");
  lc.J = static_cast<int>(get_size(d, "J"));
  lc.substeps = substeps;
  lc.process_var = get_double(d, "process_var");
  lc.obs_var = get_double(d, "obs_var");
  return lc;
}

// Random-walk Kalman filter: A = I with V the per-coordinate variance of the
// training state increments.
StateSpaceModel random_walk_model(const NonlinearModel& filter_model, const TrajectoryDataset& train) {
  const std::size_t n = filter_model.dynamics.n;
  std::vector<double> var(n, 0.0);
  std::size_t count = 0;
  for (std::size_t i : train.data.train) {
    const Tensor Z = train.data.target(i);
    for (std::size_t t = 1; t < Z.rows(); ++t, ++count)
      for (std::size_t j = 0; j < n; ++j) var[j] += std::pow(Z(t, j) - Z(t - 1, j), 2);
  }
  StateSpaceModel m;
  m.A = Tensor::identity(n);
  m.B = Tensor({n, filter_model.dynamics.p});
  m.C = filter_model.dynamics.C;
  m.Q = Tensor::identity(n);
  m.R = Tensor::identity(filter_model.dynamics.p);
  m.V = Tensor({n, n});
  for (std::size_t j = 0; j < n; ++j) m.V(j, j) = var[j] / static_cast<double>(std::max<std::size_t>(count, 1));
  m.W = filter_model.W;
  m.z0 = filter_model.z0;
  m.P0 = filter_model.P0;
  return m;
}

std::vector<std::size_t> all_indices(const TrajectoryDataset& d) {
  std::vector<std::size_t> idx(d.data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

Outcome run_lorenz(const Json& c, const fs::path& artifacts, const fs::path& load) {
  const std::string method = c["method"];
  const Json& d = c["dataset"];
  const std::uint64_t seed = get_seed(c);
  const NonlinearModel truth = lorenz_model(lorenz_config(d, get_size(d, "truth_substeps")));
  const NonlinearModel model = lorenz_model(lorenz_config(d, 1));
  const auto test = gen_trajectory_dataset(truth, get_size(d, "test_T"), get_size(d, "test_count"), seed + 1);
  const auto idx = all_indices(test);
  Outcome out;
  Estimates e;
  if (method == "ekf") {
    e = estimate_all(test, idx, [&](const Trajectory& tr) { return ekf_filter(model, tr); });
  } else if (method == "kf") {
    const auto train = gen_trajectory_dataset(truth, get_size(d, "T"), get_size(d, "count"), seed);
    const StateSpaceModel rw = random_walk_model(model, train);
    write_tensor(artifacts / "V.bin", rw.V);
    e = estimate_all(test, idx, [&](const Trajectory& tr) { return kalman_filter(rw, tr); });
  } else if (method == "kalmannet") {
    const Json& s = c["solver"];
    GainNetwork net;
    const auto train = gen_trajectory_dataset(truth, get_size(d, "T"), get_size(d, "count"), seed);
    if (!load.empty()) {
      net = load_gain_network(load / "gain_network");
    } else {
      Rng rng(seed);
      net = GainNetwork::create(3, model.dynamics.p, 3, get_size(s, "hidden"), rng);
      calibrate_features(net, model.dynamics, train);
      auto fit = train_kalmannet(model.dynamics, net, model.z0, train, train_config_from_json(c["train"]),
                                 get_size(s, "window"));
      net = std::move(fit.net);
      out.report = std::move(fit.report);
    }
    save_gain_network(artifacts / "gain_network", net);
    out.metrics["validation_mse"] = kalmannet_mse(model.dynamics, net, model.z0, train, Split::validation);
    e = estimate_all(test, idx, [&](const Trajectory& tr) { return kalmannet_filter(model.dynamics, net, model.z0, tr); });
  } else {
    throw ConfigError("unknown lorenz method '" + method + "' (" + join(experiment_methods("lorenz")) + ")");
  }
  double raw = 0.0;
  for (std::size_t i : idx) raw += state_mse(test.data.input(i), test.data.target(i));
  out.metrics["observation_mse_db"] = to_db(raw / static_cast<double>(idx.size()));
  add_time_curve(out, e, nullptr);
  return out;
}

// --- deep prior ---

struct PriorData {
  Tensor train;                 // [count x n]
  std::vector<Tensor> signals;  // held-out truth
  std::vector<Tensor> x;        // measurements
  Tensor H;
};

PriorData prior_data(const Json& c) {
  const Json& d = c["dataset"];
  const std::size_t n = get_size(d, "n"), latent = get_size(d, "latent"), m = get_size(d, "m");
  const std::size_t count = get_size(d, "count"), tests = get_size(d, "test_signals");
  if (tests == 0) throw ConfigError("dataset.test_signals must be positive");
  const std::uint64_t seed = get_seed(c);
  const Tensor all = gen_manifold_signals(n, latent, count + tests, seed);
  PriorData out;
  out.train = Tensor({count, n}, std::vector<double>(all.values().begin(),
                                                   all.values().begin() + static_cast<std::ptrdiff_t>(count * n)));
  const Rng base(seed);
  out.H = base.split(1).normal_tensor({m, n}, 1.0 / std::sqrt(static_cast<double>(m)));
  const double sigma = get_double(d, "sigma");
  for (std::size_t i = 0; i < tests; ++i) {
    out.signals.push_back(all.slice(count + i));
    Rng nr = base.split(2).split(i);
    out.x.push_back(matmul(out.H, out.signals.back()) + nr.normal_tensor({m}, sigma));
  }
  return out;
}

InversionOptions inversion_options(const Json& c) {
  const Json& s = c["solver"];
  InversionOptions io;
  io.max_steps = static_cast<int>(get_size(s, "max_steps"));
  io.restarts = static_cast<int>(get_size(s, "restarts"));
  io.seed = get_seed(c);
  return io;
}

Generator prior_generator(const Json& c, const PriorData& pd, const fs::path& load, std::optional<TrainResult>* report) {
  if (!load.empty()) return load_generator(load / "generator");
  if (!report) throw ConfigError("deep-prior needs a trained generator (set artifacts to a train run's artifacts)");
  auto fit = train_generator(pd.train, get_size(c["dataset"], "latent"), get_size(c["solver"], "hidden"),
                             train_config_from_json(c["train"]));
  *report = std::move(fit.report);
  return fit.generator;
}

Outcome run_deep_prior(const Json& c, const fs::path& artifacts, const fs::path& load) {
  const std::string method = c["method"];
  const PriorData pd = prior_data(c);
  write_tensor(artifacts / "H.bin", pd.H);
  Outcome out;
  out.curve.header = {"step", "mse", "mse_db"};
  const std::size_t count = pd.signals.size();
  const auto mean_over = [&](const std::function<Tensor(std::size_t)>& estimate) {
    std::vector<double> err(count);
    parallel_for(count, [&](std::size_t i) { err[i] = squared_norm(estimate(i) - pd.signals[i]); });
    double total = 0.0;
    for (double v : err) total += v;
    return total / static_cast<double>(count);
  };
  if (method == "least-squares") {
    const Tensor Ht = transpose(pd.H);
    const Tensor gram = matmul(pd.H, Ht);
    const double e = mean_over([&](std::size_t i) { return matmul(Ht, solve_spd(gram, pd.x[i])); });
    out.curve.add({1.0, e, to_db(e)});
    out.metrics = mse_json(e);
    return out;
  }
  if (method != "deep-prior") {
    throw ConfigError("unknown deep-prior method '" + method + "' (" + join(experiment_methods("deep-prior")) + ")");
  }
  const Generator g = prior_generator(c, pd, load, &out.report);
  save_generator(artifacts / "generator", g);
  const InversionOptions io = inversion_options(c);
  const double lambda = get_double(c["solver"], "lambda");
  for (int k : checkpoints(io.max_steps)) {
    InversionOptions ik = io;
    ik.max_steps = k;
    const double e = mean_over([&](std::size_t i) { return deep_prior_invert(g, pd.H, pd.x[i], lambda, ik).signal; });
    out.curve.add({static_cast<double>(k), e, to_db(e)});
  }
  out.metrics = mse_json(mean_over([&](std::size_t i) { return deep_prior_invert(g, pd.H, pd.x[i], lambda, io).signal; }));
  return out;
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

Trajectory pick_trajectory(const TrajectoryDataset& data, const Json& c) {
  const std::size_t k = c.contains("solver") && c["solver"].contains("sample") ? get_size(c["solver"], "sample") : 0;
  if (k >= data.data.test.size()) throw ConfigError("solver.sample is outside the test split");
  return data.trajectory(data.data.test[k]);
}

std::int64_t elapsed_ns(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - since).count();
}

void write_vector_csv(const fs::path& path, const Tensor& t) {
  Csv csv;
  if (t.is_matrix()) {
    csv.header.push_back("step");
    for (std::size_t j = 0; j < t.cols(); ++j) csv.header.push_back("z" + std::to_string(j + 1));
    for (std::size_t r = 0; r < t.rows(); ++r) {
      std::vector<double> row{static_cast<double>(r + 1)};
      for (std::size_t j = 0; j < t.cols(); ++j) row.push_back(t(r, j));
      csv.add(row);
    }
  } else {
    csv.header = {"index", "value"};
    for (std::size_t i = 0; i < t.size(); ++i) csv.add({static_cast<double>(i), t[i]});
  }
  csv.write(path);
}

fs::path artifacts_dir(const Json& c) {
  if (!c.contains("artifacts")) return {};
  const fs::path dir = c["artifacts"].get<std::string>();
  if (!fs::is_directory(dir)) throw ConfigError("artifacts directory not found: " + dir.string());
  return dir;
}

}  // namespace

std::vector<std::string> experiment_tasks() {
  std::vector<std::string> out;
  for (const auto& [task, _] : task_table()) out.push_back(task);
  return out;
}

std::vector<std::string> experiment_methods(const std::string& task) {
  for (const auto& [name, methods] : task_table())
    if (name == task) return methods;
  throw ConfigError("unknown task '" + task + "' (valid: " + join(experiment_tasks()) + ")");
}

std::string task_for_method(const std::string& method) {
  std::vector<std::string> all;
  for (const auto& [task, methods] : task_table()) {
    if (std::find(methods.begin(), methods.end(), method) != methods.end()) return task;
    for (const auto& m : methods)
      if (std::find(all.begin(), all.end(), m) == all.end()) all.push_back(m);
  }
  throw ConfigError("unknown method '" + method + "' (valid: " + join(all) + ")");
}

Json read_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  if (buf.str().find_first_not_of(" \t\r\n") == std::string::npos) {
    throw ConfigError("config " + path.string() + " is empty; expected a JSON object with schema_version " +
                      std::to_string(kConfigSchemaVersion) + ", task, method");
  }
  try {
    Json j = Json::parse(buf.str());
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    return j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

void apply_override(Json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    value = text;
  }
  Json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (!node->is_object()) throw ConfigError("override '" + key + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = Json::object();
    start = dot + 1;
  }
}

Json resolve_config(const Json& config, bool quick) {
  if (!config.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, _] : config.items()) {
    if (std::find(kTopLevel.begin(), kTopLevel.end(), key) == kTopLevel.end()) {
      throw ConfigError("unknown config key '" + key + "' (valid: " + join(kTopLevel) + ")");
    }
  }
  if (!config.contains("schema_version")) {
    throw ConfigError("config is missing schema_version (expected " + std::to_string(kConfigSchemaVersion) + ")");
  }
  if (config["schema_version"] != kConfigSchemaVersion) {
    throw ConfigError("unsupported schema_version " + config["schema_version"].dump() + " (expected " +
                      std::to_string(kConfigSchemaVersion) + ")");
  }
  if (!config.contains("method") || !config["method"].is_string()) throw ConfigError("config needs a string 'method'");
  const std::string method = config["method"];
  std::string task;
  if (config.contains("task")) {
    if (!config["task"].is_string()) throw ConfigError("'task' must be a string");
    task = config["task"];
    const auto methods = experiment_methods(task);
    if (std::find(methods.begin(), methods.end(), method) == methods.end()) {
      throw ConfigError("unknown method '" + method + "' for task " + task + " (valid: " + join(methods) + ")");
    }
  } else {
    task = task_for_method(method);
  }
  Json out = config;
  out["task"] = task;
  if (!out.contains("seed")) out["seed"] = 0;
  if (!out["seed"].is_number_integer() || out["seed"].get<std::int64_t>() < 0)
    throw ConfigError("'seed' must be a non-negative integer");
  out["seed"] = out["seed"].get<std::uint64_t>();
  out["dataset"] = merge_section("dataset", dataset_defaults(task), config.value("dataset", Json()));
  out["solver"] = merge_section("solver", solver_defaults(task, method), config.value("solver", Json()));
  if (trainable(task, method)) {
    Json td = train_defaults();
    td.update(method_train_overrides(task, method));
    td["seed"] = out["seed"];
    out["train"] = merge_section("train", td, config.value("train", Json()));
  } else {
    out.erase("train");
  }
  if (out.contains("artifacts") && !out["artifacts"].is_string()) throw ConfigError("'artifacts' must be a path string");
  if (quick || out.value("quick", false)) {
    out["quick"] = true;
    apply_quick(out);
  }
  return out;
}

std::string config_hash(const Json& resolved) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : resolved.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

TrainConfig train_config_from_json(const Json& t) {
  TrainConfig cfg;
  try {
    cfg.learning_rate = t.at("learning_rate").get<double>();
    const std::string sched = t.at("schedule");
    if (sched == "constant") cfg.schedule = Schedule::constant;
    else if (sched == "step-decay") cfg.schedule = Schedule::step_decay;
    else throw ConfigError("unknown train.schedule '" + sched + "' (constant, step-decay)");
    cfg.decay_factor = t.at("decay_factor").get<double>();
    cfg.decay_every = t.at("decay_every").get<int>();
    cfg.batch_size = t.at("batch_size").get<std::size_t>();
    cfg.epochs = t.at("epochs").get<int>();
    cfg.momentum = t.at("momentum").get<double>();
    if (!t.at("clip_norm").is_null()) cfg.clip_norm = t.at("clip_norm").get<double>();
    const std::string opt = t.at("optimizer");
    if (opt == "sgd") cfg.optimizer = OptimizerKind::sgd;
    else if (opt == "adam") cfg.optimizer = OptimizerKind::adam;
    else throw ConfigError("unknown train.optimizer '" + opt + "' (sgd, adam)");
    cfg.keep_best_validation = t.at("keep_best_validation").get<bool>();
    cfg.seed = t.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad train section: ") + e.what());
  }
  if (cfg.epochs < 0) throw ConfigError("train.epochs must be non-negative");
  return cfg;
}

StateSpaceModel model_preset(const std::string& name) {
  if (name == "tracking") {
    StateSpaceModel m;
    m.A = Tensor::matrix({{1.0, 0.1}, {0.0, 0.95}});
    m.B = Tensor::matrix({{0.0}, {0.1}});
    m.C = Tensor::matrix({{1.0, 0.0}});
    m.Q = Tensor::identity(2);
    m.R = Tensor::matrix({{0.1}});
    m.V = Tensor::matrix({{0.01, 0.0}, {0.0, 0.04}});
    m.W = Tensor::matrix({{0.25}});
    m.z0 = Tensor::vector({0.0, 0.0});
    m.P0 = Tensor::identity(2);
    return m;
  }
  if (name == "scalar") {
    StateSpaceModel m = StateSpaceModel::scalar(0.9, 1.0, 1.0, 1.0, 1.0, 0.1, 0.1);
    m.P0 = Tensor::matrix({{0.5}});
    return m;
  }
  throw ConfigError("unknown model preset '" + name + "' (tracking, scalar)");
}

std::string csv_field(const std::string& value) {
  if (value.find_first_of(",\"\r\n") == std::string::npos) return value;
  std::string out = "\"";
  for (char ch : value) out += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return out + "\"";
}

Json deterministic_metrics(const Json& metrics) {
  Json out = metrics;
  out.erase("timing");
  return out;
}

ExperimentReport run_experiment(const Json& config, const fs::path& out_root, const ExperimentOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  Json c = resolve_config(config, options.quick);
  fs::path load = options.load_artifacts;
  if (load.empty()) load = artifacts_dir(c);
  c.erase("artifacts");
  const std::string hash = config_hash(c);
  const std::string task = c["task"], method = c["method"];
  const fs::path run_dir = out_root / (task + "-" + method + "-" + hash + (load.empty() ? "" : "-eval"));
  if (!load.empty() && fs::weakly_canonical(load).string().rfind(fs::weakly_canonical(run_dir).string(), 0) == 0)
    throw ConfigError("artifacts directory lies inside the run directory it would replace");
  fs::remove_all(run_dir);
  fs::create_directories(run_dir / "artifacts");
  write_text(run_dir / "config.json", c.dump(2) + "\n");

  Outcome outcome;
  try {
    if (task == "sparse") outcome = run_sparse(c, run_dir / "artifacts", load);
    else if (task == "linear-gaussian") outcome = run_linear(c, run_dir / "artifacts", load);
    else if (task == "lorenz") outcome = run_lorenz(c, run_dir / "artifacts", load);
    else outcome = run_deep_prior(c, run_dir / "artifacts", load);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }

  Json metrics{{"schema_version", kConfigSchemaVersion},
               {"task", task},
               {"method", method},
               {"seed", c["seed"]},
               {"config_hash", hash},
               {"metrics", outcome.metrics}};
  if (outcome.report) metrics["training"] = training_json(*outcome.report);
  trace_csv(outcome.report ? outcome.report->trace : std::vector<EpochRecord>{}).write(run_dir / "train_trace.csv");
  outcome.curve.write(run_dir / "curve.csv");
  const double seconds = static_cast<double>(elapsed_ns(start)) * 1e-9;
  metrics["timing"] = {{"runtime_seconds", seconds}, {"finished_at", utc_now()}};
  write_text(run_dir / "metrics.json", metrics.dump(2) + "\n");
  return {run_dir, metrics};
}

Json solve_instance(const Json& config, const fs::path& out_dir) {
  const Json c = resolve_config(config);
  const std::string task = c["task"], method = c["method"];
  const fs::path load = artifacts_dir(c);
  fs::create_directories(out_dir);
  Csv trace{{"iter", "objective", "residual", "wall_ns"}, {}};
  Json summary{{"task", task}, {"method", method}};
  const auto add = [&](double it, double obj, double res, std::int64_t ns) {
    if (!std::isfinite(obj)) throw NumericalError("objective became non-finite at iteration " + format_double(it));
    trace.rows.push_back({format_double(it), format_double(obj), format_double(res), std::to_string(ns)});
  };

  try {
    if (task == "sparse") {
      SparseProblem p;
      Tensor x;
      std::optional<Tensor> truth;
      if (c.contains("problem")) {
        const fs::path desc = c["problem"].get<std::string>();
        if (!fs::exists(desc)) throw ConfigError("problem descriptor not found: " + desc.string());
        p = load_problem(desc);
        if (!c.contains("input")) throw ConfigError("'problem' needs an 'input' tensor path");
        const fs::path in = c["input"].get<std::string>();
        if (!fs::exists(in)) throw ConfigError("input tensor not found: " + in.string());
        x = read_tensor(in);
        if (c["solver"].contains("rho")) p.rho = get_double(c["solver"], "rho");
      } else {
        const Dataset ds = sparse_data(c);
        p = sparse_problem(c, *ds.H);
        x = ds.input(ds.test.front());
        truth = ds.target(ds.test.front());
      }
      const Json& s = c["solver"];
      SolverOptions opts;
      opts.record_trace = true;
      SolverResult res;
      if (method == "ista" || method == "fista") {
        const double mu = s["mu"].is_null() ? default_step(p) : get_double(s, "mu");
        const int iters = static_cast<int>(get_size(s, "iterations"));
        res = method == "ista" ? ista(p, x, mu, iters, opts) : fista(p, x, mu, iters, opts);
      } else if (method == "admm") {
        res = admm(p, x, hyper_from(s, "iterations"), opts);
      } else if (method == "learned-admm") {
        AdmmHyper h = hyper_from(s, nullptr);
        h.max_iter = static_cast<int>(get_size(s, "budget"));
        h.tol = 0.0;
        if (!load.empty()) {
          std::ifstream in(load / "hyper.json");
          if (!in) throw ConfigError("missing " + (load / "hyper.json").string());
          const Json j = Json::parse(in);
          h.lambda = j.at("lambda").get<double>();
          h.mu = j.at("mu").get<double>();
        }
        res = admm(p, x, h, opts);
      } else if (method == "pnp-admm") {
        const Denoiser den = load.empty() ? Denoiser::shrinkage() : load_denoiser(load / "denoiser");
        summary["denoiser"] = denoiser_kind_name(den.kind);
        res = pnp_admm(p, x, hyper_from(s, "iterations"), den, alpha_from(s), opts);
      } else {
        const UnfoldedParams params = load.empty() ? unfolded_init(c, p) : load_unfolded(load / "unfolded");
        Tensor prev({p.dim()});
        for (std::size_t k = 1; k <= params.K; ++k) {
          const auto t0 = std::chrono::steady_clock::now();
          const Tensor r = unfolded_forward(truncate(params, k), x);
          add(static_cast<double>(k), lasso_objective(p, x, r), norm(r - prev), elapsed_ns(t0));
          prev = r;
        }
        res.coefficients = prev;
        res.signal = p.synthesize(prev);
        res.iterations = static_cast<int>(params.K);
      }
      for (const auto& r : res.trace) add(r.iter, r.objective, r.residual, r.wall_ns);
      write_tensor(out_dir / "coefficients.bin", res.coefficients);
      write_tensor(out_dir / "signal.bin", res.signal);
      write_vector_csv(out_dir / "signal.csv", res.signal);
      summary["objective"] = lasso_objective(p, x, res.coefficients);
      summary["iterations"] = res.iterations;
      summary["converged"] = res.converged;
      if (truth) summary["squared_error"] = squared_norm(res.signal - *truth);
    } else if (task == "linear-gaussian" || task == "lorenz") {
      const Json& d = c["dataset"];
      Tensor estimates;
      Trajectory tr;
      const auto start = std::chrono::steady_clock::now();
      const auto trace_rows = [&](const Tensor& Zh, const Tensor& C,
                                  const std::function<Tensor(std::size_t)>& prior_obs) {
        for (std::size_t t = 0; t < Zh.rows(); ++t) {
          const Tensor innov = tr.X.slice(t) - matmul(C, prior_obs(t));
          add(static_cast<double>(t + 1), squared_norm(Zh.slice(t) - tr.Z.slice(t)), norm(innov), elapsed_ns(start));
        }
      };
      if (task == "linear-gaussian") {
        StateSpaceModel model = model_from(d["model"]);
        if (method == "lqg" || method == "mpc") {
          const Policy policy = control_policy(model, method, get_size(c["solver"], "horizon"));
          tr = simulate(model, policy, get_size(d, "T"), get_seed(c));
        } else {
          const auto data = gen_trajectory_dataset(model, get_size(d, "T"), get_size(d, "count"),
                                                   zero_policy(model.action_dim()), get_seed(c));
          tr = pick_trajectory(data, c);
        }
        if (method == "fit-covariances" && !load.empty()) {
          model.V = read_tensor(load / "V.bin");
          model.W = read_tensor(load / "W.bin");
        }
        if (method == "kalmannet") {
          const Dynamics dyn = linear_dynamics(model);
          GainNetwork net;
          if (load.empty()) {
            Rng rng(get_seed(c));
            net = GainNetwork::create(model.state_dim(), model.action_dim(), model.obs_dim(),
                                      get_size(c["solver"], "hidden"), rng);
          } else {
            net = load_gain_network(load / "gain_network");
          }
          estimates = kalmannet_filter(dyn, net, model.z0, tr);
        } else {
          estimates = kalman_filter(model, tr);
        }
        trace_rows(estimates, model.C, [&](std::size_t t) {
          const Tensor prev = t == 0 ? model.z0 : estimates.slice(t - 1);
          const Tensor s = t == 0 ? Tensor({model.action_dim()}) : tr.S.slice(t - 1);
          return matmul(model.A, prev) + matmul(model.B, s);
        });
        if (method == "lqg" || method == "mpc") summary["cost"] = quadratic_cost(model, tr);
      } else {
        const NonlinearModel truth = lorenz_model(lorenz_config(d, get_size(d, "truth_substeps")));
        const NonlinearModel model = lorenz_model(lorenz_config(d, 1));
        const auto data = gen_trajectory_dataset(truth, get_size(d, "test_T"), get_size(d, "test_count"), get_seed(c) + 1);
        const std::size_t k = c["solver"].contains("sample") ? get_size(c["solver"], "sample") : 0;
        if (k >= data.data.size()) throw ConfigError("solver.sample is outside the test set");
        tr = data.trajectory(k);
        if (method == "ekf") {
          estimates = ekf_filter(model, tr);
        } else if (method == "kf") {
          const auto train = gen_trajectory_dataset(truth, get_size(d, "T"), get_size(d, "count"), get_seed(c));
          estimates = kalman_filter(random_walk_model(model, train), tr);
        } else {
          if (load.empty()) throw ConfigError("kalmannet on lorenz needs artifacts from a train run");
          estimates = kalmannet_filter(model.dynamics, load_gain_network(load / "gain_network"), model.z0, tr);
        }
        trace_rows(estimates, model.dynamics.C, [&](std::size_t t) {
          return model.dynamics.step(t == 0 ? model.z0 : estimates.slice(t - 1), Tensor({0}));
        });
      }
      write_tensor(out_dir / "estimates.bin", estimates);
      write_vector_csv(out_dir / "estimates.csv", estimates);
      summary["state_mse"] = state_mse(estimates, tr.Z);
      summary["state_mse_db"] = to_db(state_mse(estimates, tr.Z));
    } else {
      const PriorData pd = prior_data(c);
      const std::size_t k = c["solver"].contains("sample") ? get_size(c["solver"], "sample") : 0;
      if (k >= pd.signals.size()) throw ConfigError("solver.sample is outside the held-out signals");
      Tensor signal;
      if (method == "least-squares") {
        const auto t0 = std::chrono::steady_clock::now();
        signal = matmul(transpose(pd.H), solve_spd(matmul(pd.H, transpose(pd.H)), pd.x[k]));
        add(1, 0.5 * squared_norm(pd.x[k] - matmul(pd.H, signal)), 0.0, elapsed_ns(t0));
      } else {
        const Generator g = prior_generator(c, pd, load, nullptr);
        const auto res = deep_prior_invert(g, pd.H, pd.x[k], get_double(c["solver"], "lambda"), inversion_options(c));
        for (std::size_t i = 0; i < res.trace.size(); ++i) add(static_cast<double>(i), res.trace[i], res.grad_norm[i], res.wall_ns[i]);
        write_tensor(out_dir / "latent.bin", res.z);
        signal = res.signal;
      }
      write_tensor(out_dir / "signal.bin", signal);
      write_vector_csv(out_dir / "signal.csv", signal);
      summary["squared_error"] = squared_norm(signal - pd.signals[k]);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  trace.write(out_dir / "trace.csv");
  summary["trace_rows"] = trace.rows.size();
  write_text(out_dir / "summary.json", summary.dump(2) + "\n");
  return summary;
}

void write_dataset(const Json& config, const fs::path& out_dir) {
  const Json c = resolve_config(config);
  const std::string task = c["task"];
  fs::create_directories(out_dir);
  const auto splits = [&](const Dataset& d, const fs::path& path) {
    write_text(path, Json{{"train", d.train}, {"validation", d.validation}, {"test", d.test}, {"seed", d.seed}}.dump() + "\n");
  };
  const auto trajectories = [&](const TrajectoryDataset& d, const fs::path& dir) {
    fs::create_directories(dir);
    write_tensor(dir / "inputs.bin", d.data.inputs);
    write_tensor(dir / "targets.bin", d.data.targets);
    write_tensor(dir / "actions.bin", d.actions);
    splits(d.data, dir / "splits.json");
  };
  if (task == "sparse") {
    const Dataset ds = sparse_data(c);
    write_tensor(out_dir / "inputs.bin", ds.inputs);
    write_tensor(out_dir / "targets.bin", ds.targets);
    save_problem(out_dir / "problem.json", sparse_problem(c, *ds.H));
    splits(ds, out_dir / "splits.json");
  } else if (task == "linear-gaussian") {
    const Json& d = c["dataset"];
    const StateSpaceModel model = model_from(d["model"]);
    trajectories(gen_trajectory_dataset(model, get_size(d, "T"), get_size(d, "count"), zero_policy(model.action_dim()),
                                        get_seed(c)),
                 out_dir);
  } else if (task == "lorenz") {
    const Json& d = c["dataset"];
    const NonlinearModel truth = lorenz_model(lorenz_config(d, get_size(d, "truth_substeps")));
    trajectories(gen_trajectory_dataset(truth, get_size(d, "T"), get_size(d, "count"), get_seed(c)), out_dir / "train");
    trajectories(gen_trajectory_dataset(truth, get_size(d, "test_T"), get_size(d, "test_count"), get_seed(c) + 1),
                 out_dir / "test");
  } else {
    const PriorData pd = prior_data(c);
    write_tensor(out_dir / "signals.bin", pd.train);
    write_tensor(out_dir / "H.bin", pd.H);
    write_tensor(out_dir / "test_signals.bin", stack(pd.signals));
    write_tensor(out_dir / "test_measurements.bin", stack(pd.x));
  }
}

Json run_bench(const Json& config, const fs::path& out_dir, bool quick) {
  if (!config.contains("methods") || !config["methods"].is_array()) {
    throw ConfigError("bench needs a 'methods' list with at least two methods");
  }
  std::vector<std::string> methods;
  for (const auto& m : config["methods"]) {
    if (!m.is_string()) throw ConfigError("'methods' entries must be strings");
    methods.push_back(m);
  }
  if (methods.size() < 2) throw ConfigError("bench needs at least two methods, got " + std::to_string(methods.size()));
  std::vector<Json> configs;
  for (const auto& m : methods) {
    Json c = config;
    c.erase("methods");
    c["method"] = m;
    resolve_config(c, quick);  // reject bad names before any work starts
    configs.push_back(std::move(c));
  }
  fs::create_directories(out_dir);
  std::vector<ExperimentReport> reports(methods.size());
  parallel_for(methods.size(), [&](std::size_t i) {
    ExperimentOptions opts;
    opts.quick = quick;
    reports[i] = run_experiment(configs[i], out_dir / "runs", opts);
  });

  Csv bench;
  bench.header = {"method"};
  std::vector<std::vector<std::string>> headers;
  std::vector<std::vector<std::vector<std::string>>> bodies;
  for (const auto& r : reports) {
    std::ifstream in(r.run_dir / "curve.csv");
    std::string line;
    std::vector<std::vector<std::string>> rows;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      std::vector<std::string> cells;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) cells.push_back(cell);
      rows.push_back(cells);
    }
    headers.push_back(rows.front());
    rows.erase(rows.begin());
    bodies.push_back(std::move(rows));
    for (const auto& h : headers.back())
      if (std::find(bench.header.begin(), bench.header.end(), h) == bench.header.end()) bench.header.push_back(h);
  }
  for (std::size_t i = 0; i < reports.size(); ++i) {
    for (const auto& row : bodies[i]) {
      std::vector<std::string> out(bench.header.size());
      out[0] = methods[i];
      for (std::size_t j = 0; j < row.size(); ++j) {
        const auto pos = std::find(bench.header.begin(), bench.header.end(), headers[i][j]) - bench.header.begin();
        out[static_cast<std::size_t>(pos)] = row[j];
      }
      bench.rows.push_back(std::move(out));
    }
  }
  bench.write(out_dir / "bench.csv");

  Csv summary{{"method", "test_mse", "test_mse_db", "runtime_seconds", "run_dir"}, {}};
  Json rows = Json::array();
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const Json& m = reports[i].metrics;
    const double mse = m["metrics"]["test_mse"], db = m["metrics"]["test_mse_db"];
    const double secs = m["timing"]["runtime_seconds"];
    summary.rows.push_back({methods[i], format_double(mse), format_double(db), format_double(secs),
                            reports[i].run_dir.filename().string()});
    rows.push_back({{"method", methods[i]}, {"test_mse", mse}, {"test_mse_db", db}, {"runtime_seconds", secs},
                    {"run_dir", reports[i].run_dir.string()}});
  }
  summary.write(out_dir / "summary.csv");
  return rows;
}

}  // namespace mbdl
