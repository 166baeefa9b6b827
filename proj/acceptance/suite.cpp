#include "suite.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "mbdl/experiment.hpp"
#include "mbdl/hybrid.hpp"
#include "mbdl/kalmannet.hpp"
#include "mbdl/random.hpp"
#include "mbdl/unfolded.hpp"
#include "support/gradcheck.hpp"
#include "support/instances.hpp"
#include "support/oracles.hpp"
#include "support/primitive_cases.hpp"

namespace mbdl::acceptance {
namespace {

namespace fs = std::filesystem;

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

// --- 1 ---

double bptt_error(std::uint64_t seed) {
  const auto inst = oracle::random_lasso(seed, 6, 10, 2, 0.05, 0.05);
  Rng rng(seed + 1);
  auto net = lista_init(inst.problem, default_step(inst.problem), 20);
  for (auto& l : net.layers) {
    l.W1 = l.W1 + rng.normal_tensor(l.W1.shape(), 0.01);
    l.lambda += 0.01 * rng.uniform();
  }
  const Tensor X = rng.normal_tensor({6, 3});
  const Tensor S = rng.normal_tensor({10, 3});
  const auto packed = pack_unfolded(net, TrainMode::full);
  std::vector<Tensor> grads;
  unfolded_loss(net, packed, X, S, TrainMode::full, &grads);
  double worst = 0.0;
  for (std::size_t k = 0; k < packed.size(); ++k) {
    auto f = [&](const Tensor& t) {
      auto p = packed;
      p[k] = t;
      return unfolded_loss(net, p, X, S, TrainMode::full, nullptr);
    };
    // small step, many kinks
    worst = std::max(worst, oracle::relative_error(grads[k], oracle::finite_difference(f, packed[k], 1e-7)));
  }
  return worst;
}

Outcome gradients(bool quick) {
  const int points = quick ? 10 : 50;
  Rng rng(2024);
  double worst = 0.0;
  std::string worst_op;
  const auto cases = oracle::primitive_cases();
  for (const auto& c : cases) {
    for (int i = 0; i < points; ++i) {
      const double e = oracle::gradient_check(c.build, c.inputs(rng));
      if (e >= worst) {
        worst = e;
        worst_op = c.name;
      }
    }
  }
  std::vector<double> unrolled(static_cast<std::size_t>(points));
  parallel_for(unrolled.size(), [&](std::size_t i) { unrolled[i] = bptt_error(9000 + i); });
  const double worst_unrolled = *std::max_element(unrolled.begin(), unrolled.end());
  const bool ok = worst <= 1e-5 && worst_unrolled <= 1e-4;
  return {ok, std::to_string(cases.size()) + " primitives x " + std::to_string(points) + " points: worst " + sci(worst) +
                  " (" + worst_op + ", limit 1e-5); 20 ISTA layers: worst " + sci(worst_unrolled) + " (limit 1e-4)"};
}

// --- 2, 3 ---

Outcome solver_agreement(bool quick) {
  const std::size_t count = quick ? 5 : 20;
  std::vector<double> worst(count);
  parallel_for(count, [&](std::size_t i) {
    const auto inst = oracle::random_lasso(100 + i);
    const auto& p = inst.problem;
    const double mu = default_step(p);
    AdmmHyper h;
    h.max_iter = 100000;
    h.tol = 1e-8;
    const double fi = lasso_objective(p, inst.x, ista(p, inst.x, mu, 2000).coefficients);
    const double ff = lasso_objective(p, inst.x, fista(p, inst.x, mu, 500).coefficients);
    const double fa = lasso_objective(p, inst.x, admm(p, inst.x, h).coefficients);
    const double fo =
        oracle::lasso_value(p.H, inst.x, oracle::lasso_coordinate_descent(p.H, inst.x, p.rho), p.rho);
    worst[i] = std::max({rel(fi, ff), rel(fi, fa), rel(ff, fa), rel(fi, fo), rel(ff, fo), rel(fa, fo)});
  });
  const double w = *std::max_element(worst.begin(), worst.end());
  return {w <= 1e-5, std::to_string(count) + " instances 32x64: worst relative objective gap " + sci(w) +
                         " across ISTA(2000), FISTA(500), ADMM(tol 1e-8), coordinate descent (limit 1e-5)"};
}

Outcome monotone_descent(bool quick) {
  const std::size_t count = quick ? 5 : 20;
  std::vector<int> violations(count);
  std::vector<double> mu_ratio(count);
  parallel_for(count, [&](std::size_t i) {
    const auto inst = oracle::random_lasso(200 + i);
    const double smax = spectral_norm(inst.problem.H, 500);
    const double mu = default_step(inst.problem);
    mu_ratio[i] = mu * smax * smax;
    SolverOptions o;
    o.record_trace = true;
    const auto res = ista(inst.problem, inst.x, mu, 2000, o);
    double prev = lasso_objective(inst.problem, inst.x, Tensor({inst.problem.dim()}));
    for (const auto& r : res.trace) {
      if (r.objective > prev + 1e-12 * std::abs(prev)) ++violations[i];
      prev = r.objective;
    }
  });
  int total = 0;
  for (int v : violations) total += v;
  const double ratio = *std::max_element(mu_ratio.begin(), mu_ratio.end());
  return {total == 0 && ratio <= 1.0, std::to_string(count) + " instances x 2000 iterations, mu*smax^2 <= " +
                                          sci(ratio) + ": " + std::to_string(total) + " increases"};
}

// --- 4 ---

Outcome unfolding_equivalence(bool) {
  double lista_gap = 0.0, admm_gap = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto inst = oracle::random_lasso(300 + s);
    const auto& p = inst.problem;
    const std::size_t K = 15;
    const double mu = default_step(p);
    lista_gap = std::max(lista_gap, max_abs_diff(lista_forward(lista_init(p, mu, K), inst.x),
                                                 ista(p, inst.x, mu, static_cast<int>(K)).coefficients));
    AdmmHyper h;
    h.lambda = 0.5 + 0.1 * static_cast<double>(s);
    h.mu = 1.0;
    h.max_iter = static_cast<int>(K);
    h.tol = 0.0;
    admm_gap = std::max(admm_gap, max_abs_diff(unfolded_admm_forward(unfolded_admm_init(p, h, K), inst.x),
                                               admm(p, inst.x, h).coefficients));
  }
  return {lista_gap <= 1e-12 && admm_gap <= 1e-12,
          "10 inputs, K=15: LISTA vs ISTA max diff " + sci(lista_gap) + ", unfolded ADMM vs ADMM " + sci(admm_gap) +
              " (limit 1e-12)"};
}

// --- 5 ---

Outcome lista_beats_ista(bool) {
  // 1000 training samples; the rest split between validation and test
  const std::size_t m = 32, n = 64, k = 5;
  Dataset ds = gen_sparse_dataset(m, n, k, 0.05, 2000, 0);
  assign_splits(ds, 0, 0.5, 0.25);
  SparseProblem p{*ds.H, std::nullopt, 0.1, 0.0025};
  const double mu = default_step(p);
  // ISTA gets its best l1 weight on the validation split
  double best_rho = 0.0, best_val = INFINITY;
  for (double rho : {0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0}) {
    p.rho = rho;
    const double v = empirical_risk([&](const Tensor& x) { return ista(p, x, mu, 50).signal; }, ds, Split::validation);
    if (v < best_val) {
      best_val = v;
      best_rho = rho;
    }
  }
  p.rho = best_rho;
  const double ista_mse = empirical_risk([&](const Tensor& x) { return ista(p, x, mu, 50).signal; }, ds, Split::test);
  // tied weights
  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::adam;
  cfg.learning_rate = 3e-3;
  cfg.schedule = Schedule::step_decay;
  cfg.decay_every = 50;
  cfg.batch_size = 32;
  cfg.epochs = 200;
  cfg.seed = 0;
  const auto fit = train_unfolded(lista_init(p, mu, 10, true), ds, cfg);
  const double lista_mse = unfolded_mse(fit.params, ds, Split::test);
  return {lista_mse < ista_mse, "train " + std::to_string(ds.train.size()) + ", " + std::to_string(cfg.epochs) +
                                    " epochs: tied LISTA K=10 test MSE " + sci(lista_mse) + " (" + sci(to_db(lista_mse)) +
                                    " dB) vs ISTA(50) at rho " + sci(best_rho) + " " + sci(ista_mse) + " (" +
                                    sci(to_db(ista_mse)) + " dB)"};
}

// --- 6 ---

Outcome tuned_hyperparameters(bool) {
  const Dataset ds = gen_sparse_dataset(32, 64, 5, 0.05, 1000, 6);
  const SparseProblem p{*ds.H, std::nullopt, 0.1, 0.0025};
  AdmmHyper h0;
  h0.lambda = 10.0;
  h0.mu = 0.01;
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.momentum = 0.9;
  cfg.batch_size = 100;
  cfg.epochs = 10;
  const auto tuned = learned_admm_tune(p, h0, ds, cfg, 100);
  const double before = tuned.report.trace.front().validation_loss;
  const double after = tuned.report.trace.at(static_cast<std::size_t>(tuned.report.best_epoch)).validation_loss;
  const double gain = 1.0 - after / before;
  return {gain >= 0.2, "validation loss " + sci(before) + " -> " + sci(after) + " (" + sci(100 * gain) +
                           "% better, need 20%); lambda " + sci(tuned.hyper.lambda) + ", mu " + sci(tuned.hyper.mu)};
}

// --- 7 ---

Outcome kalman_ceiling(bool) {
  const StateSpaceModel m = model_preset("tracking");
  const auto data = gen_trajectory_dataset(m, 100, 600, zero_policy(1), 7);
  const double kf = split_mse(data, Split::test, [&](const Trajectory& tr) { return kalman_filter(m, tr); });

  const Dynamics dyn = linear_dynamics(m);
  Rng rng(7);
  GainNetwork net = GainNetwork::create(2, 1, 1, 32, rng);
  calibrate_features(net, dyn, data);
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.optimizer = OptimizerKind::adam;
  cfg.clip_norm = 1.0;
  cfg.batch_size = 32;
  cfg.epochs = 40;
  const auto fit = train_kalmannet(dyn, net, m.z0, data, cfg, 50);
  const double knet = kalmannet_mse(dyn, fit.net, m.z0, data, Split::test);
  const double gap = to_db(knet) - to_db(kf);

  StateSpaceModel init = m;
  init.V = scale(10.0, m.V);
  init.W = scale(10.0, m.W);
  TrainConfig fc;
  fc.learning_rate = 0.05;
  fc.optimizer = OptimizerKind::adam;
  fc.batch_size = 30;
  fc.epochs = 30;
  const auto cov = fit_covariances(init, data, fc);
  StateSpaceModel fitted = m;
  fitted.V = cov.V;
  fitted.W = cov.W;
  const double fit_mse = split_mse(data, Split::test, [&](const Trajectory& tr) { return kalman_filter(fitted, tr); });
  const double fit_gap = fit_mse / kf - 1.0;
  return {gap >= -0.1 && gap <= 0.5 && std::abs(fit_gap) <= 0.1,
          "KalmanNet " + sci(to_db(knet)) + " dB vs KF " + sci(to_db(kf)) + " dB (gap " + sci(gap) +
              " dB, need [-0.1, 0.5]); fitted covariances from 10x truth: MSE " + sci(fit_mse) + " vs " + sci(kf) +
              " (" + sci(100 * fit_gap) + "%, need within 10%)"};
}

// --- 8 ---

Outcome lorenz_trend(bool quick) {
  LorenzConfig truth_cfg;
  truth_cfg.process_var = 1e-2;
  truth_cfg.obs_var = 1e-1;
  truth_cfg.substeps = 20;
  LorenzConfig model_cfg = truth_cfg;
  model_cfg.substeps = 1;
  const NonlinearModel truth = lorenz_model(truth_cfg);
  const NonlinearModel model = lorenz_model(model_cfg);
  const auto train = gen_trajectory_dataset(truth, 200, 200, 11);
  const std::size_t test_T = quick ? 1000 : 3000;
  const auto test = gen_trajectory_dataset(truth, test_T, 5, 12);

  Rng rng(11);
  GainNetwork net = GainNetwork::create(3, 0, 3, 32, rng);
  calibrate_features(net, model.dynamics, train);
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.optimizer = OptimizerKind::adam;
  cfg.clip_norm = 1.0;
  cfg.batch_size = 16;
  cfg.epochs = 40;
  const auto fit = train_kalmannet(model.dynamics, net, model.z0, train, cfg, 50);

  std::vector<double> ekf(5), knet(5);
  parallel_for(5, [&](std::size_t i) {
    const Trajectory tr = test.trajectory(i);
    ekf[i] = state_mse(ekf_filter(model, tr), tr.Z);
    knet[i] = state_mse(kalmannet_filter(model.dynamics, fit.net, model.z0, tr), tr.Z);
  });
  double e = 0.0, k = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    e += ekf[i] / 5.0;
    k += knet[i] / 5.0;
  }
  const double margin = to_db(e) - to_db(k);
  return {margin >= 2.0, "T=" + std::to_string(test_T) + " x 5: KalmanNet " + sci(to_db(k)) + " dB vs EKF " +
                             sci(to_db(e)) + " dB (margin " + sci(margin) + " dB, need 2)"};
}

// --- 9 ---

Outcome pnp_exactness(bool) {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto inst = oracle::random_lasso(400 + s);
    for (double lambda : {0.3, 1.0, 4.0}) {
      AdmmHyper h;
      h.lambda = lambda;
      h.max_iter = 300;
      h.tol = 0.0;
      const auto a = admm(inst.problem, inst.x, h).coefficients;
      const auto b = pnp_admm(inst.problem, inst.x, h, Denoiser::shrinkage()).coefficients;
      worst = std::max(worst, max_abs_diff(a, b));
    }
  }
  return {worst <= 1e-12, "10 instances x 3 lambdas, alpha = rho/(2 lambda): max diff " + sci(worst) + " (limit 1e-12)"};
}

// --- 10 ---

Outcome deep_prior_ridge(bool) {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    Rng rng(500 + s);
    const Tensor G = rng.normal_tensor({20, 5});
    const Tensor H = rng.normal_tensor({10, 20}, 1.0 / std::sqrt(10.0));
    const Tensor x = rng.normal_tensor({10});
    const double lambda = 0.05 * static_cast<double>(s + 1);
    const Generator g = Generator::linear(G);
    const double f_gd = deep_prior_invert(g, H, x, lambda).objective;
    const double f_ridge = deep_prior_objective(g, H, x, lambda, oracle::ridge_latent(G, H, x, lambda));
    worst = std::max(worst, (f_gd - f_ridge) / f_ridge);
  }
  return {worst <= 1e-6, "10 linear generators: worst relative objective gap to ridge " + sci(worst) + " (limit 1e-6)"};
}

// --- 11 ---

Outcome control_consistency(bool) {
  struct Sys {
    double a, b, q, r;
  };
  const std::vector<Sys> systems{{1.0, 1.0, 1.0, 1.0}, {0.9, 0.5, 1.0, 0.3}, {1.2, 1.0, 2.0, 0.5},
                                 {0.5, 2.0, 1.0, 1.0}, {1.5, 0.7, 0.3, 2.0}, {-0.8, 1.3, 0.7, 0.1}};
  double lqr_gap = 0.0, mpc_gap = 0.0;
  Rng rng(11);
  for (const auto& s : systems) {
    const auto m = StateSpaceModel::scalar(s.a, s.b, 1.0, s.q, s.r, 0.1, 0.1);
    const double K = lqr_stationary_gain(m).item();
    lqr_gap = std::max(lqr_gap, std::abs(K - oracle::scalar_lqr_gain(s.a, s.b, s.q, s.r, 20000)));
    FilterState st = initial_filter_state(m);
    st.z_hat = Tensor::vector({rng.normal() * 2.0});
    mpc_gap = std::max(mpc_gap, std::abs(mpc_plan(m, st.z_hat, 300)(0, 0) - lqg_action(lqr_stationary_gain(m), st).item()));
  }
  // noise scaling: same gain, same estimates, same actions along a recorded trajectory
  const StateSpaceModel t = model_preset("tracking");
  const Trajectory tr = simulate(t, lqg_policy(t), 200, 11);
  const Tensor K = lqr_stationary_gain(t);
  const Tensor Zh = kalman_filter(t, tr);
  double scale_gap = 0.0;
  for (double c : {1e-3, 0.1, 10.0, 1e3}) {
    StateSpaceModel sc = t;
    sc.V = scale(c, t.V);
    sc.W = scale(c, t.W);
    sc.P0 = scale(c, t.P0);
    scale_gap = std::max(scale_gap, max_abs_diff(lqr_stationary_gain(sc), K));
    const Tensor Zc = kalman_filter(sc, tr);
    for (std::size_t i = 0; i < Zh.rows(); ++i) {
      const Tensor a = scale(-1.0, matmul(K, Zh.slice(i)));
      const Tensor b = scale(-1.0, matmul(lqr_stationary_gain(sc), Zc.slice(i)));
      scale_gap = std::max(scale_gap, max_abs_diff(a, b));
    }
  }
  return {lqr_gap <= 1e-8 && mpc_gap <= 1e-6 && scale_gap <= 1e-10,
          "LQR vs Riccati oracle " + sci(lqr_gap) + " (1e-8); MPC(H=300) first action vs LQG " + sci(mpc_gap) +
              " (1e-6); V,W scaling, gains and actions " + sci(scale_gap) + " (1e-10)"};
}

// --- 12 ---

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism(bool) {
  const std::vector<std::string> methods{"sparse/ista", "sparse/lista", "sparse/learned-admm", "linear-gaussian/kalmannet",
                                         "linear-gaussian/fit-covariances", "lorenz/kalmannet", "deep-prior/deep-prior"};
  const fs::path root = fs::temp_directory_path() / ("mbdl-determinism-" + std::to_string(Rng(std::random_device{}()).next_u64()));
  int mismatches = 0;
  std::string which;
  for (const auto& tm : methods) {
    const auto slash = tm.find('/');
    const Json cfg{{"schema_version", kConfigSchemaVersion},
                   {"task", tm.substr(0, slash)},
                   {"method", tm.substr(slash + 1)},
                   {"seed", 3}};
    ExperimentOptions opts;
    opts.quick = true;
    const auto a = run_experiment(cfg, root / "a", opts);
    const auto b = run_experiment(cfg, root / "b", opts);
    bool same = deterministic_metrics(a.metrics).dump() == deterministic_metrics(b.metrics).dump();
    for (const char* f : {"curve.csv", "train_trace.csv", "config.json"})
      same = same && slurp(a.run_dir / f) == slurp(b.run_dir / f);
    if (!same) {
      ++mismatches;
      which += " " + tm;
    }
  }
  fs::remove_all(root);
  return {mismatches == 0, std::to_string(methods.size()) + " configs run twice: " + std::to_string(mismatches) +
                               " differ outside timing" + which};
}

}  // namespace

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> all{
      {1, "gradient-correctness", 30, gradients},
      {2, "solver-cross-validation", 60, solver_agreement},
      {3, "ista-monotone-descent", 60, monotone_descent},
      {4, "unfolding-equivalence", 60, unfolding_equivalence},
      {5, "lista-beats-ista-50", 600, lista_beats_ista},
      {6, "learned-hyperparameters", 300, tuned_hyperparameters},
      {7, "kalman-optimality-ceiling", 600, kalman_ceiling},
      {8, "lorenz-kalmannet-vs-ekf", 1200, lorenz_trend},
      {9, "pnp-shrinkage-exactness", 60, pnp_exactness},
      {10, "deep-prior-linear-oracle", 10, deep_prior_ridge},
      {11, "lqg-mpc-consistency", 60, control_consistency},
      {12, "experiment-determinism", 600, determinism},
  };
  return all;
}

Result run_criterion(const Criterion& c, bool quick) {
  Result r{c.id, c.name, false, 0.0, c.budget_seconds, ""};
  const auto start = std::chrono::steady_clock::now();
  try {
    const Outcome o = c.check(quick);
    r.passed = o.passed;
    r.detail = o.detail;
  } catch (const std::exception& e) {
    r.detail = std::string("error: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (r.seconds > c.budget_seconds) {
    r.passed = false;
    r.detail += "; over the " + sci(c.budget_seconds) + " s budget";
  }
  return r;
}

std::vector<Result> run_suite(const SuiteOptions& options) {
  std::vector<Result> out;
  for (const auto& c : criteria()) {
    if (!options.only.empty() && std::find(options.only.begin(), options.only.end(), c.id) == options.only.end()) continue;
    out.push_back(run_criterion(c, options.quick));
    if (options.live) *options.live << format_line(out.back()) << std::endl;
  }
  return out;
}

std::string format_line(const Result& r) {
  char head[96];
  std::snprintf(head, sizeof head, "C%02d %s %s (%.1f s): ", r.id, r.passed ? "PASS" : "FAIL", r.name.c_str(), r.seconds);
  return head + r.detail;
}

std::string format_listing(const Criterion& c) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "C%02d %s (budget %.0f s)", c.id, c.name.c_str(), c.budget_seconds);
  return buf;
}

nlohmann::json results_json(const std::vector<Result>& results, bool quick) {
  nlohmann::json rows = nlohmann::json::array();
  int failed = 0;
  for (const auto& r : results) {
    failed += r.passed ? 0 : 1;
    rows.push_back({{"id", r.id},
                    {"name", r.name},
                    {"passed", r.passed},
                    {"seconds", r.seconds},
                    {"budget_seconds", r.budget_seconds},
                    {"detail", r.detail}});
  }
  return {{"quick", quick}, {"criteria", rows}, {"passed", static_cast<int>(results.size()) - failed}, {"failed", failed}};
}

}  // namespace mbdl::acceptance
