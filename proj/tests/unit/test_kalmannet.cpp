#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "mbdl/error.hpp"
#include "mbdl/kalmannet.hpp"
#include "mbdl/random.hpp"
#include "support/oracles.hpp"

using namespace mbdl;

namespace {

StateSpaceModel tracking_model() {
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

Tensor on_attractor(std::uint64_t seed) {
  std::vector<double> z{1.0, 1.0, 1.0};
  Rng rng(seed);
  z = oracle::lorenz_flow(z, 5.0 + rng.uniform(0.0, 5.0), 5000);
  return Tensor::vector(z);
}

double flow_error(const Tensor& z, double dt) {
  const auto exact = oracle::lorenz_flow({z[0], z[1], z[2]}, dt, 200);
  return norm(lorenz_transition(z, dt, 5) - Tensor::vector(exact));
}

}  // namespace

TEST_CASE("lorenz transition jacobian matches finite differences") {
  for (std::size_t sub : {std::size_t{1}, std::size_t{3}}) {
    LorenzConfig cfg;
    cfg.substeps = sub;
    const auto m = lorenz_model(cfg);
    for (std::uint64_t s = 0; s < 5; ++s) {
      const Tensor z = on_attractor(s);
      const Tensor J = m.dynamics.jacobian(z);
      Tensor fd({3, 3});
      for (std::size_t k = 0; k < 3; ++k) {
        Tensor up = z, down = z;
        up[k] += 1e-6;
        down[k] -= 1e-6;
        const Tensor col = scale(0.5e6, m.dynamics.step(up, {}) - m.dynamics.step(down, {}));
        for (std::size_t r = 0; r < 3; ++r) fd(r, k) = col[r];
      }
      CHECK(oracle::relative_error(J, fd) <= 1e-7);
    }
  }
}

TEST_CASE("lorenz one-step error shrinks fourfold when dt halves") {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Tensor z = on_attractor(10 + s);
    const double ratio = flow_error(z, 0.02) / flow_error(z, 0.01);
    CAPTURE(ratio);
    CHECK(ratio > 3.5);
    CHECK(ratio < 4.5);
  }
}

TEST_CASE("lorenz trajectories with a tiny offset separate") {
  Tensor a = on_attractor(3), b = a;
  b[0] += 1e-6;
  std::size_t t = 0;
  for (; t < 1000 && norm(a - b) <= 1.0; ++t) {
    a = lorenz_transition(a, 0.02, 5);
    b = lorenz_transition(b, 0.02, 5);
  }
  CHECK(t < 1000);
}

TEST_CASE("noiseless ekf tracks within discretization error") {
  LorenzConfig truth_cfg;
  truth_cfg.substeps = 20;
  truth_cfg.process_var = 0.0;
  truth_cfg.obs_var = 1e-4;
  auto truth = lorenz_model(truth_cfg);
  truth.z0 = on_attractor(7);
  truth.P0 = Tensor({3, 3});
  LorenzConfig filt_cfg = truth_cfg;
  filt_cfg.substeps = 1;
  auto filt = lorenz_model(filt_cfg);
  filt.z0 = truth.z0;
  filt.P0 = truth.P0;
  const Trajectory tr = simulate(truth, 200, 1);
  // worst one-step model error along the path, used as the process variance
  double worst = 0.0;
  Tensor prev = truth.z0;
  for (std::size_t t = 0; t < 200; ++t) {
    worst = std::max(worst, norm(filt.dynamics.step(prev, {}) - tr.Z.slice(t)));
    prev = tr.Z.slice(t);
  }
  filt.V = scale(worst * worst, Tensor::identity(3));
  const Tensor est = ekf_filter(filt, tr);
  for (std::size_t t = 0; t < 200; ++t) CHECK(norm(est.slice(t) - tr.Z.slice(t)) <= worst);
}

TEST_CASE("ekf equals the kalman filter on linear dynamics") {
  const auto m = tracking_model();
  NonlinearModel nl{linear_dynamics(m), m.V, m.W, m.z0, m.P0};
  const auto tr = simulate(m, zero_policy(1), 40, 3);
  CHECK(max_abs_diff(ekf_filter(nl, tr), kalman_filter(m, tr)) <= 1e-12);
}

TEST_CASE("kalmannet with the kalman gains reproduces the filter") {
  const auto m = tracking_model();
  const auto dyn = linear_dynamics(m);
  const auto tr = simulate(m, zero_policy(1), 30, 9);
  const auto gains = kalman_gains(m, 30);
  Rng rng(1);
  GainNetwork net = GainNetwork::create(2, 1, 1, 8, rng);
  net.Wo = Tensor::zeros_like(net.Wo);
  KalmanNetState st = kalmannet_initial_state(net, m.z0);
  FilterState kf = initial_filter_state(m);
  Tensor s_prev({1});
  for (std::size_t t = 0; t < 30; ++t) {
    net.bo = gains[t].reshaped({2});
    st = kalmannet_step(dyn, net, st, tr.X.slice(t), s_prev);
    kf = kalman_step(m, kf, tr.X.slice(t), s_prev);
    CHECK(max_abs_diff(st.z_hat, kf.z_hat) <= 1e-12);
    s_prev = tr.S.slice(t);
  }
}

TEST_CASE("zero gain gives the open-loop prediction") {
  const auto m = tracking_model();
  const auto dyn = linear_dynamics(m);
  Rng rng(2);
  GainNetwork net = GainNetwork::create(2, 1, 1, 8, rng);
  net.Wo = Tensor::zeros_like(net.Wo);
  const KalmanNetState st{Tensor::vector({1.0, -2.0}), Tensor({8}), Tensor({2, 1}), 0};
  const Tensor s = Tensor::vector({0.5});
  const auto next = kalmannet_step(dyn, net, st, Tensor::vector({7.0}), s);
  CHECK(max_abs_diff(next.z_hat, matmul(m.A, st.z_hat) + matmul(m.B, s)) <= 1e-15);
  CHECK_THROWS_AS(kalmannet_step(dyn, net, st, Tensor::vector({1.0, 2.0}), s), ShapeError);
}

TEST_CASE("batched kalmannet loss matches the per-trajectory filter") {
  const auto m = tracking_model();
  const auto dyn = linear_dynamics(m);
  const auto data = gen_trajectory_dataset(m, 25, 40, lqg_policy(m), 4);
  Rng rng(3);
  GainNetwork net = GainNetwork::create(2, 1, 1, 8, rng, Tensor::matrix({{0.3}, {0.1}}));
  calibrate_features(net, dyn, data);
  const double batched = kalmannet_mse(dyn, net, m.z0, data, Split::test);
  const double looped =
      split_mse(data, Split::test, [&](const Trajectory& tr) { return kalmannet_filter(dyn, net, m.z0, tr); });
  CHECK(batched == doctest::Approx(looped).epsilon(1e-12));
}

TEST_CASE("kalmannet gradient matches finite differences") {
  const auto m = tracking_model();
  const auto dyn = linear_dynamics(m);
  const auto data = gen_trajectory_dataset(m, 6, 10, zero_policy(1), 5);
  Rng rng(4);
  GainNetwork net = GainNetwork::create(2, 1, 1, 4, rng, Tensor::matrix({{0.3}, {0.1}}));
  net.Wo = rng.normal_tensor(net.Wo.shape(), 0.3);
  const std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  const auto packed = net.pack();
  std::vector<Tensor> grads;
  kalmannet_loss(dyn, net, packed, m.z0, data, idx, 0, &grads);
  for (std::size_t k = 0; k < packed.size(); ++k) {
    auto f = [&](const Tensor& w) {
      auto p = packed;
      p[k] = w;
      return kalmannet_loss(dyn, net, p, m.z0, data, idx, 0, nullptr);
    };
    CHECK(oracle::relative_error(grads[k], oracle::finite_difference(f, packed[k])) <= 1e-5);
  }
}

TEST_CASE("kalmannet gradient through the lorenz transition matches finite differences") {
  const auto model = lorenz_model();
  const auto data = gen_trajectory_dataset(model, 5, 4, 6);
  Rng rng(5);
  GainNetwork net = GainNetwork::create(3, 0, 3, 4, rng, scale(0.5, Tensor::identity(3)));
  net.Wo = rng.normal_tensor(net.Wo.shape(), 0.1);
  calibrate_features(net, model.dynamics, data);
  const std::vector<std::size_t> idx{0, 1, 2, 3};
  const auto packed = net.pack();
  std::vector<Tensor> grads;
  kalmannet_loss(model.dynamics, net, packed, model.z0, data, idx, 0, &grads);
  for (std::size_t k = 0; k < packed.size(); ++k) {
    auto f = [&](const Tensor& w) {
      auto p = packed;
      p[k] = w;
      return kalmannet_loss(model.dynamics, net, p, model.z0, data, idx, 0, nullptr);
    };
    CHECK(oracle::relative_error(grads[k], oracle::finite_difference(f, packed[k])) <= 1e-4);
  }
}

TEST_CASE("truncated windows change gradients but not the loss") {
  const auto m = tracking_model();
  const auto dyn = linear_dynamics(m);
  const auto data = gen_trajectory_dataset(m, 20, 12, zero_policy(1), 6);
  Rng rng(6);
  GainNetwork net = GainNetwork::create(2, 1, 1, 4, rng, Tensor::matrix({{0.3}, {0.1}}));
  const std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11};
  std::vector<Tensor> full, whole, cut;
  const double l0 = kalmannet_loss(dyn, net, net.pack(), m.z0, data, idx, 0, &full);
  const double l1 = kalmannet_loss(dyn, net, net.pack(), m.z0, data, idx, 20, &whole);
  const double l2 = kalmannet_loss(dyn, net, net.pack(), m.z0, data, idx, 5, &cut);
  CHECK(l0 == l1);
  CHECK(l0 == doctest::Approx(l2).epsilon(1e-14));
  for (std::size_t k = 0; k < full.size(); ++k) CHECK(max_abs_diff(full[k], whole[k]) == 0.0);
  CHECK(max_abs_diff(full[3], cut[3]) > 0.0);
}

TEST_CASE("kalmannet training") {
  const auto m = tracking_model();
  const auto dyn = linear_dynamics(m);
  const auto data = gen_trajectory_dataset(m, 40, 120, zero_policy(1), 8);
  Rng rng(7);
  GainNetwork net = GainNetwork::create(2, 1, 1, 16, rng);
  calibrate_features(net, dyn, data);
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 16;
  cfg.optimizer = OptimizerKind::adam;
  cfg.clip_norm = 1.0;

  SUBCASE("zero epochs returns the initial network") {
    cfg.epochs = 0;
    const auto fit = train_kalmannet(dyn, net, m.z0, data, cfg);
    CHECK(fit.net.pack() == net.pack());
  }
  SUBCASE("loss falls and stays above the kalman filter") {
    cfg.epochs = 8;
    const auto fit = train_kalmannet(dyn, net, m.z0, data, cfg);
    const auto& tr = fit.report.trace;
    CHECK(tr.back().validation_loss < 0.5 * tr.front().validation_loss);
    const double kf = split_mse(data, Split::test, [&](const Trajectory& t) { return kalman_filter(m, t); });
    CHECK(to_db(kalmannet_mse(dyn, fit.net, m.z0, data, Split::test)) >= to_db(kf) - 0.1);
  }
}

TEST_CASE("gain network manifest round trip") {
  Rng rng(8);
  GainNetwork net = GainNetwork::create(3, 0, 3, 5, rng, Tensor::identity(3));
  net.feature_scale[2] = 0.25;
  const auto dir = std::filesystem::temp_directory_path() / "mbdl_gain_net";
  std::filesystem::remove_all(dir);
  save_gain_network(dir, net);
  const auto back = load_gain_network(dir);
  CHECK(back.pack() == net.pack());
  CHECK(back.feature_scale == net.feature_scale);
  CHECK(back.hidden == 5);
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(load_gain_network(dir), ConfigError);
}

TEST_CASE("identity encoder is the kalman filter") {
  const auto m = tracking_model();
  Rng rng(9);
  Mlp enc = Mlp::create({1, 1}, Activation::tanh, rng);
  enc.weights[0] = Tensor::identity(1);
  const auto tr = simulate(m, lqg_policy(m), 30, 10);
  CHECK(max_abs_diff(feature_kalman_filter(m, enc, tr), kalman_filter(m, tr)) == 0.0);
  const auto data = gen_trajectory_dataset(m, 30, 20, zero_policy(1), 2);
  const double taped = feature_kalman_mse(m, enc, data, Split::train);
  const double looped = split_mse(data, Split::train, [&](const Trajectory& t) { return kalman_filter(m, t); });
  CHECK(taped == doctest::Approx(looped).epsilon(1e-12));
}

TEST_CASE("encoder gradient matches finite differences") {
  const auto m = tracking_model();
  const auto data = gen_trajectory_dataset(m, 8, 6, zero_policy(1), 3);
  Rng rng(10);
  const Mlp enc = Mlp::create({1, 5, 1}, Activation::tanh, rng);
  const std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5};
  const auto packed = enc.pack();
  std::vector<Tensor> grads;
  feature_kalman_loss(m, enc, packed, data, idx, &grads);
  for (std::size_t k = 0; k < packed.size(); ++k) {
    auto f = [&](const Tensor& w) {
      auto p = packed;
      p[k] = w;
      return feature_kalman_loss(m, enc, p, data, idx, nullptr);
    };
    CHECK(oracle::relative_error(grads[k], oracle::finite_difference(f, packed[k])) <= 1e-5);
  }
}

TEST_CASE("learned encoder undoes a cubic observation map") {
  const auto m = tracking_model();
  const auto linear = gen_trajectory_dataset(m, 50, 400, zero_policy(1), 7);
  auto warped = linear;
  for (double& v : warped.data.inputs.data()) v = v + v * v * v;
  Rng rng(2);
  const Mlp enc = Mlp::create({1, 32, 32, 1}, Activation::tanh, rng);
  TrainConfig cfg;
  cfg.learning_rate = 3e-3;
  cfg.epochs = 60;
  cfg.batch_size = 32;
  cfg.optimizer = OptimizerKind::adam;
  const auto fit = train_feature_encoder(m, enc, warped, cfg);
  const double kf = split_mse(linear, Split::test, [&](const Trajectory& t) { return kalman_filter(m, t); });
  const double trained = feature_kalman_mse(m, fit.encoder, warped, Split::test);
  const double untrained = feature_kalman_mse(m, enc, warped, Split::test);
  MESSAGE("kf " << to_db(kf) << " dB, trained " << to_db(trained) << " dB, untrained " << to_db(untrained) << " dB");
  CHECK(to_db(trained) - to_db(kf) <= 1.0);
  CHECK(untrained > trained);
}
