#include <doctest.h>

#include <cmath>

#include "mbdl/error.hpp"
#include "mbdl/random.hpp"
#include "mbdl/state_space.hpp"
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

// fixed point of p -> a^2 p (1 - l c)... iterated on the scalar predictive variance
double scalar_kalman_gain_oracle(double a, double c, double q, double r) {
  double pm = q;
  for (int i = 0; i < 100000; ++i) {
    const double post = pm * r / (c * c * pm + r);
    const double next = a * a * post + q;
    if (std::abs(next - pm) < 1e-16) break;
    pm = next;
  }
  return pm * c / (c * c * pm + r);
}

}  // namespace

TEST_CASE("simulate trivial systems") {
  auto m = StateSpaceModel::scalar(0.9, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0);
  const auto tr = simulate(m, zero_policy(1), 20, 1);
  CHECK(max_abs(tr.Z) == 0.0);
  CHECK(max_abs(tr.X) == 0.0);
  CHECK(max_abs(tr.S) == 0.0);

  auto c = StateSpaceModel::scalar(1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.5);
  c.z0 = Tensor::vector({1.0});
  const auto tc = simulate(c, zero_policy(1), 50, 2);
  for (std::size_t t = 0; t < 50; ++t) CHECK(tc.Z(t, 0) == 1.0);
  CHECK(simulate(c, zero_policy(1), 50, 2).X == tc.X);
  CHECK_THROWS(simulate(c, zero_policy(1), 0, 2));
}

TEST_CASE("observation noise covariance matches W") {
  StateSpaceModel m;
  m.A = Tensor::identity(2);
  m.B = Tensor({2, 1});
  m.C = Tensor::identity(2);
  m.Q = Tensor::identity(2);
  m.R = Tensor::identity(1);
  m.V = Tensor({2, 2});
  m.W = Tensor::matrix({{0.5, 0.2}, {0.2, 0.3}});
  m.z0 = Tensor({2});
  m.P0 = Tensor({2, 2});
  const std::size_t T = 100000;
  const auto tr = simulate(m, zero_policy(1), T, 3);
  Tensor cov({2, 2});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j) cov(i, j) += tr.X(t, i) * tr.X(t, j) / static_cast<double>(T);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) CHECK(std::abs(cov(i, j) - m.W(i, j)) <= 0.05 * m.W(i, j));
}

TEST_CASE("kalman step limit cases") {
  StateSpaceModel m = tracking_model();
  m.C = Tensor::identity(2);
  m.W = scale(1e-12, Tensor::identity(2));
  FilterState st = initial_filter_state(m);
  const Tensor x = Tensor::vector({0.7, -0.3});
  st = kalman_step(m, st, x, Tensor::vector({0.2}));
  CHECK(max_abs_diff(st.z_hat, x) <= 1e-9);

  StateSpaceModel d = tracking_model();
  d.V = Tensor({2, 2});
  d.W = Tensor({1, 1});
  d.P0 = Tensor({2, 2});
  d.z0 = Tensor::vector({1.0, -0.5});
  Rng rng(4);
  auto policy = [&](std::size_t, const Tensor&) { return rng.normal_tensor({1}); };
  const auto tr = simulate(d, policy, 40, 5);
  const Tensor est = kalman_filter(d, tr);
  CHECK(max_abs_diff(est, tr.Z) <= 1e-12);
}

TEST_CASE("scalar steady-state gain matches the Riccati fixed point") {
  const auto m = StateSpaceModel::scalar(1.0, 0.0, 1.0, 1.0, 1.0, 0.25, 1.0);
  const auto gains = kalman_gains(m, 500);
  CHECK(std::abs(gains.back().item() - scalar_kalman_gain_oracle(1.0, 1.0, 0.25, 1.0)) <= 1e-8);
}

TEST_CASE("filter covariance stays symmetric psd") {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    StateSpaceModel m;
    const Tensor g = rng.normal_tensor({3, 3});
    m.A = scale(0.9 / spectral_norm(g), g);
    m.B = rng.normal_tensor({3, 1});
    m.C = rng.normal_tensor({2, 3});
    m.Q = Tensor::identity(3);
    m.R = Tensor::identity(1);
    const Tensor gv = rng.normal_tensor({3, 3});
    m.V = scale(0.1, matmul(gv, transpose(gv)));
    m.W = Tensor::matrix({{0.3, 0.1}, {0.1, 0.2}});
    m.z0 = Tensor({3});
    m.P0 = Tensor::identity(3);
    FilterState st = initial_filter_state(m);
    for (int t = 0; t < 100; ++t) {
      st = kalman_step(m, st, rng.normal_tensor({2}), rng.normal_tensor({1}));
      CHECK(symmetric_eigenvalues(st.P).front() >= -1e-10);
      CHECK(max_abs_diff(st.P, transpose(st.P)) == 0.0);
    }
  }
}

TEST_CASE("innovation covariance failure is reported") {
  auto m = StateSpaceModel::scalar(1.0, 0.0, 1.0, 1.0, 1.0, 0.0, -1.0);
  m.P0 = Tensor::matrix({{0.5}});
  CHECK_THROWS_AS(kalman_step(m, initial_filter_state(m), Tensor::vector({1.0}), Tensor::vector({0.0})), NumericalError);
}

TEST_CASE("lqr gains") {
  auto zero_q = StateSpaceModel::scalar(1.1, 1.0, 1.0, 0.0, 1.0, 0.1, 0.1);
  CHECK(max_abs(lqr_stationary_gain(zero_q)) == 0.0);
  FilterState st = initial_filter_state(zero_q);
  st.z_hat = Tensor::vector({3.0});
  CHECK(lqg_action(lqr_stationary_gain(zero_q), st).item() == 0.0);

  const auto m = StateSpaceModel::scalar(1.0, 1.0, 1.0, 1.0, 1.0, 0.1, 0.1);
  CHECK(std::abs(lqr_stationary_gain(m).item() - oracle::scalar_lqr_gain(1.0, 1.0, 1.0, 1.0, 10000)) <= 1e-8);
  // golden ratio closed form for a=b=q=r=1
  CHECK(lqr_stationary_cost(m).item() == doctest::Approx((1.0 + std::sqrt(5.0)) / 2.0).epsilon(1e-10));
  const auto finite = lqr_gains(m, 3);
  CHECK(std::abs(finite[2].item() - oracle::scalar_lqr_gain(1.0, 1.0, 1.0, 1.0, 1)) <= 1e-14);
  CHECK(std::abs(finite[0].item() - oracle::scalar_lqr_gain(1.0, 1.0, 1.0, 1.0, 3)) <= 1e-14);

  const auto unstabilizable = StateSpaceModel::scalar(1.5, 0.0, 1.0, 1.0, 1.0, 0.1, 0.1);
  CHECK_THROWS_AS(lqr_stationary_gain(unstabilizable), NumericalError);
}

TEST_CASE("lqg gain ignores noise scaling") {
  StateSpaceModel m = tracking_model();
  const Tensor base = lqr_stationary_gain(m);
  for (double c : {0.01, 3.0, 100.0}) {
    StateSpaceModel s = m;
    s.V = scale(c, m.V);
    s.W = scale(c, m.W);
    CHECK(max_abs_diff(lqr_stationary_gain(s), base) <= 1e-10);
  }
}

TEST_CASE("lqg beats the zero policy on an unstable system") {
  const auto m = StateSpaceModel::scalar(1.2, 1.0, 1.0, 1.0, 1.0, 0.1, 0.1);
  double lqg = 0.0, zero = 0.0;
  int better = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const double a = quadratic_cost(m, simulate(m, lqg_policy(m), 50, seed));
    const double b = quadratic_cost(m, simulate(m, zero_policy(1), 50, seed));
    lqg += a;
    zero += b;
    better += a <= b;
  }
  CHECK(lqg < zero);
  CHECK(better >= 95);
}

TEST_CASE("mpc trivial and limiting cases") {
  auto m = StateSpaceModel::scalar(0.8, 1.0, 1.0, 0.0, 1.0, 0.1, 0.1);
  CHECK(mpc_plan(m, Tensor::vector({2.0}), 1).item() == 0.0);

  auto s = StateSpaceModel::scalar(0.9, 0.5, 1.0, 1.0, 0.3, 0.1, 0.1);
  const Tensor z = Tensor::vector({1.7});
  FilterState st = initial_filter_state(s);
  st.z_hat = z;
  const double lqg = lqg_action(lqr_stationary_gain(s), st).item();
  CHECK(std::abs(mpc_plan(s, z, 200).slice(0).item() - lqg) <= 1e-6);

  const StateSpaceModel t = tracking_model();
  FilterState st2 = initial_filter_state(t);
  st2.z_hat = Tensor::vector({1.0, -0.4});
  CHECK(max_abs_diff(mpc_plan(t, st2.z_hat, 400).slice(0), lqg_action(lqr_stationary_gain(t), st2)) <= 1e-6);
}

TEST_CASE("mpc horizon two matches a grid search") {
  const double a = 1.1, b = 0.7, q = 2.0, r = 0.5, z0 = 1.3, v0 = 0.2, v1 = -0.1;
  auto m = StateSpaceModel::scalar(a, b, 1.0, q, r, 0.0, 1.0);
  MpcForecast f;
  f.v_hat = Tensor::matrix({{v0}, {v1}});
  const Tensor plan = mpc_plan(m, Tensor::vector({z0}), 2, f);
  double best = INFINITY, bs0 = 0.0, bs1 = 0.0;
  const double step = 1e-3;
  for (double s0 = -4.0; s0 <= 2.0; s0 += step) {
    const double z1 = a * z0 + b * s0 + v0;
    // inner problem in s1 is a scalar quadratic; grid it too
    for (double s1 = -3.0; s1 <= 3.0; s1 += 0.01) {
      const double z2 = a * z1 + b * s1 + v1;
      const double cost = q * z1 * z1 + q * z2 * z2 + r * (s0 * s0 + s1 * s1);
      if (cost < best) {
        best = cost;
        bs0 = s0;
        bs1 = s1;
      }
    }
  }
  CHECK(std::abs(plan(0, 0) - bs0) <= 2 * step + 0.01);
  CHECK(std::abs(plan(1, 0) - bs1) <= 0.02);
  const double z1 = a * z0 + b * plan(0, 0) + v0;
  const double z2 = a * z1 + b * plan(1, 0) + v1;
  CHECK(q * z1 * z1 + q * z2 * z2 + r * (plan(0, 0) * plan(0, 0) + plan(1, 0) * plan(1, 0)) <= best + 1e-12);
}

TEST_CASE("trajectory dataset shapes and determinism") {
  const auto m = tracking_model();
  const auto d = gen_trajectory_dataset(m, 30, 10, zero_policy(1), 7);
  CHECK(d.data.inputs.shape() == Tensor::Shape{10, 30, 1});
  CHECK(d.data.targets.shape() == Tensor::Shape{10, 30, 2});
  d.data.validate();
  const auto again = gen_trajectory_dataset(m, 30, 10, zero_policy(1), 7);
  CHECK(again.data.inputs == d.data.inputs);
  const auto tr = d.trajectory(3);
  CHECK(tr.length() == 30);
}

TEST_CASE("covariance loss gradient matches finite differences") {
  auto m = StateSpaceModel::scalar(0.95, 1.0, 1.0, 1.0, 1.0, 0.3, 0.5);
  m.P0 = Tensor::matrix({{1.0}});
  Rng rng(8);
  auto policy = [&](std::size_t, const Tensor&) { return rng.normal_tensor({1}); };
  const auto data = gen_trajectory_dataset(m, 5, 4, policy, 9);
  const std::vector<std::size_t> idx{0, 1, 2, 3};
  auto packed = pack_covariances(Tensor::matrix({{0.7}}), Tensor::matrix({{0.2}}));
  std::vector<Tensor> grads;
  covariance_loss(m, packed, data, idx, &grads);
  for (std::size_t k = 0; k < 2; ++k) {
    auto f = [&](const Tensor& t) {
      auto p = packed;
      p[k] = t;
      return covariance_loss(m, p, data, idx, nullptr);
    };
    CHECK(oracle::relative_error(grads[k], oracle::finite_difference(f, packed[k])) <= 1e-4);
  }

  const auto tm = tracking_model();
  const auto d2 = gen_trajectory_dataset(tm, 6, 3, zero_policy(1), 10);
  const std::vector<std::size_t> idx2{0, 1, 2};
  auto p2 = pack_covariances(Tensor::matrix({{0.05, 0.01}, {0.01, 0.02}}), Tensor::matrix({{0.4}}));
  covariance_loss(tm, p2, d2, idx2, &grads);
  for (std::size_t k = 0; k < 2; ++k) {
    auto f = [&](const Tensor& t) {
      auto p = p2;
      p[k] = t;
      return covariance_loss(tm, p, d2, idx2, nullptr);
    };
    CHECK(oracle::relative_error(grads[k], oracle::finite_difference(f, p2[k])) <= 1e-4);
  }
}

TEST_CASE("tape filter matches kalman_filter at the same covariances") {
  const auto m = tracking_model();
  const auto d = gen_trajectory_dataset(m, 25, 3, zero_policy(1), 11);
  const std::vector<std::size_t> idx{0, 1, 2};
  const auto packed = pack_covariances(m.V, m.W);
  const double loss = covariance_loss(m, packed, d, idx, nullptr);
  double direct = 0.0;
  for (std::size_t i : idx) {
    const auto tr = d.trajectory(i);
    direct += state_mse(kalman_filter(m, tr), tr.Z);
  }
  CHECK(loss == doctest::Approx(direct / 3.0).epsilon(1e-6));
}

TEST_CASE("covariance gradient is small at the truth") {
  auto m = StateSpaceModel::scalar(0.9, 1.0, 1.0, 1.0, 1.0, 0.1, 0.1);
  m.P0 = Tensor::matrix({{0.5}});
  const std::size_t N = 1000;
  const auto d = gen_trajectory_dataset(m, 400, N, zero_policy(1), 791900);
  std::vector<std::size_t> all(N);
  for (std::size_t i = 0; i < N; ++i) all[i] = i;
  std::vector<Tensor> at_truth, off;
  covariance_loss(m, pack_covariances(m.V, m.W), d, all, &at_truth);
  covariance_loss(m, pack_covariances(scale(10.0, m.V), m.W), d, all, &off);
  const double g0 = std::sqrt(squared_norm(at_truth[0]) + squared_norm(at_truth[1]));
  const double g1 = std::sqrt(squared_norm(off[0]) + squared_norm(off[1]));
  CHECK(g0 <= 1e-3);
  CHECK(g0 <= 1e-2 * g1);
}

TEST_CASE("fitted covariances recover the true filter error") {
  auto m = StateSpaceModel::scalar(0.9, 1.0, 1.0, 1.0, 1.0, 0.1, 0.1);
  m.P0 = Tensor::matrix({{0.5}});
  const auto d = gen_trajectory_dataset(m, 100, 300, zero_policy(1), 4);
  auto start = m;
  start.V = scale(10.0, m.V);
  start.W = scale(0.1, m.W);
  TrainConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.epochs = 30;
  cfg.batch_size = 30;
  cfg.optimizer = OptimizerKind::adam;
  const auto fit = fit_covariances(start, d, cfg);
  auto fitted = m;
  fitted.V = fit.V;
  fitted.W = fit.W;
  double mse_true = 0.0, mse_fit = 0.0, mse_start = 0.0;
  for (std::size_t i : d.data.test) {
    const auto tr = d.trajectory(i);
    mse_true += state_mse(kalman_filter(m, tr), tr.Z);
    mse_fit += state_mse(kalman_filter(fitted, tr), tr.Z);
    mse_start += state_mse(kalman_filter(start, tr), tr.Z);
  }
  MESSAGE("true " << mse_true << " fit " << mse_fit << " start " << mse_start);
  CHECK(mse_start > 1.2 * mse_true);
  CHECK(mse_fit <= 1.1 * mse_true);
}
