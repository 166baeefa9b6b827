#pragma once

#include <cstdint>
#include <functional>

#include "mbdl/state_space.hpp"

namespace mbdl {

/// Transition z+ = step(z, s) with its state Jacobian, and a linear readout C.
struct Dynamics {
  std::size_t n = 0, p = 0, q = 0;
  std::function<Tensor(const Tensor& z, const Tensor& s)> step;
  std::function<Tensor(const Tensor& z)> jacobian;  // d step / dz, [n x n]
  Tensor C;                                         // [q x n]
};

/// A z + B s.
Dynamics linear_dynamics(const StateSpaceModel& model);

/// z_t = step(z_{t-1}, s_{t-1}) + v,  x_t = C z_t + w.
struct NonlinearModel {
  Dynamics dynamics;
  Tensor V, W;
  Tensor z0, P0;

  void validate() const;
};

struct LorenzParams {
  double sigma = 10.0;
  double rho = 28.0;
  double beta = 8.0 / 3.0;
};

/// A(z) with A(z) z the Lorenz vector field.
Tensor lorenz_matrix(const Tensor& z, const LorenzParams& lp = {});
/// sum_{j=0..J} (A(z) dt)^j / j! z
Tensor lorenz_transition(const Tensor& z, double dt, int J, const LorenzParams& lp = {});
/// Closed-form Jacobian of lorenz_transition.
Tensor lorenz_transition_jacobian(const Tensor& z, double dt, int J, const LorenzParams& lp = {});

struct LorenzConfig {
  double dt = 0.02;
  int J = 5;
  std::size_t substeps = 1;  // Taylor steps of dt/substeps per sample
  double process_var = 1e-3;
  double obs_var = 1e-1;
  LorenzParams params;
};

/// Fully observed Lorenz system (C = I), z0 = (1, 1, 1), P0 = I.
NonlinearModel lorenz_model(const LorenzConfig& config = {});

/// Draws z_0 ~ N(z0, P0); actions are zero.
Trajectory simulate(const NonlinearModel& model, std::size_t T, std::uint64_t seed);
TrajectoryDataset gen_trajectory_dataset(const NonlinearModel& model, std::size_t T, std::size_t N,
                                         std::uint64_t seed);

/// First-order linearization of kalman_step around the previous estimate.
FilterState ekf_step(const NonlinearModel& model, const FilterState& state, const Tensor& x_t, const Tensor& s_prev);
FilterState ekf_initial_state(const NonlinearModel& model);
/// Posterior means [T x n].
Tensor ekf_filter(const NonlinearModel& model, const Trajectory& traj);

}  // namespace mbdl
