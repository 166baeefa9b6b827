#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "mbdl/autodiff.hpp"
#include "mbdl/tensor.hpp"
#include "mbdl/train.hpp"

namespace mbdl {

/// z_t = A z_{t-1} + B s_{t-1} + v,  x_t = C z_t + w,  v ~ N(0, V), w ~ N(0, W).
/// Q and R weight state and action in the control cost.
struct StateSpaceModel {
  Tensor A, B, C;
  Tensor Q, R;
  Tensor V, W;
  Tensor z0;  // initial state mean
  Tensor P0;  // initial state covariance

  std::size_t state_dim() const { return A.rows(); }
  std::size_t action_dim() const { return B.cols(); }
  std::size_t obs_dim() const { return C.rows(); }
  /// Shapes, symmetry, Q/V/P0 PSD. R and W positive definite only when `strict`.
  void validate(bool strict = false) const;

  /// Scalar system with the given coefficients (V, W, P0 may be zero).
  static StateSpaceModel scalar(double a, double b, double c, double q, double r, double v, double w);
};

struct Trajectory {
  Tensor Z;  // [T x n]  z_1..z_T
  Tensor X;  // [T x q]  x_1..x_T
  Tensor S;  // [T x p]  s_1..s_T, with s_0 = 0 applied before z_1

  std::size_t length() const { return Z.rows(); }
};

/// Action after seeing x_t at step t (1-based). May keep internal state.
using Policy = std::function<Tensor(std::size_t t, const Tensor& x_t)>;
Policy zero_policy(std::size_t action_dim);

/// Draws z_0 ~ N(z0, P0), then runs the model for T steps.
Trajectory simulate(const StateSpaceModel& model, const Policy& policy, std::size_t T, std::uint64_t seed);

struct FilterState {
  Tensor z_hat;  // posterior mean
  Tensor P;      // posterior covariance
  Tensor gain;   // last Kalman gain [n x q]
  std::size_t t = 0;
};

FilterState initial_filter_state(const StateSpaceModel& model);

/// Predict with z- = A z + B s_prev, then correct against C z-. Joseph-form
/// covariance update, symmetrized. A zero innovation covariance (noiseless,
/// exactly known state) yields a zero gain.
FilterState kalman_step(const StateSpaceModel& model, const FilterState& state, const Tensor& x_t,
                        const Tensor& s_prev);
/// Same update with a caller-supplied gain (covariance still propagated).
FilterState kalman_step_with_gain(const StateSpaceModel& model, const FilterState& state, const Tensor& x_t,
                                  const Tensor& s_prev, const Tensor& gain);

/// Posterior means for a whole trajectory, [T x n].
Tensor kalman_filter(const StateSpaceModel& model, const Trajectory& traj);
/// Gain sequence L_1..L_T; it depends only on the model, not on the data.
std::vector<Tensor> kalman_gains(const StateSpaceModel& model, std::size_t T);

/// Mean over time and trajectories of ||z_hat_t - z_t||^2 / n.
double state_mse(const Tensor& estimates, const Tensor& truth);

/// Backward Riccati over `horizon` steps; gains[t] applies at step t.
std::vector<Tensor> lqr_gains(const StateSpaceModel& model, std::size_t horizon);
/// Fixed point of the Riccati map. Throws NumericalError after `max_iter`.
Tensor lqr_stationary_gain(const StateSpaceModel& model, double tol = 1e-13, int max_iter = 10000);
/// Stationary Riccati solution paired with lqr_stationary_gain.
Tensor lqr_stationary_cost(const StateSpaceModel& model, double tol = 1e-13, int max_iter = 10000);

/// -K z_hat.
Tensor lqg_action(const Tensor& gain, const FilterState& state);

/// Kalman filter plus state feedback as a Policy; stationary gain when
/// `horizon` is 0, otherwise time-varying finite-horizon gains.
Policy lqg_policy(const StateSpaceModel& model, std::size_t horizon = 0);

/// (1/T) sum_t z_t^T Q z_t + s_t^T R s_t along a trajectory.
double quadratic_cost(const StateSpaceModel& model, const Trajectory& traj);

struct MpcForecast {
  std::optional<Tensor> v_hat;  // [H x n] process disturbance forecast
  std::optional<Tensor> w_hat;  // [H x q] observation forecast (does not enter the state cost)
};

/// Minimize sum_{tau=1..H} z^T Q z + sum_{tau=0..H-1} s^T R s subject to
/// z+ = A z + B s + v_hat from z = z_hat. Returns the H planned actions [H x p].
Tensor mpc_plan(const StateSpaceModel& model, const Tensor& z_hat, std::size_t H, const MpcForecast& forecast = {});
/// Receding horizon: Kalman filter plus the first planned action each step.
Policy mpc_policy(const StateSpaceModel& model, std::size_t H);

/// Trajectory dataset: inputs [N x T x q], targets [N x T x n], actions on the side.
struct TrajectoryDataset {
  Dataset data;
  Tensor actions;  // [N x T x p]
  std::size_t T = 0;

  Trajectory trajectory(std::size_t i) const;
};

/// Entries [i, t, :] of an [N x T x d] tensor for i in idx, as columns [d x |idx|].
Tensor time_slice(const Tensor& stacked, std::span<const std::size_t> idx, std::size_t t);

TrajectoryDataset gen_trajectory_dataset(const StateSpaceModel& model, std::size_t T, std::size_t N,
                                         const Policy& policy, std::uint64_t seed);
/// Policy factory so every trajectory gets a fresh controller.
TrajectoryDataset gen_trajectory_dataset(const StateSpaceModel& model, std::size_t T, std::size_t N,
                                         const std::function<Policy()>& policy_factory, std::uint64_t seed);

/// Batched, differentiable Kalman filter for fit_covariances.
struct CovarianceFit {
  Tensor V;
  Tensor W;
  TrainResult report;
};

/// Learn V, W = L L^T + eps I by BPTT through the filter on labelled trajectories.
/// `model` supplies A, B, C, z0, P0 and the initial V, W.
CovarianceFit fit_covariances(const StateSpaceModel& model, const TrajectoryDataset& data, const TrainConfig& config);

/// Packed Cholesky factors of (V, W) and the loss/gradient used by fit_covariances.
std::vector<Tensor> pack_covariances(const Tensor& V, const Tensor& W);
std::pair<Tensor, Tensor> unpack_covariances(const std::vector<Tensor>& packed);
double covariance_loss(const StateSpaceModel& model, const std::vector<Tensor>& packed, const TrajectoryDataset& data,
                       std::span<const std::size_t> idx, std::vector<Tensor>* grads);

/// Differentiable filter pass over a batch: X [q x B] per step from the trajectory set.
/// Returns the summed squared state error; `gains` may be supplied per step.
ad::Var filter_error_on_tape(ad::Tape& tape, const StateSpaceModel& model, const ad::Var& V, const ad::Var& W,
                             const TrajectoryDataset& data, std::span<const std::size_t> idx);

}  // namespace mbdl
