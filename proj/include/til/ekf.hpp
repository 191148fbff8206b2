#pragma once

// Benchmark estimator: EKF on a dynamic single-track model whose tire forces
// are carried as random-walk states.
//
// State  [v_x, v_y, omega_z, F_x, F_yf, F_yr]   (m/s, m/s, rad/s, N, N, N)
// Output [a_x, a_y, omega_z, v_x]               (m/s^2, m/s^2, rad/s, m/s)
// The v_x pseudo-measurement is the wheel radius times the mean rear encoder.

#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "til/bayes_opt.hpp"
#include "til/dataset.hpp"
#include "til/observer.hpp"

namespace til {

inline constexpr int kEkfStates = 6;
inline constexpr int kEkfOutputs = 4;
using EkfVector = Eigen::Matrix<double, kEkfStates, 1>;
using EkfMatrix = Eigen::Matrix<double, kEkfStates, kEkfStates>;
using EkfOutput = Eigen::Matrix<double, kEkfOutputs, 1>;
using EkfOutputMatrix = Eigen::Matrix<double, kEkfOutputs, kEkfStates>;

enum EkfIndex : int { kEkfVx = 0, kEkfVy, kEkfWz, kEkfFx, kEkfFyf, kEkfFyr };

/// Identified single-track parameters.
struct EkfVehicle {
  double mass = 1450.0;
  double yaw_inertia = 2300.0;
  double a = 1.30;
  double b = 1.45;
  double drag_coeff = 0.42;     // drag force = c v_x |v_x|
  double rolling_coeff = 0.012; // rolling force = c m g, opposing forward motion
  double wheel_radius = 0.33;

  static EkfVehicle from(const VehicleParams& p);
};

struct EkfConfig {
  EkfVehicle vehicle{};
  EkfVector q;   // process noise variances
  EkfOutput r;   // measurement noise variances
  EkfVector p0;  // initial covariance diagonal
  double dt = kSamplePeriod;

  /// Physically motivated starting point.
  static EkfConfig defaults(const VehicleParams& twin = VehicleParams{});
  /// Throws std::invalid_argument unless Q, R, P0 are strictly positive and finite.
  void validate() const;
};

/// Discrete process model x+ = x + dt f(x, delta).
EkfVector ekf_process(const EkfVector& x, double delta, const EkfConfig& c);
EkfMatrix ekf_process_jacobian(const EkfVector& x, double delta, const EkfConfig& c);
EkfOutput ekf_measurement(const EkfVector& x, double delta, const EkfConfig& c);
EkfOutputMatrix ekf_measurement_jacobian(const EkfVector& x, double delta, const EkfConfig& c);

/// [a_x, a_y, omega_z in rad/s, r_w * mean(rear encoders)] from a sensor sample.
EkfOutput ekf_observation(const SensorOutput& y, const EkfConfig& c);

struct EkfStepResult {
  EkfVector x;
  EkfMatrix p;
  Eigen::Matrix<double, kEkfStates, kEkfOutputs> gain;
  bool ok = true;  // false when the innovation covariance could not be factored
};

/// Predict with the steering angle, then update with z (Joseph form).
EkfStepResult ekf_step(const EkfVector& x, const EkfMatrix& p, const EkfConfig& c, double delta,
                       const EkfOutput& z);

struct EkfRunOptions {
  double vx_offset = 2.0;  // m/s, same initial error as the observer
  bool keep_trajectory = false;
  bool keep_gains = false;
};

struct EkfRun {
  ObserverRun summary;  // wheel speeds in the estimate are not estimated (NaN)
  std::vector<EkfVector> states;
  std::vector<double> gain_norm;  // Frobenius norm of the Kalman gain per sample
};

/// Initial state: true v_x + offset, true v_y and omega_z, forces from the
/// first accelerometer sample.
EkfVector ekf_initial_state(const Dataset& data, const EkfConfig& c, double vx_offset);

EkfRun run_ekf(const Dataset& data, const EkfConfig& c, const EkfRunOptions& opt = {});

/// rms(v_x) [km/h] + rms(beta) [deg] + rms(omega_z) [deg/s]; +inf if unstable.
double ekf_loss(const ObserverRun& run);

struct EkfTuneOptions {
  std::size_t budget = 150;
  std::size_t n_seed = 50;
  std::size_t workers = 2;
  std::uint64_t seed = 0;
  double decades = 4.0;  // log10 half-width of the box around the base diagonals
  double vx_offset = 2.0;  // m/s, initial estimate error
  BoSettings bo{};
};

struct EkfTuneResult {
  EkfConfig config;
  double loss = 0.0;
  double base_loss = 0.0;
  bool used_base = false;  // the base configuration beat every evaluation
  BoResult bo;
  OptimizationProblem problem;  // evaluate left empty
};

/// Tunes the Q and R diagonals in log10 space around `base`.
EkfTuneResult tune_qr(const Dataset& data, const EkfConfig& base, const EkfTuneOptions& opt = {});

/// Config with Q, R multiplied by 10^v (v: 6 + 4 log10 factors).
EkfConfig scaled_config(const EkfConfig& base, const Eigen::VectorXd& log10_factors);

}  // namespace til
