#pragma once

// Twin-in-the-loop observer: the twin predicts, a constant gain corrects four
// states from selected output errors.
//
// Units of the correction: the output error uses SensorOutput units (gyro in
// deg/s, encoders in rad/s, accelerations in m/s^2). The corrected states are
// taken in reporting units: v_x in km/h, omega_z in deg/s, wheel speeds in
// rad/s. Gains are therefore dimensionless for the auto-correlated entries.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "til/dataset.hpp"
#include "til/vehicle.hpp"

namespace til {

enum CorrectedState : std::size_t { kCorrVx = 0, kCorrWz, kCorrWfl, kCorrWrr };
inline constexpr std::size_t kNumCorrected = 4;

/// "vx", "wz", "wfl", "wrr".
std::string_view corrected_state_name(std::size_t row);
/// Short label of an output channel used in gain ids: "wz", "wfl", "ax", ...
std::string output_label(OutputChannel c);
/// Gain id in output->state form, e.g. "wfl->vx".
std::string gain_id(OutputChannel column, std::size_t row);

using BoolMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

struct GainError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Correction matrix K: rows are the corrected states, columns the output
/// channels. Inactive entries are exactly zero.
struct GainMatrix {
  std::vector<OutputChannel> channels;
  Eigen::MatrixXd entries;
  BoolMatrix mask;
  Eigen::MatrixXd lower;
  Eigen::MatrixXd upper;

  /// All-zero gain over the given channels, full mask, bounds [0, 0].
  static GainMatrix zeros(std::vector<OutputChannel> channels);

  /// Columns {wz, enc_fl, enc_rr}; bounds from the default range table.
  static GainMatrix case_study();

  std::size_t rows() const { return kNumCorrected; }
  std::size_t cols() const { return channels.size(); }
  std::size_t active_count() const;

  /// Throws GainError on shape mismatch, a nonzero masked entry, an active
  /// entry outside its bounds, or lower > upper.
  void validate() const;

  /// Active entries, row-major order, and their ids / bounds in the same order.
  Eigen::VectorXd active_vector() const;
  std::vector<std::string> active_ids() const;
  Eigen::VectorXd active_lower() const;
  Eigen::VectorXd active_upper() const;
  void set_active(const Eigen::VectorXd& v);

  /// Copy with a new mask; newly masked entries are zeroed.
  GainMatrix with_mask(const BoolMatrix& m) const;
};

/// K_red acting on T e_y. `map` is the effective n_red x n_y matrix (it may
/// include a per-channel scaling); `entries` is n_corrected x n_red.
struct ReducedGain {
  std::vector<OutputChannel> channels;
  Eigen::MatrixXd map;
  Eigen::MatrixXd entries;
  Eigen::MatrixXd lower;
  Eigen::MatrixXd upper;

  std::size_t reduced_dim() const { return static_cast<std::size_t>(map.rows()); }
  void validate() const;
  Eigen::MatrixXd effective() const { return entries * map; }

  Eigen::VectorXd flat() const;  // row-major
  void set_flat(const Eigen::VectorXd& v);
  Eigen::VectorXd flat_lower() const;
  Eigen::VectorXd flat_upper() const;
};

/// Dense correction used by the loop.
struct Correction {
  std::vector<OutputChannel> channels;
  Eigen::MatrixXd gain;  // kNumCorrected x channels

  static Correction from(const GainMatrix& k);
  static Correction from(const ReducedGain& k);
};

/// One observer sample: predict with the twin, compare the predicted outputs
/// with y, correct the four states. std::nullopt when the twin diverges.
std::optional<VehicleState> observer_step(const VehicleState& x_hat_prev, const DriverInput& u,
                                          const SensorOutput& y, const Correction& k,
                                          const VehicleParams& twin = VehicleParams{});
std::optional<VehicleState> observer_step(const VehicleState& x_hat_prev, const DriverInput& u,
                                          const SensorOutput& y, const GainMatrix& k,
                                          const VehicleParams& twin = VehicleParams{});

/// True when a state trips one of the divergence thresholds.
bool diverged(const VehicleState& s);

struct ObserverRun {
  std::vector<VehicleState> estimate;  // empty unless requested
  double rmse_vx = 0.0;    // km/h
  double rmse_wz = 0.0;    // deg/s
  double rmse_beta = 0.0;  // deg, diagnostic
  bool stable = true;
  std::size_t diverged_at = 0;  // first divergent sample when !stable
  double wall_time = 0.0;  // s
};

struct ObserverOptions {
  VehicleParams twin{};
  bool keep_trajectory = false;
};

/// Initial estimate: ground-truth first state with v_x offset by `vx_offset` m/s.
VehicleState perturbed_initial_state(const Dataset& data, double vx_offset = 2.0);

ObserverRun run_observer(const Dataset& data, const Correction& k, const VehicleState& x0,
                         const ObserverOptions& opt = {});
ObserverRun run_observer(const Dataset& data, const GainMatrix& k, const VehicleState& x0,
                         const ObserverOptions& opt = {});
ObserverRun run_observer(const Dataset& data, const ReducedGain& k, const VehicleState& x0,
                         const ObserverOptions& opt = {});

/// rms(v_x) [km/h] + rms(omega_z) [deg/s]; +inf for an unstable run.
double evaluate_loss(const ObserverRun& run);

/// Root mean square; +inf for an empty series.
double rms(const std::vector<double>& e);

struct Sideslip {
  double beta_deg = 0.0;
  bool low_speed = false;
};
Sideslip sideslip(const VehicleState& s, double speed_floor = 0.5);

/// Scalar random-walk surrogate x(t) = x(t-1) + w(t) observed exactly and
/// tracked by x_hat(t) = x_hat(t-1) + k (x(t) - x_hat(t-1)).
struct ScalarSurrogate {
  std::vector<double> error;
  bool diverged = false;
};
ScalarSurrogate scalar_surrogate(double k, std::size_t steps = 1000, std::uint64_t seed = 1,
                                 double initial_error = 1.0);

/// `<prefix>.csv` with estimated vs true trajectories and `<prefix>.json` summary.
/// Requires a run made with keep_trajectory.
void write_observer_run(const ObserverRun& run, const Dataset& data,
                        const std::filesystem::path& prefix);

}  // namespace til
