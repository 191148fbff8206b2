#pragma once

// Planar two-track vehicle model. The same model plays two roles: with
// nominal parameters it is the digital twin (prediction f and output h),
// with perturbed parameters plus sensor noise it is the synthetic plant.

#include <array>
#include <cstddef>
#include <optional>
#include <string_view>

#include <Eigen/Core>

#include "til/units.hpp"

namespace til {

enum Wheel : std::size_t { kFL = 0, kFR = 1, kRL = 2, kRR = 3 };
inline constexpr std::size_t kNumWheels = 4;

struct VehicleState {
  static constexpr std::size_t kDim = 10;
  using Vector = Eigen::Matrix<double, kDim, 1>;

  double x = 0.0;    // m
  double y = 0.0;    // m
  double psi = 0.0;  // rad
  double vx = 0.0;   // m/s, body frame
  double vy = 0.0;   // m/s, body frame
  double wz = 0.0;   // rad/s
  std::array<double, kNumWheels> wheel{};  // rad/s

  Vector to_vector() const;
  static VehicleState from_vector(const Vector& v);

  bool finite() const;
  double vx_kmh() const { return vx * kMsToKmh; }
  double wz_degs() const { return wz * kRadToDeg; }
};

struct DriverInput {
  double delta = 0.0;      // road-wheel steering angle, rad
  double tau_drive = 0.0;  // total drive torque, N m
  double tau_brake = 0.0;  // total brake torque, N m (>= 0)
};

inline constexpr double kMaxSteer = 0.6;

enum class OutputChannel : std::size_t {
  kAx = 0,
  kAy,
  kAz,
  kGyroX,
  kGyroY,
  kGyroZ,
  kEncFL,
  kEncFR,
  kEncRL,
  kEncRR,
};
inline constexpr std::size_t kNumOutputs = 10;

std::string_view channel_name(OutputChannel c);
std::optional<OutputChannel> parse_channel(std::string_view name);

/// Accelerometer in m/s^2, gyroscope in deg/s, encoders in rad/s.
struct SensorOutput {
  std::array<double, kNumOutputs> values{};

  double operator[](OutputChannel c) const { return values[static_cast<std::size_t>(c)]; }
  double& operator[](OutputChannel c) { return values[static_cast<std::size_t>(c)]; }
};

struct TireParams {
  double B = 11.0;  // stiffness factor
  double C = 1.6;   // shape factor
  double D = 1.05;  // peak friction coefficient (peak force = D * Fz)
};

struct VehicleParams {
  double mass = 1450.0;          // kg
  double yaw_inertia = 2300.0;   // kg m^2
  double a = 1.30;               // CoG to front axle, m
  double b = 1.45;               // CoG to rear axle, m
  double half_track = 0.80;      // m
  double wheel_radius = 0.33;    // m
  double wheel_inertia = 1.2;    // kg m^2, per wheel
  TireParams front{10.0, 1.6, 1.0};
  TireParams rear{12.0, 1.6, 1.1};
  double drag_coeff = 0.42;      // N s^2 / m^2, lumped 0.5 rho Cd A
  double rolling_coeff = 0.012;  // dimensionless

  // Drivetrain and numerical constants.
  double drive_rear_fraction = 1.0;
  double brake_front_fraction = 0.6;
  double speed_floor = 0.5;      // m/s, slip denominator guard
  double brake_smoothing = 0.5;  // rad/s, width of the brake-torque sign transition

  double wheelbase() const { return a + b; }

  /// Throws std::invalid_argument when a physical parameter is not positive.
  void validate() const;
};

/// Model mismatch applied to obtain the plant from the twin.
struct MismatchPreset {
  double mass_scale = 1.0;
  double tire_peak_scale = 1.0;
  double drag_scale = 1.0;
  double rolling_scale = 1.0;

  static MismatchPreset none() { return {}; }
  /// mass +8%, tire peak -12%, drag +20%, rolling resistance +15%.
  static MismatchPreset default_preset() { return {1.08, 0.88, 1.20, 1.15}; }

  VehicleParams apply(const VehicleParams& nominal) const;
};

/// Divergence limits shared by the twin step and the observer.
inline constexpr double kMaxSpeed = 200.0;      // m/s
inline constexpr double kMaxYawRate = 20.0;     // rad/s
inline constexpr double kMaxWheelSpeed = 500.0; // rad/s

/// Body-frame resultants of one force evaluation.
struct ForceBalance {
  double fx = 0.0;  // N, includes drag and rolling resistance
  double fy = 0.0;  // N
  double mz = 0.0;  // N m
  std::array<double, kNumWheels> tire_fx{};  // wheel-frame longitudinal tire force, N
  std::array<double, kNumWheels> slip{};     // longitudinal slip ratio in [-1, 1]
  std::array<double, kNumWheels> slip_angle{};
};

ForceBalance compute_forces(const VehicleState& s, const DriverInput& u, const VehicleParams& p);

/// Longitudinal slip ratio (omega r - v) / max(|v|, floor), saturated to [-1, 1].
double longitudinal_slip(double wheel_speed, double wheel_radius, double v_long, double speed_floor);

/// Continuous-time state derivative.
VehicleState::Vector state_derivative(const VehicleState& s, const DriverInput& u,
                                      const VehicleParams& p);

/// Number of RK4 substeps used for one sample of length dt from state s.
int substep_count(const VehicleState& s, const DriverInput& u, const VehicleParams& p, double dt);

/// One sample of the twin prediction f. Returns std::nullopt on divergence
/// (non-finite state or |v_x| above kMaxSpeed).
std::optional<VehicleState> twin_step(const VehicleState& s, const DriverInput& u,
                                      const VehicleParams& p, double dt = kSamplePeriod);

/// Noiseless twin output h. Accelerations are the body-frame specific force
/// from the force balance, averaged over the start and end of the sample.
SensorOutput twin_output(const VehicleState& state, const VehicleState& state_prev,
                         const DriverInput& u, const VehicleParams& p, double dt = kSamplePeriod);

/// State rolling freely at speed vx on a straight line.
VehicleState rolling_state(double vx, const VehicleParams& p);

}  // namespace til
