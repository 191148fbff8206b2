#include "til/vehicle.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace til {

namespace {

constexpr std::array<std::string_view, kNumOutputs> kChannelNames = {
    "a_x", "a_y", "a_z", "wx", "wy", "wz", "enc_fl", "enc_fr", "enc_rl", "enc_rr"};

constexpr int kMaxSubsteps = 256;
// RK4 is stable up to h * lambda ~ 2.78 on the negative real axis.
constexpr double kStabilityMargin = 2.0;

double magic_formula(double slip, const TireParams& t) {
  return t.D * std::sin(t.C * std::atan(t.B * slip));
}

struct WheelGeometry {
  double x;
  double y;
  bool front;
};

std::array<WheelGeometry, kNumWheels> wheel_geometry(const VehicleParams& p) {
  return {{{p.a, p.half_track, true},
           {p.a, -p.half_track, true},
           {-p.b, p.half_track, false},
           {-p.b, -p.half_track, false}}};
}

// Static vertical load per wheel.
double wheel_load(const VehicleParams& p, bool front) {
  const double axle = front ? p.b : p.a;
  return p.mass * kGravity * axle / (2.0 * p.wheelbase());
}

double wheel_torque(const DriverInput& u, const VehicleParams& p, std::size_t w, double omega) {
  const bool front = (w == kFL || w == kFR);
  const double drive_share = front ? 1.0 - p.drive_rear_fraction : p.drive_rear_fraction;
  const double brake_share = front ? p.brake_front_fraction : 1.0 - p.brake_front_fraction;
  const double drive = 0.5 * drive_share * u.tau_drive;
  const double brake = 0.5 * brake_share * u.tau_brake;
  return drive - brake * std::tanh(omega / p.brake_smoothing);
}

}  // namespace

VehicleState::Vector VehicleState::to_vector() const {
  Vector v;
  v << x, y, psi, vx, vy, wz, wheel[kFL], wheel[kFR], wheel[kRL], wheel[kRR];
  return v;
}

VehicleState VehicleState::from_vector(const Vector& v) {
  VehicleState s;
  s.x = v(0);
  s.y = v(1);
  s.psi = v(2);
  s.vx = v(3);
  s.vy = v(4);
  s.wz = v(5);
  for (std::size_t w = 0; w < kNumWheels; ++w) s.wheel[w] = v(6 + static_cast<Eigen::Index>(w));
  return s;
}

bool VehicleState::finite() const { return to_vector().allFinite(); }

std::string_view channel_name(OutputChannel c) { return kChannelNames[static_cast<std::size_t>(c)]; }

std::optional<OutputChannel> parse_channel(std::string_view name) {
  for (std::size_t i = 0; i < kNumOutputs; ++i) {
    if (kChannelNames[i] == name) return static_cast<OutputChannel>(i);
  }
  return std::nullopt;
}

void VehicleParams::validate() const {
  const auto require = [](double v, const char* what) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw std::invalid_argument(std::string("vehicle parameter must be positive: ") + what);
    }
  };
  require(mass, "mass");
  require(yaw_inertia, "yaw_inertia");
  require(a, "a");
  require(b, "b");
  require(half_track, "half_track");
  require(wheel_radius, "wheel_radius");
  require(wheel_inertia, "wheel_inertia");
  for (const TireParams* t : {&front, &rear}) {
    require(t->B, "tire B");
    require(t->C, "tire C");
    require(t->D, "tire D");
  }
  require(drag_coeff, "drag_coeff");
  require(rolling_coeff, "rolling_coeff");
  require(speed_floor, "speed_floor");
  require(brake_smoothing, "brake_smoothing");
}

VehicleParams MismatchPreset::apply(const VehicleParams& nominal) const {
  VehicleParams p = nominal;
  p.mass *= mass_scale;
  p.front.D *= tire_peak_scale;
  p.rear.D *= tire_peak_scale;
  p.drag_coeff *= drag_scale;
  p.rolling_coeff *= rolling_scale;
  return p;
}

double longitudinal_slip(double wheel_speed, double wheel_radius, double v_long, double speed_floor) {
  const double denom = std::max(std::abs(v_long), speed_floor);
  return std::clamp((wheel_speed * wheel_radius - v_long) / denom, -1.0, 1.0);
}

ForceBalance compute_forces(const VehicleState& s, const DriverInput& u, const VehicleParams& p) {
  ForceBalance out;
  const double cd = std::cos(u.delta);
  const double sd = std::sin(u.delta);
  const auto geometry = wheel_geometry(p);

  for (std::size_t w = 0; w < kNumWheels; ++w) {
    const WheelGeometry& g = geometry[w];
    const TireParams& tire = g.front ? p.front : p.rear;
    const double c = g.front ? cd : 1.0;
    const double sn = g.front ? sd : 0.0;

    // Contact-point velocity, body frame then wheel frame.
    const double vxb = s.vx - s.wz * g.y;
    const double vyb = s.vy + s.wz * g.x;
    const double v_long = vxb * c + vyb * sn;
    const double v_lat = -vxb * sn + vyb * c;
    const double denom = std::max(std::abs(v_long), p.speed_floor);

    const double kappa = longitudinal_slip(s.wheel[w], p.wheel_radius, v_long, p.speed_floor);
    const double alpha = std::atan(v_lat / denom);

    const double fz = wheel_load(p, g.front);
    double fx = fz * magic_formula(kappa, tire);
    double fy = -fz * magic_formula(alpha, tire);

    // Friction ellipse: combined force may not exceed the peak.
    const double peak = tire.D * fz;
    const double ratio = std::hypot(fx, fy) / peak;
    if (ratio > 1.0) {
      fx /= ratio;
      fy /= ratio;
    }

    const double fxb = fx * c - fy * sn;
    const double fyb = fx * sn + fy * c;
    out.fx += fxb;
    out.fy += fyb;
    out.mz += g.x * fyb - g.y * fxb;
    out.tire_fx[w] = fx;
    out.slip[w] = kappa;
    out.slip_angle[w] = alpha;
  }

  const double drag = p.drag_coeff * s.vx * std::abs(s.vx);
  const double rolling = p.rolling_coeff * p.mass * kGravity * std::tanh(s.vx / p.speed_floor);
  out.fx -= drag + rolling;
  return out;
}

VehicleState::Vector state_derivative(const VehicleState& s, const DriverInput& u,
                                      const VehicleParams& p) {
  const ForceBalance f = compute_forces(s, u, p);
  const double cpsi = std::cos(s.psi);
  const double spsi = std::sin(s.psi);

  VehicleState::Vector d;
  d(0) = s.vx * cpsi - s.vy * spsi;
  d(1) = s.vx * spsi + s.vy * cpsi;
  d(2) = s.wz;
  d(3) = f.fx / p.mass + s.vy * s.wz;
  d(4) = f.fy / p.mass - s.vx * s.wz;
  d(5) = f.mz / p.yaw_inertia;
  for (std::size_t w = 0; w < kNumWheels; ++w) {
    const double torque = wheel_torque(u, p, w, s.wheel[w]) - f.tire_fx[w] * p.wheel_radius;
    d(6 + static_cast<Eigen::Index>(w)) = torque / p.wheel_inertia;
  }
  return d;
}

int substep_count(const VehicleState& s, const DriverInput& u, const VehicleParams& p, double dt) {
  // Upper bound on the magnitude of the fastest eigenvalue: wheel spin under
  // linear slip stiffness, brake-torque sign transition, and lateral slip.
  const auto geometry = wheel_geometry(p);
  double lambda = 0.0;
  double lateral = 0.0;
  const double speed = std::max(std::abs(s.vx), p.speed_floor);
  for (std::size_t w = 0; w < kNumWheels; ++w) {
    const WheelGeometry& g = geometry[w];
    const TireParams& tire = g.front ? p.front : p.rear;
    const double stiffness = tire.B * tire.C * tire.D * wheel_load(p, g.front);
    const double v_long = std::max(std::abs(s.vx - s.wz * g.y), p.speed_floor);
    double spin = stiffness * p.wheel_radius * p.wheel_radius / (p.wheel_inertia * v_long);

    const bool front = g.front;
    const double brake_share = front ? p.brake_front_fraction : 1.0 - p.brake_front_fraction;
    const double brake = 0.5 * brake_share * std::abs(u.tau_brake);
    const double sech = 1.0 / std::cosh(s.wheel[w] / p.brake_smoothing);
    spin += brake * sech * sech / (p.brake_smoothing * p.wheel_inertia);
    lambda = std::max(lambda, spin);

    lateral += stiffness * (1.0 / p.mass + g.x * g.x / p.yaw_inertia) / speed;
  }
  lambda = std::max(lambda, lateral);
  const double n = std::ceil(dt * lambda / kStabilityMargin);
  if (!std::isfinite(n)) return kMaxSubsteps;
  return std::clamp(static_cast<int>(n), 1, kMaxSubsteps);
}

std::optional<VehicleState> twin_step(const VehicleState& s, const DriverInput& u,
                                      const VehicleParams& p, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("twin_step: dt must be positive");
  if (!s.finite()) return std::nullopt;

  const int n = substep_count(s, u, p, dt);
  const double h = dt / n;
  VehicleState::Vector x = s.to_vector();
  for (int i = 0; i < n; ++i) {
    const auto eval = [&](const VehicleState::Vector& v) {
      return state_derivative(VehicleState::from_vector(v), u, p);
    };
    const VehicleState::Vector k1 = eval(x);
    const VehicleState::Vector k2 = eval(x + 0.5 * h * k1);
    const VehicleState::Vector k3 = eval(x + 0.5 * h * k2);
    const VehicleState::Vector k4 = eval(x + h * k3);
    x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!x.allFinite() || std::abs(x(3)) > kMaxSpeed) return std::nullopt;
  }
  return VehicleState::from_vector(x);
}

SensorOutput twin_output(const VehicleState& state, const VehicleState& state_prev,
                         const DriverInput& u, const VehicleParams& p, [[maybe_unused]] double dt) {
  const ForceBalance now = compute_forces(state, u, p);
  const ForceBalance before = compute_forces(state_prev, u, p);

  SensorOutput y;
  y[OutputChannel::kAx] = 0.5 * (now.fx + before.fx) / p.mass;
  y[OutputChannel::kAy] = 0.5 * (now.fy + before.fy) / p.mass;
  y[OutputChannel::kAz] = -kGravity;
  y[OutputChannel::kGyroX] = 0.0;
  y[OutputChannel::kGyroY] = 0.0;
  y[OutputChannel::kGyroZ] = state.wz * kRadToDeg;
  y[OutputChannel::kEncFL] = state.wheel[kFL];
  y[OutputChannel::kEncFR] = state.wheel[kFR];
  y[OutputChannel::kEncRL] = state.wheel[kRL];
  y[OutputChannel::kEncRR] = state.wheel[kRR];
  return y;
}

VehicleState rolling_state(double vx, const VehicleParams& p) {
  VehicleState s;
  s.vx = vx;
  s.wheel.fill(vx / p.wheel_radius);
  return s;
}

}  // namespace til
