#include "til/ekf.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <Eigen/Dense>

namespace til {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kRollingWidth = 0.5;  // m/s, smooths the rolling-resistance sign

double resistance(double vx, const EkfVehicle& v) {
  return v.drag_coeff * vx * std::abs(vx) + v.rolling_coeff * v.mass * kGravity * std::tanh(vx / kRollingWidth);
}

double resistance_dvx(double vx, const EkfVehicle& v) {
  const double th = std::tanh(vx / kRollingWidth);
  return 2.0 * v.drag_coeff * std::abs(vx) + v.rolling_coeff * v.mass * kGravity * (1.0 - th * th) / kRollingWidth;
}

bool ekf_diverged(const EkfVector& x) {
  return !x.allFinite() || std::abs(x(kEkfVx)) > kMaxSpeed || std::abs(x(kEkfWz)) > kMaxYawRate;
}

}  // namespace

EkfVehicle EkfVehicle::from(const VehicleParams& p) {
  return {p.mass, p.yaw_inertia, p.a, p.b, p.drag_coeff, p.rolling_coeff, p.wheel_radius};
}

EkfConfig EkfConfig::defaults(const VehicleParams& twin) {
  EkfConfig c;
  c.vehicle = EkfVehicle::from(twin);
  c.q << 1e-4, 1e-4, 1e-5, 1e4, 1e4, 1e4;
  c.r << 0.04, 0.04, 1.2e-5, 0.04;
  c.p0 << 1.0, 1.0, 0.01, 1e6, 1e6, 1e6;
  return c;
}

void EkfConfig::validate() const {
  const auto positive = [](const auto& v) { return v.allFinite() && (v.array() > 0.0).all(); };
  if (!positive(q)) throw std::invalid_argument("EKF process covariance must be positive");
  if (!positive(r)) throw std::invalid_argument("EKF measurement covariance must be positive");
  if (!positive(p0)) throw std::invalid_argument("EKF initial covariance must be positive");
  if (!(dt > 0.0)) throw std::invalid_argument("EKF time step must be positive");
  const EkfVehicle& v = vehicle;
  if (!(v.mass > 0.0 && v.yaw_inertia > 0.0 && v.a > 0.0 && v.b > 0.0 && v.drag_coeff >= 0.0 &&
        v.rolling_coeff >= 0.0 && v.wheel_radius > 0.0)) {
    throw std::invalid_argument("EKF vehicle parameters must be positive");
  }
}

EkfVector ekf_process(const EkfVector& x, double delta, const EkfConfig& c) {
  const EkfVehicle& v = c.vehicle;
  const double sd = std::sin(delta);
  const double cd = std::cos(delta);
  EkfVector f = EkfVector::Zero();
  f(kEkfVx) = (x(kEkfFx) - x(kEkfFyf) * sd - resistance(x(kEkfVx), v)) / v.mass + x(kEkfVy) * x(kEkfWz);
  f(kEkfVy) = (x(kEkfFyf) * cd + x(kEkfFyr)) / v.mass - x(kEkfVx) * x(kEkfWz);
  f(kEkfWz) = (v.a * x(kEkfFyf) * cd - v.b * x(kEkfFyr)) / v.yaw_inertia;
  return x + c.dt * f;
}

EkfMatrix ekf_process_jacobian(const EkfVector& x, double delta, const EkfConfig& c) {
  const EkfVehicle& v = c.vehicle;
  const double sd = std::sin(delta);
  const double cd = std::cos(delta);
  EkfMatrix j = EkfMatrix::Zero();
  j(kEkfVx, kEkfVx) = -resistance_dvx(x(kEkfVx), v) / v.mass;
  j(kEkfVx, kEkfVy) = x(kEkfWz);
  j(kEkfVx, kEkfWz) = x(kEkfVy);
  j(kEkfVx, kEkfFx) = 1.0 / v.mass;
  j(kEkfVx, kEkfFyf) = -sd / v.mass;
  j(kEkfVy, kEkfVx) = -x(kEkfWz);
  j(kEkfVy, kEkfWz) = -x(kEkfVx);
  j(kEkfVy, kEkfFyf) = cd / v.mass;
  j(kEkfVy, kEkfFyr) = 1.0 / v.mass;
  j(kEkfWz, kEkfFyf) = v.a * cd / v.yaw_inertia;
  j(kEkfWz, kEkfFyr) = -v.b / v.yaw_inertia;
  return EkfMatrix::Identity() + c.dt * j;
}

EkfOutput ekf_measurement(const EkfVector& x, double delta, const EkfConfig& c) {
  const EkfVehicle& v = c.vehicle;
  EkfOutput z;
  z(0) = (x(kEkfFx) - x(kEkfFyf) * std::sin(delta) - resistance(x(kEkfVx), v)) / v.mass;
  z(1) = (x(kEkfFyf) * std::cos(delta) + x(kEkfFyr)) / v.mass;
  z(2) = x(kEkfWz);
  z(3) = x(kEkfVx);
  return z;
}

EkfOutputMatrix ekf_measurement_jacobian(const EkfVector& x, double delta, const EkfConfig& c) {
  const EkfVehicle& v = c.vehicle;
  EkfOutputMatrix h = EkfOutputMatrix::Zero();
  h(0, kEkfVx) = -resistance_dvx(x(kEkfVx), v) / v.mass;
  h(0, kEkfFx) = 1.0 / v.mass;
  h(0, kEkfFyf) = -std::sin(delta) / v.mass;
  h(1, kEkfFyf) = std::cos(delta) / v.mass;
  h(1, kEkfFyr) = 1.0 / v.mass;
  h(2, kEkfWz) = 1.0;
  h(3, kEkfVx) = 1.0;
  return h;
}

EkfOutput ekf_observation(const SensorOutput& y, const EkfConfig& c) {
  EkfOutput z;
  z(0) = y[OutputChannel::kAx];
  z(1) = y[OutputChannel::kAy];
  z(2) = y[OutputChannel::kGyroZ] * kDegToRad;
  z(3) = c.vehicle.wheel_radius * 0.5 * (y[OutputChannel::kEncRL] + y[OutputChannel::kEncRR]);
  return z;
}

EkfStepResult ekf_step(const EkfVector& x, const EkfMatrix& p, const EkfConfig& c, double delta,
                       const EkfOutput& z) {
  EkfStepResult out;
  const EkfMatrix f = ekf_process_jacobian(x, delta, c);
  const EkfVector xp = ekf_process(x, delta, c);
  EkfMatrix pp = f * p * f.transpose();
  pp.diagonal() += c.q;

  const EkfOutputMatrix h = ekf_measurement_jacobian(xp, delta, c);
  Eigen::Matrix4d s = h * pp * h.transpose();
  s.diagonal() += c.r;
  const Eigen::LLT<Eigen::Matrix4d> llt(s);
  if (llt.info() != Eigen::Success) {
    out.x = xp;
    out.p = pp;
    out.gain.setZero();
    out.ok = false;
    return out;
  }
  // K = P H' S^-1
  out.gain = llt.solve(h * pp).transpose();
  out.x = xp + out.gain * (z - ekf_measurement(xp, delta, c));
  const EkfMatrix a = EkfMatrix::Identity() - out.gain * h;
  out.p = a * pp * a.transpose() + out.gain * c.r.asDiagonal() * out.gain.transpose();
  out.p = 0.5 * (out.p + out.p.transpose());
  return out;
}

EkfVector ekf_initial_state(const Dataset& data, const EkfConfig& c, double vx_offset) {
  const VehicleState& s = data.x_meas.front();
  const SensorOutput& y = data.y_meas.front();
  const EkfVehicle& v = c.vehicle;
  EkfVector x;
  x(kEkfVx) = s.vx + vx_offset;
  x(kEkfVy) = s.vy;
  x(kEkfWz) = s.wz;
  x(kEkfFx) = v.mass * y[OutputChannel::kAx] + resistance(x(kEkfVx), v);
  const double fy = v.mass * y[OutputChannel::kAy];
  x(kEkfFyf) = fy * v.b / (v.a + v.b);
  x(kEkfFyr) = fy * v.a / (v.a + v.b);
  return x;
}

EkfRun run_ekf(const Dataset& data, const EkfConfig& c, const EkfRunOptions& opt) {
  data.validate();
  c.validate();
  const auto t0 = std::chrono::steady_clock::now();
  EkfRun out;
  ObserverRun& run = out.summary;

  EkfVector x = ekf_initial_state(data, c, opt.vx_offset);
  EkfMatrix p = c.p0.asDiagonal();
  std::vector<double> evx;
  std::vector<double> ewz;
  std::vector<double> ebeta;
  const std::size_t n = data.size();
  evx.reserve(n);
  ewz.reserve(n);
  ebeta.reserve(n);
  const double nan = std::numeric_limits<double>::quiet_NaN();

  for (std::size_t t = 0; t < n; ++t) {
    if (t > 0) {
      const EkfStepResult r = ekf_step(x, p, c, data.u[t].delta, ekf_observation(data.y_meas[t], c));
      x = r.x;
      p = r.p;
      if (opt.keep_gains) out.gain_norm.push_back(r.gain.norm());
      if (!r.ok || ekf_diverged(x)) {
        run.stable = false;
        run.diverged_at = t;
        break;
      }
    }
    const VehicleState& g = data.x_meas[t];
    VehicleState e;
    e.vx = x(kEkfVx);
    e.vy = x(kEkfVy);
    e.wz = x(kEkfWz);
    e.wheel.fill(nan);
    evx.push_back((e.vx - g.vx) * kMsToKmh);
    ewz.push_back((e.wz - g.wz) * kRadToDeg);
    ebeta.push_back(sideslip(e).beta_deg - sideslip(g).beta_deg);
    if (opt.keep_trajectory) {
      out.states.push_back(x);
      run.estimate.push_back(e);
    }
  }
  if (run.stable) {
    run.rmse_vx = rms(evx);
    run.rmse_wz = rms(ewz);
    run.rmse_beta = rms(ebeta);
  } else {
    run.rmse_vx = run.rmse_wz = run.rmse_beta = kInf;
  }
  run.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

double ekf_loss(const ObserverRun& run) {
  if (!run.stable) return kInf;
  return run.rmse_vx + run.rmse_beta + run.rmse_wz;
}

EkfConfig scaled_config(const EkfConfig& base, const Eigen::VectorXd& f) {
  if (f.size() != kEkfStates + kEkfOutputs) throw std::invalid_argument("expected 10 log10 factors");
  EkfConfig c = base;
  for (int i = 0; i < kEkfStates; ++i) c.q(i) = base.q(i) * std::pow(10.0, f(i));
  for (int i = 0; i < kEkfOutputs; ++i) c.r(i) = base.r(i) * std::pow(10.0, f(kEkfStates + i));
  return c;
}

EkfTuneResult tune_qr(const Dataset& data, const EkfConfig& base, const EkfTuneOptions& opt) {
  base.validate();
  if (opt.budget < 50) throw std::invalid_argument("EKF tuning needs a budget of at least 50");
  if (!(opt.decades > 0.0)) throw std::invalid_argument("EKF tuning box must have positive width");
  OptimizationProblem p;
  const int d = kEkfStates + kEkfOutputs;
  p.lower = Eigen::VectorXd::Constant(d, -opt.decades);
  p.upper = Eigen::VectorXd::Constant(d, opt.decades);
  p.variable_names = {"log_q_vx", "log_q_vy", "log_q_wz", "log_q_fx", "log_q_fyf", "log_q_fyr",
                      "log_r_ax", "log_r_ay", "log_r_wz", "log_r_vx"};
  p.constraint_names = {"stability"};
  p.budget = opt.budget;
  p.n_seed = opt.n_seed;
  p.workers = opt.workers;
  p.seed = opt.seed;
  EkfRunOptions ro;
  ro.vx_offset = opt.vx_offset;
  p.evaluate = [&](const Eigen::VectorXd& v) {
    const ObserverRun r = run_ekf(data, scaled_config(base, v), ro).summary;
    return EvalResult{ekf_loss(r), {r.stable ? -1.0 : 1.0}};
  };

  EkfTuneResult out;
  out.bo = run_parallel_bo(p, opt.bo);
  out.config = scaled_config(base, out.bo.best_point);
  out.loss = out.bo.best_value;
  out.base_loss = ekf_loss(run_ekf(data, base, ro).summary);
  if (out.base_loss < out.loss) {
    out.config = base;
    out.loss = out.base_loss;
    out.used_base = true;
  }
  p.evaluate = nullptr;
  out.problem = std::move(p);
  return out;
}

}  // namespace til
