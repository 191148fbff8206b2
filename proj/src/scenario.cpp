#include "til/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include <yaml-cpp/yaml.h>

namespace til {

namespace {

// The driver never asks for more than this fraction of the static tire
// grip (traction control and ABS in one number).
constexpr double kGripUsage = 0.7;
constexpr double kSpeedKp = 1.5;             // 1/s
constexpr double kSpeedKi = 0.4;             // 1/s^2

// Raised-cosine ramp: 0 at s <= 0, 1 at s >= 1.
double ramp(double s) {
  s = std::clamp(s, 0.0, 1.0);
  return 0.5 - 0.5 * std::cos(std::numbers::pi * s);
}

struct Segment {
  double duration;
  double target_speed;
  double steer_peak;  // 0 for straights
};

std::vector<Segment> lap_segments(const ScenarioSpec& spec, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const auto vary = [&](double v) { return v * (1.0 + spec.jitter * unit(rng)); };
  const double wheelbase = VehicleParams{}.wheelbase();

  std::vector<Segment> segs;
  segs.push_back({vary(1.0), vary(spec.v_straight), 0.0});
  for (int i = 0; i < spec.turns; ++i) {
    const double v = vary(spec.v_corner);
    const double sign = (rng() & 1U) ? 1.0 : -1.0;
    const double steer = std::min(vary(spec.lat_accel) * wheelbase / (v * v), kMaxSteer);
    segs.push_back({vary(1.0), v, sign * steer});
    segs.push_back({vary(1.0), vary(spec.v_straight), 0.0});
  }
  double total = 0.0;
  for (const auto& s : segs) total += s.duration;
  for (auto& s : segs) s.duration *= spec.duration / total;
  return segs;
}

}  // namespace

SimulationDivergence::SimulationDivergence(std::string scenario, std::size_t sample_index)
    : std::runtime_error("plant diverged in scenario '" + scenario + "' at sample " +
                         std::to_string(sample_index)),
      sample(sample_index) {}

void ScenarioSpec::validate() const {
  const auto fail = [this](const std::string& what) {
    throw ScenarioError("scenario '" + name + "': " + what);
  };
  if (!(duration >= 2.0 * kSamplePeriod)) fail("duration too short");
  if (!(v0 >= 0.0)) fail("v0 must be nonnegative");
  if (kind == ScenarioKind::kLap && turns < 1) fail("a lap needs at least one turn");
  if (kind == ScenarioKind::kLaunchBrake && turns < 1) fail("launch_brake needs at least one cycle");
  if (!(max_accel > 0.0) || !(max_decel > 0.0)) fail("reference ramp limits must be positive");
  if (std::abs(steer_amplitude) > kMaxSteer) fail("steer amplitude beyond +-0.6 rad");
  if (noise.accel < 0.0 || noise.gyro < 0.0 || noise.encoder < 0.0) fail("negative noise level");
}

ScenarioSpec scenario_preset(const std::string& name) {
  ScenarioSpec s;
  s.name = name;
  if (name == "optimization") {
    s.duration = 60.0;
    s.turns = 8;
    s.v_straight = 45.0;
    s.v_corner = 22.0;
    s.lat_accel = 8.0;
    s.max_accel = 5.0;
    s.max_decel = 9.0;
    s.profile_seed = 11;
  } else if (name == "A") {
    s.duration = 70.0;
    s.turns = 9;
    s.v_straight = 42.0;
    s.v_corner = 24.0;
    s.lat_accel = 7.0;
    s.jitter = 0.08;
    s.max_accel = 4.5;
    s.max_decel = 8.0;
    s.profile_seed = 21;
  } else if (name == "B") {
    s.duration = 90.0;
    s.turns = 7;
    s.v0 = 18.0;
    s.v_straight = 28.0;
    s.v_corner = 18.0;
    s.lat_accel = 3.5;
    s.max_accel = 2.0;
    s.max_decel = 3.0;
    s.profile_seed = 31;
  } else if (name == "C") {
    s.duration = 100.0;
    s.turns = 6;
    s.v_straight = 45.0;
    s.v_corner = 11.0;
    s.lat_accel = 2.5;
    s.max_accel = 5.0;
    s.max_decel = 9.0;
    s.profile_seed = 41;
  } else if (name == "D") {
    s.duration = 100.0;
    s.turns = 8;
    s.v_straight = 50.0;
    s.v_corner = 25.0;
    s.lat_accel = 8.8;
    s.max_accel = 6.0;
    s.max_decel = 9.5;
    s.profile_seed = 51;
  } else if (name == "E") {
    s.duration = 110.0;
    s.turns = 8;
    s.v0 = 22.0;
    s.v_straight = 30.0;
    s.v_corner = 24.0;
    s.lat_accel = 8.5;
    s.max_accel = 2.0;
    s.max_decel = 3.0;
    s.profile_seed = 61;
  } else if (name == "slalom") {
    s.kind = ScenarioKind::kSlalom;
    s.duration = 30.0;
    s.v0 = 20.0;
    s.steer_amplitude = 0.04;
    s.steer_frequency = 0.4;
  } else if (name == "launch_brake") {
    s.kind = ScenarioKind::kLaunchBrake;
    s.duration = 40.0;
    s.v0 = 8.0;
    s.turns = 3;
    s.v_low = 8.0;
    s.v_high = 35.0;
  } else {
    throw ScenarioError("unknown scenario preset '" + name + "'");
  }
  return s;
}

std::vector<std::string> scenario_preset_names() {
  return {"optimization", "A", "B", "C", "D", "E", "slalom", "launch_brake"};
}

ScenarioSpec parse_scenario(const std::string& yaml_text) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    throw ScenarioError(std::string("invalid scenario file: ") + e.what());
  }
  if (root["scenario"]) root = root["scenario"];
  if (!root.IsMap()) throw ScenarioError("scenario file must be a key/value map");

  ScenarioSpec s = root["preset"] ? scenario_preset(root["preset"].as<std::string>()) : ScenarioSpec{};
  try {
    const auto get = [&root](const char* key, auto& field) {
      if (root[key]) field = root[key].as<std::decay_t<decltype(field)>>();
    };
    get("name", s.name);
    if (root["kind"]) {
      const auto k = root["kind"].as<std::string>();
      if (k == "lap") s.kind = ScenarioKind::kLap;
      else if (k == "slalom") s.kind = ScenarioKind::kSlalom;
      else if (k == "launch_brake") s.kind = ScenarioKind::kLaunchBrake;
      else throw ScenarioError("unknown scenario kind '" + k + "'");
    }
    get("duration", s.duration);
    get("v0", s.v0);
    get("turns", s.turns);
    get("v_straight", s.v_straight);
    get("v_corner", s.v_corner);
    get("lat_accel", s.lat_accel);
    get("jitter", s.jitter);
    get("steer_amplitude", s.steer_amplitude);
    get("steer_frequency", s.steer_frequency);
    get("v_low", s.v_low);
    get("v_high", s.v_high);
    get("max_accel", s.max_accel);
    get("max_decel", s.max_decel);
    get("profile_seed", s.profile_seed);
    if (const auto n = root["noise"]) {
      if (n["accel"]) s.noise.accel = n["accel"].as<double>();
      if (n["gyro"]) s.noise.gyro = n["gyro"].as<double>();
      if (n["encoder"]) s.noise.encoder = n["encoder"].as<double>();
    }
  } catch (const YAML::Exception& e) {
    throw ScenarioError(std::string("invalid scenario value: ") + e.what());
  }
  s.validate();
  return s;
}

ScenarioSpec load_scenario(const std::filesystem::path& path) {
  std::ifstream probe(path);
  if (!probe) throw ScenarioError("cannot open scenario file " + path.string());
  std::stringstream ss;
  ss << probe.rdbuf();
  return parse_scenario(ss.str());
}

DriverProgram build_program(const ScenarioSpec& spec) {
  spec.validate();
  const auto n = static_cast<std::size_t>(std::llround(spec.duration / kSamplePeriod)) + 1;
  std::vector<double> target(n, spec.v0);
  DriverProgram prog;
  prog.steer.assign(n, 0.0);
  std::mt19937_64 rng(spec.profile_seed);

  switch (spec.kind) {
    case ScenarioKind::kLap: {
      const auto segs = lap_segments(spec, rng);
      double start = 0.0;
      std::size_t seg = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) * kSamplePeriod;
        while (seg + 1 < segs.size() && t >= start + segs[seg].duration) {
          start += segs[seg].duration;
          ++seg;
        }
        const Segment& s = segs[seg];
        target[i] = s.target_speed;
        if (s.steer_peak != 0.0) {
          const double frac = (t - start) / s.duration;
          const double shape = std::min(ramp(frac / 0.3), ramp((1.0 - frac) / 0.3));
          prog.steer[i] = s.steer_peak * shape;
        }
      }
      break;
    }
    case ScenarioKind::kSlalom: {
      for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) * kSamplePeriod;
        prog.steer[i] = spec.steer_amplitude * ramp(t) *
                        std::sin(2.0 * std::numbers::pi * spec.steer_frequency * t);
      }
      break;
    }
    case ScenarioKind::kLaunchBrake: {
      const double half = spec.duration / (2.0 * spec.turns);
      for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) * kSamplePeriod;
        const auto phase = static_cast<long>(std::floor(t / half));
        target[i] = (phase % 2 == 0) ? spec.v_high : spec.v_low;
      }
      break;
    }
  }

  // Rate-limit the reference: forward pass for acceleration, backward pass
  // so that braking completes before the slower segment begins.
  prog.speed_ref = target;
  prog.speed_ref[0] = spec.v0;
  for (std::size_t i = 1; i < n; ++i) {
    prog.speed_ref[i] = std::min(target[i], prog.speed_ref[i - 1] + spec.max_accel * kSamplePeriod);
  }
  for (std::size_t i = n - 1; i-- > 0;) {
    prog.speed_ref[i] =
        std::min(prog.speed_ref[i], prog.speed_ref[i + 1] + spec.max_decel * kSamplePeriod);
  }
  return prog;
}

Dataset generate_dataset(const ScenarioSpec& scenario, const VehicleParams& plant_params,
                         std::uint64_t noise_seed) {
  const DriverProgram prog = build_program(scenario);
  const std::size_t n = prog.speed_ref.size();
  const VehicleParams& p = plant_params;

  Dataset data;
  data.label = scenario.name;
  data.t.reserve(n);
  data.u.reserve(n);
  data.y_meas.reserve(n);
  data.x_meas.reserve(n);

  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const auto noisy = [&](SensorOutput y) {
    const NoiseConfig& nz = scenario.noise;
    for (std::size_t c = 0; c < kNumOutputs; ++c) {
      const double sd = c < 3 ? nz.accel : (c < 6 ? nz.gyro : nz.encoder);
      const double draw = gauss(rng);
      y.values[c] += sd * draw;
    }
    return y;
  };

  // Static axle grip of the plant and the torque it supports at each split.
  const double grip_front = p.mass * kGravity * p.b / p.wheelbase() * p.front.D;
  const double grip_rear = p.mass * kGravity * p.a / p.wheelbase() * p.rear.D;
  const auto axle_limit = [](double grip, double share) {
    return share > 0.0 ? grip / share : std::numeric_limits<double>::infinity();
  };
  const double max_drive =
      kGripUsage * p.wheel_radius *
      std::min(axle_limit(grip_front, 1.0 - p.drive_rear_fraction), axle_limit(grip_rear, p.drive_rear_fraction));
  const double max_brake =
      kGripUsage * p.wheel_radius *
      std::min(axle_limit(grip_front, p.brake_front_fraction), axle_limit(grip_rear, 1.0 - p.brake_front_fraction));

  double integral = 0.0;
  const auto driver = [&](std::size_t i, const VehicleState& s) {
    const double err = prog.speed_ref[i] - s.vx;
    const double ff = i > 0 ? (prog.speed_ref[i] - prog.speed_ref[i - 1]) / kSamplePeriod : 0.0;
    const double base = p.mass * (kSpeedKp * err + ff) + p.drag_coeff * s.vx * std::abs(s.vx) +
                        p.rolling_coeff * p.mass * kGravity;
    const double candidate = std::clamp(integral + err * kSamplePeriod, -5.0, 5.0);
    const double torque = (base + p.mass * kSpeedKi * candidate) * p.wheel_radius;
    // Conditional integration: freeze the integrator while saturated.
    if (torque < max_drive && -torque < max_brake) integral = candidate;
    DriverInput u;
    u.delta = prog.steer[i];
    u.tau_drive = std::clamp(torque, 0.0, max_drive);
    u.tau_brake = std::clamp(-torque, 0.0, max_brake);
    return u;
  };

  VehicleState state = rolling_state(scenario.v0, p);
  DriverInput u = driver(0, state);
  data.t.push_back(0.0);
  data.u.push_back(u);
  data.x_meas.push_back(state);
  data.y_meas.push_back(noisy(twin_output(state, state, u, p)));

  for (std::size_t i = 1; i < n; ++i) {
    u = driver(i, state);
    const auto next = twin_step(state, u, p);
    if (!next) throw SimulationDivergence(scenario.name, i);
    data.t.push_back(static_cast<double>(i) * kSamplePeriod);
    data.u.push_back(u);
    data.x_meas.push_back(*next);
    data.y_meas.push_back(noisy(twin_output(*next, state, u, p)));
    state = *next;
  }
  return data;
}

}  // namespace til
