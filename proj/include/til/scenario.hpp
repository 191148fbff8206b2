#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "til/dataset.hpp"
#include "til/vehicle.hpp"

namespace til {

enum class ScenarioKind { kLap, kSlalom, kLaunchBrake };

/// Per-channel standard deviation of zero-mean Gaussian sensor noise.
struct NoiseConfig {
  double accel = 0.05;    // m/s^2
  double gyro = 0.2;      // deg/s
  double encoder = 0.05;  // rad/s

  static NoiseConfig zero() { return {0.0, 0.0, 0.0}; }
};

/// Driving program for the plant. A closed-loop speed controller turns the
/// reference speed into drive/brake torques; steering is open loop.
struct ScenarioSpec {
  std::string name = "lap";
  ScenarioKind kind = ScenarioKind::kLap;
  double duration = 60.0;  // s
  double v0 = 25.0;        // m/s

  // Lap: alternating straights and corners.
  int turns = 8;
  double v_straight = 42.0;  // m/s
  double v_corner = 22.0;    // m/s
  double lat_accel = 7.0;    // m/s^2, corner lateral acceleration target
  double jitter = 0.15;      // relative random variation of segment lengths/speeds

  // Slalom.
  double steer_amplitude = 0.03;  // rad
  double steer_frequency = 0.4;   // Hz

  // Launch and brake.
  double v_low = 8.0;    // m/s
  double v_high = 35.0;  // m/s

  double max_accel = 4.0;  // m/s^2, reference speed ramp limits
  double max_decel = 8.0;  // m/s^2

  std::uint64_t profile_seed = 1;
  NoiseConfig noise{};

  void validate() const;
};

struct ScenarioError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised when the plant diverges; carries the first divergent sample.
struct SimulationDivergence : std::runtime_error {
  SimulationDivergence(std::string scenario, std::size_t sample);
  std::size_t sample;
};

/// Built-in scenarios: "optimization", "A".."E", "slalom", "launch_brake".
ScenarioSpec scenario_preset(const std::string& name);
std::vector<std::string> scenario_preset_names();

/// Parses a YAML scenario. A `preset:` key selects the base, other keys override.
ScenarioSpec load_scenario(const std::filesystem::path& path);
ScenarioSpec parse_scenario(const std::string& yaml_text);

/// Reference speed and steering angle for every sample of the scenario.
struct DriverProgram {
  std::vector<double> speed_ref;
  std::vector<double> steer;
};
DriverProgram build_program(const ScenarioSpec& spec);

/// Simulates the plant over the scenario, records ground truth and adds
/// seeded sensor noise. Pure function of its arguments.
Dataset generate_dataset(const ScenarioSpec& scenario, const VehicleParams& plant_params,
                         std::uint64_t noise_seed);

}  // namespace til
