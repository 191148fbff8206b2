#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "til/vehicle.hpp"

namespace til {

/// Time series recorded from the plant: driver inputs, noisy sensor outputs
/// and ground-truth states, sampled at kSamplePeriod.
struct Dataset {
  std::string label;
  double dt = kSamplePeriod;
  std::vector<double> t;
  std::vector<DriverInput> u;
  std::vector<SensorOutput> y_meas;
  std::vector<VehicleState> x_meas;

  std::size_t size() const { return t.size(); }

  /// Throws std::invalid_argument when series lengths differ, fewer than two
  /// samples are present, or dt is not the 100 Hz sample period.
  void validate() const;
};

/// Writes `<path>` (CSV) and `<path>.json` (units and metadata sidecar).
void write_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

/// Column header of the dataset CSV, in order.
const std::vector<std::string>& dataset_columns();

}  // namespace til
