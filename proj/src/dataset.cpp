#include "til/dataset.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "til/csv.hpp"

namespace til {

namespace {

using json = nlohmann::ordered_json;

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".json");
}

}  // namespace

const std::vector<std::string>& dataset_columns() {
  static const std::vector<std::string> cols = {
      "t",      "delta",  "tau_drive", "tau_brake", "a_x",    "a_y",    "a_z",    "wx",
      "wy",     "wz",     "enc_fl",    "enc_fr",    "enc_rl", "enc_rr", "gt_x",   "gt_y",
      "gt_psi", "gt_vx",  "gt_vy",     "gt_wz",     "gt_wfl", "gt_wfr", "gt_wrl", "gt_wrr"};
  return cols;
}

void Dataset::validate() const {
  if (t.size() < 2) throw std::invalid_argument("dataset '" + label + "' needs at least 2 samples");
  if (u.size() != t.size() || y_meas.size() != t.size() || x_meas.size() != t.size()) {
    throw std::invalid_argument("dataset '" + label + "' has series of unequal length");
  }
  if (std::abs(dt - kSamplePeriod) > 1e-12) {
    throw std::invalid_argument("dataset '" + label + "' must be sampled at 100 Hz");
  }
}

void write_dataset(const Dataset& data, const std::filesystem::path& path) {
  data.validate();
  std::ostringstream out;
  out << join_csv_line(dataset_columns()) << '\n';
  std::vector<std::string> row;
  for (std::size_t i = 0; i < data.size(); ++i) {
    row.clear();
    const auto add = [&row](double v) { row.push_back(format_number(v)); };
    add(data.t[i]);
    add(data.u[i].delta);
    add(data.u[i].tau_drive);
    add(data.u[i].tau_brake);
    for (double v : data.y_meas[i].values) add(v);
    const VehicleState& s = data.x_meas[i];
    add(s.x);
    add(s.y);
    add(s.psi);
    add(s.vx);
    add(s.vy);
    add(s.wz);
    for (double w : s.wheel) add(w);
    out << join_csv_line(row) << '\n';
  }
  write_text(path, out.str());

  json meta;
  meta["label"] = data.label;
  meta["dt"] = data.dt;
  meta["samples"] = data.size();
  meta["units"] = {{"t", "s"},          {"delta", "rad"},     {"tau_drive", "N m"},
                   {"tau_brake", "N m"}, {"a_x", "m/s^2"},     {"a_y", "m/s^2"},
                   {"a_z", "m/s^2"},     {"wx", "deg/s"},      {"wy", "deg/s"},
                   {"wz", "deg/s"},      {"enc_*", "rad/s"},   {"gt_x", "m"},
                   {"gt_y", "m"},        {"gt_psi", "rad"},    {"gt_vx", "m/s"},
                   {"gt_vy", "m/s"},     {"gt_wz", "rad/s"},   {"gt_w*", "rad/s"}};
  write_text(sidecar_path(path), meta.dump(2) + "\n");
}

Dataset read_dataset(const std::filesystem::path& path) {
  const CsvTable table = read_csv(path);
  if (table.header != dataset_columns()) {
    throw std::runtime_error(path.string() + ": unexpected dataset header");
  }
  Dataset data;
  data.label = path.stem().string();
  const auto meta_path = sidecar_path(path);
  if (std::filesystem::exists(meta_path)) {
    const json meta = json::parse(read_text(meta_path));
    data.label = meta.value("label", data.label);
    data.dt = meta.value("dt", kSamplePeriod);
  }
  for (const auto& row : table.rows) {
    std::size_t c = 0;
    const auto next = [&]() { return parse_number(row[c++]); };
    data.t.push_back(next());
    DriverInput u;
    u.delta = next();
    u.tau_drive = next();
    u.tau_brake = next();
    data.u.push_back(u);
    SensorOutput y;
    for (double& v : y.values) v = next();
    data.y_meas.push_back(y);
    VehicleState s;
    s.x = next();
    s.y = next();
    s.psi = next();
    s.vx = next();
    s.vy = next();
    s.wz = next();
    for (double& w : s.wheel) w = next();
    data.x_meas.push_back(s);
  }
  data.validate();
  return data;
}

}  // namespace til
