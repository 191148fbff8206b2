#include "til/observer.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include <json.hpp>

#include "til/csv.hpp"

namespace til {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Adds a correction given in reporting units.
void add_reporting(VehicleState& s, std::size_t row, double delta) {
  switch (row) {
    case kCorrVx: s.vx += delta / kMsToKmh; break;
    case kCorrWz: s.wz += delta * kDegToRad; break;
    case kCorrWfl: s.wheel[kFL] += delta; break;
    default: s.wheel[kRR] += delta; break;
  }
}

void check_shape(const Eigen::MatrixXd& m, Eigen::Index rows, Eigen::Index cols, const char* what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw GainError(std::string(what) + ": expected " + std::to_string(rows) + "x" +
                    std::to_string(cols) + ", got " + std::to_string(m.rows()) + "x" +
                    std::to_string(m.cols()));
  }
}

}  // namespace

std::string_view corrected_state_name(std::size_t row) {
  static constexpr std::array<std::string_view, kNumCorrected> names = {"vx", "wz", "wfl", "wrr"};
  return names.at(row);
}

std::string output_label(OutputChannel c) {
  switch (c) {
    case OutputChannel::kAx: return "ax";
    case OutputChannel::kAy: return "ay";
    case OutputChannel::kAz: return "az";
    case OutputChannel::kGyroX: return "wx";
    case OutputChannel::kGyroY: return "wy";
    case OutputChannel::kGyroZ: return "wz";
    case OutputChannel::kEncFL: return "wfl";
    case OutputChannel::kEncFR: return "wfr";
    case OutputChannel::kEncRL: return "wrl";
    case OutputChannel::kEncRR: return "wrr";
  }
  return "?";
}

std::string gain_id(OutputChannel column, std::size_t row) {
  return output_label(column) + "->" + std::string(corrected_state_name(row));
}

GainMatrix GainMatrix::zeros(std::vector<OutputChannel> channels) {
  GainMatrix k;
  const auto n = static_cast<Eigen::Index>(channels.size());
  k.channels = std::move(channels);
  k.entries = Eigen::MatrixXd::Zero(kNumCorrected, n);
  k.mask = BoolMatrix::Constant(kNumCorrected, n, true);
  k.lower = Eigen::MatrixXd::Zero(kNumCorrected, n);
  k.upper = Eigen::MatrixXd::Zero(kNumCorrected, n);
  return k;
}

GainMatrix GainMatrix::case_study() {
  GainMatrix k = zeros({OutputChannel::kGyroZ, OutputChannel::kEncFL, OutputChannel::kEncRR});
  // Columns: wz, wfl, wrr. Rows: vx, wz, wfl, wrr.
  k.lower << -1.5, 0.0, 0.0,
             0.0, -0.06, -0.06,
             -1.5, 0.0, -0.75,
             -1.5, -0.75, 0.0;
  k.upper << 1.5, 0.45, 0.45,
             1.5, 0.06, 0.06,
             1.5, 1.5, 0.75,
             1.5, 0.75, 1.5;
  return k;
}

std::size_t GainMatrix::active_count() const { return static_cast<std::size_t>(mask.count()); }

void GainMatrix::validate() const {
  const auto n = static_cast<Eigen::Index>(channels.size());
  if (n == 0) throw GainError("gain matrix has no output channels");
  check_shape(entries, kNumCorrected, n, "gain entries");
  check_shape(lower, kNumCorrected, n, "gain lower bounds");
  check_shape(upper, kNumCorrected, n, "gain upper bounds");
  if (mask.rows() != static_cast<Eigen::Index>(kNumCorrected) || mask.cols() != n) {
    throw GainError("gain mask has the wrong shape");
  }
  for (Eigen::Index i = 0; i < entries.rows(); ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const std::string id = gain_id(channels[static_cast<std::size_t>(j)], static_cast<std::size_t>(i));
      if (!(lower(i, j) <= upper(i, j))) throw GainError("bounds inverted for " + id);
      if (!std::isfinite(entries(i, j))) throw GainError("non-finite gain " + id);
      if (!mask(i, j)) {
        if (entries(i, j) != 0.0) throw GainError("masked gain " + id + " is nonzero");
      } else if (entries(i, j) < lower(i, j) || entries(i, j) > upper(i, j)) {
        throw GainError("gain " + id + " outside its bounds");
      }
    }
  }
}

Eigen::VectorXd GainMatrix::active_vector() const {
  Eigen::VectorXd v(static_cast<Eigen::Index>(active_count()));
  Eigen::Index c = 0;
  for (Eigen::Index i = 0; i < entries.rows(); ++i)
    for (Eigen::Index j = 0; j < entries.cols(); ++j)
      if (mask(i, j)) v(c++) = entries(i, j);
  return v;
}

std::vector<std::string> GainMatrix::active_ids() const {
  std::vector<std::string> ids;
  for (Eigen::Index i = 0; i < entries.rows(); ++i)
    for (Eigen::Index j = 0; j < entries.cols(); ++j)
      if (mask(i, j)) ids.push_back(gain_id(channels[static_cast<std::size_t>(j)], static_cast<std::size_t>(i)));
  return ids;
}

Eigen::VectorXd GainMatrix::active_lower() const {
  Eigen::VectorXd v(static_cast<Eigen::Index>(active_count()));
  Eigen::Index c = 0;
  for (Eigen::Index i = 0; i < lower.rows(); ++i)
    for (Eigen::Index j = 0; j < lower.cols(); ++j)
      if (mask(i, j)) v(c++) = lower(i, j);
  return v;
}

Eigen::VectorXd GainMatrix::active_upper() const {
  Eigen::VectorXd v(static_cast<Eigen::Index>(active_count()));
  Eigen::Index c = 0;
  for (Eigen::Index i = 0; i < upper.rows(); ++i)
    for (Eigen::Index j = 0; j < upper.cols(); ++j)
      if (mask(i, j)) v(c++) = upper(i, j);
  return v;
}

void GainMatrix::set_active(const Eigen::VectorXd& v) {
  if (v.size() != static_cast<Eigen::Index>(active_count())) {
    throw GainError("active vector has " + std::to_string(v.size()) + " entries, mask has " +
                    std::to_string(active_count()));
  }
  Eigen::Index c = 0;
  for (Eigen::Index i = 0; i < entries.rows(); ++i)
    for (Eigen::Index j = 0; j < entries.cols(); ++j)
      entries(i, j) = mask(i, j) ? v(c++) : 0.0;
}

GainMatrix GainMatrix::with_mask(const BoolMatrix& m) const {
  GainMatrix k = *this;
  if (m.rows() != mask.rows() || m.cols() != mask.cols()) throw GainError("mask has the wrong shape");
  k.mask = m;
  for (Eigen::Index i = 0; i < k.entries.rows(); ++i)
    for (Eigen::Index j = 0; j < k.entries.cols(); ++j)
      if (!m(i, j)) k.entries(i, j) = 0.0;
  return k;
}

void ReducedGain::validate() const {
  const auto n = static_cast<Eigen::Index>(channels.size());
  if (n == 0) throw GainError("reduced gain has no output channels");
  if (map.cols() != n) throw GainError("reduction map does not match the channel list");
  if (map.rows() < 1 || map.rows() >= n) throw GainError("reduction map must reduce the output dimension");
  check_shape(entries, kNumCorrected, map.rows(), "reduced gain entries");
  check_shape(lower, kNumCorrected, map.rows(), "reduced gain lower bounds");
  check_shape(upper, kNumCorrected, map.rows(), "reduced gain upper bounds");
  if (!entries.allFinite() || !map.allFinite()) throw GainError("non-finite reduced gain");
}

Eigen::VectorXd ReducedGain::flat() const {
  const Eigen::MatrixXd rt = entries.transpose();
  return Eigen::Map<const Eigen::VectorXd>(rt.data(), rt.size());
}

void ReducedGain::set_flat(const Eigen::VectorXd& v) {
  if (v.size() != entries.size()) throw GainError("reduced gain vector has the wrong length");
  for (Eigen::Index i = 0; i < entries.rows(); ++i)
    for (Eigen::Index j = 0; j < entries.cols(); ++j) entries(i, j) = v(i * entries.cols() + j);
}

Eigen::VectorXd ReducedGain::flat_lower() const {
  const Eigen::MatrixXd rt = lower.transpose();
  return Eigen::Map<const Eigen::VectorXd>(rt.data(), rt.size());
}

Eigen::VectorXd ReducedGain::flat_upper() const {
  const Eigen::MatrixXd rt = upper.transpose();
  return Eigen::Map<const Eigen::VectorXd>(rt.data(), rt.size());
}

Correction Correction::from(const GainMatrix& k) {
  k.validate();
  return {k.channels, k.entries};
}

Correction Correction::from(const ReducedGain& k) {
  k.validate();
  return {k.channels, k.effective()};
}

bool diverged(const VehicleState& s) {
  if (!s.finite()) return true;
  if (std::abs(s.vx) > kMaxSpeed || std::abs(s.wz) > kMaxYawRate) return true;
  for (double w : s.wheel)
    if (std::abs(w) > kMaxWheelSpeed) return true;
  return false;
}

std::optional<VehicleState> observer_step(const VehicleState& x_hat_prev, const DriverInput& u,
                                          const SensorOutput& y, const Correction& k,
                                          const VehicleParams& twin) {
  auto pred = twin_step(x_hat_prev, u, twin);
  if (!pred) return std::nullopt;
  const SensorOutput y_hat = twin_output(*pred, x_hat_prev, u, twin);

  std::array<double, kNumCorrected> delta{};
  for (std::size_t j = 0; j < k.channels.size(); ++j) {
    const double e = y[k.channels[j]] - y_hat[k.channels[j]];
    for (std::size_t i = 0; i < kNumCorrected; ++i) {
      delta[i] += k.gain(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * e;
    }
  }
  VehicleState x = *pred;
  for (std::size_t i = 0; i < kNumCorrected; ++i) add_reporting(x, i, delta[i]);
  return x;
}

std::optional<VehicleState> observer_step(const VehicleState& x_hat_prev, const DriverInput& u,
                                          const SensorOutput& y, const GainMatrix& k,
                                          const VehicleParams& twin) {
  return observer_step(x_hat_prev, u, y, Correction::from(k), twin);
}

VehicleState perturbed_initial_state(const Dataset& data, double vx_offset) {
  if (data.size() == 0) throw std::invalid_argument("empty dataset");
  VehicleState s = data.x_meas.front();
  s.vx += vx_offset;
  return s;
}

double rms(const std::vector<double>& e) {
  if (e.empty()) return kInf;
  double acc = 0.0;
  for (double v : e) acc += v * v;
  return std::sqrt(acc / static_cast<double>(e.size()));
}

Sideslip sideslip(const VehicleState& s, double speed_floor) {
  if (std::abs(s.vx) <= speed_floor) return {0.0, true};
  return {std::atan(s.vy / s.vx) * kRadToDeg, false};
}

ObserverRun run_observer(const Dataset& data, const Correction& k, const VehicleState& x0,
                         const ObserverOptions& opt) {
  const auto start = std::chrono::steady_clock::now();
  data.validate();
  if (k.gain.rows() != static_cast<Eigen::Index>(kNumCorrected) ||
      k.gain.cols() != static_cast<Eigen::Index>(k.channels.size())) {
    throw GainError("correction matrix does not match its channel list");
  }
  if (!x0.finite()) throw std::invalid_argument("initial state is not finite");

  ObserverRun run;
  const std::size_t n = data.size();
  if (opt.keep_trajectory) run.estimate.reserve(n);

  double se_vx = 0.0;
  double se_wz = 0.0;
  double se_beta = 0.0;
  const auto accumulate = [&](const VehicleState& est, const VehicleState& truth) {
    const double ev = (est.vx - truth.vx) * kMsToKmh;
    const double ew = (est.wz - truth.wz) * kRadToDeg;
    const double eb = sideslip(est).beta_deg - sideslip(truth).beta_deg;
    se_vx += ev * ev;
    se_wz += ew * ew;
    se_beta += eb * eb;
  };

  VehicleState x = x0;
  accumulate(x, data.x_meas[0]);
  if (opt.keep_trajectory) run.estimate.push_back(x);
  for (std::size_t i = 1; i < n; ++i) {
    const auto next = observer_step(x, data.u[i], data.y_meas[i], k, opt.twin);
    if (!next || diverged(*next)) {
      run.stable = false;
      run.diverged_at = i;
      break;
    }
    x = *next;
    accumulate(x, data.x_meas[i]);
    if (opt.keep_trajectory) run.estimate.push_back(x);
  }

  if (run.stable) {
    const double nn = static_cast<double>(n);
    run.rmse_vx = std::sqrt(se_vx / nn);
    run.rmse_wz = std::sqrt(se_wz / nn);
    run.rmse_beta = std::sqrt(se_beta / nn);
  } else {
    run.rmse_vx = run.rmse_wz = run.rmse_beta = kInf;
  }
  run.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return run;
}

ObserverRun run_observer(const Dataset& data, const GainMatrix& k, const VehicleState& x0,
                         const ObserverOptions& opt) {
  return run_observer(data, Correction::from(k), x0, opt);
}

ObserverRun run_observer(const Dataset& data, const ReducedGain& k, const VehicleState& x0,
                         const ObserverOptions& opt) {
  return run_observer(data, Correction::from(k), x0, opt);
}

double evaluate_loss(const ObserverRun& run) {
  if (!run.stable) return kInf;
  return run.rmse_vx + run.rmse_wz;
}

ScalarSurrogate scalar_surrogate(double k, std::size_t steps, std::uint64_t seed,
                                 double initial_error) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> w(0.0, 0.1);
  ScalarSurrogate out;
  out.error.reserve(steps + 1);
  double x = 0.0;
  double x_hat = -initial_error;
  out.error.push_back(x - x_hat);
  for (std::size_t t = 0; t < steps; ++t) {
    x += w(rng);
    x_hat += k * (x - x_hat);
    out.error.push_back(x - x_hat);
  }
  // Bounded random-walk noise keeps the error within a few noise levels; an
  // unstable recursion grows geometrically and overshoots this by far.
  const double bound = 1e3 * (std::abs(initial_error) + 0.1);
  const double last = out.error.back();
  out.diverged = !std::isfinite(last) || std::abs(last) > bound;
  return out;
}

void write_observer_run(const ObserverRun& run, const Dataset& data,
                        const std::filesystem::path& prefix) {
  if (run.stable && run.estimate.size() != data.size()) {
    throw std::invalid_argument("observer run has no stored trajectory");
  }
  std::ostringstream csv;
  csv << "t,vx_hat,vx_true,wz_hat,wz_true,beta_hat,beta_true,wfl_hat,wfl_true,wrr_hat,wrr_true\n";
  for (std::size_t i = 0; i < run.estimate.size(); ++i) {
    const VehicleState& e = run.estimate[i];
    const VehicleState& g = data.x_meas[i];
    const std::vector<std::string> row = {
        format_number(data.t[i]),
        format_number(e.vx * kMsToKmh),
        format_number(g.vx * kMsToKmh),
        format_number(e.wz * kRadToDeg),
        format_number(g.wz * kRadToDeg),
        format_number(sideslip(e).beta_deg),
        format_number(sideslip(g).beta_deg),
        format_number(e.wheel[kFL]),
        format_number(g.wheel[kFL]),
        format_number(e.wheel[kRR]),
        format_number(g.wheel[kRR])};
    csv << join_csv_line(row) << '\n';
  }
  write_text(prefix.string() + ".csv", csv.str());

  nlohmann::ordered_json j;
  const auto num = [](double v) -> nlohmann::ordered_json {
    if (std::isfinite(v)) return v;
    return nullptr;
  };
  j["rmse_vx"] = num(run.rmse_vx);
  j["rmse_wz"] = num(run.rmse_wz);
  j["rmse_beta"] = num(run.rmse_beta);
  j["stable"] = run.stable;
  j["wall_time"] = run.wall_time;
  write_text(prefix.string() + ".json", j.dump(2) + "\n");
}

}  // namespace til
