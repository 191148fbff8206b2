#include "til/reduction.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include <Eigen/Dense>
#include "til/csv.hpp"
#include "til/json_io.hpp"

namespace til {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

bool is_encoder(OutputChannel c) {
  return c == OutputChannel::kEncFL || c == OutputChannel::kEncFR || c == OutputChannel::kEncRL ||
         c == OutputChannel::kEncRR;
}

// The corrected state measured directly by a channel, if any.
std::optional<std::size_t> measured_state(OutputChannel c) {
  switch (c) {
    case OutputChannel::kGyroZ: return kCorrWz;
    case OutputChannel::kEncFL: return kCorrWfl;
    case OutputChannel::kEncRR: return kCorrWrr;
    default: return std::nullopt;
  }
}

bool is_wheel_row(std::size_t row) { return row == kCorrWfl || row == kCorrWrr; }

double reporting_value(const VehicleState& s, std::size_t row) {
  switch (row) {
    case kCorrVx: return s.vx * kMsToKmh;
    case kCorrWz: return s.wz * kRadToDeg;
    case kCorrWfl: return s.wheel[kFL];
    default: return s.wheel[kRR];
  }
}

template <class F>
double series_range(std::size_t begin, std::size_t end, F&& value) {
  double lo = kInf;
  double hi = -kInf;
  for (std::size_t i = begin; i < end; ++i) {
    const double v = value(i);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  return hi - lo;
}

}  // namespace

// -- bounds ------------------------------------------------------------------

BoundsTable BoundsTable::table_one() {
  const GainMatrix k = GainMatrix::case_study();
  return {k.channels, k.lower, k.upper};
}

void BoundsTable::validate() const {
  const auto n = static_cast<Eigen::Index>(channels.size());
  if (n == 0) throw ReductionError("bounds table has no channels");
  if (lower.rows() != static_cast<Eigen::Index>(kNumCorrected) || lower.cols() != n ||
      upper.rows() != lower.rows() || upper.cols() != n) {
    throw ReductionError("bounds table has the wrong shape");
  }
  for (Eigen::Index i = 0; i < lower.rows(); ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (!std::isfinite(lower(i, j)) || !std::isfinite(upper(i, j)) || lower(i, j) > upper(i, j)) {
        throw ReductionError("invalid bounds for " +
                             gain_id(channels[static_cast<std::size_t>(j)], static_cast<std::size_t>(i)));
      }
    }
  }
}

GainMatrix BoundsTable::apply(const GainMatrix& k) const {
  validate();
  if (k.channels != channels) throw ReductionError("bounds table and gain use different channels");
  GainMatrix out = k;
  out.lower = lower;
  out.upper = upper;
  return out;
}

// -- MBR ---------------------------------------------------------------------

int mbr_class(OutputChannel column, std::size_t row) {
  if (row >= kNumCorrected) return 0;
  if (measured_state(column) == row) return 1;
  if (is_encoder(column)) {
    if (row == kCorrVx) return 2;
    if (is_wheel_row(row)) return 3;
    return 4;
  }
  if (column == OutputChannel::kGyroZ) return 4;
  return 0;
}

BoolMatrix mbr_plan(int level) {
  int max_class = 0;
  switch (level) {
    case 3: max_class = 1; break;
    case 5: max_class = 2; break;
    case 7: max_class = 3; break;
    case 12: max_class = 4; break;
    default: throw ReductionError("MBR level must be 12, 7, 5 or 3, got " + std::to_string(level));
  }
  const GainMatrix k = GainMatrix::case_study();
  BoolMatrix m(kNumCorrected, static_cast<Eigen::Index>(k.cols()));
  for (std::size_t i = 0; i < kNumCorrected; ++i) {
    for (std::size_t j = 0; j < k.cols(); ++j) {
      const int c = mbr_class(k.channels[j], i);
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = c >= 1 && c <= max_class;
    }
  }
  return m;
}

BoundsTable mbr_ranges(const Dataset& data, const RangeOptions& opt,
                       std::vector<std::string>* warnings) {
  data.validate();
  if (opt.channels.empty()) throw ReductionError("range heuristic needs at least one channel");
  const std::size_t n = data.size();
  if (opt.segments == 0 || n / opt.segments < 2) {
    throw ReductionError("cannot cut " + std::to_string(n) + " samples into " +
                         std::to_string(opt.segments) + " segments");
  }
  const auto cols = static_cast<Eigen::Index>(opt.channels.size());
  BoundsTable b{opt.channels, Eigen::MatrixXd::Zero(kNumCorrected, cols),
                Eigen::MatrixXd::Zero(kNumCorrected, cols)};

  // Output ranges per segment, computed once; flat segments are reported once.
  const std::size_t len = n / opt.segments;
  std::vector<std::vector<double>> y_range(opt.channels.size(), std::vector<double>(opt.segments));
  for (std::size_t j = 0; j < opt.channels.size(); ++j) {
    for (std::size_t s = 0; s < opt.segments; ++s) {
      const std::size_t begin = s * len;
      const std::size_t end = s + 1 == opt.segments ? n : begin + len;
      y_range[j][s] = series_range(begin, end, [&](std::size_t t) { return data.y_meas[t][opt.channels[j]]; });
      if (!(y_range[j][s] > 0.0) && warnings) {
        warnings->push_back("segment " + std::to_string(s) + ": output " + output_label(opt.channels[j]) +
                            " is flat, skipped");
      }
    }
  }

  for (std::size_t i = 0; i < kNumCorrected; ++i) {
    for (std::size_t j = 0; j < opt.channels.size(); ++j) {
      const auto r = static_cast<Eigen::Index>(i);
      const auto c = static_cast<Eigen::Index>(j);
      const OutputChannel ch = opt.channels[j];
      if (measured_state(ch) == i) {
        b.upper(r, c) = 1.5;
        continue;
      }
      if (is_encoder(ch) && is_wheel_row(i)) {
        b.lower(r, c) = -0.75;
        b.upper(r, c) = 0.75;
        continue;
      }
      double sum = 0.0;
      std::size_t used = 0;
      for (std::size_t s = 0; s < opt.segments; ++s) {
        if (!(y_range[j][s] > 0.0)) continue;
        const std::size_t begin = s * len;
        const std::size_t end = s + 1 == opt.segments ? n : begin + len;
        sum += series_range(begin, end, [&](std::size_t t) { return reporting_value(data.x_meas[t], i); }) /
               y_range[j][s];
        ++used;
      }
      if (used == 0) {
        throw ReductionError("output " + output_label(ch) + " is flat in every segment");
      }
      const double width = 1.5 * sum / static_cast<double>(used);
      if (is_encoder(ch) && i == kCorrVx) {
        b.upper(r, c) = width;
      } else {
        b.lower(r, c) = -0.5 * width;
        b.upper(r, c) = 0.5 * width;
      }
    }
  }
  return b;
}

// -- SDR ---------------------------------------------------------------------

double normalize_gain(double k, double lower, double upper) {
  if (!std::isfinite(k)) throw ReductionError("cannot normalize a non-finite gain");
  if (k == 0.0) return 0.0;
  if (k > 0.0) {
    if (!(upper > 0.0)) throw ReductionError("positive gain with a non-positive upper bound");
    return std::abs(k / upper);
  }
  if (!(lower < 0.0)) throw ReductionError("negative gain with a non-negative lower bound");
  return std::abs(k / lower);
}

double l1_of_normalized(const GainMatrix& k) {
  double sum = 0.0;
  for (Eigen::Index i = 0; i < k.entries.rows(); ++i) {
    for (Eigen::Index j = 0; j < k.entries.cols(); ++j) {
      if (k.mask(i, j)) sum += normalize_gain(k.entries(i, j), k.lower(i, j), k.upper(i, j));
    }
  }
  return sum;
}

GainLayout GainLayout::of(const GainMatrix& k) {
  k.validate();
  GainLayout l;
  l.rows = k.rows();
  l.cols = k.cols();
  const std::size_t n = l.rows * l.cols;
  l.lower.resize(static_cast<Eigen::Index>(n));
  l.upper.resize(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < l.rows; ++i) {
    for (std::size_t j = 0; j < l.cols; ++j) {
      const auto r = static_cast<Eigen::Index>(i);
      const auto c = static_cast<Eigen::Index>(j);
      const auto f = static_cast<Eigen::Index>(i * l.cols + j);
      l.ids.push_back(gain_id(k.channels[j], i));
      l.lower(f) = k.lower(r, c);
      l.upper(f) = k.upper(r, c);
      l.active.push_back(k.mask(r, c));
      l.classes.push_back(mbr_class(k.channels[j], i));
    }
  }
  return l;
}

GainLayout GainLayout::of(const ReducedGain& k) {
  k.validate();
  GainLayout l;
  l.rows = kNumCorrected;
  l.cols = k.reduced_dim();
  for (std::size_t i = 0; i < l.rows; ++i) {
    for (std::size_t j = 0; j < l.cols; ++j) {
      l.ids.push_back("pc" + std::to_string(j + 1) + "->" + std::string(corrected_state_name(i)));
    }
  }
  l.lower = k.flat_lower();
  l.upper = k.flat_upper();
  l.active.assign(l.rows * l.cols, true);
  l.classes.assign(l.rows * l.cols, 0);
  return l;
}

std::vector<std::size_t> GainLayout::active_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t f = 0; f < active.size(); ++f) {
    if (active[f]) out.push_back(f);
  }
  return out;
}

GainLayout GainLayout::with_mask(const BoolMatrix& mask) const {
  if (mask.rows() != static_cast<Eigen::Index>(rows) || mask.cols() != static_cast<Eigen::Index>(cols)) {
    throw ReductionError("mask shape does not match the gain");
  }
  GainLayout l = *this;
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      l.active[i * cols + j] = mask(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
  }
  return l;
}

void ParameterRanking::validate() const {
  std::set<std::string> seen;
  std::set<std::pair<std::size_t, std::size_t>> cells;
  for (const RankedEntry& e : entries) {
    if (!seen.insert(e.id).second) throw ReductionError("duplicate ranking entry " + e.id);
    if (e.row >= rows || e.col >= cols) throw ReductionError("ranking entry " + e.id + " outside the gain");
    if (!cells.insert({e.row, e.col}).second) throw ReductionError("two ranking entries share a cell");
    if (!(e.score >= 0.0 && e.score <= 1.0)) throw ReductionError("ranking score of " + e.id + " outside [0, 1]");
  }
}

double ParameterRanking::total() const {
  double s = 0.0;
  for (const RankedEntry& e : entries) s += e.score;
  return s;
}

ParameterRanking rank_by_magnitude(const GainLayout& layout, const Eigen::MatrixXd& values) {
  if (values.rows() != static_cast<Eigen::Index>(layout.rows) ||
      values.cols() != static_cast<Eigen::Index>(layout.cols)) {
    throw ReductionError("gain values do not match the layout");
  }
  ParameterRanking r;
  r.rows = layout.rows;
  r.cols = layout.cols;
  for (std::size_t f : layout.active_indices()) {
    const std::size_t i = f / layout.cols;
    const std::size_t j = f % layout.cols;
    const double k = values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    const auto fi = static_cast<Eigen::Index>(f);
    r.entries.push_back({layout.ids[f], i, j, normalize_gain(k, layout.lower(fi), layout.upper(fi)), k,
                         layout.classes[f]});
  }
  std::stable_sort(r.entries.begin(), r.entries.end(),
                   [](const RankedEntry& a, const RankedEntry& b) { return a.score > b.score; });
  return r;
}

ParameterRanking rank_by_magnitude(const GainMatrix& k) {
  return rank_by_magnitude(GainLayout::of(k), k.entries);
}

BoolMatrix prune(const ParameterRanking& ranking, double delta) {
  if (!(delta >= 0.0 && delta <= 1.0)) throw ReductionError("pruning threshold must lie in [0, 1]");
  ranking.validate();
  BoolMatrix m = BoolMatrix::Constant(static_cast<Eigen::Index>(ranking.rows),
                                      static_cast<Eigen::Index>(ranking.cols), false);
  std::size_t kept = 0;
  for (const RankedEntry& e : ranking.entries) {
    if (e.score >= delta) {
      m(static_cast<Eigen::Index>(e.row), static_cast<Eigen::Index>(e.col)) = true;
      ++kept;
    }
  }
  if (kept == 0) throw ReductionError("threshold removes every gain; the observer would run open loop");
  return m;
}

double delta_for_count(const ParameterRanking& ranking, std::size_t count) {
  if (count == 0 || count > ranking.entries.size()) {
    throw ReductionError("cannot keep " + std::to_string(count) + " of " +
                         std::to_string(ranking.entries.size()) + " ranked entries");
  }
  std::vector<double> scores;
  for (const RankedEntry& e : ranking.entries) scores.push_back(e.score);
  std::sort(scores.begin(), scores.end(), std::greater<>());
  return scores[count - 1];
}

PerformanceFn observer_performance(const Dataset& data, const VehicleState& x0,
                                   std::vector<OutputChannel> channels, Eigen::MatrixXd map,
                                   const ObserverOptions& opt) {
  return [&data, x0, channels = std::move(channels), map = std::move(map), opt](const Eigen::MatrixXd& entries) {
    Correction c{channels, map.size() == 0 ? entries : Eigen::MatrixXd(entries * map)};
    ObserverOptions o = opt;
    o.keep_trajectory = false;
    const ObserverRun run = run_observer(data, c, x0, o);
    return Performance{run.stable, run.rmse_vx, run.rmse_wz};
  };
}

StructureResult structure_optimize(const GainLayout& layout, const PerformanceFn& performance,
                                   const StructureOptions& opt) {
  const std::vector<std::size_t> act = layout.active_indices();
  if (act.empty()) throw ReductionError("structure optimization needs at least one active entry");
  if (!(opt.ub_vx > 0.0) || !(opt.ub_wz > 0.0)) throw ReductionError("rms upper bounds must be positive");
  const auto d = static_cast<Eigen::Index>(act.size());
  const bool use_vx = std::isfinite(opt.ub_vx);
  const bool use_wz = std::isfinite(opt.ub_wz);

  const auto expand = [&](const Eigen::VectorXd& v) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(layout.rows),
                                              static_cast<Eigen::Index>(layout.cols));
    for (Eigen::Index a = 0; a < d; ++a) {
      const std::size_t f = act[static_cast<std::size_t>(a)];
      m(static_cast<Eigen::Index>(f / layout.cols), static_cast<Eigen::Index>(f % layout.cols)) = v(a);
    }
    return m;
  };

  OptimizationProblem p;
  p.lower.resize(d);
  p.upper.resize(d);
  for (Eigen::Index a = 0; a < d; ++a) {
    const auto f = static_cast<Eigen::Index>(act[static_cast<std::size_t>(a)]);
    p.lower(a) = layout.lower(f);
    p.upper(a) = layout.upper(f);
    p.variable_names.push_back(layout.ids[static_cast<std::size_t>(f)]);
  }
  p.constraint_names = {"stability"};
  if (use_vx) p.constraint_names.push_back("rms_vx");
  if (use_wz) p.constraint_names.push_back("rms_wz");
  p.budget = opt.budget;
  p.n_seed = opt.n_seed;
  p.workers = opt.workers;
  p.seed = opt.seed;
  p.evaluate = [&](const Eigen::VectorXd& v) {
    const Performance perf = performance(expand(v));
    EvalResult r;
    double l1 = 0.0;
    for (Eigen::Index a = 0; a < d; ++a) l1 += normalize_gain(v(a), p.lower(a), p.upper(a));
    r.objective = perf.stable ? l1 : kInf;
    r.constraints.push_back(perf.stable ? -1.0 : 1.0);
    if (use_vx) r.constraints.push_back(perf.stable ? perf.rmse_vx - opt.ub_vx : kInf);
    if (use_wz) r.constraints.push_back(perf.stable ? perf.rmse_wz - opt.ub_wz : kInf);
    return r;
  };

  StructureResult out;
  try {
    out.bo = run_parallel_bo(p, opt.bo);
  } catch (const BoFailure& e) {
    throw BoFailure("structure optimization found no gain meeting the rms bounds; consider larger bounds",
                    e.trace);
  }
  out.values = expand(out.bo.best_point);
  out.ranking = rank_by_magnitude(layout, out.values);
  out.performance = performance(out.values);
  p.evaluate = nullptr;
  out.problem = std::move(p);
  return out;
}

// -- UDR ---------------------------------------------------------------------

Eigen::MatrixXd ReductionMap::effective() const { return directions * scale.cwiseInverse().asDiagonal(); }

ReductionMap pca_reduce(const Dataset& data, const std::vector<OutputChannel>& channels,
                        const PcaTarget& target) {
  if (data.size() < 2) throw ReductionError("PCA needs at least two samples");
  if (channels.empty()) throw ReductionError("PCA needs at least one channel");
  if (target.components.has_value() == target.power_fraction.has_value()) {
    throw ReductionError("give exactly one of a component count or a power fraction");
  }
  const auto n = static_cast<Eigen::Index>(channels.size());
  const auto m = static_cast<Eigen::Index>(data.size());
  Eigen::MatrixXd y(m, n);
  for (Eigen::Index t = 0; t < m; ++t) {
    for (Eigen::Index j = 0; j < n; ++j) y(t, j) = data.y_meas[static_cast<std::size_t>(t)][channels[static_cast<std::size_t>(j)]];
  }
  ReductionMap map;
  map.channels = channels;
  map.mean = y.colwise().mean().transpose();
  y.rowwise() -= map.mean.transpose();
  map.scale = (y.colwise().squaredNorm() / static_cast<double>(m - 1)).cwiseSqrt().transpose();
  for (Eigen::Index j = 0; j < n; ++j) {
    if (!(map.scale(j) > 0.0) || !std::isfinite(map.scale(j))) {
      throw ReductionError("channel " + std::string(channel_name(channels[static_cast<std::size_t>(j)])) +
                           " has zero variance");
    }
  }
  y = y * map.scale.cwiseInverse().asDiagonal();
  const Eigen::MatrixXd cov = (y.transpose() * y) / static_cast<double>(m - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw ReductionError("eigen decomposition failed");
  // Descending order.
  Eigen::VectorXd ev = es.eigenvalues().reverse().cwiseMax(0.0);
  Eigen::MatrixXd vecs = es.eigenvectors().rowwise().reverse();
  const double total = ev.sum();
  map.power = ev / total;

  std::size_t rank = 0;
  for (Eigen::Index c = 0; c < n; ++c) {
    if (ev(c) > 1e-10 * ev(0)) ++rank;
  }
  std::size_t k = 0;
  if (target.components) {
    k = *target.components;
    if (k == 0 || k > static_cast<std::size_t>(n)) {
      throw ReductionError("component count must lie in [1, " + std::to_string(n) + "]");
    }
  } else {
    const double f = *target.power_fraction;
    if (!(f > 0.0 && f <= 1.0)) throw ReductionError("power fraction must lie in (0, 1]");
    double cum = 0.0;
    while (k < static_cast<std::size_t>(n)) {
      cum += map.power(static_cast<Eigen::Index>(k));
      ++k;
      if (cum >= f - 1e-12) break;
    }
  }
  if (k > rank) {
    throw ReductionError("requested " + std::to_string(k) + " components but the data has rank " +
                         std::to_string(rank));
  }
  map.directions = vecs.leftCols(static_cast<Eigen::Index>(k)).transpose();
  for (Eigen::Index c = 0; c < map.directions.rows(); ++c) {
    Eigen::Index arg = 0;
    map.directions.row(c).cwiseAbs().maxCoeff(&arg);
    if (map.directions(c, arg) < 0.0) map.directions.row(c) *= -1.0;
  }
  map.retained = map.power.head(static_cast<Eigen::Index>(k)).sum();
  return map;
}

ReducedBounds convert_bounds(const BoundsTable& bounds, const Eigen::MatrixXd& t) {
  bounds.validate();
  const Eigen::Index ny = t.cols();
  const Eigen::Index nr = t.rows();
  if (ny != static_cast<Eigen::Index>(bounds.channels.size())) {
    throw ReductionError("map and bounds disagree on the number of channels");
  }
  if (nr == 0 || !t.allFinite()) throw ReductionError("map must be finite and non-empty");
  const Eigen::Index rows = bounds.lower.rows();
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < ny; ++j) {
      if (!(bounds.upper(i, j) > bounds.lower(i, j))) {
        throw ReductionError("zero-width bounds for " +
                             gain_id(bounds.channels[static_cast<std::size_t>(j)], static_cast<std::size_t>(i)));
      }
    }
  }
  const Eigen::MatrixXd tabs = t.cwiseAbs();
  const Eigen::MatrixXd pinv = t.completeOrthogonalDecomposition().pseudoInverse();  // ny x nr

  ReducedBounds out{Eigen::MatrixXd(rows, nr), Eigen::MatrixXd(rows, nr)};
  for (Eigen::Index i = 0; i < rows; ++i) {
    const Eigen::RowVectorXd lo = bounds.lower.row(i);
    const Eigen::RowVectorXd hi = bounds.upper.row(i);
    const Eigen::RowVectorXd half = 0.5 * (hi - lo);
    const Eigen::RowVectorXd mid = 0.5 * (hi + lo);
    // Box shape: the original half-widths seen through the map.
    const Eigen::RowVectorXd w = (tabs * half.transpose()).transpose();
    const Eigen::RowVectorXd reach = w * tabs;  // induced half-width per unit scale
    const Eigen::RowVectorXd c_mid = mid * pinv;

    // Largest scale for a given center; concave in the center.
    const auto scale_at = [&](double a) {
      const Eigen::RowVectorXd g = a * (c_mid * t);
      double s = kInf;
      for (Eigen::Index j = 0; j < ny; ++j) {
        const double room = std::min(g(j) - lo(j), hi(j) - g(j));
        if (reach(j) > 0.0) {
          s = std::min(s, room / reach(j));
        } else if (room < 0.0) {
          s = -kInf;
        }
      }
      return s;
    };
    double best_a = 1.0;
    double best_s = scale_at(1.0);
    if (const double s0 = scale_at(0.0); s0 > best_s) {
      best_a = 0.0;
      best_s = s0;
    }
    double a = 0.0;
    double b = 1.0;
    for (int it = 0; it < 100; ++it) {
      const double m1 = a + (b - a) / 3.0;
      const double m2 = b - (b - a) / 3.0;
      if (scale_at(m1) < scale_at(m2)) {
        a = m1;
      } else {
        b = m2;
      }
    }
    if (const double sm = scale_at(0.5 * (a + b)); sm > best_s) {
      best_a = 0.5 * (a + b);
      best_s = sm;
    }
    if (!(best_s > 0.0) || !std::isfinite(best_s)) {
      throw ReductionError("no sound reduced box exists for state " + std::string(corrected_state_name(static_cast<std::size_t>(i))));
    }
    // Keep a hair of margin against rounding in K_red T.
    best_s *= 1.0 - 1e-12;
    const Eigen::RowVectorXd center = best_a * c_mid;
    out.lower.row(i) = center - best_s * w;
    out.upper.row(i) = center + best_s * w;
  }
  return out;
}

ReducedGain make_reduced_gain(const BoundsTable& bounds, const ReductionMap& map) {
  if (map.channels != bounds.channels) throw ReductionError("map and bounds use different channels");
  const Eigen::MatrixXd t = map.effective();
  const ReducedBounds rb = convert_bounds(bounds, t);
  ReducedGain k;
  k.channels = map.channels;
  k.map = t;
  k.lower = rb.lower;
  k.upper = rb.upper;
  // Zero, clamped into the box.
  k.entries = Eigen::MatrixXd::Zero(rb.lower.rows(), rb.lower.cols());
  k.entries = k.entries.cwiseMax(rb.lower).cwiseMin(rb.upper);
  return k;
}

BoundsTable udr_demo_bounds() {
  BoundsTable b;
  b.channels = {OutputChannel::kEncFL, OutputChannel::kEncFR, OutputChannel::kEncRL, OutputChannel::kEncRR};
  b.lower.resize(kNumCorrected, 4);
  b.upper.resize(kNumCorrected, 4);
  // Rows: vx, wz, wfl, wrr. Columns: fl, fr, rl, rr.
  b.lower << 0.0, 0.0, 0.0, 0.0,
             -0.06, -0.06, -0.06, -0.06,
             0.0, -0.75, -0.75, -0.75,
             -0.75, -0.75, -0.75, 0.0;
  b.upper << 0.45, 0.45, 0.45, 0.45,
             0.06, 0.06, 0.06, 0.06,
             1.5, 0.75, 0.75, 0.75,
             0.75, 0.75, 0.75, 1.5;
  return b;
}

// -- export ------------------------------------------------------------------

void write_ranking_csv(const ParameterRanking& ranking, const std::filesystem::path& path) {
  ranking.validate();
  CsvTable t;
  t.header = {"id", "row", "col", "k_tilde", "k", "class"};
  for (const RankedEntry& e : ranking.entries) {
    t.rows.push_back({e.id, std::to_string(e.row), std::to_string(e.col), format_number(e.score),
                      format_number(e.raw), std::to_string(e.mbr_class)});
  }
  write_csv(path, t);
}

ParameterRanking read_ranking_csv(const std::filesystem::path& path) {
  const CsvTable t = read_csv(path);
  const std::size_t id = t.column("id"), row = t.column("row"), col = t.column("col"),
                    score = t.column("k_tilde"), raw = t.column("k"), cls = t.column("class");
  ParameterRanking r;
  r.cols = 0;
  r.rows = 0;
  for (const auto& fields : t.rows) {
    RankedEntry e;
    e.id = fields.at(id);
    e.row = static_cast<std::size_t>(std::stoul(fields.at(row)));
    e.col = static_cast<std::size_t>(std::stoul(fields.at(col)));
    e.score = parse_number(fields.at(score));
    e.raw = parse_number(fields.at(raw));
    e.mbr_class = std::stoi(fields.at(cls));
    r.rows = std::max(r.rows, e.row + 1);
    r.cols = std::max(r.cols, e.col + 1);
    r.entries.push_back(std::move(e));
  }
  r.rows = std::max(r.rows, kNumCorrected);
  r.validate();
  return r;
}

void write_reduction_map(const ReductionMap& map, const std::filesystem::path& path) {
  Json j;
  auto ch = Json::array();
  for (OutputChannel c : map.channels) ch.push_back(std::string(channel_name(c)));
  j["channels"] = ch;
  j["directions"] = matrix_json(map.directions);
  j["mean"] = vector_json(map.mean);
  j["scale"] = vector_json(map.scale);
  j["power"] = vector_json(map.power);
  j["retained"] = map.retained;
  j["effective"] = matrix_json(map.effective());
  write_text(path, j.dump(2) + "\n");
}

ReductionMap read_reduction_map(const std::filesystem::path& path) {
  const auto j = nlohmann::json::parse(read_text(path));
  ReductionMap m;
  for (const auto& c : j.at("channels")) {
    const auto parsed = parse_channel(c.get<std::string>());
    if (!parsed) throw ReductionError("unknown channel " + c.get<std::string>());
    m.channels.push_back(*parsed);
  }
  m.directions = matrix_from_json(j.at("directions"));
  m.mean = vector_from_json(j.at("mean"));
  m.scale = vector_from_json(j.at("scale"));
  m.power = vector_from_json(j.at("power"));
  m.retained = number_from_json(j.at("retained"));
  if (m.directions.cols() != static_cast<Eigen::Index>(m.channels.size()) ||
      m.scale.size() != m.directions.cols()) {
    throw ReductionError("reduction map shapes are inconsistent");
  }
  return m;
}

}  // namespace til
