#pragma once

// Dimensionality reduction of the correction gain: physics-based pruning
// (MBR), l1 structure optimization followed by thresholding (SDR), and PCA
// projection of the output error with a reduced gain (UDR).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "til/bayes_opt.hpp"
#include "til/dataset.hpp"
#include "til/observer.hpp"

namespace til {

struct ReductionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Per-entry bounds of K over a channel list (rows are the corrected states).
struct BoundsTable {
  std::vector<OutputChannel> channels;
  Eigen::MatrixXd lower;
  Eigen::MatrixXd upper;

  /// The published ranges for the case-study gain (columns wz, enc_fl, enc_rr).
  static BoundsTable table_one();
  void validate() const;
  /// Copy of k with these bounds; throws on a channel mismatch.
  GainMatrix apply(const GainMatrix& k) const;
};

// -- MBR ---------------------------------------------------------------------

/// Importance class 1..4 of a case-study entry; 0 for entries outside it.
///  1 auto-correlated, 2 wheel -> v_x, 3 cross-wheel, 4 lateral/longitudinal.
int mbr_class(OutputChannel column, std::size_t row);

/// Mask over the case-study gain for level 12, 7, 5 or 3.
BoolMatrix mbr_plan(int level);

struct RangeOptions {
  std::size_t segments = 10;
  std::vector<OutputChannel> channels{OutputChannel::kGyroZ, OutputChannel::kEncFL,
                                      OutputChannel::kEncRR};
};

/// Range heuristic. Auto-correlated entries get [0, 1.5], cross-wheel ones
/// [-0.75, 0.75]; the rest a width of 1.5 mean(range(x_i)/range(y_j)) over
/// equal segments, centered at zero except wheel -> v_x, which start at 0.
/// Segments where y_j is flat are skipped and reported in `warnings`.
BoundsTable mbr_ranges(const Dataset& data, const RangeOptions& opt = {},
                       std::vector<std::string>* warnings = nullptr);

// -- SDR ---------------------------------------------------------------------

/// |k / upper| for k > 0, |k / lower| for k < 0, 0 for k == 0.
double normalize_gain(double k, double lower, double upper);

/// Sum of normalized magnitudes over the active entries of k.
double l1_of_normalized(const GainMatrix& k);

/// A rows x cols gain seen as a flat, row-major parameter vector.
struct GainLayout {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::string> ids;  // rows * cols
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
  std::vector<bool> active;
  std::vector<int> classes;      // mbr_class, 0 when not applicable

  static GainLayout of(const GainMatrix& k);
  /// Ids "pc<c>->state", every entry active.
  static GainLayout of(const ReducedGain& k);
  std::vector<std::size_t> active_indices() const;
  GainLayout with_mask(const BoolMatrix& mask) const;
};

struct RankedEntry {
  std::string id;
  std::size_t row = 0;
  std::size_t col = 0;
  double score = 0.0;  // normalized magnitude in [0, 1]
  double raw = 0.0;
  int mbr_class = 0;
};

/// Entries sorted by score, descending; ties keep row-major order.
struct ParameterRanking {
  std::size_t rows = kNumCorrected;
  std::size_t cols = 0;
  std::vector<RankedEntry> entries;

  /// Throws ReductionError on duplicate ids, positions outside the shape or
  /// scores outside [0, 1].
  void validate() const;
  double total() const;
};

/// Ranking of the active entries of `values` (rows x cols) by normalized magnitude.
ParameterRanking rank_by_magnitude(const GainLayout& layout, const Eigen::MatrixXd& values);
ParameterRanking rank_by_magnitude(const GainMatrix& k);

/// Keeps entries with score >= delta. Throws ReductionError when nothing is left.
BoolMatrix prune(const ParameterRanking& ranking, double delta);

/// Largest threshold that keeps at least `count` entries.
double delta_for_count(const ParameterRanking& ranking, std::size_t count);

struct Performance {
  bool stable = true;
  double rmse_vx = 0.0;  // km/h
  double rmse_wz = 0.0;  // deg/s
};
/// Closed-loop evaluation of a full rows x cols gain; replaceable for testing.
using PerformanceFn = std::function<Performance(const Eigen::MatrixXd& entries)>;

/// Observer-backed performance of K = entries * map (map = identity when empty).
PerformanceFn observer_performance(const Dataset& data, const VehicleState& x0,
                                   std::vector<OutputChannel> channels,
                                   Eigen::MatrixXd map = {}, const ObserverOptions& opt = {});

struct StructureOptions {
  double ub_vx = 1.5;  // km/h, +inf drops the constraint
  double ub_wz = 1.5;  // deg/s
  std::size_t budget = 150;
  std::size_t n_seed = 50;
  std::size_t workers = 2;
  std::uint64_t seed = 0;
  BoSettings bo{};
};

struct StructureResult {
  Eigen::MatrixXd values;  // rows x cols, inactive entries zero
  ParameterRanking ranking;
  Performance performance;  // re-simulated at `values`
  BoResult bo;
  OptimizationProblem problem;  // evaluate left empty; kept for the trace header
};

/// min sum of normalized magnitudes over the active entries, subject to
/// stability, rms(v_x) <= ub_vx and rms(omega_z) <= ub_wz. Throws BoFailure
/// when no candidate meets the bounds.
StructureResult structure_optimize(const GainLayout& layout, const PerformanceFn& performance,
                                   const StructureOptions& opt = {});

// -- UDR ---------------------------------------------------------------------

/// z-scored principal directions of a channel set.
struct ReductionMap {
  std::vector<OutputChannel> channels;
  Eigen::MatrixXd directions;   // n_red x n_y, orthonormal rows
  Eigen::VectorXd mean;         // per channel
  Eigen::VectorXd scale;        // per-channel standard deviation
  Eigen::VectorXd power;        // eigenvalue fractions of every component, descending
  double retained = 0.0;        // sum of the first n_red fractions

  std::size_t reduced_dim() const { return static_cast<std::size_t>(directions.rows()); }
  /// directions * diag(1 / scale): acts on raw output errors.
  Eigen::MatrixXd effective() const;
};

struct PcaTarget {
  std::optional<std::size_t> components;
  std::optional<double> power_fraction;  // smallest count reaching it
};

ReductionMap pca_reduce(const Dataset& data, const std::vector<OutputChannel>& channels,
                        const PcaTarget& target);

/// Conservative bounds on K_red such that every K_red in the box induces
/// K = K_red T inside the original bounds. Per row, the box is centered at the
/// best point on the segment from 0 to the projected midpoint and scaled
/// uniformly to the largest sound factor.
struct ReducedBounds {
  Eigen::MatrixXd lower;  // n_corrected x n_red
  Eigen::MatrixXd upper;
};
ReducedBounds convert_bounds(const BoundsTable& bounds, const Eigen::MatrixXd& t);

/// Reduced gain over a map, zero entries, converted bounds.
ReducedGain make_reduced_gain(const BoundsTable& bounds, const ReductionMap& map);

/// Ranges for the full 4 x 4 gain over the wheel encoders used by the UDR demo.
BoundsTable udr_demo_bounds();

// -- export ------------------------------------------------------------------

void write_ranking_csv(const ParameterRanking& ranking, const std::filesystem::path& path);
ParameterRanking read_ranking_csv(const std::filesystem::path& path);
void write_reduction_map(const ReductionMap& map, const std::filesystem::path& path);
ReductionMap read_reduction_map(const std::filesystem::path& path);

}  // namespace til
