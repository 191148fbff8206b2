#pragma once

// Experiment orchestration: configuration, datasets, tuning stages, repeated
// pipelines and the statistics written to reports.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "til/bayes_opt.hpp"
#include "til/dataset.hpp"
#include "til/ekf.hpp"
#include "til/observer.hpp"
#include "til/reduction.hpp"
#include "til/scenario.hpp"

namespace til {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class PipelineKind { kMbr, kSdr, kUdr, kSdrUdr, kEkf };
std::string_view pipeline_name(PipelineKind p);

/// How optimizer time is reported: measured seconds, or the deterministic
/// makespan of the virtual scheduler (byte-stable reports).
enum class ClockKind { kWall, kVirtual };

struct BudgetConfig {
  std::size_t n = 150;
  std::size_t n_seed = 50;
  std::size_t workers = 2;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::size_t repeats = 5;
  PipelineKind pipeline = PipelineKind::kMbr;
  ClockKind clock = ClockKind::kWall;
  bool threaded = false;

  std::string optimization = "optimization";  // preset name or scenario file
  std::vector<std::string> validation{"A", "B", "C", "D", "E"};
  MismatchPreset mismatch = MismatchPreset::default_preset();
  double vx_offset = 2.0;  // m/s, initial estimate error

  BudgetConfig budget{};

  std::vector<int> mbr_levels{12, 7, 5, 3};
  bool heuristic_bounds = false;  // range heuristic instead of the published table

  double ub_vx = 0.25;  // km/h
  double ub_wz = 0.25;  // deg/s
  std::vector<std::size_t> sdr_counts{8, 6, 4};
  std::vector<double> sdr_deltas;  // used instead of counts when given

  std::size_t udr_components = 3;
  std::vector<std::size_t> sdr_udr_counts{10, 8};
  // encoders alone cannot pull wz down to ub_wz, so the reduced search gets its own bounds
  double sdr_udr_ub_vx = 0.25;
  double sdr_udr_ub_wz = 0.5;

  double ekf_decades = 4.0;

  // tune-til target: an MBR level, or a mask file when set.
  int tune_level = 5;
  std::optional<std::filesystem::path> tune_mask;

  /// Throws ConfigError.
  void validate() const;
};

ExperimentConfig parse_config(const std::string& yaml_text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Independent stream seed from a master seed and up to two stream labels.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b = 0);

struct ExperimentData {
  VehicleParams twin;
  VehicleParams plant;
  Dataset optimization;
  std::vector<Dataset> validation;  // labels are the configured names
};

/// Resolves a preset name or YAML scenario file. Throws ConfigError.
ScenarioSpec resolve_scenario(const std::string& name_or_path);
ExperimentData make_data(const ExperimentConfig& cfg);

// -- statistics --------------------------------------------------------------

/// Linear-interpolation quantile (R-7). Throws std::invalid_argument when empty.
double quantile_r7(std::vector<double> values, double p);

struct Quantiles {
  double min = 0.0;
  double q25 = 0.0;
  double median = 0.0;
  double q75 = 0.0;
  double max = 0.0;
};
Quantiles quantiles(const std::vector<double>& values);

struct RunRow {
  std::string variant;
  std::size_t repeat = 0;
  std::size_t dim = 0;
  std::string dataset;
  bool stable = true;
  double rmse_vx = 0.0;
  double rmse_wz = 0.0;
  double rmse_beta = 0.0;
  double loss = 0.0;        // rms(v_x) + rms(omega_z)
  double wall_time = 0.0;   // tuning stage, s
  double prep_time = 0.0;   // structure optimization feeding this variant, s
};

struct GroupSummary {
  std::string variant;
  std::string dataset;
  double dim = 0.0;  // median
  std::size_t count = 0;
  std::size_t unstable = 0;
  Quantiles rmse_vx;
  Quantiles rmse_wz;
  Quantiles rmse_beta;
  Quantiles loss;
  Quantiles wall_time;
  Quantiles prep_time;
};

struct RunSummary {
  std::vector<RunRow> rows;        // sorted by variant, dataset, repeat
  std::vector<GroupSummary> groups;  // sorted by descending dim, variant, dataset
};

/// Order statistics per (variant, dataset). Independent of row order.
RunSummary aggregate_stats(const std::vector<RunRow>& rows);

const GroupSummary& find_group(const RunSummary& s, std::string_view variant, std::string_view dataset);

void write_rows_csv(const std::vector<RunRow>& rows, const std::filesystem::path& path);
std::vector<RunRow> read_rows_csv(const std::filesystem::path& path);
void write_summary_csv(const RunSummary& s, const std::filesystem::path& path);
void write_summary_json(const RunSummary& s, const std::filesystem::path& path);
/// Reads summary.json and checks its groups against a fresh aggregation of
/// its rows; throws std::runtime_error on a mismatch.
RunSummary read_summary_json(const std::filesystem::path& path);

// -- artifacts ---------------------------------------------------------------

/// A tuned estimator: plain gain, reduced gain over a PCA map, or EKF config.
struct Artifact {
  std::optional<GainMatrix> gain;
  std::optional<ReducedGain> reduced;
  BoolMatrix reduced_mask;  // kept reduced entries
  std::optional<EkfConfig> ekf;

  std::size_t dim() const;
};

void write_artifact(const Artifact& a, const std::filesystem::path& path);
Artifact read_artifact(const std::filesystem::path& path);
void write_mask(const BoolMatrix& m, const std::vector<std::string>& ids, const std::filesystem::path& path);
BoolMatrix read_mask(const std::filesystem::path& path);

/// Simulates the artifact on one dataset.
ObserverRun simulate(const Artifact& a, const Dataset& data, const ExperimentConfig& cfg,
                     bool keep_trajectory = false);

/// One row per validation dataset.
std::vector<RunRow> validate_artifact(const Artifact& a, const ExperimentData& data,
                                      const ExperimentConfig& cfg, const std::string& variant,
                                      std::size_t repeat);

// -- stages ------------------------------------------------------------------

struct TuneOutcome {
  Artifact artifact;
  BoResult bo;
  OptimizationProblem problem;  // evaluate left empty
  double wall_time = 0.0;       // per the configured clock
};

BoSettings bo_settings(const ExperimentConfig& cfg);
/// Seconds spent by a run per the configured clock.
double stage_time(const BoResult& bo, const ExperimentConfig& cfg);

/// Performance problem over the active entries of `start`.
TuneOutcome tune_gain(const GainMatrix& start, const Dataset& data, const ExperimentConfig& cfg,
                      std::uint64_t seed);
/// Same over the kept entries of a reduced gain.
TuneOutcome tune_reduced(const ReducedGain& start, const BoolMatrix& mask, const Dataset& data,
                         const ExperimentConfig& cfg, std::uint64_t seed);
TuneOutcome tune_ekf_stage(const ExperimentData& data, const ExperimentConfig& cfg, std::uint64_t seed);

/// Case-study gain with the configured bounds.
GainMatrix base_gain(const ExperimentData& data, const ExperimentConfig& cfg);

struct StageTime {
  std::string name;
  double seconds = 0.0;
};

struct TraceArtifact {
  std::string run;
  std::vector<EvaluationRecord> trace;
  OptimizationProblem problem;
};

struct ExperimentResult {
  RunSummary summary;
  std::vector<StageTime> stages;
  double total_time = 0.0;
  std::vector<TraceArtifact> traces;
  std::vector<std::pair<std::string, ParameterRanking>> rankings;
  std::optional<ReductionMap> map;
  std::vector<std::pair<std::string, Artifact>> artifacts;
};

using Logger = std::function<void(const std::string&)>;

/// Runs the configured pipeline `repeats` times and validates every variant.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const Logger& log = {});

/// summary.csv, summary.json, rows.csv, stages.csv, trace_<run>.csv,
/// ranking_<run>.csv and map.json where applicable.
void write_report(const ExperimentResult& r, const std::filesystem::path& dir);

}  // namespace til
