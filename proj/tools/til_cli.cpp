// til: datasets, tuning, structure optimization, pruning, validation, reports.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "til/csv.hpp"
#include "til/harness.hpp"

namespace fs = std::filesystem;
using namespace til;

namespace {

enum Exit { kOk = 0, kInternal = 1, kConfig = 2, kOptimizer = 3, kDivergence = 4 };

struct Common {
  std::string config;
  std::string out = ".";
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "experiment config (YAML)");
  app->add_option("--out", c.out, "output directory");
  app->add_option("--seed", c.seed, "master seed, overrides the config");
}

ExperimentConfig config_of(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? parse_config("") : load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

fs::path out_dir(const Common& c) {
  const fs::path p(c.out);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw ConfigError("cannot create output directory " + p.string());
  return p;
}

void log_line(const std::string& s) { std::cerr << s << '\n'; }

std::vector<std::string> kept_ids(const ParameterRanking& r, const BoolMatrix& mask) {
  std::vector<std::string> ids;
  for (const RankedEntry& e : r.entries) {
    if (mask(static_cast<Eigen::Index>(e.row), static_cast<Eigen::Index>(e.col))) ids.push_back(e.id);
  }
  return ids;
}

void write_outcome(const TuneOutcome& t, const fs::path& dir, const std::string& stem) {
  write_artifact(t.artifact, dir / (stem + ".json"));
  write_trace_csv(t.bo.trace, t.problem, dir / ("trace_" + stem + ".csv"));
}

int cmd_generate(const Common& c) {
  const ExperimentConfig cfg = config_of(c);
  const fs::path dir = out_dir(c);
  const ExperimentData d = make_data(cfg);
  write_dataset(d.optimization, dir / "optimization.csv");
  for (const Dataset& v : d.validation) write_dataset(v, dir / ("validation_" + v.label + ".csv"));
  std::cout << "wrote " << 1 + d.validation.size() << " datasets to " << dir.string() << '\n';
  return kOk;
}

int cmd_tune_til(const Common& c) {
  const ExperimentConfig cfg = config_of(c);
  const fs::path dir = out_dir(c);
  const ExperimentData d = make_data(cfg);
  const std::uint64_t seed = derive_seed(cfg.seed, 100, 1);
  TuneOutcome t;
  std::string what;
  if (cfg.pipeline == PipelineKind::kUdr || cfg.pipeline == PipelineKind::kSdrUdr) {
    const BoundsTable b = udr_demo_bounds();
    const ReductionMap map = pca_reduce(d.optimization, b.channels, PcaTarget{cfg.udr_components, std::nullopt});
    const ReducedGain k = make_reduced_gain(b, map);
    BoolMatrix mask = BoolMatrix::Constant(k.entries.rows(), k.entries.cols(), true);
    if (cfg.tune_mask) mask = read_mask(*cfg.tune_mask);
    t = tune_reduced(k, mask, d.optimization, cfg, seed);
    write_reduction_map(map, dir / "map.json");
    what = "reduced gain";
  } else {
    const GainMatrix base = base_gain(d, cfg);
    const BoolMatrix mask = cfg.tune_mask ? read_mask(*cfg.tune_mask) : mbr_plan(cfg.tune_level);
    t = tune_gain(base.with_mask(mask), d.optimization, cfg, seed);
    what = cfg.tune_mask ? "masked gain" : "MBR level " + std::to_string(cfg.tune_level);
  }
  write_outcome(t, dir, "gain");
  std::cout << what << ": " << t.artifact.dim() << " parameters, loss " << format_number(t.bo.best_value)
            << ", " << format_number(t.wall_time) << " s\n";
  return kOk;
}

int cmd_structure_opt(const Common& c) {
  const ExperimentConfig cfg = config_of(c);
  const fs::path dir = out_dir(c);
  const ExperimentData d = make_data(cfg);
  StructureOptions so;
  const bool reduced = cfg.pipeline == PipelineKind::kSdrUdr;
  so.ub_vx = reduced ? cfg.sdr_udr_ub_vx : cfg.ub_vx;
  so.ub_wz = reduced ? cfg.sdr_udr_ub_wz : cfg.ub_wz;
  so.budget = cfg.budget.n;
  so.n_seed = cfg.budget.n_seed;
  so.workers = cfg.budget.workers;
  so.seed = derive_seed(cfg.seed, 100, 1000);
  so.bo = bo_settings(cfg);
  const VehicleState x0 = perturbed_initial_state(d.optimization, cfg.vx_offset);
  StructureResult s;
  if (cfg.pipeline == PipelineKind::kSdrUdr) {
    const BoundsTable b = udr_demo_bounds();
    const ReductionMap map = pca_reduce(d.optimization, b.channels, PcaTarget{cfg.udr_components, std::nullopt});
    const ReducedGain k = make_reduced_gain(b, map);
    s = structure_optimize(GainLayout::of(k), observer_performance(d.optimization, x0, k.channels, k.map), so);
    write_reduction_map(map, dir / "map.json");
  } else {
    const GainMatrix base = base_gain(d, cfg);
    s = structure_optimize(GainLayout::of(base), observer_performance(d.optimization, x0, base.channels), so);
  }
  write_ranking_csv(s.ranking, dir / "ranking.csv");
  write_trace_csv(s.bo.trace, s.problem, dir / "trace_structure.csv");
  std::cout << "l1 " << format_number(s.bo.best_value) << ", rms vx " << format_number(s.performance.rmse_vx)
            << " km/h, rms wz " << format_number(s.performance.rmse_wz) << " deg/s\n";
  return kOk;
}

int cmd_prune(const Common& c, const std::string& ranking_path, std::optional<double> delta,
              std::optional<std::size_t> count) {
  config_of(c);  // validated for uniformity
  const fs::path dir = out_dir(c);
  ParameterRanking r;
  try {
    r = read_ranking_csv(ranking_path);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("cannot read ranking: ") + e.what());
  }
  if (delta.has_value() == count.has_value()) throw ConfigError("give exactly one of --delta and --count");
  const double d = delta ? *delta : delta_for_count(r, *count);
  const BoolMatrix mask = prune(r, d);
  write_mask(mask, kept_ids(r, mask), dir / "mask.json");
  std::cout << "delta " << format_number(d) << " keeps " << mask.count() << " of " << r.entries.size() << '\n';
  return kOk;
}

int cmd_tune_ekf(const Common& c) {
  const ExperimentConfig cfg = config_of(c);
  const fs::path dir = out_dir(c);
  const ExperimentData d = make_data(cfg);
  const TuneOutcome t = tune_ekf_stage(d, cfg, derive_seed(cfg.seed, 100, 500));
  write_outcome(t, dir, "ekf");
  std::cout << "ekf loss " << format_number(t.bo.best_value) << ", " << format_number(t.wall_time) << " s\n";
  return kOk;
}

int cmd_validate(const Common& c, const std::string& artifact_path, const std::string& variant) {
  const ExperimentConfig cfg = config_of(c);
  const fs::path dir = out_dir(c);
  Artifact a;
  try {
    a = read_artifact(artifact_path);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("cannot read artifact: ") + e.what());
  }
  const ExperimentData d = make_data(cfg);
  const std::vector<RunRow> rows = validate_artifact(a, d, cfg, variant, 0);
  const RunSummary s = aggregate_stats(rows);
  write_rows_csv(s.rows, dir / "rows.csv");
  write_summary_csv(s, dir / "summary.csv");
  write_summary_json(s, dir / "summary.json");
  bool stable = true;
  for (const RunRow& r : s.rows) {
    std::cout << r.dataset << ": " << (r.stable ? "stable" : "UNSTABLE") << ", rms vx " << format_number(r.rmse_vx)
              << ", rms beta " << format_number(r.rmse_beta) << ", rms wz " << format_number(r.rmse_wz) << '\n';
    stable = stable && r.stable;
  }
  if (!stable) {
    std::cerr << "error: estimator diverged on at least one validation dataset\n";
    return kDivergence;
  }
  return kOk;
}

int cmd_report(const Common& c, const std::string& rows_path) {
  const fs::path dir = out_dir(c);
  if (!rows_path.empty()) {
    std::vector<RunRow> rows;
    try {
      rows = read_rows_csv(rows_path);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("cannot read rows: ") + e.what());
    }
    if (rows.empty()) throw ConfigError("rows file is empty");
    const RunSummary s = aggregate_stats(rows);
    write_summary_csv(s, dir / "summary.csv");
    write_summary_json(s, dir / "summary.json");
    std::cout << s.groups.size() << " groups from " << rows.size() << " rows\n";
    return kOk;
  }
  const ExperimentConfig cfg = config_of(c);
  const ExperimentResult r = run_experiment(cfg, log_line);
  write_report(r, dir);
  for (const GroupSummary& g : r.summary.groups) {
    std::cout << g.variant << " " << g.dataset << ": median loss " << format_number(g.loss.median)
              << ", median time " << format_number(g.wall_time.median) << " s\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Twin-in-the-loop observer tuning"};
  app.require_subcommand(1);
  Common common;

  auto* gen = app.add_subcommand("generate", "simulate the optimization and validation datasets");
  auto* tune = app.add_subcommand("tune-til", "tune the observer gain (MBR level, mask or reduced gain)");
  auto* structure = app.add_subcommand("structure-opt", "rank gain entries by l1 structure optimization");
  auto* prune_cmd = app.add_subcommand("prune", "threshold a ranking into a mask");
  auto* ekf = app.add_subcommand("tune-ekf", "tune the EKF noise covariances");
  auto* val = app.add_subcommand("validate", "simulate an artifact on every validation dataset");
  auto* rep = app.add_subcommand("report", "run the configured pipeline and write reports");
  for (auto* s : {gen, tune, structure, prune_cmd, ekf, val, rep}) add_common(s, common);

  std::string ranking_path;
  std::optional<double> delta;
  std::optional<std::size_t> count;
  prune_cmd->add_option("--ranking", ranking_path, "ranking CSV from structure-opt")->required();
  prune_cmd->add_option("--delta", delta, "keep entries with normalized magnitude >= delta");
  prune_cmd->add_option("--count", count, "keep this many entries");

  std::string artifact_path;
  std::string variant = "artifact";
  val->add_option("--artifact", artifact_path, "artifact JSON")->required();
  val->add_option("--variant", variant, "label used in the rows");

  std::string rows_path;
  rep->add_option("--rows", rows_path, "re-aggregate an existing rows.csv instead of running");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: " << e.what() << '\n';
    return kConfig;
  }

  try {
    if (*gen) return cmd_generate(common);
    if (*tune) return cmd_tune_til(common);
    if (*structure) return cmd_structure_opt(common);
    if (*prune_cmd) return cmd_prune(common, ranking_path, delta, count);
    if (*ekf) return cmd_tune_ekf(common);
    if (*val) return cmd_validate(common, artifact_path, variant);
    if (*rep) return cmd_report(common, rows_path);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfig;
  } catch (const ScenarioError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfig;
  } catch (const ReductionError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfig;
  } catch (const BoFailure& e) {
    std::cerr << "error: optimizer failed: " << e.what() << '\n';
    return kOptimizer;
  } catch (const SimulationDivergence& e) {
    std::cerr << "error: simulation diverged: " << e.what() << '\n';
    return kDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInternal;
  }
  return kInternal;
}
