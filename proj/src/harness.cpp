#include "til/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "til/csv.hpp"
#include "til/json_io.hpp"

namespace til {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string lower_case(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

PipelineKind parse_pipeline(const std::string& s) {
  const std::string v = lower_case(s);
  if (v == "mbr") return PipelineKind::kMbr;
  if (v == "sdr") return PipelineKind::kSdr;
  if (v == "udr") return PipelineKind::kUdr;
  if (v == "sdr_udr" || v == "sdr+udr") return PipelineKind::kSdrUdr;
  if (v == "ekf") return PipelineKind::kEkf;
  throw ConfigError("unknown pipeline '" + s + "'");
}

bool looks_like_file(const std::string& s) {
  const auto ext = std::filesystem::path(s).extension().string();
  return ext == ".yaml" || ext == ".yml";
}

Json quantiles_json(const Quantiles& q) {
  Json j;
  j["min"] = number_json(q.min);
  j["q25"] = number_json(q.q25);
  j["median"] = number_json(q.median);
  j["q75"] = number_json(q.q75);
  j["max"] = number_json(q.max);
  return j;
}

Quantiles quantiles_from_json(const nlohmann::json& j) {
  return {number_from_json(j.at("min")), number_from_json(j.at("q25")), number_from_json(j.at("median")),
          number_from_json(j.at("q75")), number_from_json(j.at("max"))};
}

bool same_number(double a, double b) {
  if (std::isnan(a) || std::isnan(b)) return std::isnan(a) && std::isnan(b);
  if (a == b) return true;
  return std::abs(a - b) <= 1e-12 * std::max(std::abs(a), std::abs(b));
}

bool same_quantiles(const Quantiles& a, const Quantiles& b) {
  return same_number(a.min, b.min) && same_number(a.q25, b.q25) && same_number(a.median, b.median) &&
         same_number(a.q75, b.q75) && same_number(a.max, b.max);
}

const std::vector<std::string>& row_columns() {
  static const std::vector<std::string> cols = {"variant", "repeat", "dim", "dataset", "stable",
                                                "rmse_vx", "rmse_wz", "rmse_beta", "loss", "wall_time",
                                                "prep_time"};
  return cols;
}

std::vector<std::string> channel_names(const std::vector<OutputChannel>& channels) {
  std::vector<std::string> out;
  for (OutputChannel c : channels) out.emplace_back(channel_name(c));
  return out;
}

std::vector<OutputChannel> channels_from_json(const nlohmann::json& j) {
  std::vector<OutputChannel> out;
  for (const auto& c : j) {
    const auto parsed = parse_channel(c.get<std::string>());
    if (!parsed) throw std::invalid_argument("unknown channel " + c.get<std::string>());
    out.push_back(*parsed);
  }
  return out;
}

Json mask_json(const BoolMatrix& m) {
  Json j = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(static_cast<bool>(m(r, c)));
    j.push_back(std::move(row));
  }
  return j;
}

BoolMatrix mask_from_json(const nlohmann::json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows > 0 ? static_cast<Eigen::Index>(j[0].size()) : 0;
  BoolMatrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    if (static_cast<Eigen::Index>(row.size()) != cols) throw std::invalid_argument("ragged mask");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<bool>();
  }
  return m;
}

// Entries outside `mask` set to zero.
Eigen::MatrixXd masked(const Eigen::MatrixXd& m, const BoolMatrix& mask) {
  return mask.select(m, Eigen::MatrixXd::Zero(m.rows(), m.cols()));
}

std::string variant_with_count(const char* prefix, std::size_t n) { return prefix + std::to_string(n); }

std::string variant_with_delta(const char* prefix, double d) { return std::string(prefix) + "_d" + format_number(d); }

}  // namespace

std::string_view pipeline_name(PipelineKind p) {
  switch (p) {
    case PipelineKind::kMbr: return "mbr";
    case PipelineKind::kSdr: return "sdr";
    case PipelineKind::kUdr: return "udr";
    case PipelineKind::kSdrUdr: return "sdr_udr";
    case PipelineKind::kEkf: return "ekf";
  }
  return "?";
}

// -- configuration -----------------------------------------------------------

void ExperimentConfig::validate() const {
  if (repeats < 1) throw ConfigError("repeats must be at least 1");
  if (budget.n_seed < 1 || budget.n_seed >= budget.n) throw ConfigError("budget needs 1 <= n_seed < n");
  if (budget.workers < 1) throw ConfigError("budget needs at least one worker");
  for (const std::string& s : validation) resolve_scenario(s);
  resolve_scenario(optimization);
  if (validation.empty()) throw ConfigError("at least one validation scenario is required");
  for (int level : mbr_levels) {
    if (level != 12 && level != 7 && level != 5 && level != 3) {
      throw ConfigError("MBR level must be 12, 7, 5 or 3, got " + std::to_string(level));
    }
  }
  if (!(ub_vx > 0.0) || !(ub_wz > 0.0) || !(sdr_udr_ub_vx > 0.0) || !(sdr_udr_ub_wz > 0.0)) {
    throw ConfigError("rms upper bounds must be positive");
  }
  for (std::size_t c : sdr_counts) {
    if (c < 1 || c > 12) throw ConfigError("SDR counts must lie in [1, 12]");
  }
  for (double d : sdr_deltas) {
    if (!(d >= 0.0 && d <= 1.0)) throw ConfigError("SDR thresholds must lie in [0, 1]");
  }
  if (udr_components < 1 || udr_components >= 4) throw ConfigError("UDR components must lie in [1, 3]");
  for (std::size_t c : sdr_udr_counts) {
    if (c < 1 || c > 4 * udr_components) throw ConfigError("SDR+UDR counts exceed the reduced gain size");
  }
  if (!(ekf_decades > 0.0)) throw ConfigError("EKF box width must be positive");
  if (tune_level != 12 && tune_level != 7 && tune_level != 5 && tune_level != 3) {
    throw ConfigError("tune level must be 12, 7, 5 or 3");
  }
  if (!(vx_offset >= 0.0) || !std::isfinite(vx_offset)) throw ConfigError("vx offset must be finite and >= 0");
  if (!(mismatch.mass_scale > 0.0 && mismatch.tire_peak_scale > 0.0 && mismatch.drag_scale > 0.0 &&
        mismatch.rolling_scale > 0.0)) {
    throw ConfigError("mismatch scales must be positive");
  }
}

ExperimentConfig parse_config(const std::string& yaml_text) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("invalid config file: ") + e.what());
  }
  ExperimentConfig c;
  if (root.IsNull()) {
    c.validate();
    return c;
  }
  if (!root.IsMap()) throw ConfigError("config must be a key/value map");
  static const std::set<std::string> known = {"seed", "repeats", "pipeline", "clock", "threaded", "scenarios",
                                              "mismatch", "initial_vx_offset", "budget", "mbr", "sdr", "udr",
                                              "sdr_udr", "ekf", "tune"};
  for (const auto& kv : root) {
    const auto key = kv.first.as<std::string>();
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  try {
    if (root["seed"]) c.seed = root["seed"].as<std::uint64_t>();
    if (root["repeats"]) c.repeats = root["repeats"].as<std::size_t>();
    if (root["pipeline"]) c.pipeline = parse_pipeline(root["pipeline"].as<std::string>());
    if (root["clock"]) {
      const auto v = lower_case(root["clock"].as<std::string>());
      if (v == "wall") c.clock = ClockKind::kWall;
      else if (v == "virtual") c.clock = ClockKind::kVirtual;
      else throw ConfigError("clock must be 'wall' or 'virtual'");
    }
    if (root["threaded"]) c.threaded = root["threaded"].as<bool>();
    if (const auto s = root["scenarios"]) {
      if (s["optimization"]) c.optimization = s["optimization"].as<std::string>();
      if (s["validation"]) c.validation = s["validation"].as<std::vector<std::string>>();
    }
    if (const auto m = root["mismatch"]) {
      if (m.IsScalar()) {
        const auto v = lower_case(m.as<std::string>());
        if (v == "default") c.mismatch = MismatchPreset::default_preset();
        else if (v == "none") c.mismatch = MismatchPreset::none();
        else throw ConfigError("mismatch must be 'default', 'none' or a map of scales");
      } else {
        c.mismatch = MismatchPreset::none();
        if (m["mass_scale"]) c.mismatch.mass_scale = m["mass_scale"].as<double>();
        if (m["tire_peak_scale"]) c.mismatch.tire_peak_scale = m["tire_peak_scale"].as<double>();
        if (m["drag_scale"]) c.mismatch.drag_scale = m["drag_scale"].as<double>();
        if (m["rolling_scale"]) c.mismatch.rolling_scale = m["rolling_scale"].as<double>();
      }
    }
    if (root["initial_vx_offset"]) c.vx_offset = root["initial_vx_offset"].as<double>();
    if (const auto b = root["budget"]) {
      if (b["n"]) c.budget.n = b["n"].as<std::size_t>();
      if (b["n_seed"]) c.budget.n_seed = b["n_seed"].as<std::size_t>();
      if (b["workers"]) c.budget.workers = b["workers"].as<std::size_t>();
    }
    if (const auto m = root["mbr"]) {
      if (m["levels"]) c.mbr_levels = m["levels"].as<std::vector<int>>();
      if (m["bounds"]) {
        const auto v = lower_case(m["bounds"].as<std::string>());
        if (v == "table") c.heuristic_bounds = false;
        else if (v == "heuristic") c.heuristic_bounds = true;
        else throw ConfigError("mbr.bounds must be 'table' or 'heuristic'");
      }
    }
    if (const auto s = root["sdr"]) {
      if (s["ub_vx"]) c.ub_vx = s["ub_vx"].as<double>();
      if (s["ub_wz"]) c.ub_wz = s["ub_wz"].as<double>();
      if (s["counts"]) c.sdr_counts = s["counts"].as<std::vector<std::size_t>>();
      if (s["deltas"]) {
        c.sdr_deltas = s["deltas"].as<std::vector<double>>();
        if (!s["counts"]) c.sdr_counts.clear();
      }
    }
    if (const auto u = root["udr"]) {
      if (u["components"]) c.udr_components = u["components"].as<std::size_t>();
    }
    if (const auto u = root["sdr_udr"]) {
      if (u["counts"]) c.sdr_udr_counts = u["counts"].as<std::vector<std::size_t>>();
      if (u["ub_vx"]) c.sdr_udr_ub_vx = u["ub_vx"].as<double>();
      if (u["ub_wz"]) c.sdr_udr_ub_wz = u["ub_wz"].as<double>();
    }
    if (const auto e = root["ekf"]) {
      if (e["decades"]) c.ekf_decades = e["decades"].as<double>();
    }
    if (const auto t = root["tune"]) {
      if (t["level"]) c.tune_level = t["level"].as<int>();
      if (t["mask"]) c.tune_mask = t["mask"].as<std::string>();
    }
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("invalid config value: ") + e.what());
  }
  if (!c.sdr_counts.empty() && !c.sdr_deltas.empty()) {
    throw ConfigError("give either sdr.counts or sdr.deltas, not both");
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const std::exception&) {
    throw ConfigError("cannot open config file " + path.string());
  }
  return parse_config(text);
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b) {
  // splitmix64 over the three words
  std::uint64_t x = master;
  for (std::uint64_t w : {a, b}) {
    x += 0x9e3779b97f4a7c15ULL + w;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    x ^= x >> 31;
  }
  return x;
}

ScenarioSpec resolve_scenario(const std::string& name_or_path) {
  try {
    if (looks_like_file(name_or_path)) return load_scenario(name_or_path);
    return scenario_preset(name_or_path);
  } catch (const ScenarioError& e) {
    throw ConfigError(e.what());
  }
}

// presets keep their name, scenario files their stem
std::string dataset_label(const std::string& name_or_path) {
  return looks_like_file(name_or_path) ? std::filesystem::path(name_or_path).stem().string() : name_or_path;
}

ExperimentData make_data(const ExperimentConfig& cfg) {
  ExperimentData d;
  d.twin = VehicleParams{};
  d.plant = cfg.mismatch.apply(d.twin);
  d.optimization = generate_dataset(resolve_scenario(cfg.optimization), d.plant, derive_seed(cfg.seed, 1));
  d.optimization.label = dataset_label(cfg.optimization);
  for (std::size_t i = 0; i < cfg.validation.size(); ++i) {
    Dataset v = generate_dataset(resolve_scenario(cfg.validation[i]), d.plant, derive_seed(cfg.seed, 2, i));
    v.label = dataset_label(cfg.validation[i]);
    d.validation.push_back(std::move(v));
  }
  return d;
}

// -- statistics --------------------------------------------------------------

double quantile_r7(std::vector<double> v, double p) {
  if (v.empty()) throw std::invalid_argument("quantile of an empty sample");
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("quantile probability outside [0, 1]");
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = h - static_cast<double>(lo);
  if (frac == 0.0 || v[lo] == v[hi]) return v[lo];
  return v[lo] + frac * (v[hi] - v[lo]);
}

Quantiles quantiles(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("statistics of an empty sample");
  return {quantile_r7(values, 0.0), quantile_r7(values, 0.25), quantile_r7(values, 0.5),
          quantile_r7(values, 0.75), quantile_r7(values, 1.0)};
}

RunSummary aggregate_stats(const std::vector<RunRow>& rows) {
  if (rows.empty()) throw std::invalid_argument("no rows to aggregate");
  RunSummary s;
  s.rows = rows;
  std::sort(s.rows.begin(), s.rows.end(), [](const RunRow& a, const RunRow& b) {
    return std::tie(a.variant, a.dataset, a.repeat) < std::tie(b.variant, b.dataset, b.repeat);
  });
  std::map<std::pair<std::string, std::string>, std::vector<const RunRow*>> groups;
  for (const RunRow& r : s.rows) groups[{r.variant, r.dataset}].push_back(&r);
  for (const auto& [key, members] : groups) {
    GroupSummary g;
    g.variant = key.first;
    g.dataset = key.second;
    g.count = members.size();
    const auto collect = [&](auto field) {
      std::vector<double> v;
      for (const RunRow* r : members) v.push_back(static_cast<double>(r->*field));
      return v;
    };
    g.dim = quantile_r7(collect(&RunRow::dim), 0.5);
    for (const RunRow* r : members) g.unstable += r->stable ? 0 : 1;
    g.rmse_vx = quantiles(collect(&RunRow::rmse_vx));
    g.rmse_wz = quantiles(collect(&RunRow::rmse_wz));
    g.rmse_beta = quantiles(collect(&RunRow::rmse_beta));
    g.loss = quantiles(collect(&RunRow::loss));
    g.wall_time = quantiles(collect(&RunRow::wall_time));
    g.prep_time = quantiles(collect(&RunRow::prep_time));
    s.groups.push_back(std::move(g));
  }
  std::stable_sort(s.groups.begin(), s.groups.end(), [](const GroupSummary& a, const GroupSummary& b) {
    if (a.dim != b.dim) return a.dim > b.dim;
    return std::tie(a.variant, a.dataset) < std::tie(b.variant, b.dataset);
  });
  return s;
}

const GroupSummary& find_group(const RunSummary& s, std::string_view variant, std::string_view dataset) {
  for (const GroupSummary& g : s.groups) {
    if (g.variant == variant && g.dataset == dataset) return g;
  }
  throw std::out_of_range("no summary group " + std::string(variant) + " / " + std::string(dataset));
}

void write_rows_csv(const std::vector<RunRow>& rows, const std::filesystem::path& path) {
  CsvTable t;
  t.header = row_columns();
  for (const RunRow& r : rows) {
    t.rows.push_back({r.variant, std::to_string(r.repeat), std::to_string(r.dim), r.dataset,
                      r.stable ? "1" : "0", format_number(r.rmse_vx), format_number(r.rmse_wz),
                      format_number(r.rmse_beta), format_number(r.loss), format_number(r.wall_time),
                      format_number(r.prep_time)});
  }
  write_csv(path, t);
}

std::vector<RunRow> read_rows_csv(const std::filesystem::path& path) {
  const CsvTable t = read_csv(path);
  if (t.header != row_columns()) throw std::runtime_error("unexpected columns in " + path.string());
  std::vector<RunRow> rows;
  for (const auto& f : t.rows) {
    if (f.size() != row_columns().size()) throw std::runtime_error("short row in " + path.string());
    RunRow r;
    r.variant = f[0];
    r.repeat = static_cast<std::size_t>(std::stoull(f[1]));
    r.dim = static_cast<std::size_t>(std::stoull(f[2]));
    r.dataset = f[3];
    r.stable = f[4] == "1";
    r.rmse_vx = parse_number(f[5]);
    r.rmse_wz = parse_number(f[6]);
    r.rmse_beta = parse_number(f[7]);
    r.loss = parse_number(f[8]);
    r.wall_time = parse_number(f[9]);
    r.prep_time = parse_number(f[10]);
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_summary_csv(const RunSummary& s, const std::filesystem::path& path) {
  CsvTable t;
  t.header = {"variant", "dataset", "dim", "count", "unstable"};
  const std::vector<std::string> metrics = {"rmse_vx", "rmse_wz", "rmse_beta", "loss", "wall_time", "prep_time"};
  for (const std::string& m : metrics) {
    for (const char* q : {"min", "q25", "median", "q75", "max"}) t.header.push_back(m + "_" + q);
  }
  for (const GroupSummary& g : s.groups) {
    std::vector<std::string> row = {g.variant, g.dataset, format_number(g.dim), std::to_string(g.count),
                                    std::to_string(g.unstable)};
    for (const Quantiles* q : {&g.rmse_vx, &g.rmse_wz, &g.rmse_beta, &g.loss, &g.wall_time, &g.prep_time}) {
      for (double v : {q->min, q->q25, q->median, q->q75, q->max}) row.push_back(format_number(v));
    }
    t.rows.push_back(std::move(row));
  }
  write_csv(path, t);
}

void write_summary_json(const RunSummary& s, const std::filesystem::path& path) {
  Json j;
  j["quantile_rule"] = "R-7";
  Json groups = Json::array();
  for (const GroupSummary& g : s.groups) {
    Json o;
    o["variant"] = g.variant;
    o["dataset"] = g.dataset;
    o["dim"] = g.dim;
    o["count"] = g.count;
    o["unstable"] = g.unstable;
    o["rmse_vx"] = quantiles_json(g.rmse_vx);
    o["rmse_wz"] = quantiles_json(g.rmse_wz);
    o["rmse_beta"] = quantiles_json(g.rmse_beta);
    o["loss"] = quantiles_json(g.loss);
    o["wall_time"] = quantiles_json(g.wall_time);
    o["prep_time"] = quantiles_json(g.prep_time);
    groups.push_back(std::move(o));
  }
  j["groups"] = std::move(groups);
  Json rows = Json::array();
  for (const RunRow& r : s.rows) {
    Json o;
    o["variant"] = r.variant;
    o["repeat"] = r.repeat;
    o["dim"] = r.dim;
    o["dataset"] = r.dataset;
    o["stable"] = r.stable;
    o["rmse_vx"] = number_json(r.rmse_vx);
    o["rmse_wz"] = number_json(r.rmse_wz);
    o["rmse_beta"] = number_json(r.rmse_beta);
    o["loss"] = number_json(r.loss);
    o["wall_time"] = number_json(r.wall_time);
    o["prep_time"] = number_json(r.prep_time);
    rows.push_back(std::move(o));
  }
  j["rows"] = std::move(rows);
  write_text(path, j.dump(2) + "\n");
}

RunSummary read_summary_json(const std::filesystem::path& path) {
  const auto j = nlohmann::json::parse(read_text(path));
  std::vector<RunRow> rows;
  for (const auto& o : j.at("rows")) {
    RunRow r;
    r.variant = o.at("variant").get<std::string>();
    r.repeat = o.at("repeat").get<std::size_t>();
    r.dim = o.at("dim").get<std::size_t>();
    r.dataset = o.at("dataset").get<std::string>();
    r.stable = o.at("stable").get<bool>();
    r.rmse_vx = number_from_json(o.at("rmse_vx"));
    r.rmse_wz = number_from_json(o.at("rmse_wz"));
    r.rmse_beta = number_from_json(o.at("rmse_beta"));
    r.loss = number_from_json(o.at("loss"));
    r.wall_time = number_from_json(o.at("wall_time"));
    r.prep_time = number_from_json(o.at("prep_time"));
    rows.push_back(std::move(r));
  }
  RunSummary fresh = aggregate_stats(rows);
  const auto& groups = j.at("groups");
  if (groups.size() != fresh.groups.size()) throw std::runtime_error("summary groups do not match its rows");
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const auto& o = groups[i];
    const GroupSummary& g = fresh.groups[i];
    const bool ok = o.at("variant").get<std::string>() == g.variant && o.at("dataset").get<std::string>() == g.dataset &&
                    o.at("count").get<std::size_t>() == g.count &&
                    same_quantiles(quantiles_from_json(o.at("rmse_vx")), g.rmse_vx) &&
                    same_quantiles(quantiles_from_json(o.at("rmse_wz")), g.rmse_wz) &&
                    same_quantiles(quantiles_from_json(o.at("rmse_beta")), g.rmse_beta) &&
                    same_quantiles(quantiles_from_json(o.at("loss")), g.loss) &&
                    same_quantiles(quantiles_from_json(o.at("wall_time")), g.wall_time) &&
                    same_quantiles(quantiles_from_json(o.at("prep_time")), g.prep_time);
    if (!ok) throw std::runtime_error("summary group " + g.variant + " / " + g.dataset + " does not match its rows");
  }
  return fresh;
}

// -- artifacts ---------------------------------------------------------------

std::size_t Artifact::dim() const {
  if (gain) return gain->active_count();
  if (reduced) return static_cast<std::size_t>(reduced_mask.count());
  if (ekf) return kEkfStates + kEkfOutputs;
  return 0;
}

void write_artifact(const Artifact& a, const std::filesystem::path& path) {
  Json j;
  if (a.gain) {
    const GainMatrix& k = *a.gain;
    j["kind"] = "gain";
    j["channels"] = channel_names(k.channels);
    j["active"] = k.active_ids();
    j["entries"] = matrix_json(k.entries);
    j["mask"] = mask_json(k.mask);
    j["lower"] = matrix_json(k.lower);
    j["upper"] = matrix_json(k.upper);
  } else if (a.reduced) {
    const ReducedGain& k = *a.reduced;
    j["kind"] = "reduced";
    j["channels"] = channel_names(k.channels);
    j["map"] = matrix_json(k.map);
    j["entries"] = matrix_json(k.entries);
    j["mask"] = mask_json(a.reduced_mask);
    j["lower"] = matrix_json(k.lower);
    j["upper"] = matrix_json(k.upper);
  } else if (a.ekf) {
    const EkfConfig& c = *a.ekf;
    j["kind"] = "ekf";
    j["q"] = vector_json(c.q);
    j["r"] = vector_json(c.r);
    j["p0"] = vector_json(c.p0);
    j["dt"] = c.dt;
    Json v;
    v["mass"] = c.vehicle.mass;
    v["yaw_inertia"] = c.vehicle.yaw_inertia;
    v["a"] = c.vehicle.a;
    v["b"] = c.vehicle.b;
    v["drag_coeff"] = c.vehicle.drag_coeff;
    v["rolling_coeff"] = c.vehicle.rolling_coeff;
    v["wheel_radius"] = c.vehicle.wheel_radius;
    j["vehicle"] = std::move(v);
  } else {
    throw std::invalid_argument("empty artifact");
  }
  write_text(path, j.dump(2) + "\n");
}

Artifact read_artifact(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("artifact " + path.string() + " is not valid JSON: " + e.what());
  }
  Artifact a;
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "gain") {
    GainMatrix k;
    k.channels = channels_from_json(j.at("channels"));
    k.entries = matrix_from_json(j.at("entries"));
    k.mask = mask_from_json(j.at("mask"));
    k.lower = matrix_from_json(j.at("lower"));
    k.upper = matrix_from_json(j.at("upper"));
    k.validate();
    a.gain = std::move(k);
  } else if (kind == "reduced") {
    ReducedGain k;
    k.channels = channels_from_json(j.at("channels"));
    k.map = matrix_from_json(j.at("map"));
    k.entries = matrix_from_json(j.at("entries"));
    k.lower = matrix_from_json(j.at("lower"));
    k.upper = matrix_from_json(j.at("upper"));
    k.validate();
    a.reduced_mask = mask_from_json(j.at("mask"));
    a.reduced = std::move(k);
  } else if (kind == "ekf") {
    EkfConfig c;
    c.q = vector_from_json(j.at("q"));
    c.r = vector_from_json(j.at("r"));
    c.p0 = vector_from_json(j.at("p0"));
    c.dt = j.at("dt").get<double>();
    const auto& v = j.at("vehicle");
    c.vehicle.mass = v.at("mass").get<double>();
    c.vehicle.yaw_inertia = v.at("yaw_inertia").get<double>();
    c.vehicle.a = v.at("a").get<double>();
    c.vehicle.b = v.at("b").get<double>();
    c.vehicle.drag_coeff = v.at("drag_coeff").get<double>();
    c.vehicle.rolling_coeff = v.at("rolling_coeff").get<double>();
    c.vehicle.wheel_radius = v.at("wheel_radius").get<double>();
    c.validate();
    a.ekf = c;
  } else {
    throw std::invalid_argument("unknown artifact kind '" + kind + "'");
  }
  return a;
}

void write_mask(const BoolMatrix& m, const std::vector<std::string>& ids, const std::filesystem::path& path) {
  Json j;
  j["mask"] = mask_json(m);
  j["active"] = ids;
  j["count"] = static_cast<std::size_t>(m.count());
  write_text(path, j.dump(2) + "\n");
}

BoolMatrix read_mask(const std::filesystem::path& path) {
  const auto j = nlohmann::json::parse(read_text(path));
  return mask_from_json(j.at("mask"));
}

ObserverRun simulate(const Artifact& a, const Dataset& data, const ExperimentConfig& cfg, bool keep_trajectory) {
  if (a.ekf) {
    EkfRunOptions o;
    o.vx_offset = cfg.vx_offset;
    o.keep_trajectory = keep_trajectory;
    return run_ekf(data, *a.ekf, o).summary;
  }
  ObserverOptions o;
  o.keep_trajectory = keep_trajectory;
  const VehicleState x0 = perturbed_initial_state(data, cfg.vx_offset);
  if (a.gain) return run_observer(data, *a.gain, x0, o);
  if (a.reduced) {
    const ReducedGain& k = *a.reduced;
    k.validate();
    return run_observer(data, Correction{k.channels, masked(k.entries, a.reduced_mask) * k.map}, x0, o);
  }
  throw std::invalid_argument("empty artifact");
}

std::vector<RunRow> validate_artifact(const Artifact& a, const ExperimentData& data, const ExperimentConfig& cfg,
                                      const std::string& variant, std::size_t repeat) {
  std::vector<RunRow> rows;
  for (const Dataset& d : data.validation) {
    const ObserverRun run = simulate(a, d, cfg);
    RunRow r;
    r.variant = variant;
    r.repeat = repeat;
    r.dim = a.dim();
    r.dataset = d.label;
    r.stable = run.stable;
    r.rmse_vx = run.rmse_vx;
    r.rmse_wz = run.rmse_wz;
    r.rmse_beta = run.rmse_beta;
    r.loss = evaluate_loss(run);
    rows.push_back(std::move(r));
  }
  return rows;
}

// -- stages ------------------------------------------------------------------

BoSettings bo_settings(const ExperimentConfig& cfg) {
  BoSettings s;
  s.threaded = cfg.threaded;
  return s;
}

double stage_time(const BoResult& bo, const ExperimentConfig& cfg) {
  if (cfg.clock == ClockKind::kWall) return bo.stats.wall_time;
  double t = 0.0;
  for (const EvaluationRecord& r : bo.trace) t = std::max(t, r.finish_time);
  return t;
}

GainMatrix base_gain(const ExperimentData& data, const ExperimentConfig& cfg) {
  GainMatrix k = GainMatrix::case_study();
  if (cfg.heuristic_bounds) k = mbr_ranges(data.optimization).apply(k);
  return k;
}

TuneOutcome tune_gain(const GainMatrix& start, const Dataset& data, const ExperimentConfig& cfg, std::uint64_t seed) {
  start.validate();
  if (start.active_count() == 0) throw std::invalid_argument("nothing to tune: the mask is empty");
  const VehicleState x0 = perturbed_initial_state(data, cfg.vx_offset);
  OptimizationProblem p;
  p.lower = start.active_lower();
  p.upper = start.active_upper();
  p.variable_names = start.active_ids();
  p.constraint_names = {"stability"};
  p.budget = cfg.budget.n;
  p.n_seed = cfg.budget.n_seed;
  p.workers = cfg.budget.workers;
  p.seed = seed;
  p.evaluate = [&](const Eigen::VectorXd& v) {
    GainMatrix k = start;
    k.set_active(v);
    const ObserverRun r = run_observer(data, k, x0);
    return EvalResult{evaluate_loss(r), {r.stable ? -1.0 : 1.0}};
  };
  TuneOutcome out;
  out.bo = run_parallel_bo(p, bo_settings(cfg));
  GainMatrix best = start;
  best.set_active(out.bo.best_point);
  out.artifact.gain = std::move(best);
  out.wall_time = stage_time(out.bo, cfg);
  p.evaluate = nullptr;
  out.problem = std::move(p);
  return out;
}

TuneOutcome tune_reduced(const ReducedGain& start, const BoolMatrix& mask, const Dataset& data,
                         const ExperimentConfig& cfg, std::uint64_t seed) {
  start.validate();
  const GainLayout layout = GainLayout::of(start).with_mask(mask);
  const std::vector<std::size_t> act = layout.active_indices();
  if (act.empty()) throw std::invalid_argument("nothing to tune: the mask is empty");
  const VehicleState x0 = perturbed_initial_state(data, cfg.vx_offset);
  const auto cols = static_cast<Eigen::Index>(layout.cols);
  const auto expand = [&](const Eigen::VectorXd& v) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(start.entries.rows(), start.entries.cols());
    for (std::size_t a = 0; a < act.size(); ++a) {
      const auto f = static_cast<Eigen::Index>(act[a]);
      m(f / cols, f % cols) = v(static_cast<Eigen::Index>(a));
    }
    return m;
  };
  OptimizationProblem p;
  p.lower.resize(static_cast<Eigen::Index>(act.size()));
  p.upper.resize(static_cast<Eigen::Index>(act.size()));
  for (std::size_t a = 0; a < act.size(); ++a) {
    const auto f = static_cast<Eigen::Index>(act[a]);
    p.lower(static_cast<Eigen::Index>(a)) = layout.lower(f);
    p.upper(static_cast<Eigen::Index>(a)) = layout.upper(f);
    p.variable_names.push_back(layout.ids[act[a]]);
  }
  p.constraint_names = {"stability"};
  p.budget = cfg.budget.n;
  p.n_seed = cfg.budget.n_seed;
  p.workers = cfg.budget.workers;
  p.seed = seed;
  p.evaluate = [&](const Eigen::VectorXd& v) {
    const ObserverRun r = run_observer(data, Correction{start.channels, expand(v) * start.map}, x0);
    return EvalResult{evaluate_loss(r), {r.stable ? -1.0 : 1.0}};
  };
  TuneOutcome out;
  out.bo = run_parallel_bo(p, bo_settings(cfg));
  ReducedGain best = start;
  best.entries = expand(out.bo.best_point);
  out.artifact.reduced = std::move(best);
  out.artifact.reduced_mask = mask;
  out.wall_time = stage_time(out.bo, cfg);
  p.evaluate = nullptr;
  out.problem = std::move(p);
  return out;
}

TuneOutcome tune_ekf_stage(const ExperimentData& data, const ExperimentConfig& cfg, std::uint64_t seed) {
  if (cfg.budget.n < 50) throw ConfigError("EKF tuning needs a budget of at least 50 evaluations");
  EkfTuneOptions o;
  o.budget = cfg.budget.n;
  o.n_seed = cfg.budget.n_seed;
  o.workers = cfg.budget.workers;
  o.seed = seed;
  o.decades = cfg.ekf_decades;
  o.bo = bo_settings(cfg);
  o.vx_offset = cfg.vx_offset;
  EkfTuneResult t = tune_qr(data.optimization, EkfConfig::defaults(data.twin), o);
  TuneOutcome out;
  out.artifact.ekf = t.config;
  out.bo = std::move(t.bo);
  out.problem = std::move(t.problem);
  out.wall_time = stage_time(out.bo, cfg);
  return out;
}

// -- pipelines ---------------------------------------------------------------

namespace {

class Experiment {
 public:
  Experiment(const ExperimentConfig& cfg, const Logger& log) : cfg_(cfg), log_(log) {}

  ExperimentResult run() {
    const auto t0 = Clock::now();
    timed("data", [&] { data_ = make_data(cfg_); }, 0.0);
    for (std::size_t r = 0; r < cfg_.repeats; ++r) {
      switch (cfg_.pipeline) {
        case PipelineKind::kMbr: mbr(r); break;
        case PipelineKind::kSdr: sdr(r); break;
        case PipelineKind::kUdr: udr(r); break;
        case PipelineKind::kSdrUdr: sdr_udr(r); break;
        case PipelineKind::kEkf: ekf(r); break;
      }
    }
    res_.summary = aggregate_stats(rows_);
    if (cfg_.clock == ClockKind::kWall) {
      res_.total_time = seconds_since(t0);
    } else {
      for (const StageTime& s : res_.stages) res_.total_time += s.seconds;
    }
    return std::move(res_);
  }

 private:
  // Runs f; records the measured time, or `virtual_time` under the virtual clock.
  template <class F>
  void timed(const std::string& name, F&& f, double virtual_time) {
    const auto t0 = Clock::now();
    f();
    const double t = cfg_.clock == ClockKind::kWall ? seconds_since(t0) : virtual_time;
    res_.stages.push_back({name, t});
  }

  void note(const std::string& s) {
    if (log_) log_(s);
  }

  std::uint64_t seed(std::size_t repeat, std::uint64_t stream) const {
    return derive_seed(cfg_.seed, 100 + repeat, stream);
  }

  void keep_trace(const std::string& run, const BoResult& bo, const OptimizationProblem& p) {
    TraceArtifact t{run, bo.trace, p};
    if (cfg_.clock == ClockKind::kVirtual) {
      for (EvaluationRecord& e : t.trace) e.wall_time = e.finish_time - e.dispatch_time;
    }
    res_.traces.push_back(std::move(t));
  }

  void finish_variant(const std::string& variant, std::size_t r, TuneOutcome&& t, double prep_time) {
    const std::string run = variant + "_r" + std::to_string(r);
    res_.stages.push_back({"tune_" + run, cfg_.clock == ClockKind::kWall ? t.bo.stats.wall_time : t.wall_time});
    keep_trace(run, t.bo, t.problem);
    std::vector<RunRow> rows;
    timed("validate_" + run, [&] { rows = validate_artifact(t.artifact, data_, cfg_, variant, r); }, 0.0);
    for (RunRow& row : rows) {
      row.wall_time = t.wall_time;
      row.prep_time = prep_time;
    }
    std::ostringstream msg;
    msg << run << ": dim " << t.artifact.dim() << ", best " << format_number(t.bo.best_value) << ", "
        << format_number(t.wall_time) << " s";
    note(msg.str());
    rows_.insert(rows_.end(), rows.begin(), rows.end());
    res_.artifacts.emplace_back(run, std::move(t.artifact));
  }

  void mbr(std::size_t r) {
    const GainMatrix base = base_gain(data_, cfg_);
    for (int level : cfg_.mbr_levels) {
      TuneOutcome t = tune_gain(base.with_mask(mbr_plan(level)), data_.optimization, cfg_,
                                seed(r, static_cast<std::uint64_t>(level)));
      finish_variant(variant_with_count("mbr", static_cast<std::size_t>(level)), r, std::move(t), 0.0);
    }
  }

  StructureResult structure(const GainLayout& layout, const PerformanceFn& perf, std::size_t r,
                            const std::string& name, bool reduced = false) {
    StructureOptions so;
    so.ub_vx = reduced ? cfg_.sdr_udr_ub_vx : cfg_.ub_vx;
    so.ub_wz = reduced ? cfg_.sdr_udr_ub_wz : cfg_.ub_wz;
    so.budget = cfg_.budget.n;
    so.n_seed = cfg_.budget.n_seed;
    so.workers = cfg_.budget.workers;
    so.seed = seed(r, 1000);
    so.bo = bo_settings(cfg_);
    StructureResult s = structure_optimize(layout, perf, so);
    const std::string run = name + "_r" + std::to_string(r);
    const double t = stage_time(s.bo, cfg_);
    res_.stages.push_back({run, cfg_.clock == ClockKind::kWall ? s.bo.stats.wall_time : t});
    keep_trace(run, s.bo, s.problem);
    res_.rankings.emplace_back(run, s.ranking);
    note(run + ": l1 " + format_number(s.bo.best_value) + ", rms vx " + format_number(s.performance.rmse_vx) +
         ", rms wz " + format_number(s.performance.rmse_wz));
    return s;
  }

  std::vector<std::pair<std::string, BoolMatrix>> masks(const ParameterRanking& ranking, const char* prefix,
                                                        const std::vector<std::size_t>& counts,
                                                        const std::vector<double>& deltas) {
    std::vector<std::pair<std::string, BoolMatrix>> out;
    for (std::size_t c : counts) {
      out.emplace_back(variant_with_count(prefix, c), prune(ranking, delta_for_count(ranking, c)));
    }
    for (double d : deltas) out.emplace_back(variant_with_delta(prefix, d), prune(ranking, d));
    return out;
  }

  void sdr(std::size_t r) {
    const GainMatrix base = base_gain(data_, cfg_);
    finish_variant("full12", r, tune_gain(base, data_.optimization, cfg_, seed(r, 12)), 0.0);
    const VehicleState x0 = perturbed_initial_state(data_.optimization, cfg_.vx_offset);
    const StructureResult s = structure(GainLayout::of(base), observer_performance(data_.optimization, x0, base.channels),
                                        r, "structure");
    const double prep = stage_time(s.bo, cfg_);
    std::uint64_t stream = 200;
    for (auto& [variant, mask] : masks(s.ranking, "sdr", cfg_.sdr_counts, cfg_.sdr_deltas)) {
      finish_variant(variant, r, tune_gain(base.with_mask(mask), data_.optimization, cfg_, seed(r, stream++)), prep);
    }
  }

  const ReducedGain& reduced() {
    if (!reduced_) {
      const BoundsTable b = udr_demo_bounds();
      const ReductionMap map = pca_reduce(data_.optimization, b.channels, PcaTarget{cfg_.udr_components, std::nullopt});
      reduced_ = make_reduced_gain(b, map);
      res_.map = map;
      note("pca: " + std::to_string(cfg_.udr_components) + " components retain " + format_number(map.retained));
    }
    return *reduced_;
  }

  BoolMatrix full_mask(const ReducedGain& k) const {
    return BoolMatrix::Constant(k.entries.rows(), k.entries.cols(), true);
  }

  void udr(std::size_t r) {
    const GainMatrix base = base_gain(data_, cfg_);
    finish_variant("full12", r, tune_gain(base, data_.optimization, cfg_, seed(r, 12)), 0.0);
    const ReducedGain& k = reduced();
    finish_variant(variant_with_count("udr", static_cast<std::size_t>(k.entries.size())), r,
                   tune_reduced(k, full_mask(k), data_.optimization, cfg_, seed(r, 300)), 0.0);
  }

  void sdr_udr(std::size_t r) {
    const ReducedGain& k = reduced();
    finish_variant(variant_with_count("udr", static_cast<std::size_t>(k.entries.size())), r,
                   tune_reduced(k, full_mask(k), data_.optimization, cfg_, seed(r, 300)), 0.0);
    const VehicleState x0 = perturbed_initial_state(data_.optimization, cfg_.vx_offset);
    const StructureResult s = structure(GainLayout::of(k), observer_performance(data_.optimization, x0, k.channels, k.map),
                                        r, "structure_udr", true);
    const double prep = stage_time(s.bo, cfg_);
    std::uint64_t stream = 400;
    for (auto& [variant, mask] : masks(s.ranking, "sdrudr", cfg_.sdr_udr_counts, {})) {
      finish_variant(variant, r, tune_reduced(k, mask, data_.optimization, cfg_, seed(r, stream++)), prep);
    }
  }

  void ekf(std::size_t r) { finish_variant("ekf", r, tune_ekf_stage(data_, cfg_, seed(r, 500)), 0.0); }

  const ExperimentConfig& cfg_;
  const Logger& log_;
  ExperimentData data_;
  std::optional<ReducedGain> reduced_;
  std::vector<RunRow> rows_;
  ExperimentResult res_;
};

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, const Logger& log) {
  cfg.validate();
  return Experiment(cfg, log).run();
}

void write_report(const ExperimentResult& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_summary_csv(r.summary, dir / "summary.csv");
  write_summary_json(r.summary, dir / "summary.json");
  write_rows_csv(r.summary.rows, dir / "rows.csv");
  CsvTable stages;
  stages.header = {"stage", "seconds"};
  double sum = 0.0;
  for (const StageTime& s : r.stages) {
    stages.rows.push_back({s.name, format_number(s.seconds)});
    sum += s.seconds;
  }
  stages.rows.push_back({"stages_sum", format_number(sum)});
  stages.rows.push_back({"total", format_number(r.total_time)});
  write_csv(dir / "stages.csv", stages);
  for (const TraceArtifact& t : r.traces) write_trace_csv(t.trace, t.problem, dir / ("trace_" + t.run + ".csv"));
  for (const auto& [run, ranking] : r.rankings) write_ranking_csv(ranking, dir / ("ranking_" + run + ".csv"));
  for (const auto& [run, a] : r.artifacts) write_artifact(a, dir / ("artifact_" + run + ".json"));
  if (r.map) write_reduction_map(*r.map, dir / "map.json");
}

}  // namespace til
