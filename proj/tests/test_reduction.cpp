#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include <Eigen/Dense>

#include "til/csv.hpp"
#include "til/reduction.hpp"
#include "til/scenario.hpp"

using namespace til;

namespace {

// Table II as printed, columns wz, wfl, wrr and rows vx, wz, wfl, wrr.
ParameterRanking table_two() {
  struct Row {
    const char* id;
    std::size_t row, col;
    double score, raw;
  };
  const Row rows[] = {
      {"wrr->wrr", 3, 2, 0.569, 0.85},  {"wz->wrr", 3, 0, 0.556, -0.83},   {"wz->wz", 1, 0, 0.422, 0.63},
      {"wfl->wfl", 2, 1, 0.415, 0.62},  {"wz->vx", 0, 0, 0.352, 0.53},     {"wfl->vx", 0, 1, 0.262, 0.11},
      {"wrr->wfl", 2, 2, 0.077, 0.058}, {"wfl->wrr", 3, 1, 0.055, -0.041}, {"wrr->wz", 1, 2, 0.038, 0.0023},
      {"wfl->wz", 1, 1, 0.035, -0.0021}, {"wrr->vx", 0, 2, 0.021, 0.0095}, {"wz->wfl", 2, 0, 0.020, 0.030},
  };
  ParameterRanking r;
  r.rows = 4;
  r.cols = 3;
  for (const Row& x : rows) {
    r.entries.push_back({x.id, x.row, x.col, x.score, x.raw,
                         mbr_class(std::array{OutputChannel::kGyroZ, OutputChannel::kEncFL, OutputChannel::kEncRR}[x.col],
                                   x.row)});
  }
  return r;
}

// Sawtooth segments: v_x sweeps 30 km/h and enc_fl sweeps 100 rad/s in every segment.
Dataset constructed_ranges() {
  Dataset d;
  const std::size_t n = 1000;
  for (std::size_t i = 0; i < n; ++i) {
    const double phase = static_cast<double>(i % 100) / 99.0;
    d.t.push_back(static_cast<double>(i) * kSamplePeriod);
    d.u.push_back(DriverInput{});
    VehicleState s;
    s.vx = 10.0 + phase * 30.0 / kMsToKmh;
    s.wz = 0.1 * phase;
    s.wheel = {30 + 2 * phase, 30 + 2 * phase, 30 + 2 * phase, 30 + 3 * phase};
    d.x_meas.push_back(s);
    SensorOutput y;
    y[OutputChannel::kEncFL] = 100.0 * phase;
    y[OutputChannel::kEncRR] = 50.0 * phase;
    y[OutputChannel::kGyroZ] = 10.0 * phase;
    d.y_meas.push_back(y);
  }
  return d;
}

Dataset channels_dataset(const std::vector<std::array<double, 4>>& rows) {
  Dataset d;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    d.t.push_back(static_cast<double>(i) * kSamplePeriod);
    d.u.push_back(DriverInput{});
    d.x_meas.push_back(VehicleState{});
    SensorOutput y;
    y[OutputChannel::kEncFL] = rows[i][0];
    y[OutputChannel::kEncFR] = rows[i][1];
    y[OutputChannel::kEncRL] = rows[i][2];
    y[OutputChannel::kEncRR] = rows[i][3];
    d.y_meas.push_back(y);
  }
  return d;
}

const std::vector<OutputChannel> kEncoders = {OutputChannel::kEncFL, OutputChannel::kEncFR, OutputChannel::kEncRL,
                                              OutputChannel::kEncRR};

Eigen::MatrixXd random_orthonormal_rows(std::size_t r, std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd a(n, n);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = g(rng);
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(a).householderQ();
  return q.leftCols(static_cast<Eigen::Index>(r)).transpose();
}

// Largest violation of the original bounds by K = k_red t, <= 0 when inside.
double violation(const Eigen::MatrixXd& k_red, const Eigen::MatrixXd& t, const BoundsTable& b) {
  const Eigen::MatrixXd k = k_red * t;
  return std::max((k - b.upper).maxCoeff(), (b.lower - k).maxCoeff());
}

// Random 4 x 4 bounds straddling zero, so that any map admits a box.
BoundsTable random_bounds(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.1, 1.5);
  BoundsTable b{kEncoders, Eigen::MatrixXd(4, 4), Eigen::MatrixXd(4, 4)};
  for (Eigen::Index i = 0; i < 16; ++i) {
    b.lower.data()[i] = -u(rng);
    b.upper.data()[i] = u(rng);
  }
  return b;
}

}  // namespace

TEST_CASE("published ranges") {
  const BoundsTable t = BoundsTable::table_one();
  CHECK(t.lower(kCorrWz, 0) == 0.0);
  CHECK(t.upper(kCorrWz, 0) == 1.5);
  CHECK(t.lower(kCorrWfl, 2) == -0.75);
  CHECK(t.upper(kCorrWfl, 2) == 0.75);
  CHECK(t.lower(kCorrVx, 1) == 0.0);
  CHECK(t.upper(kCorrVx, 1) == 0.45);
  CHECK_NOTHROW(t.validate());
}

TEST_CASE("range heuristic on constructed data") {
  const Dataset d = constructed_ranges();
  std::vector<std::string> warnings;
  const BoundsTable b = mbr_ranges(d, {}, &warnings);
  CHECK(warnings.empty());
  CHECK(b.lower(kCorrVx, 1) == 0.0);
  CHECK(b.upper(kCorrVx, 1) == doctest::Approx(0.45).epsilon(1e-12));
  CHECK(b.upper(kCorrVx, 2) == doctest::Approx(1.5 * 30.0 / 50.0).epsilon(1e-12));
  CHECK(b.upper(kCorrWz, 0) == 1.5);
  CHECK(b.upper(kCorrWfl, 2) == 0.75);
  // centered: wz (deg/s) sweeps 0.1 rad/s, gyro 10 deg/s -> width 1.5 * 5.73 / 100
  const double w = 1.5 * 0.1 * kRadToDeg / 100.0;
  CHECK(b.lower(kCorrWz, 1) == doctest::Approx(-w / 2));
  CHECK(b.upper(kCorrWz, 1) == doctest::Approx(w / 2));
}

TEST_CASE("range heuristic skips flat segments and rejects flat channels") {
  Dataset d = constructed_ranges();
  for (std::size_t i = 0; i < 100; ++i) d.y_meas[i][OutputChannel::kEncFL] = 0.0;
  std::vector<std::string> warnings;
  const BoundsTable b = mbr_ranges(d, {}, &warnings);
  CHECK(warnings.size() == 1);
  CHECK(b.upper(kCorrVx, 1) == doctest::Approx(0.45).epsilon(1e-12));
  for (auto& y : d.y_meas) y[OutputChannel::kEncFL] = 1.0;
  CHECK_THROWS_AS(mbr_ranges(d), ReductionError);
}

TEST_CASE("MBR plans") {
  const GainMatrix k = GainMatrix::case_study();
  const auto ids = [&](int level) { return k.with_mask(mbr_plan(level)).active_ids(); };
  const std::vector<std::string> l3 = {"wz->wz", "wfl->wfl", "wrr->wrr"};
  CHECK(ids(3) == l3);
  const std::vector<std::string> l5 = {"wfl->vx", "wrr->vx", "wz->wz", "wfl->wfl", "wrr->wrr"};
  CHECK(ids(5) == l5);
  CHECK(ids(7).size() == 7);
  CHECK(mbr_plan(12).count() == 12);
  CHECK_THROWS_AS(mbr_plan(6), ReductionError);
  // nested plans
  CHECK((mbr_plan(3) <= mbr_plan(5)).all());
  CHECK((mbr_plan(5) <= mbr_plan(7)).all());
}

TEST_CASE("normalization") {
  CHECK(normalize_gain(0.0, -1, 1) == 0.0);
  CHECK(normalize_gain(0.75, -0.75, 1.5) == 0.5);
  CHECK(normalize_gain(-0.83, -1.5, 1.5) == doctest::Approx(0.5533).epsilon(1e-4));
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    const double k = u(rng);
    const double lo = -std::abs(u(rng)) - std::abs(k);
    const double hi = std::abs(u(rng)) + std::abs(k);
    CHECK(normalize_gain(2 * k, 2 * lo, 2 * hi) == normalize_gain(k, lo, hi));
  }
  CHECK_THROWS(normalize_gain(0.3, -1.0, 0.0));
}

TEST_CASE("l1 of normalized gains") {
  GainMatrix k = GainMatrix::case_study();
  k.entries.setZero();
  CHECK(l1_of_normalized(k) == 0.0);
  k.entries(kCorrWz, 0) = 0.75;
  k.entries(kCorrWfl, 2) = -0.375;
  CHECK(l1_of_normalized(k) == doctest::Approx(1.0));
  CHECK(table_two().total() == doctest::Approx(2.822).epsilon(1e-12));
}

TEST_CASE("pruning the published ranking") {
  const ParameterRanking r = table_two();
  REQUIRE_NOTHROW(r.validate());
  CHECK(prune(r, 0.05).count() == 8);
  CHECK(prune(r, 0.10).count() == 6);
  CHECK(prune(r, 0.40).count() == 4);
  CHECK(prune(r, 0.0).count() == 12);
  CHECK_THROWS_AS(prune(r, 0.9), ReductionError);
  CHECK_THROWS_AS(prune(r, 1.5), ReductionError);
  // the six kept at 0.10 are the left column
  const BoolMatrix m = prune(r, 0.10);
  for (std::size_t i = 0; i < 6; ++i) CHECK(m(static_cast<Eigen::Index>(r.entries[i].row), static_cast<Eigen::Index>(r.entries[i].col)));
  // ties at delta are kept
  CHECK(prune(r, 0.262).count() == 6);
  for (std::size_t c : {1u, 4u, 6u, 8u, 12u}) CHECK(prune(r, delta_for_count(r, c)).count() == c);
}

TEST_CASE("pruning is monotone in the threshold") {
  const ParameterRanking r = table_two();
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 0.569);
  for (int i = 0; i < 500; ++i) {
    double a = u(rng), b = u(rng);
    if (a > b) std::swap(a, b);
    CHECK((prune(r, b) <= prune(r, a)).all());
  }
}

TEST_CASE("ranking by magnitude") {
  GainMatrix k = GainMatrix::case_study();
  k.entries.setZero();
  k.entries(kCorrWz, 0) = 0.3;     // 0.2
  k.entries(kCorrWfl, 2) = -0.6;   // 0.8
  k.entries(kCorrVx, 1) = 0.225;   // 0.5
  const ParameterRanking r = rank_by_magnitude(k);
  REQUIRE(r.entries.size() == 12);
  CHECK(r.entries[0].id == "wrr->wfl");
  CHECK(r.entries[0].score == doctest::Approx(0.8));
  CHECK(r.entries[1].id == "wfl->vx");
  CHECK(r.entries[2].id == "wz->wz");
  CHECK(r.entries[3].score == 0.0);
  CHECK(r.entries[3].id == "wz->vx");  // ties keep row-major order
}

TEST_CASE("ranking and map files round trip byte for byte") {
  const auto dir = std::filesystem::temp_directory_path() / "til_test_reduction";
  std::filesystem::create_directories(dir);
  write_ranking_csv(table_two(), dir / "a.csv");
  write_ranking_csv(read_ranking_csv(dir / "a.csv"), dir / "b.csv");
  CHECK(read_text(dir / "a.csv") == read_text(dir / "b.csv"));

  ScenarioSpec spec = scenario_preset("optimization");
  spec.duration = 10;
  const Dataset d = generate_dataset(spec, VehicleParams{}, 1);
  const ReductionMap m = pca_reduce(d, kEncoders, PcaTarget{3, std::nullopt});
  write_reduction_map(m, dir / "a.json");
  write_reduction_map(read_reduction_map(dir / "a.json"), dir / "b.json");
  CHECK(read_text(dir / "a.json") == read_text(dir / "b.json"));
}

TEST_CASE("PCA of an exactly dependent channel set") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<std::array<double, 4>> rows;
  for (int i = 0; i < 2000; ++i) {
    const double a = g(rng), b = 3 * g(rng), c = g(rng) + 0.5 * a;
    rows.push_back({a, b, c, a + b});
  }
  const ReductionMap m = pca_reduce(channels_dataset(rows), kEncoders, PcaTarget{3, std::nullopt});
  CHECK(m.retained == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(m.power.sum() == doctest::Approx(1.0).epsilon(1e-9));
  const Eigen::MatrixXd gram = m.directions * m.directions.transpose();
  CHECK((gram - Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-12);
  const ReductionMap p = pca_reduce(channels_dataset(rows), kEncoders, PcaTarget{std::nullopt, 0.999});
  CHECK(p.reduced_dim() == 3);
}

TEST_CASE("PCA of isotropic noise spreads power evenly") {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<std::array<double, 4>> rows;
  for (int i = 0; i < 10000; ++i) rows.push_back({g(rng), g(rng), g(rng), g(rng)});
  const ReductionMap m = pca_reduce(channels_dataset(rows), kEncoders, PcaTarget{3, std::nullopt});
  for (Eigen::Index i = 0; i < 4; ++i) CHECK(std::abs(m.power(i) - 0.25) <= 0.05 * 0.25);
}

TEST_CASE("PCA power fractions are sorted and sum to one") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::Matrix4d mix;
    for (Eigen::Index i = 0; i < 16; ++i) mix.data()[i] = g(rng);
    std::vector<std::array<double, 4>> rows;
    for (int i = 0; i < 300; ++i) {
      const Eigen::Vector4d v = mix * Eigen::Vector4d(g(rng), g(rng), g(rng), g(rng));
      rows.push_back({v(0), v(1), v(2), v(3)});
    }
    const ReductionMap m = pca_reduce(channels_dataset(rows), kEncoders, PcaTarget{2, std::nullopt});
    CHECK(m.power.sum() == doctest::Approx(1.0).epsilon(1e-9));
    for (Eigen::Index i = 1; i < m.power.size(); ++i) CHECK(m.power(i) <= m.power(i - 1));
  }
}

TEST_CASE("PCA target validation") {
  std::vector<std::array<double, 4>> rows(50, {1, 2, 3, 4});
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i][0] += static_cast<double>(i);
  const Dataset d = channels_dataset(rows);
  CHECK_THROWS_AS(pca_reduce(d, kEncoders, PcaTarget{}), ReductionError);
  CHECK_THROWS_AS(pca_reduce(d, kEncoders, PcaTarget{2, 0.9}), ReductionError);
  CHECK_THROWS_AS(pca_reduce(d, kEncoders, PcaTarget{4, std::nullopt}), ReductionError);
}

TEST_CASE("encoder channels on the demo scenario keep nearly all power") {
  const Dataset d = generate_dataset(scenario_preset("optimization"),
                                     MismatchPreset::default_preset().apply(VehicleParams{}), 1);
  const ReductionMap m = pca_reduce(d, kEncoders, PcaTarget{3, std::nullopt});
  CHECK(m.retained >= 0.99);
}

TEST_CASE("bound conversion with the identity map") {
  const BoundsTable b = udr_demo_bounds();
  const ReducedBounds r = convert_bounds(b, Eigen::MatrixXd::Identity(4, 4));
  CHECK((r.lower - b.lower).cwiseAbs().maxCoeff() <= 1.5e-12);
  CHECK((r.upper - b.upper).cwiseAbs().maxCoeff() <= 1.5e-12);
}

TEST_CASE("converted bounds are sound and maximal under uniform row scaling") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int map = 0; map < 8; ++map) {
    const BoundsTable b = random_bounds(rng);
    const Eigen::MatrixXd t = random_orthonormal_rows(3, 4, rng);
    const ReducedBounds r = convert_bounds(b, t);
    double worst = -INFINITY;
    for (int s = 0; s < 2000; ++s) {
      Eigen::MatrixXd k(4, 3);
      for (Eigen::Index i = 0; i < k.size(); ++i) k.data()[i] = r.lower.data()[i] + u(rng) * (r.upper.data()[i] - r.lower.data()[i]);
      worst = std::max(worst, violation(k, t, b));
    }
    CHECK(worst <= 1e-12);

    // Inflate each row's box by 1.01 about its center; the worst vertex leaves the bounds.
    for (Eigen::Index row = 0; row < 4; ++row) {
      const Eigen::RowVectorXd c = 0.5 * (r.lower.row(row) + r.upper.row(row));
      const Eigen::RowVectorXd h = 0.5 * 1.01 * (r.upper.row(row) - r.lower.row(row));
      double row_worst = -INFINITY;
      for (int v = 0; v < 8; ++v) {
        Eigen::MatrixXd k = 0.5 * (r.lower + r.upper);
        for (Eigen::Index j = 0; j < 3; ++j) k(row, j) = c(j) + ((v >> j) & 1 ? h(j) : -h(j));
        row_worst = std::max(row_worst, violation(k, t, b));
      }
      CAPTURE(row);
      CHECK(row_worst > 0.0);
    }
  }
}

TEST_CASE("bound conversion fails when no box fits") {
  // a sign-constrained row cannot be reached through a generic rotation
  std::mt19937_64 rng(5);
  const Eigen::MatrixXd t = random_orthonormal_rows(3, 4, rng);
  CHECK_THROWS_AS(convert_bounds(udr_demo_bounds(), t), ReductionError);
  CHECK_THROWS_AS(convert_bounds(udr_demo_bounds(), Eigen::MatrixXd::Identity(3, 3)), ReductionError);
}

TEST_CASE("reduced gain from a map lies in its converted box") {
  ScenarioSpec spec = scenario_preset("optimization");
  spec.duration = 20;
  const Dataset d = generate_dataset(spec, VehicleParams{}, 1);
  const BoundsTable b = udr_demo_bounds();
  const ReductionMap m = pca_reduce(d, b.channels, PcaTarget{3, std::nullopt});
  const ReducedGain k = make_reduced_gain(b, m);
  CHECK_NOTHROW(k.validate());
  CHECK(k.map.rows() == 3);
  CHECK(k.map.cols() == 4);
  CHECK((k.entries.array() >= k.lower.array()).all());
  CHECK((k.entries.array() <= k.upper.array()).all());
  CHECK((k.map - m.effective()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("structure optimization without bounds drives the gain to zero") {
  const GainLayout layout = GainLayout::of(GainMatrix::case_study().with_mask(mbr_plan(5)));
  StructureOptions o;
  o.ub_vx = INFINITY;
  o.ub_wz = INFINITY;
  o.budget = 40;
  o.n_seed = 15;
  o.seed = 2;
  const StructureResult r = structure_optimize(layout, [](const Eigen::MatrixXd&) { return Performance{true, 1.0, 1.0}; }, o);
  CHECK(r.bo.best_value < 0.3);
  CHECK(r.ranking.total() == doctest::Approx(r.bo.best_value).epsilon(1e-9));
}

TEST_CASE("structure optimization finds the entries that matter") {
  // Only wz->wz, wfl->vx and wrr->wfl can lower rms(v_x) to the bound.
  const GainMatrix base = GainMatrix::case_study();
  const GainLayout layout = GainLayout::of(base);
  const std::vector<std::pair<Eigen::Index, Eigen::Index>> key = {{kCorrWz, 0}, {kCorrVx, 1}, {kCorrWfl, 2}};
  const PerformanceFn perf = [&](const Eigen::MatrixXd& k) {
    double vx = 1.0;
    for (auto [r, c] : key) vx += std::max(0.0, 0.5 - normalize_gain(k(r, c), base.lower(r, c), base.upper(r, c)));
    return Performance{true, vx, 0.5};
  };
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    StructureOptions o;
    o.ub_vx = 1.05;
    o.ub_wz = 1.0;
    o.budget = 100;
    o.n_seed = 40;
    o.seed = seed;
    const StructureResult r = structure_optimize(layout, perf, o);
    std::vector<std::string> top;
    for (std::size_t i = 0; i < 3; ++i) top.push_back(r.ranking.entries[i].id);
    std::sort(top.begin(), top.end());
    CAPTURE(seed);
    CHECK(top == std::vector<std::string>{"wfl->vx", "wrr->wfl", "wz->wz"});
    CHECK(perf(r.values).rmse_vx <= 1.05);
  }
}

TEST_CASE("structure optimization reports infeasible bounds") {
  const GainLayout layout = GainLayout::of(GainMatrix::case_study().with_mask(mbr_plan(3)));
  StructureOptions o;
  o.budget = 12;
  o.n_seed = 6;
  CHECK_THROWS_AS(structure_optimize(layout, [](const Eigen::MatrixXd&) { return Performance{true, 9.0, 9.0}; }, o),
                  BoFailure);
}
