#pragma once

// Parallel constrained Bayesian optimization (minimization).
//
// Surrogates: one GP for the objective, one per constraint. Acquisition is
// expected improvement times the probability that every constraint is <= 0.
// While other workers are busy, their pending points enter the objective GP
// with the clipped prediction max(mean, f_min).

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Core>

#include "til/gp.hpp"

namespace til {

/// Objective (+inf when the evaluation failed) and constraint values
/// (feasible when <= 0; +inf where a value could not be computed).
struct EvalResult {
  double objective = 0.0;
  std::vector<double> constraints;
};

using Evaluator = std::function<EvalResult(const Eigen::VectorXd& point)>;

struct OptimizationProblem {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
  Evaluator evaluate;
  std::vector<std::string> variable_names;    // optional, for the trace
  std::vector<std::string> constraint_names;  // evaluate() returns this many values
  std::size_t budget = 150;  // N, completed evaluations with a finite objective
  std::size_t n_seed = 50;
  std::size_t workers = 2;   // P
  std::uint64_t seed = 0;

  std::size_t dim() const { return static_cast<std::size_t>(lower.size()); }
  /// Throws std::invalid_argument when the problem is malformed.
  void validate() const;
};

enum class RecordStatus { kCompleted, kInFlight, kImputed };
std::string_view status_name(RecordStatus s);

struct EvaluationRecord {
  std::size_t id = 0;  // dispatch order
  Eigen::VectorXd point;
  double objective = 0.0;
  std::vector<double> constraints;
  RecordStatus status = RecordStatus::kCompleted;
  bool seed_point = false;
  double dispatch_time = 0.0;  // scheduler clock, s
  double finish_time = 0.0;
  double wall_time = 0.0;      // measured duration of the evaluation, s

  bool feasible() const;
};

// -- building blocks ---------------------------------------------------------

double normal_cdf(double z);
double normal_pdf(double z);

/// EI for minimization. 0 when variance is 0.
double expected_improvement(double mean, double variance, double f_best);

/// Probability that the constraint value is <= 0 under a Gaussian posterior.
double probability_feasible(const Prediction& p);

/// Product over constraint models; 1 for an empty list.
double feasibility_weight(const std::vector<const GpModel*>& constraint_models, const Eigen::VectorXd& query);

/// Clipped model prediction: max(posterior mean, f_min) for each pending point.
std::vector<double> impute_in_flight(const GpModel& objective_model,
                                     const std::vector<Eigen::VectorXd>& pending, double f_min);

/// n points in [0,1]^d, one per stratum in every dimension.
std::vector<Eigen::VectorXd> latin_hypercube(std::size_t n, std::size_t d, std::mt19937_64& rng);

struct AcquisitionOptions {
  int probes = 512;        // random probes
  int starts = 32;         // local refinements, best probes plus the incumbent
  double initial_step = 0.1;
  double min_step = 1e-4;  // in the unit box
  int max_evals_per_start = 2000;
};

/// Maximizes `utility` over [lower, upper] (returned point is clamped into the
/// box). Random probes, then compass search from the best probes and from the
/// optional incumbent. Deterministic for a given rng state.
Eigen::VectorXd maximize_acquisition(const std::function<double(const Eigen::VectorXd&)>& utility,
                                     const Eigen::VectorXd& lower, const Eigen::VectorXd& upper,
                                     std::mt19937_64& rng,
                                     const std::optional<Eigen::VectorXd>& incumbent = std::nullopt,
                                     const AcquisitionOptions& opt = {});

// -- workers -----------------------------------------------------------------

struct Completion {
  std::size_t id = 0;
  EvalResult result;
  double dispatch_time = 0.0;
  double finish_time = 0.0;
  double wall_time = 0.0;
};

class Executor {
 public:
  virtual ~Executor() = default;
  virtual std::size_t workers() const = 0;
  virtual std::size_t in_flight() const = 0;
  virtual void submit(std::size_t id, std::function<EvalResult()> job) = 0;
  /// Blocks until the next job finishes.
  virtual Completion wait_next() = 0;
};

/// Replayable scheduler: each job runs at submission, but its completion is
/// delivered at a synthetic finish time now + 1 + 0.5 U (seeded). Earliest
/// finish first; ties by id.
class VirtualExecutor final : public Executor {
 public:
  VirtualExecutor(std::size_t workers, std::uint64_t seed);
  std::size_t workers() const override { return workers_; }
  std::size_t in_flight() const override { return running_.size(); }
  void submit(std::size_t id, std::function<EvalResult()> job) override;
  Completion wait_next() override;

 private:
  std::size_t workers_;
  std::mt19937_64 rng_;
  double now_ = 0.0;
  std::vector<Completion> running_;
};

/// Real threads; completions arrive in wall-clock order.
class ThreadExecutor final : public Executor {
 public:
  explicit ThreadExecutor(std::size_t workers);
  ~ThreadExecutor() override;
  std::size_t workers() const override { return workers_; }
  std::size_t in_flight() const override;
  void submit(std::size_t id, std::function<EvalResult()> job) override;
  Completion wait_next() override;

 private:
  void loop();
  double clock() const;

  std::size_t workers_;
  std::vector<std::thread> threads_;
  mutable std::mutex mu_;
  std::condition_variable job_cv_;
  std::condition_variable done_cv_;
  std::deque<std::pair<std::size_t, std::function<EvalResult()>>> queue_;
  std::deque<Completion> done_;
  std::map<std::size_t, double> dispatched_;
  std::size_t outstanding_ = 0;
  bool stop_ = false;
  std::chrono::steady_clock::time_point t0_;
};

// -- driver ------------------------------------------------------------------

struct RefitPolicy {
  int full_every = 10;          // multi-start refit every k-th proposal
  int restarts = 3;             // random restarts in a full refit
  int full_iterations = 100;
  int warm_iterations = 25;     // warm-started refit in between
  std::size_t dense_limit = 300;  // above this many points, warm refits only every 10th proposal
};

struct BoSettings {
  AcquisitionOptions acquisition{};
  RefitPolicy refit{};
  bool threaded = false;  // ThreadExecutor instead of the virtual scheduler
  std::function<void(const std::string&)> log;  // one line per completed evaluation
};

struct BoStats {
  std::size_t evaluations = 0;
  std::size_t finite_evaluations = 0;
  std::size_t proposals = 0;     // acquisition-driven dispatches
  std::size_t imputations = 0;   // impute_in_flight calls with pending points
  double wall_time = 0.0;        // whole run, s
};

struct BoResult {
  Eigen::VectorXd best_point;
  double best_value = 0.0;
  std::vector<EvaluationRecord> trace;  // completion order, completed records only
  BoStats stats;
};

struct BoFailure : std::runtime_error {
  BoFailure(const std::string& what, std::vector<EvaluationRecord> trace);
  std::vector<EvaluationRecord> trace;
};

/// Runs until `budget` completed evaluations have a finite objective, or 5x
/// budget evaluations in total. Throws BoFailure when no evaluation is
/// feasible (finite objective, all constraints <= 0).
BoResult run_parallel_bo(const OptimizationProblem& problem, const BoSettings& settings = {});

/// Best objective among feasible completed records up to each row (+inf before
/// the first feasible one).
std::vector<double> best_so_far(const std::vector<EvaluationRecord>& trace);

void write_trace_csv(const std::vector<EvaluationRecord>& trace, const OptimizationProblem& problem,
                     const std::filesystem::path& path);

}  // namespace til
