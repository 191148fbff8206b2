#include "til/bayes_opt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

#include "til/csv.hpp"

namespace til {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Eigen::VectorXd to_unit(const Eigen::VectorXd& x, const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
  Eigen::VectorXd u(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double w = hi(i) - lo(i);
    u(i) = w > 0.0 ? (x(i) - lo(i)) / w : 0.0;
  }
  return u;
}

Eigen::VectorXd from_unit(const Eigen::VectorXd& u, const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
  Eigen::VectorXd x(u.size());
  for (Eigen::Index i = 0; i < u.size(); ++i) {
    x(i) = std::clamp(lo(i) + u(i) * (hi(i) - lo(i)), lo(i), hi(i));
  }
  return x;
}

Eigen::MatrixXd stack(const std::vector<Eigen::VectorXd>& rows, Eigen::Index d) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), d);
  for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  return m;
}

Eigen::VectorXd to_vec(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

// One surrogate with its hyperparameter cache.
struct Surrogate {
  std::optional<KernelHyper> hyper;

  KernelHyper refit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const RefitPolicy& policy,
                    std::size_t proposal, std::uint64_t seed) {
    const bool full = !hyper || policy.full_every <= 1 ||
                      proposal % static_cast<std::size_t>(policy.full_every) == 0;
    const bool skip = !full && static_cast<std::size_t>(X.rows()) > policy.dense_limit && proposal % 10 != 0;
    if (skip && hyper && hyper->dim() == static_cast<std::size_t>(X.cols())) return *hyper;
    FitOptions fo;
    fo.seed = seed;
    fo.warm_start = hyper;
    fo.restarts = full ? policy.restarts : 0;
    fo.max_iterations = full ? policy.full_iterations : policy.warm_iterations;
    hyper = fit_hyperparameters(X, y, fo).hyper;
    return *hyper;
  }
};

}  // namespace

// -- building blocks ---------------------------------------------------------

void OptimizationProblem::validate() const {
  if (lower.size() < 1) throw std::invalid_argument("optimization problem needs at least one variable");
  if (upper.size() != lower.size()) throw std::invalid_argument("bounds have different lengths");
  for (Eigen::Index i = 0; i < lower.size(); ++i) {
    if (!std::isfinite(lower(i)) || !std::isfinite(upper(i)) || lower(i) > upper(i)) {
      throw std::invalid_argument("bounds must be finite with lower <= upper");
    }
  }
  if (!evaluate) throw std::invalid_argument("optimization problem has no evaluator");
  if (n_seed < 1 || n_seed >= budget) throw std::invalid_argument("need 1 <= n_seed < budget");
  if (workers < 1) throw std::invalid_argument("need at least one worker");
  if (!variable_names.empty() && variable_names.size() != dim()) {
    throw std::invalid_argument("variable_names does not match the dimension");
  }
}

std::string_view status_name(RecordStatus s) {
  switch (s) {
    case RecordStatus::kCompleted: return "completed";
    case RecordStatus::kInFlight: return "in-flight";
    case RecordStatus::kImputed: return "imputed";
  }
  return "?";
}

bool EvaluationRecord::feasible() const {
  if (status != RecordStatus::kCompleted || !std::isfinite(objective)) return false;
  return std::all_of(constraints.begin(), constraints.end(), [](double c) { return c <= 0.0; });
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi); }

double expected_improvement(double mean, double variance, double f_best) {
  if (!(variance > 0.0)) return 0.0;
  const double sigma = std::sqrt(variance);
  const double z = (f_best - mean) / sigma;
  if (z < -6.0) {
    // z Phi(z) + phi(z) cancels badly in the tail; use the asymptotic series
    // of the Mills ratio instead.
    const double iz2 = 1.0 / (z * z);
    return sigma * normal_pdf(z) * iz2 * (1.0 - 3.0 * iz2 + 15.0 * iz2 * iz2);
  }
  return std::max(0.0, sigma * (z * normal_cdf(z) + normal_pdf(z)));
}

double probability_feasible(const Prediction& p) {
  if (!(p.variance > 0.0)) return p.mean < 0.0 ? 1.0 : (p.mean == 0.0 ? 0.5 : 0.0);
  return normal_cdf(-p.mean / std::sqrt(p.variance));
}

double feasibility_weight(const std::vector<const GpModel*>& constraint_models, const Eigen::VectorXd& query) {
  double w = 1.0;
  for (const GpModel* m : constraint_models) w *= probability_feasible(m->predict(query));
  return w;
}

std::vector<double> impute_in_flight(const GpModel& objective_model,
                                     const std::vector<Eigen::VectorXd>& pending, double f_min) {
  std::vector<double> out;
  out.reserve(pending.size());
  for (const auto& p : pending) out.push_back(std::max(objective_model.predict(p).mean, f_min));
  return out;
}

std::vector<Eigen::VectorXd> latin_hypercube(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Eigen::VectorXd> pts(n, Eigen::VectorXd(static_cast<Eigen::Index>(d)));
  std::vector<std::size_t> perm(n);
  for (std::size_t k = 0; k < d; ++k) {
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t i = 0; i < n; ++i) {
      pts[i](static_cast<Eigen::Index>(k)) = (static_cast<double>(perm[i]) + unit(rng)) / static_cast<double>(n);
    }
  }
  return pts;
}

Eigen::VectorXd maximize_acquisition(const std::function<double(const Eigen::VectorXd&)>& utility,
                                     const Eigen::VectorXd& lower, const Eigen::VectorXd& upper,
                                     std::mt19937_64& rng, const std::optional<Eigen::VectorXd>& incumbent,
                                     const AcquisitionOptions& opt) {
  const Eigen::Index d = lower.size();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto value = [&](const Eigen::VectorXd& u) {
    const double v = utility(from_unit(u, lower, upper));
    return std::isnan(v) ? -kInf : v;
  };

  std::vector<std::pair<double, Eigen::VectorXd>> probes;
  probes.reserve(static_cast<std::size_t>(std::max(opt.probes, 1)) + 1);
  for (int i = 0; i < std::max(opt.probes, 1); ++i) {
    Eigen::VectorXd u(d);
    for (Eigen::Index k = 0; k < d; ++k) u(k) = unit(rng);
    probes.emplace_back(value(u), u);
  }
  std::stable_sort(probes.begin(), probes.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  const std::size_t keep = std::min(probes.size(), static_cast<std::size_t>(std::max(opt.starts, 0)));
  probes.resize(std::max<std::size_t>(keep, 1));
  if (incumbent) {
    const Eigen::VectorXd u = to_unit(*incumbent, lower, upper).cwiseMax(0.0).cwiseMin(1.0);
    probes.emplace_back(value(u), u);
  }

  double best_v = -kInf;
  Eigen::VectorXd best_u = probes.front().second;
  for (auto& [v, u] : probes) {
    double step = opt.initial_step;
    int evals = 0;
    // Opportunistic compass search: accept the first improving move along each
    // coordinate, halve the step after a full sweep without improvement.
    while (step >= opt.min_step && evals < opt.max_evals_per_start) {
      bool moved = false;
      for (Eigen::Index k = 0; k < d; ++k) {
        for (double sign : {1.0, -1.0}) {
          Eigen::VectorXd c = u;
          c(k) = std::clamp(c(k) + sign * step, 0.0, 1.0);
          if (c(k) == u(k)) continue;
          const double cv = value(c);
          ++evals;
          if (cv > v) {
            u = c;
            v = cv;
            moved = true;
            break;
          }
        }
      }
      if (!moved) step *= 0.5;
    }
    if (v > best_v) {
      best_v = v;
      best_u = u;
    }
  }
  return from_unit(best_u, lower, upper);
}

// -- workers -----------------------------------------------------------------

VirtualExecutor::VirtualExecutor(std::size_t workers, std::uint64_t seed)
    : workers_(std::max<std::size_t>(workers, 1)), rng_(seed) {}

void VirtualExecutor::submit(std::size_t id, std::function<EvalResult()> job) {
  if (running_.size() >= workers_) throw std::logic_error("VirtualExecutor: all workers busy");
  const auto t0 = std::chrono::steady_clock::now();
  Completion c;
  c.id = id;
  c.result = job();
  c.wall_time = seconds_since(t0);
  c.dispatch_time = now_;
  c.finish_time = now_ + 1.0 + 0.5 * std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
  running_.push_back(std::move(c));
}

Completion VirtualExecutor::wait_next() {
  if (running_.empty()) throw std::logic_error("VirtualExecutor: nothing in flight");
  const auto it = std::min_element(running_.begin(), running_.end(), [](const auto& a, const auto& b) {
    return a.finish_time < b.finish_time || (a.finish_time == b.finish_time && a.id < b.id);
  });
  Completion c = std::move(*it);
  running_.erase(it);
  now_ = c.finish_time;
  return c;
}

ThreadExecutor::ThreadExecutor(std::size_t workers)
    : workers_(std::max<std::size_t>(workers, 1)), t0_(std::chrono::steady_clock::now()) {
  for (std::size_t i = 0; i < workers_; ++i) threads_.emplace_back([this] { loop(); });
}

ThreadExecutor::~ThreadExecutor() {
  {
    std::lock_guard<std::mutex> lock(mu_);
    stop_ = true;
  }
  job_cv_.notify_all();
  for (auto& t : threads_) t.join();
}

double ThreadExecutor::clock() const { return seconds_since(t0_); }

std::size_t ThreadExecutor::in_flight() const {
  std::lock_guard<std::mutex> lock(mu_);
  return outstanding_;
}

void ThreadExecutor::submit(std::size_t id, std::function<EvalResult()> job) {
  {
    std::lock_guard<std::mutex> lock(mu_);
    if (outstanding_ >= workers_) throw std::logic_error("ThreadExecutor: all workers busy");
    ++outstanding_;
    dispatched_[id] = clock();
    queue_.emplace_back(id, std::move(job));
  }
  job_cv_.notify_one();
}

void ThreadExecutor::loop() {
  while (true) {
    std::pair<std::size_t, std::function<EvalResult()>> job;
    {
      std::unique_lock<std::mutex> lock(mu_);
      job_cv_.wait(lock, [this] { return stop_ || !queue_.empty(); });
      if (stop_ && queue_.empty()) return;
      job = std::move(queue_.front());
      queue_.pop_front();
    }
    const auto t0 = std::chrono::steady_clock::now();
    Completion c;
    c.id = job.first;
    try {
      c.result = job.second();
    } catch (...) {
      c.result.objective = kInf;
    }
    c.wall_time = seconds_since(t0);
    {
      std::lock_guard<std::mutex> lock(mu_);
      c.dispatch_time = dispatched_[c.id];
      dispatched_.erase(c.id);
      c.finish_time = clock();
      done_.push_back(std::move(c));
    }
    done_cv_.notify_all();
  }
}

Completion ThreadExecutor::wait_next() {
  std::unique_lock<std::mutex> lock(mu_);
  if (outstanding_ == 0) throw std::logic_error("ThreadExecutor: nothing in flight");
  done_cv_.wait(lock, [this] { return !done_.empty(); });
  Completion c = std::move(done_.front());
  done_.pop_front();
  --outstanding_;
  return c;
}

// -- driver ------------------------------------------------------------------

BoFailure::BoFailure(const std::string& what, std::vector<EvaluationRecord> t)
    : std::runtime_error(what), trace(std::move(t)) {}

BoResult run_parallel_bo(const OptimizationProblem& problem, const BoSettings& settings) {
  problem.validate();
  const auto t_start = std::chrono::steady_clock::now();
  const Eigen::Index d = static_cast<Eigen::Index>(problem.dim());
  const std::size_t n_con = problem.constraint_names.size();
  const std::size_t max_total = 5 * problem.budget;
  const Eigen::VectorXd unit_lo = Eigen::VectorXd::Zero(d);
  const Eigen::VectorXd unit_hi = Eigen::VectorXd::Ones(d);

  std::mt19937_64 rng(problem.seed);
  const std::vector<Eigen::VectorXd> seeds = latin_hypercube(problem.n_seed, problem.dim(), rng);

  std::unique_ptr<Executor> exec;
  if (settings.threaded) exec = std::make_unique<ThreadExecutor>(problem.workers);
  else exec = std::make_unique<VirtualExecutor>(problem.workers, problem.seed ^ 0x9e3779b97f4a7c15ULL);

  BoResult result;
  std::map<std::size_t, EvaluationRecord> pending;
  std::size_t next_seed = 0;
  std::size_t dispatched = 0;
  std::size_t finite_done = 0;
  Surrogate obj_sur;
  std::vector<Surrogate> con_sur(n_con);

  // Proposes the next point in unit coordinates from completed + pending records.
  const auto propose = [&]() -> Eigen::VectorXd {
    const std::size_t prop = result.stats.proposals++;
    const std::uint64_t fit_seed = problem.seed * 1000003ULL + prop;

    std::vector<Eigen::VectorXd> xo;
    std::vector<double> yo;
    double f_best = kInf;
    std::optional<Eigen::VectorXd> incumbent;
    double f_min = kInf;
    for (const auto& r : result.trace) {
      if (!std::isfinite(r.objective)) continue;
      xo.push_back(to_unit(r.point, problem.lower, problem.upper));
      yo.push_back(r.objective);
      f_min = std::min(f_min, r.objective);
      if (r.feasible() && r.objective < f_best) {
        f_best = r.objective;
        incumbent = xo.back();
      }
    }

    // Constraint surrogates on finite observations.
    std::vector<GpModel> con_models;
    for (std::size_t c = 0; c < n_con; ++c) {
      std::vector<Eigen::VectorXd> xc;
      std::vector<double> yc;
      for (const auto& r : result.trace) {
        if (c < r.constraints.size() && std::isfinite(r.constraints[c])) {
          xc.push_back(to_unit(r.point, problem.lower, problem.upper));
          yc.push_back(r.constraints[c]);
        }
      }
      if (xc.size() < 2) continue;
      const Eigen::MatrixXd X = stack(xc, d);
      const Eigen::VectorXd y = to_vec(yc);
      con_models.emplace_back(con_sur[c].refit(X, y, settings.refit, prop, fit_seed + 7 * (c + 1)), X, y);
    }
    std::vector<const GpModel*> con_ptrs;
    for (const auto& m : con_models) con_ptrs.push_back(&m);

    std::optional<GpModel> obj_model;
    if (xo.size() >= 2) {
      const Eigen::MatrixXd X = stack(xo, d);
      const Eigen::VectorXd y = to_vec(yo);
      const KernelHyper h = obj_sur.refit(X, y, settings.refit, prop, fit_seed);
      obj_model.emplace(h, X, y);
      if (!pending.empty()) {
        std::vector<Eigen::VectorXd> pend;
        for (const auto& [id, r] : pending) pend.push_back(to_unit(r.point, problem.lower, problem.upper));
        const std::vector<double> imputed = impute_in_flight(*obj_model, pend, f_min);
        ++result.stats.imputations;
        std::vector<Eigen::VectorXd> xa = xo;
        std::vector<double> ya = yo;
        xa.insert(xa.end(), pend.begin(), pend.end());
        ya.insert(ya.end(), imputed.begin(), imputed.end());
        obj_model.emplace(h, stack(xa, d), to_vec(ya));
      }
    }

    std::function<double(const Eigen::VectorXd&)> utility;
    if (obj_model && std::isfinite(f_best)) {
      utility = [&](const Eigen::VectorXd& u) {
        const Prediction p = obj_model->predict(u);
        const double ei = expected_improvement(p.mean, p.variance, f_best);
        if (ei <= 0.0) return 0.0;
        return ei * feasibility_weight(con_ptrs, u);
      };
    } else if (!con_ptrs.empty()) {
      // Nothing feasible yet: look for feasibility first.
      utility = [&](const Eigen::VectorXd& u) { return feasibility_weight(con_ptrs, u); };
    } else {
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      Eigen::VectorXd u(d);
      for (Eigen::Index k = 0; k < d; ++k) u(k) = unit(rng);
      return u;
    }
    return maximize_acquisition(utility, unit_lo, unit_hi, rng, incumbent, settings.acquisition);
  };

  const auto can_dispatch = [&]() {
    return exec->in_flight() < problem.workers && finite_done + exec->in_flight() < problem.budget &&
           dispatched < max_total;
  };

  while (true) {
    while (can_dispatch()) {
      EvaluationRecord rec;
      rec.id = dispatched++;
      rec.status = RecordStatus::kInFlight;
      Eigen::VectorXd u;
      if (next_seed < seeds.size()) {
        u = seeds[next_seed++];
        rec.seed_point = true;
      } else {
        u = propose();
      }
      rec.point = from_unit(u, problem.lower, problem.upper);
      pending.emplace(rec.id, rec);
      const Eigen::VectorXd point = rec.point;
      const Evaluator& eval = problem.evaluate;
      exec->submit(rec.id, [&eval, point]() { return eval(point); });
    }
    if (exec->in_flight() == 0) break;

    Completion c = exec->wait_next();
    auto it = pending.find(c.id);
    EvaluationRecord rec = std::move(it->second);
    pending.erase(it);
    rec.status = RecordStatus::kCompleted;
    rec.objective = std::isnan(c.result.objective) ? kInf : c.result.objective;
    rec.constraints = std::move(c.result.constraints);
    if (rec.constraints.size() != n_con) {
      throw std::runtime_error("evaluator returned " + std::to_string(rec.constraints.size()) +
                               " constraint values, expected " + std::to_string(n_con));
    }
    for (double& v : rec.constraints)
      if (std::isnan(v)) v = kInf;
    rec.dispatch_time = c.dispatch_time;
    rec.finish_time = c.finish_time;
    rec.wall_time = c.wall_time;
    if (std::isfinite(rec.objective)) ++finite_done;
    result.trace.push_back(std::move(rec));

    if (settings.log) {
      const auto& r = result.trace.back();
      const auto best = best_so_far(result.trace).back();
      std::ostringstream line;
      line << "eval " << result.trace.size() << " id=" << r.id << " f=" << format_number(r.objective)
           << " feasible=" << (r.feasible() ? 1 : 0) << " best=" << format_number(best)
           << " finite=" << finite_done << "/" << problem.budget;
      settings.log(line.str());
    }
  }

  result.stats.evaluations = result.trace.size();
  result.stats.finite_evaluations = finite_done;
  result.stats.wall_time = seconds_since(t_start);

  const EvaluationRecord* best = nullptr;
  for (const auto& r : result.trace) {
    if (r.feasible() && (!best || r.objective < best->objective)) best = &r;
  }
  if (!best) {
    throw BoFailure("no feasible point found in " + std::to_string(result.trace.size()) + " evaluations",
                    std::move(result.trace));
  }
  result.best_point = best->point;
  result.best_value = best->objective;
  return result;
}

std::vector<double> best_so_far(const std::vector<EvaluationRecord>& trace) {
  std::vector<double> out;
  out.reserve(trace.size());
  double best = kInf;
  for (const auto& r : trace) {
    if (r.feasible()) best = std::min(best, r.objective);
    out.push_back(best);
  }
  return out;
}

void write_trace_csv(const std::vector<EvaluationRecord>& trace, const OptimizationProblem& problem,
                     const std::filesystem::path& path) {
  CsvTable t;
  t.header.push_back("id");
  for (std::size_t i = 0; i < problem.dim(); ++i) {
    t.header.push_back(problem.variable_names.empty() ? "x" + std::to_string(i) : problem.variable_names[i]);
  }
  t.header.push_back("objective");
  for (const auto& c : problem.constraint_names) t.header.push_back("c_" + c);
  for (const char* h : {"feasible", "status", "seed", "dispatch_time", "finish_time", "wall_time"}) {
    t.header.push_back(h);
  }
  for (const auto& r : trace) {
    std::vector<std::string> row;
    row.push_back(std::to_string(r.id));
    for (Eigen::Index i = 0; i < r.point.size(); ++i) row.push_back(format_number(r.point(i)));
    row.push_back(format_number(r.objective));
    for (double c : r.constraints) row.push_back(format_number(c));
    row.push_back(r.feasible() ? "1" : "0");
    row.emplace_back(status_name(r.status));
    row.push_back(r.seed_point ? "1" : "0");
    row.push_back(format_number(r.dispatch_time));
    row.push_back(format_number(r.finish_time));
    row.push_back(format_number(r.wall_time));
    t.rows.push_back(std::move(row));
  }
  write_csv(path, t);
}

}  // namespace til
