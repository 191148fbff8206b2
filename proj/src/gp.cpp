#include "til/gp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>
#include <numbers>
#include <random>

#include <Eigen/Cholesky>
#include <ceres/gradient_problem.h>
#include <ceres/gradient_problem_solver.h>
#include <glog/logging.h>

namespace til {

namespace {

const double kSqrt5 = std::sqrt(5.0);
constexpr double kMaxRelJitter = 1e-6;

double matern52(double r, double sf2) {
  const double s = kSqrt5 * r;
  return sf2 * (1.0 + s + s * s / 3.0) * std::exp(-s);
}

// Gram matrix on pre-scaled columns (d x n).
Eigen::MatrixXd scaled_gram(const Eigen::MatrixXd& xt, double sf2, Eigen::MatrixXd* dist = nullptr) {
  const Eigen::Index n = xt.cols();
  Eigen::MatrixXd k(n, n);
  if (dist) dist->resize(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    k(j, j) = sf2;
    if (dist) (*dist)(j, j) = 0.0;
    for (Eigen::Index i = j + 1; i < n; ++i) {
      const double r = (xt.col(i) - xt.col(j)).norm();
      k(i, j) = k(j, i) = matern52(r, sf2);
      if (dist) (*dist)(i, j) = (*dist)(j, i) = r;
    }
  }
  return k;
}

// Cholesky with escalating jitter. Returns false when even the largest jitter fails.
bool factor(Eigen::MatrixXd k, double noise_var, double scale, Eigen::LLT<Eigen::MatrixXd>& llt,
            double& jitter) {
  k.diagonal().array() += noise_var;
  jitter = 0.0;
  llt.compute(k);
  if (llt.info() == Eigen::Success) return true;
  for (double rel = 1e-12; rel <= kMaxRelJitter * 1.0000001; rel *= 10.0) {
    jitter = rel * scale;
    Eigen::MatrixXd kj = k;
    kj.diagonal().array() += jitter;
    llt.compute(kj);
    if (llt.info() == Eigen::Success) return true;
  }
  return false;
}

Eigen::MatrixXd scaled_points(const Eigen::MatrixXd& X, const Eigen::VectorXd& inv_ls) {
  return (X * inv_ls.asDiagonal()).transpose();
}

double sample_std(const Eigen::VectorXd& y) {
  if (y.size() < 2) return 0.0;
  const double m = y.mean();
  return std::sqrt((y.array() - m).square().sum() / static_cast<double>(y.size() - 1));
}

Eigen::VectorXd pack(const KernelHyper& h) {
  const Eigen::Index d = h.length_scales.size();
  Eigen::VectorXd p(d + 2);
  p.head(d) = h.length_scales.array().log().matrix();
  p(d) = std::log(h.sigma_f);
  p(d + 1) = std::log(h.sigma_n);
  return p;
}

KernelHyper unpack(const Eigen::VectorXd& p) {
  const Eigen::Index d = p.size() - 2;
  KernelHyper h;
  h.length_scales = p.head(d).array().exp().matrix();
  h.sigma_f = std::exp(p(d));
  h.sigma_n = std::exp(p(d + 1));
  return h;
}

double logistic(double t) { return 1.0 / (1.0 + std::exp(-t)); }

// Negative LML in an unconstrained parameterization: log p = lo + (hi - lo) sigmoid(theta).
class NegLml final : public ceres::FirstOrderFunction {
 public:
  NegLml(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, HyperBounds b)
      : X_(X), y_(y), b_(std::move(b)) {}

  Eigen::VectorXd to_log(const double* theta) const {
    Eigen::VectorXd p(b_.lower.size());
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      p(i) = b_.lower(i) + (b_.upper(i) - b_.lower(i)) * logistic(theta[i]);
    }
    return p;
  }

  Eigen::VectorXd to_theta(const Eigen::VectorXd& logp) const {
    Eigen::VectorXd t(logp.size());
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      const double width = b_.upper(i) - b_.lower(i);
      const double s = std::clamp((logp(i) - b_.lower(i)) / width, 1e-6, 1.0 - 1e-6);
      t(i) = std::log(s / (1.0 - s));
    }
    return t;
  }

  bool Evaluate(const double* theta, double* cost, double* gradient) const override {
    const Eigen::VectorXd logp = to_log(theta);
    Eigen::VectorXd g;
    const double lml = log_marginal_likelihood(X_, y_, unpack(logp), gradient ? &g : nullptr);
    if (!std::isfinite(lml)) return false;
    *cost = -lml;
    if (gradient) {
      for (Eigen::Index i = 0; i < logp.size(); ++i) {
        const double s = logistic(theta[i]);
        gradient[i] = -g(i) * (b_.upper(i) - b_.lower(i)) * s * (1.0 - s);
      }
    }
    return true;
  }

  int NumParameters() const override { return static_cast<int>(b_.lower.size()); }

 private:
  const Eigen::MatrixXd& X_;
  const Eigen::VectorXd& y_;
  HyperBounds b_;
};

}  // namespace

void KernelHyper::validate() const {
  const auto ok = [](double v) { return std::isfinite(v) && v > 0.0; };
  if (!ok(sigma_f) || !ok(sigma_n)) throw std::invalid_argument("kernel: sigma_f and sigma_n must be positive");
  if (length_scales.size() == 0) throw std::invalid_argument("kernel: no length scales");
  for (Eigen::Index i = 0; i < length_scales.size(); ++i) {
    if (!ok(length_scales(i))) throw std::invalid_argument("kernel: length scales must be positive");
  }
}

double kernel_eval(const Eigen::VectorXd& a, const Eigen::VectorXd& b, const KernelHyper& h) {
  if (a.size() != b.size() || a.size() != h.length_scales.size()) {
    throw std::invalid_argument("kernel_eval: dimension mismatch");
  }
  if (!a.allFinite() || !b.allFinite()) throw std::invalid_argument("kernel_eval: non-finite input");
  const double r = ((a - b).array() / h.length_scales.array()).matrix().norm();
  return matern52(r, h.sigma_f * h.sigma_f);
}

GpModel::GpModel(KernelHyper h) : hyper_(std::move(h)) {
  hyper_.validate();
  inv_ls_ = hyper_.length_scales.cwiseInverse();
  xt_.resize(hyper_.length_scales.size(), 0);
}

GpModel::GpModel(KernelHyper h, const Eigen::MatrixXd& X, const Eigen::VectorXd& y, bool center)
    : GpModel(std::move(h)) {
  if (X.rows() != y.size()) throw std::invalid_argument("GpModel: |X| != |y|");
  if (X.rows() > 0 && X.cols() != hyper_.length_scales.size()) {
    throw std::invalid_argument("GpModel: input dimension does not match the kernel");
  }
  if (!X.allFinite() || !y.allFinite()) throw std::invalid_argument("GpModel: non-finite data");
  if (X.rows() == 0) return;

  offset_ = center ? y.mean() : 0.0;
  xt_ = scaled_points(X, inv_ls_);
  const double sf2 = hyper_.sigma_f * hyper_.sigma_f;
  Eigen::LLT<Eigen::MatrixXd> llt;
  if (!factor(scaled_gram(xt_, sf2), hyper_.sigma_n * hyper_.sigma_n, sf2, llt, jitter_)) {
    throw GpError("GP Gram matrix is not positive definite even with jitter");
  }
  chol_ = llt.matrixL();
  alpha_ = llt.solve((y.array() - offset_).matrix());
}

Prediction GpModel::predict(const Eigen::VectorXd& q) const {
  const double sf2 = hyper_.sigma_f * hyper_.sigma_f;
  if (q.size() != inv_ls_.size()) throw std::invalid_argument("GP query has the wrong dimension");
  const Eigen::Index n = xt_.cols();
  if (n == 0) return {0.0, sf2};

  const Eigen::VectorXd qs = q.cwiseProduct(inv_ls_);
  Eigen::VectorXd ks(n);
  for (Eigen::Index i = 0; i < n; ++i) ks(i) = matern52((xt_.col(i) - qs).norm(), sf2);
  Prediction p;
  p.mean = offset_ + ks.dot(alpha_);
  const Eigen::VectorXd v = chol_.triangularView<Eigen::Lower>().solve(ks);
  p.variance = std::max(sf2 - v.squaredNorm(), 0.0);
  return p;
}

Prediction gp_posterior(const GpModel& model, const Eigen::VectorXd& query) {
  return model.predict(query);
}

double log_marginal_likelihood(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                               const KernelHyper& h, Eigen::VectorXd* grad) {
  h.validate();
  const Eigen::Index n = X.rows();
  const Eigen::Index d = X.cols();
  if (n != y.size() || d != h.length_scales.size()) {
    throw std::invalid_argument("log_marginal_likelihood: dimension mismatch");
  }
  const double sf2 = h.sigma_f * h.sigma_f;
  const double sn2 = h.sigma_n * h.sigma_n;
  const Eigen::VectorXd inv_ls = h.length_scales.cwiseInverse();
  const Eigen::MatrixXd xt = scaled_points(X, inv_ls);
  Eigen::MatrixXd dist;
  const Eigen::MatrixXd kf = scaled_gram(xt, sf2, grad ? &dist : nullptr);

  Eigen::LLT<Eigen::MatrixXd> llt;
  double jitter = 0.0;
  if (!factor(kf, sn2, sf2, llt, jitter)) return -std::numeric_limits<double>::infinity();
  const Eigen::VectorXd alpha = llt.solve(y);
  const Eigen::MatrixXd& lmat = llt.matrixLLT();
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) logdet += std::log(lmat(i, i));
  const double lml = -0.5 * y.dot(alpha) - logdet - 0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);

  if (grad) {
    grad->resize(d + 2);
    // dLML/dtheta = -1/2 tr(W dK/dtheta), W = K^-1 - alpha alpha^T.
    Eigen::MatrixXd w = llt.solve(Eigen::MatrixXd::Identity(n, n));
    w.noalias() -= alpha * alpha.transpose();

    // Length scales: dk/dlog l_i = (5/3) sf2 (1 + sqrt5 r) exp(-sqrt5 r) (dx_i / l_i)^2.
    Eigen::MatrixXd m(n, n);
    for (Eigen::Index j = 0; j < n; ++j) {
      for (Eigen::Index i = 0; i < n; ++i) {
        const double r = dist(i, j);
        m(i, j) = w(i, j) * (5.0 / 3.0) * sf2 * (1.0 + kSqrt5 * r) * std::exp(-kSqrt5 * r);
      }
    }
    // sum_ab M_ab (x_a - x_b)^2 = 2 sum_a x_a^2 (M 1)_a - 2 x^T M x for symmetric M.
    const Eigen::VectorXd row_sums = m.rowwise().sum();
    const Eigen::MatrixXd xs = xt.transpose();  // n x d, already divided by l
    const Eigen::MatrixXd mx = m * xs;
    for (Eigen::Index k = 0; k < d; ++k) {
      const double quad = 2.0 * xs.col(k).array().square().matrix().dot(row_sums) - 2.0 * xs.col(k).dot(mx.col(k));
      (*grad)(k) = -0.5 * quad;
    }
    (*grad)(d) = -0.5 * 2.0 * (w.array() * kf.array()).sum();
    (*grad)(d + 1) = -0.5 * 2.0 * sn2 * w.trace();
  }
  return lml;
}

HyperBounds hyper_bounds(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  const Eigen::Index d = X.cols();
  HyperBounds b;
  b.lower.resize(d + 2);
  b.upper.resize(d + 2);
  for (Eigen::Index i = 0; i < d; ++i) {
    double range = X.rows() > 0 ? X.col(i).maxCoeff() - X.col(i).minCoeff() : 1.0;
    if (!(range > 0.0)) range = 1.0;
    b.lower(i) = std::log(1e-3 * range);
    b.upper(i) = std::log(1e3 * range);
  }
  double sd = sample_std(y);
  if (!(sd > 0.0)) sd = 1.0;
  b.lower(d) = std::log(1e-4 * sd);
  b.upper(d) = std::log(1e3 * sd);
  b.lower(d + 1) = std::log(1e-6 * sd);
  b.upper(d + 1) = std::log(sd);
  return b;
}

FitResult fit_hyperparameters(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const FitOptions& opt) {
  if (X.rows() != y.size()) throw std::invalid_argument("fit_hyperparameters: |X| != |y|");
  if (X.rows() < 2) throw std::invalid_argument("fit_hyperparameters needs at least 2 points");
  const Eigen::Index d = X.cols();
  const Eigen::VectorXd yc = (y.array() - y.mean()).matrix();
  const double sd = sample_std(y);

  const HyperBounds b = hyper_bounds(X, y);
  Eigen::VectorXd range(d);
  for (Eigen::Index i = 0; i < d; ++i) range(i) = std::exp(b.lower(i)) / 1e-3;

  if (!(sd > 1e-12 * std::max(1.0, std::abs(y.mean())))) {
    FitResult r;
    r.degenerate = true;
    r.hyper.length_scales = 0.5 * range;
    r.hyper.sigma_f = std::abs(y.mean()) > 0.0 ? std::abs(y.mean()) : 1.0;
    r.hyper.sigma_n = 1e-3 * r.hyper.sigma_f;
    r.lml = log_marginal_likelihood(X, yc, r.hyper);
    return r;
  }

  // Ceres reports degenerate line-search interpolations as glog warnings;
  // they are harmless here and would flood stderr.
  static std::once_flag quiet;
  std::call_once(quiet, [] { FLAGS_minloglevel = google::GLOG_ERROR; });

  auto* fn = new NegLml(X, yc, b);
  ceres::GradientProblem problem(fn);  // takes ownership
  ceres::GradientProblemSolver::Options options;
  options.max_num_iterations = opt.max_iterations;
  options.logging_type = ceres::SILENT;
  options.minimizer_progress_to_stdout = false;
  options.function_tolerance = 1e-10;
  options.gradient_tolerance = 1e-8;

  std::vector<Eigen::VectorXd> starts;
  if (opt.warm_start && opt.warm_start->length_scales.size() == d) starts.push_back(pack(*opt.warm_start));
  if (starts.empty() || opt.restarts > 0) {
    KernelHyper h0;
    h0.length_scales = 0.3 * range;
    h0.sigma_f = sd;
    h0.sigma_n = 1e-2 * sd;
    starts.push_back(pack(h0));
  }
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int r = 0; r < opt.restarts; ++r) {
    KernelHyper h;
    h.length_scales.resize(d);
    for (Eigen::Index i = 0; i < d; ++i) h.length_scales(i) = range(i) * std::pow(10.0, -1.5 + 2.0 * unit(rng));
    h.sigma_f = sd * std::pow(10.0, -0.5 + unit(rng));
    h.sigma_n = sd * std::pow(10.0, -4.0 + 3.0 * unit(rng));
    starts.push_back(pack(h));
  }

  FitResult best;
  best.lml = -std::numeric_limits<double>::infinity();
  for (const Eigen::VectorXd& s : starts) {
    Eigen::VectorXd theta = fn->to_theta(s);
    double cost = 0.0;
    if (!fn->Evaluate(theta.data(), &cost, nullptr)) continue;
    ceres::GradientProblemSolver::Summary summary;
    ceres::Solve(options, problem, theta.data(), &summary);
    if (!fn->Evaluate(theta.data(), &cost, nullptr)) continue;
    if (-cost > best.lml) {
      best.lml = -cost;
      best.hyper = unpack(fn->to_log(theta.data()));
    }
  }
  if (!std::isfinite(best.lml)) throw GpError("hyperparameter fit failed from every start");
  return best;
}

}  // namespace til
