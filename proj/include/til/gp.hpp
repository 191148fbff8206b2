#pragma once

// Gaussian-process regression with a Matern 5/2 ARD kernel.

#include <cstdint>
#include <optional>
#include <stdexcept>

#include <Eigen/Core>

namespace til {

struct KernelHyper {
  double sigma_f = 1.0;
  Eigen::VectorXd length_scales;
  double sigma_n = 1e-3;

  std::size_t dim() const { return static_cast<std::size_t>(length_scales.size()); }
  /// Throws std::invalid_argument unless every value is finite and positive.
  void validate() const;
};

struct GpError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// sigma_f^2 (1 + sqrt5 r + 5 r^2 / 3) exp(-sqrt5 r), r^2 = sum ((a_i - b_i) / l_i)^2.
double kernel_eval(const Eigen::VectorXd& a, const Eigen::VectorXd& b, const KernelHyper& h);

struct Prediction {
  double mean = 0.0;
  double variance = 0.0;  // latent, without observation noise
};

/// A conditioned GP. Immutable once built; predictions are reentrant.
class GpModel {
 public:
  /// Unconditioned prior.
  explicit GpModel(KernelHyper h);
  /// Conditions on rows of X. With `center`, the sample mean of y is used as
  /// the constant prior mean. Adds diagonal jitter up to 1e-6 sigma_f^2 when
  /// the Gram matrix is numerically indefinite; throws GpError beyond that.
  GpModel(KernelHyper h, const Eigen::MatrixXd& X, const Eigen::VectorXd& y, bool center = true);

  Prediction predict(const Eigen::VectorXd& q) const;

  const KernelHyper& hyper() const { return hyper_; }
  std::size_t size() const { return static_cast<std::size_t>(xt_.cols()); }
  double jitter() const { return jitter_; }
  double offset() const { return offset_; }

 private:
  KernelHyper hyper_;
  Eigen::VectorXd inv_ls_;
  Eigen::MatrixXd xt_;  // d x n, scaled by 1 / length scale
  Eigen::MatrixXd chol_;  // lower Cholesky factor of K + (sigma_n^2 + jitter) I
  Eigen::VectorXd alpha_;
  double offset_ = 0.0;
  double jitter_ = 0.0;
};

Prediction gp_posterior(const GpModel& model, const Eigen::VectorXd& query);

/// Log marginal likelihood of y (no centering) under zero-mean GP with hyper
/// h. When `grad` is given it receives d LML / d [log l_1..d, log sigma_f,
/// log sigma_n]. Returns -inf when the Gram matrix cannot be factored.
double log_marginal_likelihood(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                               const KernelHyper& h, Eigen::VectorXd* grad = nullptr);

/// Box for the fit, in log space, derived from the data.
struct HyperBounds {
  Eigen::VectorXd lower;  // [log l_1..d, log sigma_f, log sigma_n]
  Eigen::VectorXd upper;
};
HyperBounds hyper_bounds(const Eigen::MatrixXd& X, const Eigen::VectorXd& y);

struct FitOptions {
  int restarts = 4;
  std::uint64_t seed = 0;
  int max_iterations = 100;
  std::optional<KernelHyper> warm_start;
};

struct FitResult {
  KernelHyper hyper;
  double lml = 0.0;
  bool degenerate = false;  // y constant: default hyperparameters returned
};

/// Maximizes the log marginal likelihood of the centered y by multi-start
/// L-BFGS inside hyper_bounds. Deterministic for a given seed. With a warm
/// start and zero restarts only the warm start is refined.
FitResult fit_hyperparameters(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                              const FitOptions& opt = {});

}  // namespace til
