#pragma once

#include <functional>
#include <string>

#include "sgdthermo/models.hpp"
#include "sgdthermo/types.hpp"

namespace sgdthermo {

// Thrown by the Lyapunov solver when H0 is not positive definite.
class NotAMinimumError : public std::runtime_error {
public:
  explicit NotAMinimumError(const std::string& what) : std::runtime_error(what) {}
};

// Thrown when the varying-diffusion fixed point does not contract.
class CorrectionError : public std::runtime_error {
public:
  explicit CorrectionError(const std::string& what) : std::runtime_error(what) {}
};

class ConvergenceError : public std::runtime_error {
public:
  explicit ConvergenceError(const std::string& what) : std::runtime_error(what) {}
};

// Which landscape to minimize: the loss, the WOR effective landscape
// n*Loss + deltaLoss (needs eta and m), or the scaled n*Loss.
enum class LandscapeKind { Plain, WorEffective, Scaled };

struct LandscapeSpec {
  LandscapeKind kind = LandscapeKind::Plain;
  double eta = 0;  // WorEffective only
  int m = 0;       // WorEffective / Scaled
};

struct MinimizeOptions {
  int max_iterations = 200;
  double grad_tolerance = 1e-10;  // on |grad|_inf / max(1, |loss|)
};

Vector find_minimum(const ModelSpec& model, const Dataset& data, const Vector& theta_init,
                    const LandscapeSpec& landscape = {}, const MinimizeOptions& opts = {});

// Solves H0 Sigma + Sigma H0 = 2 eta^{-1} D0 by symmetric eigendecomposition
// of H0. Requires H0 positive definite, D0 symmetric PSD.
Matrix solve_lyapunov(const Matrix& H0, const Matrix& D0, double eta);

// Solves  s (H0 Sigma + Sigma H0) = eta^{-1} (2 D(theta0) + Hess_D(theta0) Sigma)
// by fixed-point iteration on the plain solver; Hess_D is obtained by central
// second differences of each D component (exact up to rounding for D at most
// quadratic in theta). drift_scale s = 1 for the per-step picture, n for the
// epoch picture.
Matrix solve_lyapunov_corrected(const Matrix& H0,
                                const std::function<Matrix(const Vector&)>& D_fn,
                                const Vector& theta0, double eta, double drift_scale,
                                double fd_step_scale = 1e-4);

struct CirculationRates {
  Matrix C;                     // circulation matrix, antisymmetric
  double entropy_rate = 0;      // -tr(C D0^{-1} C Sigma^{-1}) per step
  Matrix area_rate;             // mean oriented area per step (= C)
  bool d0_pseudo_inverted = false;
  Matrix D0_inv;                // (pseudo-)inverse actually used
};

CirculationRates circulation_and_rates(const Matrix& H0, const Matrix& Sigma,
                                       const Matrix& D0, double eta);

struct PosteriorSpec {
  Vector theta0;   // posterior mode
  Matrix sigma_po; // posterior covariance
};

// Exact Bayesian posterior of the linearized model and the KL divergence
// (in bits) of N(mean_offset + theta0, sigma_candidate) from it. Evaluated
// through eigenvalues of Sigma_po^{-1/2} dSigma Sigma_po^{-1/2} so that
// nearly identical covariances do not lose the result to cancellation.
std::pair<PosteriorSpec, double> exact_posterior_and_kl(
    const Matrix& Psi, const Vector& y, double eps, double lambda,
    const Matrix& sigma_candidate, const Vector* mean_offset = nullptr);

// KL divergence in bits between N(mu, sigma) and N(mu_ref, sigma_ref).
double gaussian_kl_bits(const Matrix& sigma, const Matrix& sigma_ref,
                        const Vector* mean_diff = nullptr);

// Bundle of theoretical stationary-state quantities near a loss minimum.
struct StationaryTheory {
  Vector theta0;
  Matrix H0;
  Matrix D0;
  Matrix Sigma;
  Matrix C;
  double eta = 0;
  double entropy_rate = 0;
  std::string mode;  // which dynamics this theory describes

  std::string to_json() const;
  static StationaryTheory from_json(const std::string& text);
  void save(const std::string& path) const;
  static StationaryTheory load(const std::string& path);
};

}  // namespace sgdthermo
