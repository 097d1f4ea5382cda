#pragma once

#include <map>
#include <string>
#include <vector>

#include "sgdthermo/engines.hpp"
#include "sgdthermo/stationary.hpp"
#include "sgdthermo/types.hpp"

namespace sgdthermo {

class InsufficientDataError : public std::runtime_error {
public:
  explicit InsufficientDataError(const std::string& what) : std::runtime_error(what) {}
};

// mean of dtheta = theta - theta_ref and second-moment matrix <dtheta dtheta^T>
// over post-burn-in records.
std::pair<Vector, Matrix> empirical_moments(const Trajectory& traj, const Vector& theta_ref,
                                            long burn_in_records);

// Discrete oriented-area matrix of a subtrajectory (N x K, K >= 2 columns).
Matrix area_matrix(const Matrix& subtraj, const Vector& theta0);

// Discrete entropy production of a subtrajectory under the given theory.
double entropy_production(const Matrix& subtraj, const StationaryTheory& theory);

struct DftPoint {
  double sigma;       // bin center (> 0)
  double log_ratio;   // ln P(-sigma) / P(sigma)
  long count_pos = 0;
  long count_neg = 0;
};

struct EllStats {
  int ell = 0;
  long n_windows = 0;
  double ift = 0;          // <exp(-sigma)>
  double ift_se = 0;       // standard error of the IFT estimator
  double mean_sigma = 0;
  double var_sigma = 0;
  std::vector<DftPoint> dft_curve;
};

struct FluctuationReport {
  Vector mu_emp;
  Matrix sigma_emp;       // second moment about theta_ref
  Matrix area_rate_emp;   // antisymmetric, mean oriented area per step
  Matrix area_rate_se;    // per-element standard error (block means)
  long n_samples = 0;
  long n_area_blocks = 0;
  std::vector<EllStats> per_ell;
  double fdt_lhs = 0, fdt_rhs = 0;
  bool has_fdt = false;

  std::string to_json() const;
  static FluctuationReport from_json(const std::string& text);
  void save_json(const std::string& path) const;
  void save_csv(const std::string& directory) const;  // histograms + curves
};

// In-memory variant of the IFT/DFT statistics for given sigma samples.
std::map<int, EllStats> fluctuation_checks(const std::map<int, std::vector<double>>& samples,
                                           double bin_width, long min_bin_count = 100);

// First fluctuation-dissipation trace check: lhs = tr <grad Loss * dtheta^T>,
// rhs = eta^{-1} tr D0.
std::pair<double, double> fdt_trace_check(const Trajectory& traj, const ModelSpec& model,
                                          const Dataset& data, const Vector& theta0,
                                          double eta, const Matrix& D0);

// ---------------------------------------------------------------------
// Streaming accumulator for large ensembles: feed consecutive records
// chunk by chunk, one run at a time; merge across runs; finalize into a
// FluctuationReport. All estimators are deterministic for a fixed feed
// and merge order.
// ---------------------------------------------------------------------
struct FluctuationOptions {
  std::vector<int> ells = {1, 2, 3};
  int dft_half_bins = 40;        // bins per sign
  double dft_range_sigmas = 8.0; // half-range in units of predicted sd(sigma)
  long min_bin_count = 100;
  long area_block = 65536;       // steps per block for area SE estimation
};

class FluctuationAccumulator {
public:
  FluctuationAccumulator(const StationaryTheory& theory, const FluctuationOptions& opts);

  void begin_run();                    // resets window partials
  void feed(const Matrix& records);    // N x K chunk of consecutive records
  void merge(const FluctuationAccumulator& other);
  FluctuationReport finalize() const;

  const FluctuationOptions& options() const { return opts_; }

private:
  struct EllAcc {
    int ell;
    long pos_in_window = 0;
    double partial = 0;
    long n_windows = 0;
    long double sum_exp = 0, sum_exp2 = 0, sum_sigma = 0, sum_sigma2 = 0;
    double bin_width = 0;
    std::vector<long> bins;  // 2*half_bins, symmetric about 0
    long underflow = 0, overflow = 0;
  };

  void push_sigma(EllAcc& acc, double sigma);

  FluctuationOptions opts_;
  Vector theta0_;
  Matrix kernel_;  // Sigma^{-1} C D0^{-1}
  Index N_;

  long n_samples_ = 0;
  Vector sum_;
  Matrix sum_outer_;

  Matrix area_block_sum_;
  long area_block_fill_ = 0;
  Matrix area_mean_, area_m2_;  // Welford over completed blocks
  long area_blocks_ = 0;

  std::vector<EllAcc> ells_;

  bool have_prev_ = false;
  Vector prev_;  // dtheta of the previous record within the current run
};

}  // namespace sgdthermo
