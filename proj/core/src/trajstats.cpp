#include "sgdthermo/trajstats.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "sgdthermo/io.hpp"

namespace sgdthermo {

using nlohmann::json;

std::pair<Vector, Matrix> empirical_moments(const Trajectory& traj, const Vector& theta_ref,
                                            long burn_in_records) {
  const Index K = traj.record_count();
  if (K - burn_in_records < 100)
    throw InsufficientDataError("empirical_moments: fewer than 100 post-burn-in records");
  const Index N = traj.records.rows();
  Vector sum = Vector::Zero(N);
  Matrix outer = Matrix::Zero(N, N);
  Vector d(N);
  for (Index k = burn_in_records; k < K; ++k) {
    d = traj.records.col(k) - theta_ref;
    sum += d;
    outer.noalias() += d * d.transpose();
  }
  const double inv = 1.0 / static_cast<double>(K - burn_in_records);
  return {sum * inv, outer * inv};
}

Matrix area_matrix(const Matrix& subtraj, const Vector& theta0) {
  if (subtraj.cols() < 2)
    throw std::invalid_argument("area_matrix: need at least 2 points");
  const Index N = subtraj.rows();
  Matrix A = Matrix::Zero(N, N);
  Vector d(N), step(N);
  for (Index k = 0; k + 1 < subtraj.cols(); ++k) {
    d = subtraj.col(k) - theta0;
    step = subtraj.col(k + 1) - subtraj.col(k);
    A.noalias() += 0.5 * (d * step.transpose() - step * d.transpose());
  }
  return A;
}

double entropy_production(const Matrix& subtraj, const StationaryTheory& theory) {
  if (subtraj.rows() != theory.theta0.size())
    throw std::invalid_argument("entropy_production: dimension mismatch");
  if (subtraj.cols() < 2)
    throw std::invalid_argument("entropy_production: need at least 2 points");
  // v^s(theta) . D0^{-1} dtheta = dtheta_k^T [Sigma^{-1} C D0^{-1}] (theta_{k+1}-theta_k)
  auto rates = circulation_and_rates(theory.H0, theory.Sigma, theory.D0, theory.eta);
  Eigen::LDLT<Matrix> sig(theory.Sigma);
  const Matrix kernel = sig.solve(theory.C * rates.D0_inv);
  double sigma = 0;
  Vector d(subtraj.rows()), step(subtraj.rows());
  for (Index k = 0; k + 1 < subtraj.cols(); ++k) {
    d = subtraj.col(k) - theory.theta0;
    step = subtraj.col(k + 1) - subtraj.col(k);
    sigma += d.dot(kernel * step);
  }
  return sigma;
}

namespace {

std::vector<DftPoint> dft_from_bins(const std::vector<long>& bins, double bin_width,
                                    long min_count) {
  // bins cover [-half*w, half*w) with 2*half equal bins, mirror-symmetric
  const long half = static_cast<long>(bins.size()) / 2;
  std::vector<DftPoint> curve;
  for (long i = 0; i < half; ++i) {
    const long pos = half + i;      // [i w, (i+1) w)
    const long neg = half - 1 - i;  // mirror
    if (bins[pos] >= min_count && bins[neg] >= min_count) {
      DftPoint p;
      p.sigma = (i + 0.5) * bin_width;
      p.count_pos = bins[pos];
      p.count_neg = bins[neg];
      p.log_ratio = std::log(static_cast<double>(bins[neg]) / bins[pos]);
      curve.push_back(p);
    }
  }
  return curve;
}

}  // namespace

std::map<int, EllStats> fluctuation_checks(const std::map<int, std::vector<double>>& samples,
                                           double bin_width, long min_bin_count) {
  if (bin_width <= 0) throw std::invalid_argument("fluctuation_checks: bin width <= 0");
  std::map<int, EllStats> out;
  for (const auto& [ell, sigmas] : samples) {
    EllStats s;
    s.ell = ell;
    s.n_windows = static_cast<long>(sigmas.size());
    if (sigmas.empty()) {
      out[ell] = s;
      continue;
    }
    long double se = 0, se2 = 0, ss = 0, ss2 = 0;
    double max_abs = 0;
    for (const double v : sigmas) max_abs = std::max(max_abs, std::abs(v));
    const long half = std::max<long>(1, static_cast<long>(std::ceil(max_abs / bin_width)));
    std::vector<long> bins(2 * half, 0);
    for (const double v : sigmas) {
      const long double e = std::exp(-static_cast<long double>(v));
      se += e;
      se2 += e * e;
      ss += v;
      ss2 += static_cast<long double>(v) * v;
      long idx = half + static_cast<long>(std::floor(v / bin_width));
      idx = std::clamp<long>(idx, 0, 2 * half - 1);
      ++bins[idx];
    }
    const long n = s.n_windows;
    s.ift = static_cast<double>(se / n);
    s.ift_se = n > 1 ? std::sqrt(std::max(0.0, static_cast<double>(se2 / n - (se / n) * (se / n))) /
                                 (n - 1))
                     : 0;
    s.mean_sigma = static_cast<double>(ss / n);
    s.var_sigma = static_cast<double>(ss2 / n) - s.mean_sigma * s.mean_sigma;
    s.dft_curve = dft_from_bins(bins, bin_width, min_bin_count);
    out[ell] = s;
  }
  return out;
}

std::pair<double, double> fdt_trace_check(const Trajectory& traj, const ModelSpec& model,
                                          const Dataset& data, const Vector& theta0,
                                          double eta, const Matrix& D0) {
  const Index K = traj.record_count();
  if (K < 100) throw InsufficientDataError("fdt_trace_check: fewer than 100 records");
  Vector grad(model.param_count);
  long double acc = 0;
  for (Index k = 0; k < K; ++k) {
    const Vector theta = traj.records.col(k);
    batch_loss_grad(model, data, theta, {}, grad);
    acc += grad.dot(theta - theta0);
  }
  const double lhs = static_cast<double>(acc / K);
  const double rhs = D0.trace() / eta;
  return {lhs, rhs};
}

// ---------------------------------------------------------------------

FluctuationAccumulator::FluctuationAccumulator(const StationaryTheory& theory,
                                               const FluctuationOptions& opts)
    : opts_(opts), theta0_(theory.theta0), N_(theory.theta0.size()) {
  auto rates = circulation_and_rates(theory.H0, theory.Sigma, theory.D0, theory.eta);
  Eigen::LDLT<Matrix> sig(theory.Sigma);
  kernel_ = sig.solve(theory.C * rates.D0_inv);

  sum_ = Vector::Zero(N_);
  sum_outer_ = Matrix::Zero(N_, N_);
  area_block_sum_ = Matrix::Zero(N_, N_);
  area_mean_ = Matrix::Zero(N_, N_);
  area_m2_ = Matrix::Zero(N_, N_);

  // one-step entropy scale fixes the DFT binning up front so histograms
  // from every run are mergeable
  const double rate = std::max(theory.entropy_rate, 1e-300);
  for (const int ell : opts_.ells) {
    EllAcc acc;
    acc.ell = ell;
    const double sd = std::sqrt(2.0 * ell * rate);
    const double range = opts_.dft_range_sigmas * sd + ell * rate;
    acc.bin_width = range / opts_.dft_half_bins;
    acc.bins.assign(2 * static_cast<std::size_t>(opts_.dft_half_bins), 0);
    ells_.push_back(std::move(acc));
  }
}

void FluctuationAccumulator::begin_run() {
  have_prev_ = false;
  for (auto& acc : ells_) {
    acc.pos_in_window = 0;
    acc.partial = 0;
  }
}

void FluctuationAccumulator::push_sigma(EllAcc& acc, double sigma) {
  ++acc.n_windows;
  const long double e = std::exp(-static_cast<long double>(sigma));
  acc.sum_exp += e;
  acc.sum_exp2 += e * e;
  acc.sum_sigma += sigma;
  acc.sum_sigma2 += static_cast<long double>(sigma) * sigma;
  const long half = opts_.dft_half_bins;
  const long idx = half + static_cast<long>(std::floor(sigma / acc.bin_width));
  if (idx < 0) ++acc.underflow;
  else if (idx >= 2 * half) ++acc.overflow;
  else ++acc.bins[static_cast<std::size_t>(idx)];
}

void FluctuationAccumulator::feed(const Matrix& records) {
  const Index K = records.cols();
  Vector d(N_), step(N_), kd(N_);
  for (Index k = 0; k < K; ++k) {
    d = records.col(k) - theta0_;
    ++n_samples_;
    sum_ += d;
    sum_outer_.noalias() += d * d.transpose();
    if (have_prev_) {
      step = d - prev_;  // theta_k - theta_{k-1}
      // oriented area of this step
      area_block_sum_.noalias() += 0.5 * (prev_ * step.transpose());
      area_block_sum_.noalias() -= 0.5 * (step * prev_.transpose());
      if (++area_block_fill_ == opts_.area_block) {
        const Matrix block_mean = area_block_sum_ / static_cast<double>(opts_.area_block);
        ++area_blocks_;
        const Matrix delta = block_mean - area_mean_;
        area_mean_ += delta / static_cast<double>(area_blocks_);
        area_m2_ += delta.cwiseProduct(block_mean - area_mean_);
        area_block_sum_.setZero();
        area_block_fill_ = 0;
      }
      // entropy production increment
      kd.noalias() = kernel_ * step;
      const double inc = prev_.dot(kd);
      for (auto& acc : ells_) {
        acc.partial += inc;
        if (++acc.pos_in_window == acc.ell) {
          push_sigma(acc, acc.partial);
          acc.partial = 0;
          acc.pos_in_window = 0;
        }
      }
    }
    prev_.swap(d);  // prev_ now holds dtheta of this record
    have_prev_ = true;
  }
}

void FluctuationAccumulator::merge(const FluctuationAccumulator& other) {
  n_samples_ += other.n_samples_;
  sum_ += other.sum_;
  sum_outer_ += other.sum_outer_;
  // merge Welford block statistics (completed blocks only)
  if (other.area_blocks_ > 0) {
    const long na = area_blocks_, nb = other.area_blocks_;
    const Matrix delta = other.area_mean_ - area_mean_;
    const long n = na + nb;
    area_mean_ += delta * (static_cast<double>(nb) / n);
    area_m2_ += other.area_m2_ +
                delta.cwiseProduct(delta) * (static_cast<double>(na) * nb / n);
    area_blocks_ = n;
  }
  for (std::size_t e = 0; e < ells_.size(); ++e) {
    auto& a = ells_[e];
    const auto& b = other.ells_[e];
    a.n_windows += b.n_windows;
    a.sum_exp += b.sum_exp;
    a.sum_exp2 += b.sum_exp2;
    a.sum_sigma += b.sum_sigma;
    a.sum_sigma2 += b.sum_sigma2;
    a.underflow += b.underflow;
    a.overflow += b.overflow;
    for (std::size_t i = 0; i < a.bins.size(); ++i) a.bins[i] += b.bins[i];
  }
}

FluctuationReport FluctuationAccumulator::finalize() const {
  FluctuationReport rep;
  rep.n_samples = n_samples_;
  if (n_samples_ < 100)
    throw InsufficientDataError("fluctuation accumulator: fewer than 100 samples");
  rep.mu_emp = sum_ / static_cast<double>(n_samples_);
  rep.sigma_emp = sum_outer_ / static_cast<double>(n_samples_);
  rep.sigma_emp = 0.5 * (rep.sigma_emp + rep.sigma_emp.transpose()).eval();
  rep.area_rate_emp = area_mean_;
  rep.area_rate_emp = 0.5 * (rep.area_rate_emp - rep.area_rate_emp.transpose()).eval();
  rep.n_area_blocks = area_blocks_;
  if (area_blocks_ > 1) {
    rep.area_rate_se = (area_m2_ / static_cast<double>(area_blocks_ - 1) /
                        static_cast<double>(area_blocks_))
                           .cwiseSqrt();
  } else {
    rep.area_rate_se = Matrix::Zero(N_, N_);
  }
  for (const auto& acc : ells_) {
    EllStats s;
    s.ell = acc.ell;
    s.n_windows = acc.n_windows;
    if (acc.n_windows > 0) {
      const long n = acc.n_windows;
      s.ift = static_cast<double>(acc.sum_exp / n);
      s.ift_se =
          n > 1 ? std::sqrt(std::max(0.0, static_cast<double>(acc.sum_exp2 / n) - s.ift * s.ift) /
                            (n - 1))
                : 0;
      s.mean_sigma = static_cast<double>(acc.sum_sigma / n);
      s.var_sigma = static_cast<double>(acc.sum_sigma2 / n) - s.mean_sigma * s.mean_sigma;
      s.dft_curve = dft_from_bins(acc.bins, acc.bin_width, opts_.min_bin_count);
    }
    rep.per_ell.push_back(std::move(s));
  }
  return rep;
}

// ---------------------------------------------------------------------

std::string FluctuationReport::to_json() const {
  json j;
  j["n_samples"] = n_samples;
  j["n_area_blocks"] = n_area_blocks;
  j["mu_emp"] = std::vector<double>(mu_emp.data(), mu_emp.data() + mu_emp.size());
  auto mat = [](const Matrix& m) {
    json rows = json::array();
    for (Index r = 0; r < m.rows(); ++r) {
      json row = json::array();
      for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
      rows.push_back(std::move(row));
    }
    return rows;
  };
  j["sigma_emp"] = mat(sigma_emp);
  j["area_rate_emp"] = mat(area_rate_emp);
  j["area_rate_se"] = mat(area_rate_se);
  json ells = json::array();
  for (const auto& s : per_ell) {
    json e;
    e["ell"] = s.ell;
    e["n_windows"] = s.n_windows;
    e["ift"] = s.ift;
    e["ift_se"] = s.ift_se;
    e["mean_sigma"] = s.mean_sigma;
    e["var_sigma"] = s.var_sigma;
    json pts = json::array();
    for (const auto& p : s.dft_curve)
      pts.push_back({{"sigma", p.sigma},
                     {"log_ratio", p.log_ratio},
                     {"count_pos", p.count_pos},
                     {"count_neg", p.count_neg}});
    e["dft_curve"] = std::move(pts);
    ells.push_back(std::move(e));
  }
  j["per_ell"] = std::move(ells);
  if (has_fdt) {
    j["fdt"] = {{"lhs", fdt_lhs}, {"rhs", fdt_rhs}};
  }
  return j.dump(1);
}

FluctuationReport FluctuationReport::from_json(const std::string& text) {
  const json j = json::parse(text);
  FluctuationReport r;
  r.n_samples = j.at("n_samples").get<long>();
  r.n_area_blocks = j.value("n_area_blocks", 0L);
  const auto mu = j.at("mu_emp").get<std::vector<double>>();
  r.mu_emp = Eigen::Map<const Vector>(mu.data(), static_cast<Index>(mu.size()));
  auto mat = [](const json& jm) {
    const Index rows = static_cast<Index>(jm.size());
    const Index cols = rows ? static_cast<Index>(jm.at(0).size()) : 0;
    Matrix m(rows, cols);
    for (Index a = 0; a < rows; ++a)
      for (Index b = 0; b < cols; ++b) m(a, b) = jm.at(a).at(b).get<double>();
    return m;
  };
  r.sigma_emp = mat(j.at("sigma_emp"));
  r.area_rate_emp = mat(j.at("area_rate_emp"));
  r.area_rate_se = mat(j.at("area_rate_se"));
  for (const auto& je : j.at("per_ell")) {
    EllStats s;
    s.ell = je.at("ell").get<int>();
    s.n_windows = je.at("n_windows").get<long>();
    s.ift = je.at("ift").get<double>();
    s.ift_se = je.at("ift_se").get<double>();
    s.mean_sigma = je.at("mean_sigma").get<double>();
    s.var_sigma = je.at("var_sigma").get<double>();
    for (const auto& jp : je.at("dft_curve")) {
      DftPoint p;
      p.sigma = jp.at("sigma").get<double>();
      p.log_ratio = jp.at("log_ratio").get<double>();
      p.count_pos = jp.at("count_pos").get<long>();
      p.count_neg = jp.at("count_neg").get<long>();
      s.dft_curve.push_back(p);
    }
    r.per_ell.push_back(std::move(s));
  }
  if (j.contains("fdt")) {
    r.fdt_lhs = j.at("fdt").at("lhs").get<double>();
    r.fdt_rhs = j.at("fdt").at("rhs").get<double>();
    r.has_fdt = true;
  }
  return r;
}

void FluctuationReport::save_json(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << to_json() << "\n";
}

void FluctuationReport::save_csv(const std::string& directory) const {
  namespace fs = std::filesystem;
  fs::create_directories(directory);
  {
    std::vector<std::vector<double>> rows;
    for (const auto& s : per_ell)
      rows.push_back({static_cast<double>(s.ell), s.ift, s.ift_se, s.mean_sigma,
                      s.var_sigma, static_cast<double>(s.n_windows)});
    save_table_csv((fs::path(directory) / "ift_vs_ell.csv").string(),
                   {"ell", "ift", "ift_se", "mean_sigma", "var_sigma", "n_windows"}, rows);
  }
  for (const auto& s : per_ell) {
    std::vector<std::vector<double>> rows;
    for (const auto& p : s.dft_curve)
      rows.push_back({p.sigma, p.log_ratio, static_cast<double>(p.count_pos),
                      static_cast<double>(p.count_neg)});
    save_table_csv((fs::path(directory) / ("dft_curve_l" + std::to_string(s.ell) + ".csv")).string(),
                   {"sigma", "log_ratio", "count_pos", "count_neg"}, rows);
  }
}

}  // namespace sgdthermo
