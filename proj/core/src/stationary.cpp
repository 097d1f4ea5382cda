#include "sgdthermo/stationary.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "sgdthermo/diffusion.hpp"

namespace sgdthermo {

namespace {

using nlohmann::json;

struct LandscapeEval {
  double value;
  Vector grad;
};

LandscapeEval eval_landscape(const ModelSpec& model, const Dataset& data,
                             const Vector& theta, const LandscapeSpec& spec) {
  LandscapeEval e;
  Vector grad(model.param_count);
  const double loss = batch_loss_grad(model, data, theta, {}, grad);
  switch (spec.kind) {
    case LandscapeKind::Plain:
      e.value = loss;
      e.grad = std::move(grad);
      break;
    case LandscapeKind::Scaled: {
      if (spec.m <= 0) throw std::invalid_argument("scaled landscape needs m");
      const double n = static_cast<double>(data.sample_count()) / spec.m;
      e.value = n * loss;
      e.grad = n * grad;
      break;
    }
    case LandscapeKind::WorEffective: {
      if (spec.m <= 0 || spec.eta <= 0)
        throw std::invalid_argument("WOR landscape needs eta and m");
      const int M = static_cast<int>(data.sample_count());
      const double n = static_cast<double>(M) / spec.m;
      const DeltaLoss dl =
          effective_loss_perturbation(model, data, theta, spec.eta, spec.m, M, true);
      e.value = n * loss + dl.value;
      e.grad = n * grad + dl.gradient;
      break;
    }
  }
  return e;
}

double landscape_drift_scale(const Dataset& data, const LandscapeSpec& spec) {
  if (spec.kind == LandscapeKind::Plain) return 1.0;
  return static_cast<double>(data.sample_count()) / spec.m;
}

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const json& j) {
  const Index rows = static_cast<Index>(j.size());
  const Index cols = rows ? static_cast<Index>(j.at(0).size()) : 0;
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = j.at(r).at(c).get<double>();
  return m;
}

}  // namespace

Vector find_minimum(const ModelSpec& model, const Dataset& data, const Vector& theta_init,
                    const LandscapeSpec& landscape, const MinimizeOptions& opts) {
  model.check_dataset(data);
  if (theta_init.size() != model.param_count)
    throw std::invalid_argument("theta_init size mismatch");

  Vector theta = theta_init;
  const double scale = landscape_drift_scale(data, landscape);
  double damping = 0.0;

  for (int iter = 0; iter < opts.max_iterations; ++iter) {
    LandscapeEval e = eval_landscape(model, data, theta, landscape);
    const double gnorm = e.grad.lpNorm<Eigen::Infinity>();
    if (gnorm <= opts.grad_tolerance * std::max(1.0, std::abs(e.value))) return theta;

    // Hessian of the landscape; the O(eta) deltaLoss curvature is dropped
    // for the WOR landscape (Newton model only; the gradient stays exact).
    Matrix H = scale * second_order(model, data, theta).H;
    Eigen::SelfAdjointEigenSolver<Matrix> es(H);
    const double hmax = es.eigenvalues().cwiseAbs().maxCoeff();
    const double hmin = es.eigenvalues().minCoeff();
    if (hmin <= 1e-12 * hmax) damping = std::max(damping, 1e-6 * hmax - hmin);

    Vector step;
    for (;;) {
      Matrix Hd = H + damping * Matrix::Identity(H.rows(), H.cols());
      step = -Hd.ldlt().solve(e.grad);
      if (step.dot(e.grad) < 0) break;  // descent direction
      damping = (damping == 0 ? 1e-6 * hmax : 10 * damping);
      if (damping > 1e12 * std::max(hmax, 1.0))
        throw ConvergenceError("find_minimum: cannot produce a descent direction");
    }

    // Armijo backtracking
    double t = 1.0;
    const double slope = step.dot(e.grad);
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      const Vector cand = theta + t * step;
      const LandscapeEval ec = eval_landscape(model, data, cand, landscape);
      if (ec.value <= e.value + 1e-4 * t * slope) {
        theta = cand;
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) throw ConvergenceError("find_minimum: line search failed");
    damping *= 0.25;
  }
  throw ConvergenceError("find_minimum: no convergence within max iterations");
}

Matrix solve_lyapunov(const Matrix& H0, const Matrix& D0, double eta) {
  if (H0.rows() != H0.cols() || D0.rows() != D0.cols() || H0.rows() != D0.rows())
    throw std::invalid_argument("solve_lyapunov: dimension mismatch");
  if (eta <= 0) throw std::invalid_argument("solve_lyapunov: eta must be > 0");
  const Matrix Hs = 0.5 * (H0 + H0.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> es(Hs);
  const Vector& h = es.eigenvalues();
  if (h.minCoeff() <= 0)
    throw NotAMinimumError("solve_lyapunov: H0 is not positive definite");
  const Matrix& O = es.eigenvectors();
  const Matrix Dt = O.transpose() * (0.5 * (D0 + D0.transpose())) * O;
  Matrix Delta(h.size(), h.size());
  for (Index a = 0; a < h.size(); ++a)
    for (Index b = 0; b < h.size(); ++b)
      Delta(a, b) = 2.0 / eta * Dt(a, b) / (h[a] + h[b]);
  Matrix Sigma = O * Delta * O.transpose();
  return 0.5 * (Sigma + Sigma.transpose()).eval();
}

Matrix solve_lyapunov_corrected(const Matrix& H0,
                                const std::function<Matrix(const Vector&)>& D_fn,
                                const Vector& theta0, double eta, double drift_scale,
                                double fd_step_scale) {
  const Index N = H0.rows();
  const Matrix D_center = D_fn(theta0);

  // Hess_D[mu][gamma] = dd D / dtheta_mu dtheta_gamma at theta0, central stencils
  std::vector<std::vector<Matrix>> hess(N, std::vector<Matrix>(N));
  Vector step(N);
  for (Index a = 0; a < N; ++a)
    step[a] = fd_step_scale * std::max(1.0, std::abs(theta0[a]));
  Vector th = theta0;
  for (Index mu = 0; mu < N; ++mu) {
    th[mu] = theta0[mu] + step[mu];
    const Matrix Dp = D_fn(th);
    th[mu] = theta0[mu] - step[mu];
    const Matrix Dm = D_fn(th);
    th[mu] = theta0[mu];
    hess[mu][mu] = (Dp + Dm - 2.0 * D_center) / (step[mu] * step[mu]);
  }
  for (Index mu = 0; mu < N; ++mu)
    for (Index ga = mu + 1; ga < N; ++ga) {
      th[mu] += step[mu]; th[ga] += step[ga];
      const Matrix Dpp = D_fn(th);
      th[ga] -= 2 * step[ga];
      const Matrix Dpm = D_fn(th);
      th[mu] -= 2 * step[mu];
      const Matrix Dmm = D_fn(th);
      th[ga] += 2 * step[ga];
      const Matrix Dmp = D_fn(th);
      th[mu] = theta0[mu]; th[ga] = theta0[ga];
      hess[mu][ga] = (Dpp - Dpm - Dmp + Dmm) / (4.0 * step[mu] * step[ga]);
      hess[ga][mu] = hess[mu][ga];
    }

  auto contract = [&](const Matrix& Sigma) {
    Matrix out = Matrix::Zero(N, N);
    for (Index mu = 0; mu < N; ++mu)
      for (Index ga = 0; ga < N; ++ga) out += hess[mu][ga] * Sigma(mu, ga);
    return out;
  };

  const Matrix Hdrift = drift_scale * H0;
  Matrix Sigma = solve_lyapunov(Hdrift, D_center, eta);
  const double base_norm = Sigma.norm();
  for (int iter = 0; iter < 200; ++iter) {
    const Matrix D_eff = D_center + 0.5 * contract(Sigma);
    Matrix next = solve_lyapunov(Hdrift, D_eff, eta);
    const double delta = (next - Sigma).norm();
    const double ref = std::max(next.norm(), 1e-300);
    Sigma = std::move(next);
    if (delta <= 1e-10 * ref) return Sigma;
    if (!Sigma.allFinite() || Sigma.norm() > 1e6 * std::max(base_norm, 1e-300))
      throw CorrectionError("solve_lyapunov_corrected: correction too large for this eta");
  }
  throw CorrectionError("solve_lyapunov_corrected: fixed point did not converge");
}

namespace {

// symmetric (pseudo-)inverse with relative eigenvalue cutoff
std::pair<Matrix, bool> sym_pseudo_inverse(const Matrix& A, double rel_cutoff) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (A + A.transpose()));
  const Vector& w = es.eigenvalues();
  const double cutoff = rel_cutoff * w.cwiseAbs().maxCoeff();
  Vector winv(w.size());
  bool dropped = false;
  for (Index k = 0; k < w.size(); ++k) {
    if (w[k] <= cutoff) {
      winv[k] = 0;
      dropped = true;
    } else {
      winv[k] = 1.0 / w[k];
    }
  }
  Matrix inv = es.eigenvectors() * winv.asDiagonal() * es.eigenvectors().transpose();
  return {inv, dropped};
}

}  // namespace

CirculationRates circulation_and_rates(const Matrix& H0, const Matrix& Sigma,
                                       const Matrix& D0, double eta) {
  CirculationRates out;
  out.C = 0.5 * eta * (H0 * Sigma - Sigma * H0);
  out.C = 0.5 * (out.C - out.C.transpose()).eval();  // antisymmetric exactly
  out.area_rate = out.C;
  auto [Dinv, dropped] = sym_pseudo_inverse(D0, 1e-12);
  out.D0_inv = Dinv;
  out.d0_pseudo_inverted = dropped;
  auto [Sinv, s_dropped] = sym_pseudo_inverse(Sigma, 1e-14);
  (void)s_dropped;
  out.entropy_rate = -(out.C * Dinv * out.C * Sinv).trace();
  return out;
}

double gaussian_kl_bits(const Matrix& sigma, const Matrix& sigma_ref,
                        const Vector* mean_diff) {
  // KL(N(mu,S) || N(mu_ref,S_ref)) in bits, via eigenvalues of
  // S_ref^{-1/2} (S - S_ref) S_ref^{-1/2}: sum of e - log1p(e) terms.
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (sigma_ref + sigma_ref.transpose()));
  if (es.eigenvalues().minCoeff() <= 0)
    throw std::invalid_argument("gaussian_kl_bits: reference covariance not SPD");
  const Matrix isqrt = es.operatorInverseSqrt();
  const Matrix E = isqrt * (0.5 * (sigma + sigma.transpose()) - sigma_ref) * isqrt;
  Eigen::SelfAdjointEigenSolver<Matrix> ee(E);
  long double acc = 0.0L;
  for (Index k = 0; k < ee.eigenvalues().size(); ++k) {
    const double e = ee.eigenvalues()[k];
    if (e <= -1.0)
      throw std::invalid_argument("gaussian_kl_bits: candidate covariance not SPD");
    if (std::abs(e) < 1e-4) {
      // e - log1p(e) = e^2/2 - e^3/3 + e^4/4 - ...
      acc += static_cast<long double>(e) * e *
             (0.5L - static_cast<long double>(e) / 3.0L +
              static_cast<long double>(e) * e / 4.0L -
              static_cast<long double>(e) * e * e / 5.0L);
    } else {
      acc += static_cast<long double>(e) - std::log1p(static_cast<long double>(e));
    }
  }
  if (mean_diff) {
    const Vector w = isqrt * (*mean_diff);
    acc += static_cast<long double>(w.squaredNorm());
  }
  return static_cast<double>(acc / (2.0L * std::log(2.0L)));
}

std::pair<PosteriorSpec, double> exact_posterior_and_kl(
    const Matrix& Psi, const Vector& y, double eps, double lambda,
    const Matrix& sigma_candidate, const Vector* mean_offset) {
  if (Psi.cols() != y.size())
    throw std::invalid_argument("exact_posterior_and_kl: Psi/y size mismatch");
  const Index N = Psi.rows();
  const double inv_eps2 = 1.0 / (eps * eps);
  const Matrix H0 = inv_eps2 * (Psi * Psi.transpose()) +
                    2.0 * lambda * Matrix::Identity(N, N);
  Eigen::LDLT<Matrix> ldlt(H0);
  PosteriorSpec post;
  post.sigma_po = ldlt.solve(Matrix::Identity(N, N));
  post.sigma_po = 0.5 * (post.sigma_po + post.sigma_po.transpose()).eval();
  post.theta0 = inv_eps2 * (post.sigma_po * (Psi * y));
  if (sigma_candidate.rows() != N || sigma_candidate.cols() != N)
    throw std::invalid_argument("exact_posterior_and_kl: candidate size mismatch");
  const double kl = gaussian_kl_bits(sigma_candidate, post.sigma_po, mean_offset);
  return {std::move(post), kl};
}

std::string StationaryTheory::to_json() const {
  json j;
  j["mode"] = mode;
  j["eta"] = eta;
  j["entropy_rate"] = entropy_rate;
  j["theta0"] = std::vector<double>(theta0.data(), theta0.data() + theta0.size());
  j["H0"] = matrix_to_json(H0);
  j["D0"] = matrix_to_json(D0);
  j["Sigma"] = matrix_to_json(Sigma);
  j["C"] = matrix_to_json(C);
  return j.dump(1);
}

StationaryTheory StationaryTheory::from_json(const std::string& text) {
  const json j = json::parse(text);
  StationaryTheory t;
  t.mode = j.at("mode").get<std::string>();
  t.eta = j.at("eta").get<double>();
  t.entropy_rate = j.value("entropy_rate", 0.0);
  const auto th = j.at("theta0").get<std::vector<double>>();
  t.theta0 = Eigen::Map<const Vector>(th.data(), static_cast<Index>(th.size()));
  t.H0 = matrix_from_json(j.at("H0"));
  t.D0 = matrix_from_json(j.at("D0"));
  t.Sigma = matrix_from_json(j.at("Sigma"));
  t.C = matrix_from_json(j.at("C"));
  return t;
}

void StationaryTheory::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << to_json() << "\n";
}

StationaryTheory StationaryTheory::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json(text);
}

}  // namespace sgdthermo
