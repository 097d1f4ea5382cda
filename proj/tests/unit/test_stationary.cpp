#include <doctest.h>

#include "sgdthermo/diffusion.hpp"
#include "sgdthermo/experiment.hpp"
#include "sgdthermo/rng.hpp"
#include "sgdthermo/stationary.hpp"

using namespace sgdthermo;

TEST_CASE("find_minimum: linearized model lands on the exact posterior mode") {
  const Dataset d = gen_regression_dataset(200, 0.1, 1);
  const ModelSpec model = ModelSpec::linearized_regression(0.1, 10.0);
  const Vector theta0 = find_minimum(model, d, Vector::Zero(3));

  Matrix Psi(3, 200);
  for (int i = 0; i < 200; ++i) {
    double psi[3];
    linearized_basis(d.inputs(0, i), psi);
    for (int a = 0; a < 3; ++a) Psi(a, i) = psi[a];
  }
  const Vector y = d.outputs.row(0).transpose();
  auto [post, kl] = exact_posterior_and_kl(Psi, y, 0.1, 10.0,
                                           Matrix::Identity(3, 3).eval());
  (void)kl;
  CHECK((theta0 - post.theta0).norm() <= 1e-9 * post.theta0.norm());

  // positive scaling does not move the minimizer
  const Vector theta_scaled =
      find_minimum(model, d, Vector::Zero(3), {LandscapeKind::Scaled, 0, 10});
  CHECK((theta_scaled - theta0).norm() <= 1e-8 * theta0.norm());
}

TEST_CASE("find_minimum: WOR effective landscape shifts the minimum by O(eta)") {
  const Dataset d = gen_regression_dataset(200, 0.1, 1);
  const ModelSpec model = ModelSpec::nonlinear_regression(0.1, 10.0);
  InitConfig init;
  const Vector theta0 = stage1_minimum(model, d, init);

  const double eta1 = 1e-7, eta2 = 2e-7;
  const Vector hat1 = find_minimum(model, d, theta0, {LandscapeKind::WorEffective, eta1, 10});
  const Vector hat2 = find_minimum(model, d, theta0, {LandscapeKind::WorEffective, eta2, 10});
  const double shift1 = (hat1 - theta0).norm();
  const double shift2 = (hat2 - theta0).norm();
  CHECK(shift1 > 0);
  // shift scales linearly with eta
  CHECK(shift2 / shift1 == doctest::Approx(2.0).epsilon(0.05));
}

TEST_CASE("solve_lyapunov: scalar, 2-D instance, random SPD residuals") {
  Matrix H(1, 1), D(1, 1);
  H << 2.0;
  D << 4.0;
  CHECK(solve_lyapunov(H, D, 1.0)(0, 0) == doctest::Approx(2.0).epsilon(1e-14));

  Matrix H2(2, 2), D2(2, 2);
  H2 << 1, 0, 0, 2;
  D2 << 1, 0.5, 0.5, 1;
  const Matrix S2 = solve_lyapunov(H2, D2, 1.0);
  CHECK(S2(0, 0) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(S2(0, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
  CHECK(S2(1, 1) == doctest::Approx(0.5).epsilon(1e-14));

  Rng rng(2024);
  for (int trial = 0; trial < 25; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(30));
    Matrix A(n, n), B(n, n);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c) {
        A(r, c) = rng.normal();
        B(r, c) = rng.normal();
      }
    const Matrix H0 = A * A.transpose() + 0.1 * Matrix::Identity(n, n);
    const Matrix D0 = B * B.transpose();
    const double eta = 0.3;
    const Matrix S = solve_lyapunov(H0, D0, eta);
    const double resid = (H0 * S + S * H0 - 2.0 / eta * D0).norm() / (2.0 / eta * D0).norm();
    CHECK(resid <= 1e-10);
    // scaling invariance: (c D, c eta) leaves Sigma unchanged
    const Matrix S2b = solve_lyapunov(H0, 3.0 * D0, 3.0 * eta);
    CHECK((S2b - S).norm() <= 1e-12 * S.norm());
    // trace identity tr(eta H Sigma) = tr(D)
    CHECK((eta * (H0 * S).trace()) == doctest::Approx(D0.trace()).epsilon(1e-10));
  }

  Matrix Hneg(2, 2);
  Hneg << 1, 0, 0, -1;
  CHECK_THROWS_AS(solve_lyapunov(Hneg, D2, 1.0), NotAMinimumError);
}

TEST_CASE("solve_lyapunov_corrected: constant D reduces to the plain solve") {
  Matrix H(3, 3), D(3, 3);
  H << 4, 1, 0, 1, 3, 0.5, 0, 0.5, 2;
  D << 2, 0.3, 0, 0.3, 1, 0.2, 0, 0.2, 0.5;
  const Vector theta0 = Vector::Zero(3);
  auto D_fn = [&](const Vector&) { return D; };
  const Matrix plain = solve_lyapunov(H, D, 0.01);
  const Matrix corrected = solve_lyapunov_corrected(H, D_fn, theta0, 0.01, 1.0);
  CHECK((corrected - plain).norm() <= 1e-12 * plain.norm());

  // drift scale s: s(H Sigma + Sigma H) = 2 eta^{-1} D  =>  Sigma scales by 1/s
  const Matrix scaled = solve_lyapunov_corrected(H, D_fn, theta0, 0.01, 5.0);
  CHECK((5.0 * scaled - plain).norm() <= 1e-12 * plain.norm());
}

TEST_CASE("circulation_and_rates: equilibrium and hand-computed NESS") {
  Matrix H2(2, 2), D2(2, 2);
  H2 << 1, 0, 0, 2;
  D2 << 1, 0.5, 0.5, 1;
  const Matrix S2 = solve_lyapunov(H2, D2, 1.0);
  const CirculationRates r = circulation_and_rates(H2, S2, D2, 1.0);
  CHECK(r.C(0, 1) == doctest::Approx(-1.0 / 6.0).epsilon(1e-12));
  CHECK(r.C(1, 0) == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
  CHECK(r.C(0, 0) == 0.0);
  CHECK((r.C + r.C.transpose()).norm() == 0.0);
  CHECK(r.entropy_rate > 0);

  // Einstein case: D proportional to H gives zero circulation, zero entropy
  const Matrix De = 0.7 * H2;
  const Matrix Se = solve_lyapunov(H2, De, 1.0);
  const CirculationRates re = circulation_and_rates(H2, Se, De, 1.0);
  CHECK(re.C.cwiseAbs().maxCoeff() <= 1e-14);
  CHECK(std::abs(re.entropy_rate) <= 1e-14);
}

TEST_CASE("entropy rate is non-negative on random NESS instances") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(5));
    Matrix A(n, n), B(n, n);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c) {
        A(r, c) = rng.normal();
        B(r, c) = rng.normal();
      }
    const Matrix H0 = A * A.transpose() + 0.5 * Matrix::Identity(n, n);
    const Matrix D0 = B * B.transpose() + 1e-6 * Matrix::Identity(n, n);
    const Matrix S = solve_lyapunov(H0, D0, 0.1);
    const CirculationRates r = circulation_and_rates(H0, S, D0, 0.1);
    CHECK(r.entropy_rate >= -1e-12);
  }
}

TEST_CASE("exact posterior and KL divergence") {
  const Dataset d = gen_regression_dataset(200, 0.1, 1);
  Matrix Psi(3, 200);
  for (int i = 0; i < 200; ++i) {
    double psi[3];
    linearized_basis(d.inputs(0, i), psi);
    for (int a = 0; a < 3; ++a) Psi(a, i) = psi[a];
  }
  const Vector y = d.outputs.row(0).transpose();

  auto [post, kl_eye] = exact_posterior_and_kl(Psi, y, 0.1, 10.0,
                                               Matrix::Identity(3, 3).eval());
  CHECK(kl_eye > 0.0);
  // identical distributions
  auto [p2, kl0] = exact_posterior_and_kl(Psi, y, 0.1, 10.0, post.sigma_po);
  CHECK(std::abs(kl0) <= 1e-14);
  // doubled covariance: (3 / (2 ln 2)) (1 - ln 2)
  auto [p3, kl2] = exact_posterior_and_kl(Psi, y, 0.1, 10.0,
                                          (2.0 * post.sigma_po).eval());
  CHECK(kl2 == doctest::Approx(3.0 * (1.0 - std::log(2.0)) / (2.0 * std::log(2.0)))
                   .epsilon(1e-12));
  // mean offset adds the quadratic term
  const Vector off = 0.01 * Vector::Ones(3);
  auto [p4, klm] = exact_posterior_and_kl(Psi, y, 0.1, 10.0, post.sigma_po, &off);
  const double expect =
      0.5 * (off.transpose() * post.sigma_po.inverse() * off)(0) / std::log(2.0);
  CHECK(klm == doctest::Approx(expect).epsilon(1e-9));
  // tiny covariance perturbations survive cancellation
  const Matrix tiny = post.sigma_po * (1.0 + 1e-9);
  auto [p5, klt] = exact_posterior_and_kl(Psi, y, 0.1, 10.0, tiny);
  CHECK(klt == doctest::Approx(3.0 * 0.5e-18 / std::log(2.0)).epsilon(1e-4));

  CHECK_THROWS_AS(gaussian_kl_bits(-post.sigma_po, post.sigma_po),
                  std::invalid_argument);
}

TEST_CASE("stationary theory JSON round trip") {
  StationaryTheory t;
  t.mode = "wr";
  t.eta = 1e-7;
  t.entropy_rate = 0.25;
  t.theta0 = Vector::LinSpaced(3, 0.0, 1.0);
  t.H0 = Matrix::Identity(3, 3) * 2.0;
  t.D0 = Matrix::Identity(3, 3) * 0.5;
  t.Sigma = Matrix::Identity(3, 3) * 0.25;
  t.C = Matrix::Zero(3, 3);
  const StationaryTheory back = StationaryTheory::from_json(t.to_json());
  CHECK(back.mode == "wr");
  CHECK(back.eta == t.eta);
  CHECK((back.H0 - t.H0).norm() == 0.0);
  CHECK((back.theta0 - t.theta0).norm() == 0.0);
}
