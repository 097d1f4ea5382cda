#include <doctest.h>

#include <numeric>

#include "sgdthermo/diffusion.hpp"
#include "sgdthermo/rng.hpp"
#include "sgdthermo/stationary.hpp"

using namespace sgdthermo;

namespace {

Matrix random_V(int N, int M, std::uint64_t seed) {
  Rng rng(seed);
  Matrix V(N, M);
  for (int a = 0; a < N; ++a)
    for (int i = 0; i < M; ++i) V(a, i) = rng.normal();
  return V;
}

}  // namespace

TEST_CASE("WR diffusion: deterministic limit and hand-computed instance") {
  // m = M: no noise at all
  const Matrix V = random_V(3, 5, 1);
  const Vector gradL = V.rowwise().sum();
  const Matrix D = diffusion_wr(V, gradL, 0.1, 5, 5, WrVariant::Exact);
  CHECK(D.cwiseAbs().maxCoeff() <= 1e-18);

  // N=1, M=2, m=1, per-sample gradients 1 and 3, eta = 0.1:
  // both batches equally likely, D = eta^2 (g1-g2)^2 / 8 = 0.005
  Matrix V1(1, 2);
  V1 << 0.5, 1.5;  // V = per-sample gradient / M
  const Vector g1 = V1.rowwise().sum();
  const Matrix D1 = diffusion_wr(V1, g1, 0.1, 1, 2, WrVariant::Exact);
  CHECK(D1(0, 0) == doctest::Approx(0.005).epsilon(1e-12));
  const Matrix O1 = oracle_wr(V1, g1, 0.1, 1, 2);
  CHECK(O1(0, 0) == doctest::Approx(0.005).epsilon(1e-12));
}

TEST_CASE("WR diffusion equals the subset-enumeration oracle for all small instances") {
  for (int M = 2; M <= 6; ++M) {
    const Matrix V = random_V(3, M, 100 + M);
    const Vector gradL = V.rowwise().sum();
    for (int m = 1; m < M; ++m) {
      const Matrix exact = diffusion_wr(V, gradL, 0.2, m, M, WrVariant::Exact);
      const Matrix oracle = oracle_wr(V, gradL, 0.2, m, M);
      const double err =
          (exact - oracle).cwiseAbs().maxCoeff() / oracle.cwiseAbs().maxCoeff();
      CAPTURE(M);
      CAPTURE(m);
      CHECK(err <= 1e-12);
    }
  }
  CHECK_THROWS_AS(diffusion_wr(random_V(2, 4, 1), Vector::Zero(2), 0.1, 5, 4,
                               WrVariant::Exact),
                  std::invalid_argument);
  CHECK_THROWS_AS(oracle_wr(random_V(2, 40, 1), Vector::Zero(2), 0.1, 18, 40),
                  OracleLimitError);
}

TEST_CASE("WR diffusion: approx variant is close at the published scale") {
  const Matrix V = random_V(7, 200, 3);
  const Vector gradL = V.rowwise().sum();
  const Matrix exact = diffusion_wr(V, gradL, 1e-3, 10, 200, WrVariant::Exact);
  const Matrix approx = diffusion_wr(V, gradL, 1e-3, 10, 200, WrVariant::Approx);
  CHECK((exact - approx).norm() / exact.norm() <= 0.06);
}

TEST_CASE("WR diffusion scaling: (eta, m) -> (c eta, c m) rescales approx D by c") {
  const Matrix V = random_V(4, 200, 5);
  const Vector gradL = V.rowwise().sum();
  const Matrix base = diffusion_wr(V, gradL, 1e-3, 10, 200, WrVariant::Approx);
  const Matrix scaled = diffusion_wr(V, gradL, 2e-3, 20, 200, WrVariant::Approx);
  CHECK((scaled - 2.0 * base).cwiseAbs().maxCoeff() <= 1e-12 * base.cwiseAbs().maxCoeff());
}

TEST_CASE("WOR coefficients: closed forms at the spec instances") {
  const WorCoefficients z = wor_coefficients(4, 4);
  CHECK(z.a0 == 0.0);
  CHECK(z.a1 == 0.0);
  CHECK(z.a2 == 0.0);
  CHECK(z.a3 == 0.0);
  CHECK(z.a4 == 0.0);
  CHECK(z.a5 == 0.0);

  const WorCoefficients a = wor_coefficients(2, 4);
  CHECK(a.a0 == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(a.a1 == doctest::Approx(1.0 / 6.0).epsilon(1e-15));

  CHECK_THROWS_AS(wor_coefficients(3, 4), std::invalid_argument);
}

TEST_CASE("WOR moment oracle: exact structures match, known deviations reported") {
  for (const auto& [M, m] : std::vector<std::pair<int, int>>{{4, 2}, {6, 2}, {6, 3}}) {
    const WorMomentOracleReport rep = oracle_wor_moments(M, m);
    CHECK(rep.max_first_moment <= 1e-12);
    for (const auto& s : rep.structures) {
      CAPTURE(M);
      CAPTURE(m);
      CAPTURE(s.name);
      CHECK(s.spread <= 1e-12);  // exchangeability: constant within a pattern
      const bool exact_in_paper =
          s.name.rfind("zeta_zeta_diag", 0) == 0 || s.name.rfind("zeta_chi", 0) == 0 ||
          s.name.rfind("chi_chi_same", 0) == 0 ||
          s.name.rfind("chi_chi_swapped", 0) == 0 ||
          s.name.rfind("chi_chi_i_eq_k", 0) == 0 ||
          s.name.rfind("chi_chi_j_eq_l", 0) == 0;
      if (exact_in_paper) CHECK(s.matches(1e-12));
    }
  }
  // the three structures the printed closed forms miss, at (6,2):
  // zeta-zeta off-diagonal = -a0/(M-1), the a5 pattern, all-distinct chi-chi
  const WorMomentOracleReport rep = oracle_wor_moments(6, 2);
  const WorCoefficients a = wor_coefficients(2, 6);
  for (const auto& s : rep.structures) {
    if (s.name.rfind("zeta_zeta_offdiag", 0) == 0)
      CHECK(s.enumerated == doctest::Approx(-a.a0 / 5.0).epsilon(1e-12));
    if (s.name.rfind("chi_chi_i_eq_l", 0) == 0)
      CHECK(s.enumerated == doctest::Approx(-7.0 / 75.0).epsilon(1e-12));
    if (s.name.rfind("chi_chi_distinct", 0) == 0)
      CHECK(s.enumerated == doctest::Approx(1.0 / 150.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(oracle_wor_moments(8, 2), OracleLimitError);
}

TEST_CASE("WOR diffusion: zero at m = M, eta^4 magnitude scaling") {
  const Dataset d = gen_regression_dataset(20, 0.1, 7);
  const ModelSpec model = ModelSpec::linearized_regression(0.1, 10.0);
  Rng rng(17);
  Vector theta(3);
  for (int a = 0; a < 3; ++a) theta[a] = 0.3 * rng.normal();
  const DerivativeBundle b = evaluate(model, d, theta, {}, {.want_V = true});
  const SecondOrderBundle so = second_order(model, d, theta, true);

  for (const auto variant : {WorVariant::Full, WorVariant::Dominant, WorVariant::Hdh}) {
    const Matrix Dz = diffusion_wor(b.V, &so.U, b.reg_grad, b.reg_hess, 1e-3, 20, 20,
                                    variant, &so.H);
    CAPTURE(static_cast<int>(variant));
    CHECK(Dz.cwiseAbs().maxCoeff() <= 1e-24);
  }

  const Matrix D1 = diffusion_wor(b.V, &so.U, b.reg_grad, b.reg_hess, 1e-3, 4, 20,
                                  WorVariant::Full, &so.H);
  const Matrix D2 = diffusion_wor(b.V, &so.U, b.reg_grad, b.reg_hess, 2e-3, 4, 20,
                                  WorVariant::Full, &so.H);
  CHECK((D2 - 16.0 * D1).cwiseAbs().maxCoeff() <= 1e-9 * D2.cwiseAbs().maxCoeff());

  // symmetry and capability gating
  CHECK((D1 - D1.transpose()).cwiseAbs().maxCoeff() <= 1e-14 * D1.cwiseAbs().maxCoeff());
  CHECK_THROWS_AS(diffusion_wor(b.V, nullptr, b.reg_grad, b.reg_hess, 1e-3, 4, 20,
                                WorVariant::Full, &so.H),
                  CapabilityError);
  CHECK_THROWS_AS(diffusion_wor(b.V, &so.U, b.reg_grad, b.reg_hess, 1e-3, 4, 20,
                                WorVariant::Hdh, nullptr),
                  CapabilityError);
}

TEST_CASE("effective loss perturbation: factor n(n-1), FD gradient, permutation invariance") {
  const Dataset d = gen_regression_dataset(24, 0.1, 11);
  const ModelSpec model = ModelSpec::linearized_regression(0.1, 10.0);
  Rng rng(23);
  Vector theta(3);
  for (int a = 0; a < 3; ++a) theta[a] = 0.2 * rng.normal();

  // n = 1 (m = M) kills the perturbation entirely
  const DeltaLoss none = effective_loss_perturbation(model, d, theta, 1e-4, 24, 24, true);
  CHECK(none.value == 0.0);
  CHECK(none.gradient.cwiseAbs().maxCoeff() == 0.0);

  const double eta = 1e-5;
  const DeltaLoss dl = effective_loss_perturbation(model, d, theta, eta, 4, 24, true);
  REQUIRE(dl.has_gradient);
  const Vector fd = fd_gradient(
      [&](const Vector& t) {
        return effective_loss_perturbation(model, d, t, eta, 4, 24, false).value;
      },
      theta);
  CHECK((dl.gradient - fd).norm() / fd.norm() <= 1e-5);

  // permutation of the dataset leaves deltaLoss unchanged
  Dataset shuffled = d;
  std::vector<int> perm(24);
  std::iota(perm.begin(), perm.end(), 0);
  Rng prng(5);
  for (int j = 23; j > 0; --j) std::swap(perm[j], perm[prng.below(j + 1)]);
  for (int i = 0; i < 24; ++i) {
    shuffled.inputs.col(i) = d.inputs.col(perm[i]);
    shuffled.outputs.col(i) = d.outputs.col(perm[i]);
  }
  const DeltaLoss dl2 = effective_loss_perturbation(model, shuffled, theta, eta, 4, 24, false);
  CHECK(dl2.value == doctest::Approx(dl.value).epsilon(1e-12));
}

TEST_CASE("WOR diffusion: dominant term approximates the full assembly near a minimum") {
  // regression model near theta0; the B B^T term should carry the matrix
  const Dataset d = gen_regression_dataset(200, 0.1, 1);
  const ModelSpec model = ModelSpec::nonlinear_regression(0.1, 10.0);
  Vector start(7);
  start << 1.0, -1.0, 0.5, 0.5, 0.6, -0.6, 0.3;
  const Vector theta = find_minimum(model, d, start);
  const DerivativeBundle b = evaluate(model, d, theta, {}, {.want_V = true});
  const SecondOrderBundle so = second_order(model, d, theta, true);
  const Matrix full = diffusion_wor(b.V, &so.U, b.reg_grad, b.reg_hess, 1e-7, 10, 200,
                                    WorVariant::Full, &so.H);
  const Matrix dominant = diffusion_wor(b.V, &so.U, b.reg_grad, b.reg_hess, 1e-7, 10,
                                        200, WorVariant::Dominant, &so.H);
  CHECK((dominant - full).norm() / full.norm() <= 0.1);
}
