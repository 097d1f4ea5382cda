#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

#include "sgdthermo/diffusion.hpp"
#include "sgdthermo/experiment.hpp"
#include "sgdthermo/rng.hpp"

namespace sgdthermo {

using nlohmann::json;

namespace {

constexpr double kTol = 1e-12;

double rel_err(const Matrix& got, const Matrix& want) {
  const double scale = std::max(want.cwiseAbs().maxCoeff(), 1e-300);
  return (got - want).cwiseAbs().maxCoeff() / scale;
}

// exact completions of the epoch-moment structures the closed forms miss;
// derived by direct combinatorics and confirmed by the enumeration
double exact_zz_offdiag(int m, int M) {
  return -wor_coefficients(m, M).a0 / (M - 1.0);
}

double exact_a5_pattern(int m, int M) {
  if (M <= 2) return std::numeric_limits<double>::quiet_NaN();  // pattern needs 3 items
  if (m == M) return 0.0;
  const double Md = M, md = m;
  return -(Md - md) * (Md * (Md + md - 4.0) + 2.0 * md) /
         (12.0 * (Md - 1.0) * (Md - 1.0) * (Md - 2.0));
}

struct Check {
  std::string name;
  double error;
  double tol;
  bool pass;
  bool known_paper_deviation = false;
  double enumerated = 0, paper_value = 0;
};

json check_json(const Check& c) {
  json j;
  j["name"] = c.name;
  j["error"] = c.error;
  j["tol"] = c.tol;
  j["pass"] = c.pass;
  if (c.known_paper_deviation) {
    j["known_paper_deviation"] = true;
    j["enumerated"] = c.enumerated;
    j["closed_form"] = c.paper_value;
  }
  return j;
}

// finite-difference cross-checks of the analytic derivative paths
void fd_checks(std::vector<Check>& checks) {
  struct Case {
    const char* name;
    ModelSpec model;
    Dataset data;
  };
  std::vector<Case> cases;
  {
    Dataset d = gen_regression_dataset(40, 0.1, 3);
    cases.push_back({"nonlinear-regression", ModelSpec::nonlinear_regression(0.1, 10.0), d});
    cases.push_back({"linearized-regression", ModelSpec::linearized_regression(0.1, 10.0), d});
  }
  {
    Dataset d;
    Rng rng(11);
    d.inputs.resize(5, 30);
    d.outputs.resize(3, 30);
    for (Index i = 0; i < 30; ++i) {
      for (Index r = 0; r < 5; ++r) d.inputs(r, i) = rng.normal();
      for (Index r = 0; r < 3; ++r) d.outputs(r, i) = rng.normal();
    }
    cases.push_back({"linear-classifier", ModelSpec::linear_classifier(3, 5, 0.01), d});
  }

  for (auto& c : cases) {
    Rng rng(29);
    Vector theta(c.model.param_count);
    for (Index a = 0; a < theta.size(); ++a) theta[a] = 0.3 * rng.normal();

    const DerivativeBundle b = evaluate(c.model, c.data, theta, {}, {.want_V = true});
    const Vector fd = fd_gradient(
        [&](const Vector& t) { return loss_value(c.model, c.data, t); }, theta);
    const double gerr = (b.grad - fd).norm() / std::max(fd.norm(), 1e-300);
    checks.push_back({std::string("fd_gradient:") + c.name, gerr, 1e-6, gerr <= 1e-6});

    // grad = V 1 + X decomposition
    const Vector recon = b.V.rowwise().sum() + b.reg_grad;
    const double derr = (b.grad - recon).norm() / std::max(b.grad.norm(), 1e-300);
    checks.push_back({std::string("grad_V_decomposition:") + c.name, derr, 1e-10,
                      derr <= 1e-10});

    const Matrix H = second_order(c.model, c.data, theta).H;
    Vector grad_buf(c.model.param_count);
    const Matrix Hfd = fd_hessian_of_gradient(
        [&](const Vector& t) {
          Vector g(c.model.param_count);
          batch_loss_grad(c.model, c.data, t, {}, g);
          return g;
        },
        theta);
    const double herr = rel_err(H, Hfd);
    checks.push_back({std::string("fd_hessian:") + c.name, herr, 1e-5, herr <= 1e-5});

    // U consistency: H = sum_i U_i + Y
    const SecondOrderBundle so = second_order(c.model, c.data, theta, true);
    Matrix uh = 2.0 * c.model.lambda *
                Matrix::Identity(c.model.param_count, c.model.param_count);
    for (const auto& Ui : so.U) uh += Ui;
    const double uerr = rel_err(uh, H);
    checks.push_back({std::string("U_sums_to_H:") + c.name, uerr, 1e-10, uerr <= 1e-10});
  }

  // grad(deltaLoss): analytic vs finite differences, linearized model
  {
    Dataset d = gen_regression_dataset(40, 0.1, 5);
    ModelSpec model = ModelSpec::linearized_regression(0.1, 10.0);
    Rng rng(31);
    Vector theta(3);
    for (Index a = 0; a < 3; ++a) theta[a] = 0.2 * rng.normal();
    const double eta = 1e-6;
    const DeltaLoss dl = effective_loss_perturbation(model, d, theta, eta, 4, 40, true);
    const Vector fd = fd_gradient(
        [&](const Vector& t) {
          return effective_loss_perturbation(model, d, t, eta, 4, 40, false).value;
        },
        theta);
    const double err = (dl.gradient - fd).norm() / std::max(fd.norm(), 1e-300);
    checks.push_back({"fd_delta_loss_gradient:linearized", err, 1e-5, err <= 1e-5});
  }
}

}  // namespace

OracleSuiteResult oracle_suite(double perturb_a2) {
  std::vector<Check> checks;

  // WR diffusion against exhaustive minibatch enumeration
  for (int M = 2; M <= 6; ++M) {
    Rng rng(1000 + M);
    Matrix V(3, M);
    for (Index a = 0; a < 3; ++a)
      for (int i = 0; i < M; ++i) V(a, i) = rng.normal();
    const Vector gradL = V.rowwise().sum();
    for (int m = 1; m <= M; ++m) {
      const Matrix exact = diffusion_wr(V, gradL, 0.1, m, M, WrVariant::Exact);
      const Matrix oracle = oracle_wr(V, gradL, 0.1, m, M);
      const double scale = std::max(oracle.cwiseAbs().maxCoeff(), 1e-300);
      const double err = (m == M) ? std::max(exact.cwiseAbs().maxCoeff(),
                                             oracle.cwiseAbs().maxCoeff())
                                  : (exact - oracle).cwiseAbs().maxCoeff() / scale;
      checks.push_back({"wr_diffusion:M=" + std::to_string(M) + ",m=" + std::to_string(m),
                        err, kTol, err <= kTol});
    }
  }

  // WOR epoch-noise moments against exhaustive equipartition enumeration
  for (const auto& [M, ms] : std::vector<std::pair<int, std::vector<int>>>{
           {4, {1, 2, 4}}, {6, {1, 2, 3, 6}}}) {
    for (const int m : ms) {
      WorMomentOracleReport rep = oracle_wor_moments(M, m);
      const std::string tag = ":M=" + std::to_string(M) + ",m=" + std::to_string(m);
      checks.push_back({"wor_first_moments" + tag, rep.max_first_moment, kTol,
                        rep.max_first_moment <= kTol});
      for (auto s : rep.structures) {
        if (perturb_a2 != 0.0 && s.name.find("[a2]") != std::string::npos)
          s.paper_value += perturb_a2;
        const double err = std::abs(s.enumerated - s.paper_value);
        const bool pattern_constant = s.spread <= kTol;
        Check c{"wor_moment:" + s.name + tag, err, kTol,
                err <= kTol && pattern_constant};
        // Three structures deviate from the printed closed forms by O(1/M)
        // terms (zeta-zeta off-diagonal, the a5 pattern for n > 2, and the
        // all-distinct chi-chi moment); for those, verify the derived exact
        // completions instead and report the deviation.
        if (!c.pass) {
          c.known_paper_deviation = true;
          c.enumerated = s.enumerated;
          c.paper_value = s.paper_value;
          double exact = std::numeric_limits<double>::quiet_NaN();
          if (s.name.rfind("zeta_zeta_offdiag", 0) == 0) exact = exact_zz_offdiag(m, M);
          if (s.name.rfind("chi_chi_i_eq_l", 0) == 0 ||
              s.name.rfind("chi_chi_j_eq_k", 0) == 0)
            exact = exact_a5_pattern(m, M);
          if (std::isfinite(exact)) {
            const double exact_err = std::abs(s.enumerated - exact);
            c.pass = exact_err <= kTol && pattern_constant;
            c.name += "(exact completion)";
            c.error = exact_err;
          } else if (s.name.rfind("chi_chi_distinct", 0) == 0) {
            // no closed form asserted; require only pattern constancy and
            // the O(1/M) magnitude bound
            c.pass = pattern_constant && std::abs(s.enumerated) <= 1.0 / (M - 1.0);
            c.name += "(reported)";
          }
        }
        checks.push_back(std::move(c));
      }
    }
  }

  fd_checks(checks);

  json report;
  bool pass = true;
  json arr = json::array();
  for (const auto& c : checks) {
    arr.push_back(check_json(c));
    if (!c.pass) pass = false;
  }
  report["checks"] = std::move(arr);
  report["pass"] = pass;
  report["tolerance"] = kTol;

  OracleSuiteResult result;
  result.pass = pass;
  result.json = report.dump(1);
  return result;
}

}  // namespace sgdthermo
