#include "sgdthermo/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sgdthermo {

namespace {

void check_batch_size(int m, int M) {
  if (m <= 0 || m > M) throw std::invalid_argument("minibatch size must satisfy 1 <= m <= M");
}

void check_wor_sizes(int m, int M) {
  check_batch_size(m, M);
  if (M % m != 0) throw std::invalid_argument("WOR requires M to be a multiple of m");
}

double binomial(int M, int m) {
  double r = 1;
  for (int k = 1; k <= m; ++k) r *= static_cast<double>(M - m + k) / k;
  return r;
}

}  // namespace

Matrix diffusion_wr(const Matrix& V, const Vector& gradL, double eta, int m, int M,
                    WrVariant variant) {
  check_batch_size(m, M);
  if (V.cols() != M) throw std::invalid_argument("V must have M columns");
  if (gradL.size() != V.rows()) throw std::invalid_argument("gradL/V size mismatch");
  const double n = static_cast<double>(M) / m;
  if (variant == WrVariant::Approx) {
    return (eta * eta * n / 2.0) * (V * V.transpose());
  }
  const double factor = eta * eta * (n - 1.0) / (2.0 * (M - 1.0));
  Matrix D = factor * (static_cast<double>(M) * (V * V.transpose()) -
                       gradL * gradL.transpose());
  return 0.5 * (D + D.transpose()).eval();
}

Matrix oracle_wr(const Matrix& V, const Vector& gradL, double eta, int m, int M) {
  check_batch_size(m, M);
  if (binomial(M, m) > 1e5) throw OracleLimitError("oracle_wr: C(M,m) exceeds 1e5");
  const Index N = V.rows();
  using LMatrix = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
  LMatrix acc = LMatrix::Zero(N, N);
  std::vector<int> comb(m);
  std::iota(comb.begin(), comb.end(), 0);
  long count = 0;
  Vector xi(N);
  const double scale = static_cast<double>(M) / m;
  for (;;) {
    xi = gradL;
    for (int k = 0; k < m; ++k) xi.noalias() -= scale * V.col(comb[k]);
    xi *= eta;
    for (Index a = 0; a < N; ++a)
      for (Index b = 0; b < N; ++b)
        acc(a, b) += static_cast<long double>(xi[a]) * xi[b];
    ++count;
    // next lexicographic combination
    int k = m - 1;
    while (k >= 0 && comb[k] == M - m + k) --k;
    if (k < 0) break;
    ++comb[k];
    for (int j = k + 1; j < m; ++j) comb[j] = comb[j - 1] + 1;
  }
  Matrix D(N, N);
  for (Index a = 0; a < N; ++a)
    for (Index b = 0; b < N; ++b)
      D(a, b) = static_cast<double>(acc(a, b) / (2.0L * count));
  return D;
}

WorCoefficients wor_coefficients(int m, int M) {
  check_wor_sizes(m, M);
  if (M < 2) throw std::invalid_argument("wor_coefficients: M must be >= 2");
  const double Md = M, md = m;
  const double n = Md / md;
  WorCoefficients a;
  a.a0 = (Md - md) * (Md + md) / (12.0 * md * md);
  a.a1 = (n + 1.0) * (Md - md) / (12.0 * (Md - 1.0));
  a.a2 = (M == 2) ? 0.0
                  : (Md - md) * (Md * (Md - 4.0) + (Md - 4.0) * md + 6.0) /
                        (12.0 * (Md - 2.0) * (Md - 1.0) * (Md - 1.0));
  a.a3 = (Md - md) * (Md + md - 2.0) / (4.0 * (Md - 1.0) * (Md - 1.0));
  a.a4 = -(Md - md) * (Md - md) / (4.0 * (Md - 1.0) * (Md - 1.0));
  a.a5 = (M == 2) ? 0.0
                  : -(Md - md) * (12.0 * Md + (Md - 4.0) * (Md * Md + (6.0 + Md) * md)) /
                        (12.0 * (Md - 2.0) * (Md - 1.0) * (Md - 1.0) * Md);
  return a;
}

WorBuildingBlocks wor_building_blocks(const Matrix& V, const std::vector<Matrix>& U,
                                      const Vector& X, const Matrix& Y, int n,
                                      bool want_FG) {
  const Index N = V.rows();
  const Index M = V.cols();
  if (static_cast<Index>(U.size()) != M)
    throw std::invalid_argument("wor_building_blocks: U must have M slices");

  WorBuildingBlocks bb;
  bb.Z.resize(N, M);
  const double nd = n;
  // Z = n (Y V - U . X)
  bb.Z.noalias() = nd * (Y * V);
  for (Index i = 0; i < M; ++i) bb.Z.col(i).noalias() -= nd * (U[i] * X);

  bb.B = Matrix::Zero(N, M);
  bb.C = Matrix::Zero(N, M);
  if (want_FG) {
    if (N * M * M > kWorTensorBudget)
      throw CapabilityError("full WOR assembly exceeds the N M^2 tensor budget");
    bb.F = Matrix::Zero(N, N);
    bb.G = Matrix::Zero(N, N);
    bb.has_FG = true;
  }

  // W_i(:,j) = S_{. i j} = n^2 U_i V(:,j), with the j = i column zeroed.
  std::vector<Matrix> W;
  if (want_FG) W.reserve(M);
  Matrix Wi(N, M);
  const double n2 = nd * nd;
  for (Index i = 0; i < M; ++i) {
    Wi.noalias() = n2 * (U[i] * V);
    Wi.col(i).setZero();
    bb.B += Wi;                          // B(:,k) = sum_j S_{. j k}
    bb.C.col(i) = Wi.rowwise().sum();    // C(:,i) = sum_j S_{. i j}
    if (want_FG) {
      bb.F.noalias() += Wi * Wi.transpose();
      W.push_back(Wi);
    }
  }
  if (want_FG) {
    // G_{ab} = sum_{i,j} S_{a i j} S_{b j i}
    for (Index i = 0; i < M; ++i)
      for (Index j = 0; j < M; ++j)
        bb.G.noalias() += W[i].col(j) * W[j].col(i).transpose();
  }
  return bb;
}

Matrix diffusion_wor(const Matrix& V, const std::vector<Matrix>* U, const Vector& X,
                     const Matrix& Y, double eta, int m, int M, WorVariant variant,
                     const Matrix* H) {
  check_wor_sizes(m, M);
  const int n = M / m;
  const Index N = V.rows();

  if (variant == WorVariant::Hdh) {
    if (!H) throw CapabilityError("diffusion_wor(hdh) requires the Hessian H");
    const Vector gradL = V.rowwise().sum();
    const Matrix D = diffusion_wr(V, gradL, eta, m, M, WrVariant::Approx);
    Matrix Dh = (eta * eta * std::pow(static_cast<double>(n), 3) / 12.0) *
                ((*H) * D * (*H));
    return 0.5 * (Dh + Dh.transpose()).eval();
  }

  if (!U) throw CapabilityError("diffusion_wor(full/dominant) requires per-sample Hessians");
  const WorCoefficients a = wor_coefficients(m, M);
  const double pref = 0.5 * std::pow(eta, 4);

  if (variant == WorVariant::Dominant) {
    const WorBuildingBlocks bb = wor_building_blocks(V, *U, X, Y, n, /*want_FG=*/false);
    return (pref * a.a2) * (bb.B * bb.B.transpose());
  }

  const WorBuildingBlocks bb = wor_building_blocks(V, *U, X, Y, n, /*want_FG=*/true);
  const Matrix BmC = bb.B - bb.C;
  Matrix Dh = a.a0 * (bb.Z * bb.Z.transpose());
  Dh.noalias() += a.a1 * (bb.Z * BmC.transpose() + BmC * bb.Z.transpose());
  Dh.noalias() += a.a2 * (bb.B * bb.B.transpose() + bb.C * bb.C.transpose());
  Dh.noalias() += (a.a3 - 2.0 * a.a2) * bb.F;
  Dh.noalias() += (a.a4 - 2.0 * a.a5) * bb.G;
  Dh.noalias() += a.a5 * (bb.B * bb.C.transpose() + bb.C * bb.B.transpose());
  Dh *= pref;
  (void)N;
  return 0.5 * (Dh + Dh.transpose()).eval();
}

namespace {

struct DeltaLossTerms {
  double value;
  Vector grad_Ltot;  // grad of full loss
  Vector grad_L;     // data part only
  Matrix V;
};

DeltaLossTerms delta_loss_terms(const ModelSpec& model, const Dataset& data,
                                const Vector& theta, double eta, int m, int M) {
  check_wor_sizes(m, M);
  const double n = static_cast<double>(M) / m;
  DerivativeBundle bundle = evaluate(model, data, theta, {}, {.want_V = true});
  DeltaLossTerms t;
  t.grad_Ltot = bundle.grad;
  t.grad_L = bundle.grad - bundle.reg_grad;
  t.V = std::move(bundle.V);
  const double trVVt = t.V.squaredNorm();
  const double c = eta * n * (n - 1.0) / 4.0;
  t.value = -c * (t.grad_Ltot.squaredNorm() + t.grad_L.squaredNorm() / (M - 1.0) -
                  static_cast<double>(M) / (M - 1.0) * trVVt);
  return t;
}

}  // namespace

DeltaLoss effective_loss_perturbation(const ModelSpec& model, const Dataset& data,
                                      const Vector& theta, double eta, int m, int M,
                                      bool want_gradient) {
  if (data.sample_count() != M)
    throw std::invalid_argument("effective_loss_perturbation: M mismatch with dataset");
  DeltaLossTerms t = delta_loss_terms(model, data, theta, eta, m, M);
  DeltaLoss out;
  out.value = t.value;
  if (!want_gradient) return out;

  const double n = static_cast<double>(M) / m;
  const double c = eta * n * (n - 1.0) / 4.0;
  const Index N = theta.size();
  const bool analytic =
      model.per_sample_hessian_capable &&
      static_cast<std::int64_t>(N) * N * M <= kPerSampleHessianBudget;
  if (analytic) {
    const SecondOrderBundle so = second_order(model, data, theta, /*want_U=*/true);
    const Matrix Y = 2.0 * model.lambda * Matrix::Identity(N, N);
    const Matrix H_L = so.H - Y;
    Vector uv = Vector::Zero(N);
    for (Index i = 0; i < M; ++i) uv.noalias() += so.U[i] * t.V.col(i);
    out.gradient = -c * (2.0 * (so.H * t.grad_Ltot) +
                         (2.0 / (M - 1.0)) * (H_L * t.grad_L) -
                         (2.0 * M / (M - 1.0)) * uv);
  } else {
    out.gradient = fd_gradient(
        [&](const Vector& th) { return delta_loss_terms(model, data, th, eta, m, M).value; },
        theta, 1e-6);
  }
  out.has_gradient = true;
  return out;
}

DeltaLossGradient::DeltaLossGradient(const ModelSpec& model, const Dataset& data,
                                     double eta, int m)
    : model_(model), data_(data), eta_(eta), m_(m) {
  const Index N = model.param_count;
  const Index M = data.sample_count();
  analytic_ = model.per_sample_hessian_capable &&
              static_cast<std::int64_t>(N) * N * M <= kPerSampleHessianBudget;
  if (!analytic_ && N > 64)
    throw CapabilityError(
        "grad(deltaLoss) unavailable at this scale: per-sample Hessians exceed "
        "the budget and finite differences are limited to N <= 64");
}

double DeltaLossGradient::value(const Vector& theta) const {
  return effective_loss_perturbation(model_, data_, theta, eta_, m_,
                                     static_cast<int>(data_.sample_count()), false)
      .value;
}

Vector DeltaLossGradient::gradient(const Vector& theta) const {
  return effective_loss_perturbation(model_, data_, theta, eta_, m_,
                                     static_cast<int>(data_.sample_count()), true)
      .gradient;
}

// ---------------------------------------------------------------------
// Moment oracle
// ---------------------------------------------------------------------

bool WorMomentOracleReport::all_match(double tol) const {
  if (max_first_moment > tol) return false;
  return std::all_of(structures.begin(), structures.end(),
                     [&](const MomentStructure& s) { return s.matches(tol); });
}

WorMomentOracleReport oracle_wor_moments(int M, int m) {
  check_wor_sizes(m, M);
  if (M > 7) throw OracleLimitError("oracle_wor_moments: M! enumeration limited to M <= 7");
  const int n = M / m;

  WorMomentOracleReport rep;
  rep.M = M;
  rep.m = m;
  rep.n = n;
  rep.coefficients = wor_coefficients(m, M);

  const double q = static_cast<double>(M - m) / (2.0 * (M - 1.0));
  const double half = (n - 1.0) / 2.0;

  // accumulators (long double; instance counts are tiny so this is exact
  // far beyond the 1e-12 comparison tolerance)
  std::vector<long double> sz(M, 0.0L);
  std::vector<long double> sx(M * M, 0.0L);
  std::vector<long double> zz(M * M, 0.0L);
  std::vector<long double> zx(M * M * M, 0.0L);
  std::vector<long double> xx(static_cast<std::size_t>(M) * M * M * M, 0.0L);

  std::vector<int> perm(M);
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<int> t(M);
  std::vector<double> zeta(M);
  std::vector<double> chi(M * M);
  long count = 0;
  do {
    for (int pos = 0; pos < M; ++pos) t[perm[pos]] = pos / m;
    for (int i = 0; i < M; ++i) zeta[i] = half - t[i];
    for (int i = 0; i < M; ++i)
      for (int j = 0; j < M; ++j)
        chi[i * M + j] = (i == j) ? 0.0 : ((t[i] > t[j] ? 1.0 : 0.0) - q);
    for (int i = 0; i < M; ++i) {
      sz[i] += zeta[i];
      for (int j = 0; j < M; ++j) {
        sx[i * M + j] += chi[i * M + j];
        zz[i * M + j] += zeta[i] * zeta[j];
        for (int k = 0; k < M; ++k) zx[(i * M + j) * M + k] += zeta[i] * chi[j * M + k];
      }
    }
    for (int i = 0; i < M; ++i)
      for (int j = 0; j < M; ++j) {
        if (i == j) continue;
        const double cij = chi[i * M + j];
        for (int k = 0; k < M; ++k)
          for (int l = 0; l < M; ++l) {
            if (k == l) continue;
            xx[((static_cast<std::size_t>(i) * M + j) * M + k) * M + l] +=
                cij * chi[k * M + l];
          }
      }
    ++count;
  } while (std::next_permutation(perm.begin(), perm.end()));

  const long double inv = 1.0L / count;
  for (auto& v : sz) v *= inv;
  for (auto& v : sx) v *= inv;
  for (auto& v : zz) v *= inv;
  for (auto& v : zx) v *= inv;
  for (auto& v : xx) v *= inv;

  for (const auto v : sz) rep.max_first_moment = std::max(rep.max_first_moment,
                                                          std::abs(static_cast<double>(v)));
  for (const auto v : sx) rep.max_first_moment = std::max(rep.max_first_moment,
                                                          std::abs(static_cast<double>(v)));

  // pattern extraction: representative value + spread across instances
  struct ClassAcc {
    double first = 0;
    double lo = 0, hi = 0;
    bool seen = false;
    void add(long double v) {
      const double d = static_cast<double>(v);
      if (!seen) {
        first = lo = hi = d;
        seen = true;
      } else {
        lo = std::min(lo, d);
        hi = std::max(hi, d);
      }
    }
  };
  auto push = [&](const std::string& name, const ClassAcc& acc, double paper) {
    if (!acc.seen) return;
    rep.structures.push_back({name, acc.first, paper, acc.hi - acc.lo});
  };

  ClassAcc zz_diag, zz_off;
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < M; ++j)
      (i == j ? zz_diag : zz_off).add(zz[i * M + j]);

  ClassAcc zx_ik, zx_ij, zx_dist;
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < M; ++j)
      for (int k = 0; k < M; ++k) {
        if (j == k) continue;
        const long double v = zx[(i * M + j) * M + k];
        if (i == k) zx_ik.add(v);
        else if (i == j) zx_ij.add(v);
        else zx_dist.add(v);
      }

  ClassAcc xx_a3, xx_a4, xx_a2_ik, xx_a2_jl, xx_a5_il, xx_a5_jk, xx_dist;
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < M; ++j) {
      if (i == j) continue;
      for (int k = 0; k < M; ++k)
        for (int l = 0; l < M; ++l) {
          if (k == l) continue;
          const long double v =
              xx[((static_cast<std::size_t>(i) * M + j) * M + k) * M + l];
          if (i == k && j == l) xx_a3.add(v);
          else if (i == l && j == k) xx_a4.add(v);
          else if (i == k) xx_a2_ik.add(v);
          else if (j == l) xx_a2_jl.add(v);
          else if (i == l) xx_a5_il.add(v);
          else if (j == k) xx_a5_jk.add(v);
          else xx_dist.add(v);
        }
    }

  const auto& a = rep.coefficients;
  push("zeta_zeta_diag[a0]", zz_diag, a.a0);
  push("zeta_zeta_offdiag[0]", zz_off, 0.0);
  push("zeta_chi_i_eq_k[a1]", zx_ik, a.a1);
  push("zeta_chi_i_eq_j[-a1]", zx_ij, -a.a1);
  push("zeta_chi_distinct[0]", zx_dist, 0.0);
  push("chi_chi_same[a3]", xx_a3, a.a3);
  push("chi_chi_swapped[a4]", xx_a4, a.a4);
  push("chi_chi_i_eq_k[a2]", xx_a2_ik, a.a2);
  push("chi_chi_j_eq_l[a2]", xx_a2_jl, a.a2);
  push("chi_chi_i_eq_l[a5]", xx_a5_il, a.a5);
  push("chi_chi_j_eq_k[a5]", xx_a5_jk, a.a5);
  push("chi_chi_distinct[0]", xx_dist, 0.0);
  return rep;
}

}  // namespace sgdthermo
