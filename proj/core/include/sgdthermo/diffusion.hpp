#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sgdthermo/models.hpp"
#include "sgdthermo/types.hpp"

namespace sgdthermo {

// ---------------------------------------------------------------------
// With-replacement minibatch diffusion matrix.
//
//   exact:  D = eta^2 (n-1) / (2(M-1)) [ M V V^T - gradL gradL^T ]
//   approx: D = eta^2 n / 2 * V V^T            (M >> 1, n >> 1)
//
// with n = M/m (not necessarily an integer for WR).
// ---------------------------------------------------------------------
enum class WrVariant { Exact, Approx };

Matrix diffusion_wr(const Matrix& V, const Vector& gradL, double eta, int m, int M,
                    WrVariant variant = WrVariant::Exact);

// Exhaustive-enumeration oracle: <xi xi^T>/2 over all C(M,m) minibatches.
// Limited to C(M,m) <= 1e5.
Matrix oracle_wr(const Matrix& V, const Vector& gradL, double eta, int m, int M);

// ---------------------------------------------------------------------
// Without-replacement (epoch-level) diffusion matrix.
// ---------------------------------------------------------------------

// The six closed-form prefactors of the epoch-noise second moments.
struct WorCoefficients {
  double a0, a1, a2, a3, a4, a5;
};

WorCoefficients wor_coefficients(int m, int M);

// Building blocks of the full WOR diffusion assembly. The S tensor
// (S_{a i j} = n^2 sum_b U_{a b i} V_{b j}, diagonal i=j zeroed) is
// materialized per-column; F and G require all of it and are only filled
// when `full` blocks are requested.
struct WorBuildingBlocks {
  Matrix Z;  // N x M
  Matrix B;  // N x M   row-contraction of S-delta over its first sample index
  Matrix C;  // N x M   column-contraction over the second sample index
  Matrix F;  // N x N
  Matrix G;  // N x N
  bool has_FG = false;
};

WorBuildingBlocks wor_building_blocks(const Matrix& V, const std::vector<Matrix>& U,
                                      const Vector& X, const Matrix& Y, int n,
                                      bool want_FG);

enum class WorVariant { Full, Dominant, Hdh };

// Full:     the complete epoch-noise assembly from the building blocks.
// Dominant: (1/2) eta^4 a2 B B^T (the term that dominates in practice).
// Hdh:      eta^2 n^3 / 12 * H D H with the approximate WR D (no U needed).
Matrix diffusion_wor(const Matrix& V, const std::vector<Matrix>* U, const Vector& X,
                     const Matrix& Y, double eta, int m, int M, WorVariant variant,
                     const Matrix* H = nullptr);

// N M^2 materialization budget (doubles) for Full/Dominant assembly.
inline constexpr std::int64_t kWorTensorBudget = 60'000'000;

// ---------------------------------------------------------------------
// Effective-loss perturbation for WOR training, first order in eta:
//
//   dL = -(eta n (n-1)/4) [ |grad Ltot|^2 + |grad L|^2/(M-1)
//                           - M/(M-1) tr(V V^T) ]
//
// gradient assembled analytically from H, H_L and the U-V contraction when
// per-sample Hessians are available, by central differences otherwise.
// ---------------------------------------------------------------------
struct DeltaLoss {
  double value = 0;
  Vector gradient;
  bool has_gradient = false;
};

DeltaLoss effective_loss_perturbation(const ModelSpec& model, const Dataset& data,
                                      const Vector& theta, double eta, int m, int M,
                                      bool want_gradient);

// Reusable evaluator for engines that need grad(dL) once per epoch.
class DeltaLossGradient {
public:
  DeltaLossGradient(const ModelSpec& model, const Dataset& data, double eta, int m);
  double value(const Vector& theta) const;
  Vector gradient(const Vector& theta) const;

private:
  const ModelSpec& model_;
  const Dataset& data_;
  double eta_;
  int m_;
  bool analytic_;
};

// ---------------------------------------------------------------------
// WOR epoch-noise moment oracle: exhaustive enumeration of all ordered
// equipartitions of {1..M} into n batches of size m (via permutations),
// compared structure-by-structure against the closed forms.
// ---------------------------------------------------------------------
struct MomentStructure {
  std::string name;        // e.g. "zeta_zeta_diag"
  double enumerated;       // value extracted by enumeration
  double paper_value;      // closed-form claim for this index pattern
  double spread;           // max deviation across index instances of the pattern
  bool matches(double tol = 1e-12) const {
    return std::abs(enumerated - paper_value) <= tol && spread <= tol;
  }
};

struct WorMomentOracleReport {
  int M = 0, m = 0, n = 0;
  WorCoefficients coefficients{};
  double max_first_moment = 0;  // max |<zeta>|, |<chi>| (must be 0)
  std::vector<MomentStructure> structures;
  bool all_match(double tol = 1e-12) const;
};

WorMomentOracleReport oracle_wor_moments(int M, int m);

}  // namespace sgdthermo
