#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sgdthermo/types.hpp"

namespace sgdthermo {

// M input/output pairs stored column-major: one column per sample.
struct Dataset {
  Matrix inputs;   // d_in  x M
  Matrix outputs;  // d_out x M

  Index sample_count() const { return inputs.cols(); }
  Index input_dim() const { return inputs.rows(); }
  Index output_dim() const { return outputs.rows(); }
  void validate() const;
};

// Synthetic regression data: x_i = -3 + 0.03 (i-1), y_i = exp(-x_i^2) + noise,
// noise ~ N(0, noise_sd^2) from the seeded generator.
Dataset gen_regression_dataset(int M, double noise_sd, std::uint64_t seed);

// MNIST IDX loader; images are average-pooled 4x4 to 7x7, scaled to [0,1],
// labels one-hot encoded over 10 classes.
Dataset load_mnist(const std::string& images_path, const std::string& labels_path);

void save_dataset_csv(const Dataset& data, const std::string& path);
Dataset load_dataset_csv(const std::string& path);

enum class ModelKind { NonlinearRegression, LinearizedRegression, LinearClassifier };

const char* to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& name);

// A differentiable model tied to a loss convention:
//   regression kinds:  l_i = M/(2 eps^2) (y_i - f(x_i))^2
//   linear classifier: l_i = |y_i - W x_i|^2
// plus L2 regularization R = lambda |theta|^2 in all cases.
struct ModelSpec {
  ModelKind kind;
  int param_count;
  double eps = 1.0;     // regression noise scale (loss prefactor)
  double lambda = 0.0;  // L2 strength
  bool per_sample_hessian_capable = true;
  int out_dim = 1;  // classifier only
  int in_dim = 1;   // classifier only

  static ModelSpec nonlinear_regression(double eps, double lambda);
  static ModelSpec linearized_regression(double eps, double lambda);
  static ModelSpec linear_classifier(int out_dim, int in_dim, double lambda);

  void check_dataset(const Dataset& data) const;
};

// Basis functions of the linearized regression network.
inline void linearized_basis(double x, double* psi3) {
  psi3[0] = std::tanh(0.5 - x);
  psi3[1] = std::tanh(0.5 + x);
  psi3[2] = 1.0;
}

// Value/gradient bundle for the full loss (or a minibatch form L_B + R).
// V, when requested, is always the full-dataset N x M matrix with
// V(a,i) = M^{-1} d l_i / d theta_a regardless of the batch argument.
struct DerivativeBundle {
  double loss = 0;
  Vector grad;
  Matrix V;
  Vector reg_grad;  // X = dR
  Matrix reg_hess;  // Y = ddR
  bool has_V = false;
};

struct EvalOptions {
  bool want_V = false;
};

DerivativeBundle evaluate(const ModelSpec& model, const Dataset& data,
                          const Vector& theta, std::span<const int> batch = {},
                          EvalOptions opts = {});

// H = Hessian of the full loss; U[i] = M^{-1} dd l_i (per-sample Hessians,
// only when the model's capability flag is set and the tensor fits the
// materialization budget).
struct SecondOrderBundle {
  Matrix H;
  std::vector<Matrix> U;
  bool has_U = false;
};

SecondOrderBundle second_order(const ModelSpec& model, const Dataset& data,
                               const Vector& theta, bool want_U = false);

// Materialization budget, in doubles, for the N x N x M tensor.
inline constexpr std::int64_t kPerSampleHessianBudget = 30'000'000;

// --- hot kernels used by the training engines (no allocation) ----------

// Loss and gradient of L_B + R over `batch` (empty batch = full dataset).
// grad must be sized N. Returns the loss value.
double batch_loss_grad(const ModelSpec& model, const Dataset& data,
                       const Vector& theta, std::span<const int> batch,
                       Vector& grad);

double loss_value(const ModelSpec& model, const Dataset& data, const Vector& theta);

// --- finite-difference utilities (production fallbacks + test oracles) --

Vector fd_gradient(const std::function<double(const Vector&)>& f, const Vector& theta,
                   double step_scale = 1e-6);
Matrix fd_hessian_of_gradient(const std::function<Vector(const Vector&)>& grad,
                              const Vector& theta, double step_scale = 1e-5);

}  // namespace sgdthermo
