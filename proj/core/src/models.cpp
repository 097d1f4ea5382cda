#include "sgdthermo/models.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "sgdthermo/io.hpp"
#include "sgdthermo/rng.hpp"

namespace sgdthermo {

void Dataset::validate() const {
  if (inputs.cols() < 1) throw std::invalid_argument("dataset: M must be >= 1");
  if (inputs.cols() != outputs.cols())
    throw std::invalid_argument("dataset: input/output count mismatch");
}

Dataset gen_regression_dataset(int M, double noise_sd, std::uint64_t seed) {
  if (M <= 0) throw std::invalid_argument("gen_regression_dataset: M must be >= 1");
  if (noise_sd < 0) throw std::invalid_argument("gen_regression_dataset: noise_sd < 0");
  Dataset data;
  data.inputs.resize(1, M);
  data.outputs.resize(1, M);
  Rng rng(derive_seed(seed, 0));
  for (int i = 0; i < M; ++i) {
    const double x = -3.0 + 0.03 * i;
    data.inputs(0, i) = x;
    data.outputs(0, i) = std::exp(-x * x) + (noise_sd > 0 ? rng.normal(0.0, noise_sd) : 0.0);
  }
  return data;
}

namespace {

std::uint32_t read_u32_be(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw ConfigError("IDX file: unexpected end of file");
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace

Dataset load_mnist(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw ConfigError("cannot open MNIST images file: " + images_path);
  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw ConfigError("cannot open MNIST labels file: " + labels_path);

  if (read_u32_be(img) != 0x00000803u)
    throw ConfigError("format error: bad magic in images file " + images_path);
  const std::uint32_t n_images = read_u32_be(img);
  const std::uint32_t rows = read_u32_be(img);
  const std::uint32_t cols = read_u32_be(img);
  if (rows != 28 || cols != 28)
    throw ConfigError("format error: expected 28x28 images");

  if (read_u32_be(lab) != 0x00000801u)
    throw ConfigError("format error: bad magic in labels file " + labels_path);
  const std::uint32_t n_labels = read_u32_be(lab);
  if (n_images != n_labels)
    throw ConfigError("inconsistent data: image/label count mismatch");

  constexpr int kPool = 4, kOut = 7;  // 28 -> 7 by non-overlapping 4x4 block mean
  Dataset data;
  data.inputs.resize(kOut * kOut, n_images);
  data.outputs = Matrix::Zero(10, n_images);
  std::vector<unsigned char> pixels(28 * 28);
  for (std::uint32_t i = 0; i < n_images; ++i) {
    img.read(reinterpret_cast<char*>(pixels.data()), pixels.size());
    if (!img) throw ConfigError("IDX images file truncated");
    for (int br = 0; br < kOut; ++br) {
      for (int bc = 0; bc < kOut; ++bc) {
        double sum = 0;
        for (int r = 0; r < kPool; ++r)
          for (int c = 0; c < kPool; ++c)
            sum += pixels[(br * kPool + r) * 28 + (bc * kPool + c)];
        data.inputs(br * kOut + bc, i) = sum / (kPool * kPool * 255.0);
      }
    }
    unsigned char label;
    lab.read(reinterpret_cast<char*>(&label), 1);
    if (!lab) throw ConfigError("IDX labels file truncated");
    if (label > 9) throw ConfigError("inconsistent data: label out of range");
    data.outputs(label, i) = 1.0;
  }
  return data;
}

void save_dataset_csv(const Dataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "# M=" << data.sample_count() << " d_in=" << data.input_dim()
      << " d_out=" << data.output_dim() << "\n";
  for (Index i = 0; i < data.sample_count(); ++i) {
    for (Index r = 0; r < data.input_dim(); ++r) {
      if (r) out << ',';
      out << format_double(data.inputs(r, i));
    }
    for (Index r = 0; r < data.output_dim(); ++r)
      out << ',' << format_double(data.outputs(r, i));
    out << '\n';
  }
}

Dataset load_dataset_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open dataset CSV: " + path);
  std::string header;
  std::getline(in, header);
  long M = -1, d_in = -1, d_out = -1;
  {
    std::istringstream hs(header);
    std::string tok;
    while (hs >> tok) {
      auto eq = tok.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
      if (key == "#") continue;
      if (key == "M") M = std::stol(val);
      else if (key == "d_in") d_in = std::stol(val);
      else if (key == "d_out") d_out = std::stol(val);
    }
  }
  if (M < 1 || d_in < 1 || d_out < 1)
    throw ConfigError("dataset CSV: bad or missing header in " + path);
  Dataset data;
  data.inputs.resize(d_in, M);
  data.outputs.resize(d_out, M);
  std::string line;
  for (long i = 0; i < M; ++i) {
    if (!std::getline(in, line)) throw ConfigError("dataset CSV truncated: " + path);
    std::istringstream ls(line);
    std::string cell;
    for (long r = 0; r < d_in + d_out; ++r) {
      if (!std::getline(ls, cell, ',')) throw ConfigError("dataset CSV short row");
      const double v = std::stod(cell);
      if (r < d_in) data.inputs(r, i) = v;
      else data.outputs(r - d_in, i) = v;
    }
  }
  return data;
}

const char* to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::NonlinearRegression: return "nonlinear-regression";
    case ModelKind::LinearizedRegression: return "linearized-regression";
    case ModelKind::LinearClassifier: return "linear-classifier";
  }
  return "?";
}

ModelKind model_kind_from_string(const std::string& name) {
  if (name == "nonlinear-regression") return ModelKind::NonlinearRegression;
  if (name == "linearized-regression") return ModelKind::LinearizedRegression;
  if (name == "linear-classifier") return ModelKind::LinearClassifier;
  throw ConfigError("unknown model kind: " + name);
}

ModelSpec ModelSpec::nonlinear_regression(double eps, double lambda) {
  if (eps <= 0) throw std::invalid_argument("model: eps must be > 0");
  if (lambda < 0) throw std::invalid_argument("model: lambda must be >= 0");
  return ModelSpec{ModelKind::NonlinearRegression, 7, eps, lambda, true, 1, 1};
}

ModelSpec ModelSpec::linearized_regression(double eps, double lambda) {
  if (eps <= 0) throw std::invalid_argument("model: eps must be > 0");
  if (lambda < 0) throw std::invalid_argument("model: lambda must be >= 0");
  return ModelSpec{ModelKind::LinearizedRegression, 3, eps, lambda, true, 1, 1};
}

ModelSpec ModelSpec::linear_classifier(int out_dim, int in_dim, double lambda) {
  if (out_dim < 1 || in_dim < 1)
    throw std::invalid_argument("model: classifier dims must be >= 1");
  if (lambda < 0) throw std::invalid_argument("model: lambda must be >= 0");
  return ModelSpec{ModelKind::LinearClassifier, out_dim * in_dim, 1.0, lambda,
                   true, out_dim, in_dim};
}

void ModelSpec::check_dataset(const Dataset& data) const {
  data.validate();
  switch (kind) {
    case ModelKind::NonlinearRegression:
    case ModelKind::LinearizedRegression:
      if (data.input_dim() != 1 || data.output_dim() != 1)
        throw std::invalid_argument("regression models expect scalar samples");
      break;
    case ModelKind::LinearClassifier:
      if (data.input_dim() != in_dim || data.output_dim() != out_dim)
        throw std::invalid_argument("classifier dims do not match dataset");
      break;
  }
}

namespace {

// f, df/dtheta and optionally dd f for the 7-parameter tanh network.
struct NonlinearEval {
  double f;
  double g[7];
};

inline NonlinearEval nonlinear_f_grad(const double* th, double x) {
  NonlinearEval e;
  const double t1 = std::tanh(th[0] * x + th[2]);
  const double t2 = std::tanh(th[1] * x + th[3]);
  const double s1 = 1.0 - t1 * t1;
  const double s2 = 1.0 - t2 * t2;
  e.f = th[4] * t1 + th[5] * t2 + th[6];
  e.g[0] = th[4] * s1 * x;
  e.g[1] = th[5] * s2 * x;
  e.g[2] = th[4] * s1;
  e.g[3] = th[5] * s2;
  e.g[4] = t1;
  e.g[5] = t2;
  e.g[6] = 1.0;
  return e;
}

// Hessian of f for the 7-parameter network (sparse; returned dense 7x7).
inline void nonlinear_f_hess(const double* th, double x, Matrix& hf) {
  hf.setZero();
  const double t1 = std::tanh(th[0] * x + th[2]);
  const double t2 = std::tanh(th[1] * x + th[3]);
  const double s1 = 1.0 - t1 * t1;
  const double s2 = 1.0 - t2 * t2;
  const double d1 = -2.0 * t1 * s1;  // d s1 / d u1
  const double d2 = -2.0 * t2 * s2;
  hf(0, 0) = th[4] * d1 * x * x;
  hf(0, 2) = hf(2, 0) = th[4] * d1 * x;
  hf(2, 2) = th[4] * d1;
  hf(0, 4) = hf(4, 0) = s1 * x;
  hf(2, 4) = hf(4, 2) = s1;
  hf(1, 1) = th[5] * d2 * x * x;
  hf(1, 3) = hf(3, 1) = th[5] * d2 * x;
  hf(3, 3) = th[5] * d2;
  hf(1, 5) = hf(5, 1) = s2 * x;
  hf(3, 5) = hf(5, 3) = s2;
}

void check_batch(std::span<const int> batch, Index M) {
  std::vector<int> sorted(batch.begin(), batch.end());
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t k = 0; k < sorted.size(); ++k) {
    if (sorted[k] < 0 || sorted[k] >= M)
      throw std::invalid_argument("batch index out of range");
    if (k > 0 && sorted[k] == sorted[k - 1])
      throw std::invalid_argument("duplicate batch indices");
  }
}

// model output f(x_i; theta) for regression kinds
inline double model_f(const ModelSpec& model, const Vector& theta, double x) {
  if (model.kind == ModelKind::NonlinearRegression)
    return nonlinear_f_grad(theta.data(), x).f;
  double psi[3];
  linearized_basis(x, psi);
  return theta[0] * psi[0] + theta[1] * psi[1] + theta[2] * psi[2];
}

}  // namespace

double batch_loss_grad(const ModelSpec& model, const Dataset& data,
                       const Vector& theta, std::span<const int> batch,
                       Vector& grad) {
  const Index M = data.sample_count();
  const Index N = model.param_count;
  const bool full = batch.empty();
  const Index count = full ? M : static_cast<Index>(batch.size());
  grad.setZero();
  double data_loss = 0;

  switch (model.kind) {
    case ModelKind::NonlinearRegression: {
      const double* th = theta.data();
      const double c = static_cast<double>(M) / (model.eps * model.eps);  // M/eps^2
      for (Index k = 0; k < count; ++k) {
        const Index i = full ? k : batch[k];
        const double x = data.inputs(0, i);
        const NonlinearEval e = nonlinear_f_grad(th, x);
        const double r = data.outputs(0, i) - e.f;
        data_loss += 0.5 * c * r * r;
        const double w = -c * r;
        for (int a = 0; a < 7; ++a) grad[a] += w * e.g[a];
      }
      break;
    }
    case ModelKind::LinearizedRegression: {
      const double c = static_cast<double>(M) / (model.eps * model.eps);
      for (Index k = 0; k < count; ++k) {
        const Index i = full ? k : batch[k];
        double psi[3];
        linearized_basis(data.inputs(0, i), psi);
        const double f = theta[0] * psi[0] + theta[1] * psi[1] + theta[2] * psi[2];
        const double r = data.outputs(0, i) - f;
        data_loss += 0.5 * c * r * r;
        const double w = -c * r;
        grad[0] += w * psi[0];
        grad[1] += w * psi[1];
        grad[2] += w * psi[2];
      }
      break;
    }
    case ModelKind::LinearClassifier: {
      const auto W = Eigen::Map<const Matrix>(theta.data(), model.out_dim, model.in_dim);
      auto G = Eigen::Map<Matrix>(grad.data(), model.out_dim, model.in_dim);
      Vector r(model.out_dim);
      for (Index k = 0; k < count; ++k) {
        const Index i = full ? k : batch[k];
        r.noalias() = data.outputs.col(i) - W * data.inputs.col(i);
        data_loss += r.squaredNorm();
        G.noalias() -= 2.0 * r * data.inputs.col(i).transpose();
      }
      break;
    }
  }
  // average l_i over the batch (or dataset), then add regularization
  grad /= static_cast<double>(count);
  grad.noalias() += 2.0 * model.lambda * theta;
  (void)N;
  return data_loss / static_cast<double>(count) + model.lambda * theta.squaredNorm();
}

double loss_value(const ModelSpec& model, const Dataset& data, const Vector& theta) {
  const Index M = data.sample_count();
  double data_loss = 0;
  switch (model.kind) {
    case ModelKind::NonlinearRegression:
    case ModelKind::LinearizedRegression: {
      const double c = static_cast<double>(M) / (model.eps * model.eps);
      for (Index i = 0; i < M; ++i) {
        const double r = data.outputs(0, i) - model_f(model, theta, data.inputs(0, i));
        data_loss += 0.5 * c * r * r;
      }
      break;
    }
    case ModelKind::LinearClassifier: {
      const auto W = Eigen::Map<const Matrix>(theta.data(), model.out_dim, model.in_dim);
      for (Index i = 0; i < M; ++i)
        data_loss += (data.outputs.col(i) - W * data.inputs.col(i)).squaredNorm();
      break;
    }
  }
  return data_loss / static_cast<double>(M) + model.lambda * theta.squaredNorm();
}

DerivativeBundle evaluate(const ModelSpec& model, const Dataset& data,
                          const Vector& theta, std::span<const int> batch,
                          EvalOptions opts) {
  model.check_dataset(data);
  if (theta.size() != model.param_count)
    throw std::invalid_argument("theta size does not match model parameter count");
  if (!batch.empty()) check_batch(batch, data.sample_count());

  const Index M = data.sample_count();
  const Index N = model.param_count;
  DerivativeBundle out;
  out.grad.resize(N);
  out.loss = batch_loss_grad(model, data, theta, batch, out.grad);
  out.reg_grad = 2.0 * model.lambda * theta;
  out.reg_hess = 2.0 * model.lambda * Matrix::Identity(N, N);

  if (opts.want_V) {
    out.V.resize(N, M);
    out.has_V = true;
    switch (model.kind) {
      case ModelKind::NonlinearRegression: {
        const double inv_eps2 = 1.0 / (model.eps * model.eps);
        for (Index i = 0; i < M; ++i) {
          const double x = data.inputs(0, i);
          const NonlinearEval e = nonlinear_f_grad(theta.data(), x);
          const double w = -inv_eps2 * (data.outputs(0, i) - e.f);
          for (int a = 0; a < 7; ++a) out.V(a, i) = w * e.g[a];
        }
        break;
      }
      case ModelKind::LinearizedRegression: {
        const double inv_eps2 = 1.0 / (model.eps * model.eps);
        for (Index i = 0; i < M; ++i) {
          double psi[3];
          linearized_basis(data.inputs(0, i), psi);
          const double f = theta[0] * psi[0] + theta[1] * psi[1] + theta[2] * psi[2];
          const double w = -inv_eps2 * (data.outputs(0, i) - f);
          for (int a = 0; a < 3; ++a) out.V(a, i) = w * psi[a];
        }
        break;
      }
      case ModelKind::LinearClassifier: {
        const auto W = Eigen::Map<const Matrix>(theta.data(), model.out_dim, model.in_dim);
        const double inv_M = 1.0 / static_cast<double>(M);
        Vector r(model.out_dim);
        for (Index i = 0; i < M; ++i) {
          r.noalias() = data.outputs.col(i) - W * data.inputs.col(i);
          auto Vi = Eigen::Map<Matrix>(out.V.col(i).data(), model.out_dim, model.in_dim);
          Vi.noalias() = (-2.0 * inv_M) * r * data.inputs.col(i).transpose();
        }
        break;
      }
    }
  }
  return out;
}

SecondOrderBundle second_order(const ModelSpec& model, const Dataset& data,
                               const Vector& theta, bool want_U) {
  model.check_dataset(data);
  if (theta.size() != model.param_count)
    throw std::invalid_argument("theta size does not match model parameter count");
  const Index M = data.sample_count();
  const Index N = model.param_count;

  SecondOrderBundle out;
  out.H = Matrix::Zero(N, N);

  if (want_U) {
    if (!model.per_sample_hessian_capable)
      throw CapabilityError("per-sample Hessians not available for this model");
    if (static_cast<std::int64_t>(N) * N * M > kPerSampleHessianBudget)
      throw CapabilityError(
          "per-sample Hessian tensor exceeds materialization budget; "
          "use the H D H approximation instead");
    out.U.assign(M, Matrix::Zero(N, N));
    out.has_U = true;
  }

  switch (model.kind) {
    case ModelKind::NonlinearRegression: {
      const double inv_eps2 = 1.0 / (model.eps * model.eps);
      Matrix hf(7, 7);
      for (Index i = 0; i < M; ++i) {
        const double x = data.inputs(0, i);
        const NonlinearEval e = nonlinear_f_grad(theta.data(), x);
        nonlinear_f_hess(theta.data(), x, hf);
        const double r = data.outputs(0, i) - e.f;
        const auto g = Eigen::Map<const Eigen::Matrix<double, 7, 1>>(e.g);
        Matrix Ui = inv_eps2 * (g * g.transpose() - r * hf);
        out.H += Ui;
        if (want_U) out.U[i] = std::move(Ui);
      }
      break;
    }
    case ModelKind::LinearizedRegression: {
      const double inv_eps2 = 1.0 / (model.eps * model.eps);
      for (Index i = 0; i < M; ++i) {
        double psi[3];
        linearized_basis(data.inputs(0, i), psi);
        const auto p = Eigen::Map<const Eigen::Matrix<double, 3, 1>>(psi);
        Matrix Ui = inv_eps2 * (p * p.transpose());
        out.H += Ui;
        if (want_U) out.U[i] = std::move(Ui);
      }
      break;
    }
    case ModelKind::LinearClassifier: {
      // dd l_i has the block structure 2 (x_i x_i^T) (x) I_dout in the
      // column-major vec(W) parameter ordering.
      const double c = 2.0 / static_cast<double>(M);
      const int dout = model.out_dim, din = model.in_dim;
      auto kron_with_eye = [&](const Matrix& X, double scale, Matrix& dst) {
        dst.setZero();
        for (int b = 0; b < din; ++b)
          for (int d = 0; d < din; ++d) {
            const double v = scale * X(b, d);
            if (v == 0.0) continue;
            for (int a = 0; a < dout; ++a) dst(a + dout * b, a + dout * d) = v;
          }
      };
      Matrix gram = Matrix::Zero(din, din);
      for (Index i = 0; i < M; ++i) {
        gram.noalias() += data.inputs.col(i) * data.inputs.col(i).transpose();
        if (want_U) {
          const Matrix xi = data.inputs.col(i) * data.inputs.col(i).transpose();
          kron_with_eye(xi, c, out.U[i]);
        }
      }
      kron_with_eye(gram, c, out.H);
      break;
    }
  }

  out.H.noalias() += 2.0 * model.lambda * Matrix::Identity(N, N);
  out.H = 0.5 * (out.H + out.H.transpose()).eval();
  return out;
}

Vector fd_gradient(const std::function<double(const Vector&)>& f, const Vector& theta,
                   double step_scale) {
  Vector g(theta.size());
  Vector t = theta;
  for (Index a = 0; a < theta.size(); ++a) {
    const double h = step_scale * std::max(1.0, std::abs(theta[a]));
    t[a] = theta[a] + h;
    const double fp = f(t);
    t[a] = theta[a] - h;
    const double fm = f(t);
    t[a] = theta[a];
    g[a] = (fp - fm) / (2.0 * h);
  }
  return g;
}

Matrix fd_hessian_of_gradient(const std::function<Vector(const Vector&)>& grad,
                              const Vector& theta, double step_scale) {
  const Index N = theta.size();
  Matrix H(N, N);
  Vector t = theta;
  for (Index a = 0; a < N; ++a) {
    const double h = step_scale * std::max(1.0, std::abs(theta[a]));
    t[a] = theta[a] + h;
    const Vector gp = grad(t);
    t[a] = theta[a] - h;
    const Vector gm = grad(t);
    t[a] = theta[a];
    H.col(a) = (gp - gm) / (2.0 * h);
  }
  return 0.5 * (H + H.transpose()).eval();
}

}  // namespace sgdthermo
