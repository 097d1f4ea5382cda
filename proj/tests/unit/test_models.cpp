#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "sgdthermo/models.hpp"
#include "sgdthermo/rng.hpp"

using namespace sgdthermo;

namespace {

Vector random_theta(int n, std::uint64_t seed, double scale = 0.4) {
  Rng rng(seed);
  Vector t(n);
  for (int a = 0; a < n; ++a) t[a] = scale * rng.normal();
  return t;
}

void write_u32_be(std::ofstream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<char*>(b), 4);
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("sgdthermo_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

// writes a tiny synthetic IDX pair; image_value fills every pixel
void write_idx_pair(const std::filesystem::path& img_path,
                    const std::filesystem::path& lab_path, int count,
                    unsigned char image_value, unsigned char label,
                    std::uint32_t img_magic = 0x803, std::uint32_t lab_magic = 0x801,
                    int lab_count = -1) {
  std::ofstream img(img_path, std::ios::binary);
  write_u32_be(img, img_magic);
  write_u32_be(img, count);
  write_u32_be(img, 28);
  write_u32_be(img, 28);
  std::vector<unsigned char> pix(28 * 28, image_value);
  for (int i = 0; i < count; ++i)
    img.write(reinterpret_cast<char*>(pix.data()), pix.size());
  std::ofstream lab(lab_path, std::ios::binary);
  write_u32_be(lab, lab_magic);
  write_u32_be(lab, lab_count < 0 ? count : lab_count);
  for (int i = 0; i < (lab_count < 0 ? count : lab_count); ++i)
    lab.write(reinterpret_cast<const char*>(&label), 1);
}

}  // namespace

TEST_CASE("regression dataset follows the published grid") {
  const Dataset d = gen_regression_dataset(200, 0.1, 1);
  CHECK(d.sample_count() == 200);
  CHECK(d.inputs(0, 0) == doctest::Approx(-3.0));
  CHECK(d.inputs(0, 199) == doctest::Approx(2.97));

  // zero-noise single point
  const Dataset single = gen_regression_dataset(1, 0.0, 99);
  CHECK(single.inputs(0, 0) == doctest::Approx(-3.0));
  CHECK(single.outputs(0, 0) == doctest::Approx(std::exp(-9.0)));

  // noise sd statistically consistent with eps = 0.1
  const Dataset noisy = gen_regression_dataset(200, 0.1, 1);
  double ss = 0;
  for (int i = 0; i < 200; ++i) {
    const double r = noisy.outputs(0, i) - std::exp(-noisy.inputs(0, i) * noisy.inputs(0, i));
    ss += r * r;
  }
  const double sd = std::sqrt(ss / 199);
  CHECK(sd > 0.08);
  CHECK(sd < 0.12);

  CHECK_THROWS_AS(gen_regression_dataset(0, 0.1, 1), std::invalid_argument);

  // determinism
  const Dataset again = gen_regression_dataset(200, 0.1, 1);
  CHECK((again.outputs - d.outputs).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("mnist loader pools, scales and one-hot encodes") {
  TempDir tmp;
  const auto img = tmp.path / "imgs";
  const auto lab = tmp.path / "labs";

  SUBCASE("constant image, label 3") {
    write_idx_pair(img, lab, 2, 0, 3);
    const Dataset d = load_mnist(img.string(), lab.string());
    CHECK(d.sample_count() == 2);
    CHECK(d.input_dim() == 49);
    CHECK(d.output_dim() == 10);
    CHECK(d.inputs.cwiseAbs().maxCoeff() == 0.0);
    CHECK(d.outputs(3, 0) == 1.0);
    CHECK(d.outputs.col(0).sum() == 1.0);
  }

  SUBCASE("pooling preserves the image mean") {
    // gradient image: pixel (r,c) = (r*28+c) % 251
    std::ofstream io(img, std::ios::binary);
    write_u32_be(io, 0x803);
    write_u32_be(io, 1);
    write_u32_be(io, 28);
    write_u32_be(io, 28);
    double mean = 0;
    for (int p = 0; p < 28 * 28; ++p) {
      const unsigned char v = static_cast<unsigned char>(p % 251);
      io.write(reinterpret_cast<const char*>(&v), 1);
      mean += v / 255.0;
    }
    io.close();
    mean /= 28 * 28;
    write_idx_pair(tmp.path / "unused", lab, 1, 0, 0);
    const Dataset d = load_mnist(img.string(), lab.string());
    CHECK(d.inputs.col(0).mean() == doctest::Approx(mean).epsilon(1e-12));
  }

  SUBCASE("bad magic is a format error") {
    write_idx_pair(img, lab, 1, 0, 0, 0x803, 0xdead);
    CHECK_THROWS_AS(load_mnist(img.string(), lab.string()), ConfigError);
  }

  SUBCASE("count mismatch is inconsistent data") {
    write_idx_pair(img, lab, 2, 0, 0, 0x803, 0x801, 3);
    CHECK_THROWS_AS(load_mnist(img.string(), lab.string()), ConfigError);
  }
}

TEST_CASE("dataset CSV round trip") {
  TempDir tmp;
  const Dataset d = gen_regression_dataset(17, 0.1, 3);
  const auto path = (tmp.path / "data.csv").string();
  save_dataset_csv(d, path);
  const Dataset back = load_dataset_csv(path);
  CHECK(back.sample_count() == 17);
  CHECK((back.inputs - d.inputs).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.outputs - d.outputs).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("evaluate: zero parameters give the pure-data loss") {
  const Dataset d = gen_regression_dataset(50, 0.1, 2);
  const ModelSpec model = ModelSpec::nonlinear_regression(0.1, 10.0);
  const Vector theta = Vector::Zero(7);
  const DerivativeBundle b = evaluate(model, d, theta);
  double expect = 0;
  for (int i = 0; i < 50; ++i) expect += d.outputs(0, i) * d.outputs(0, i);
  expect /= 2 * 0.1 * 0.1;
  CHECK(b.loss == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("evaluate: linearized V matches the analytic expression") {
  const Dataset d = gen_regression_dataset(30, 0.1, 2);
  const ModelSpec model = ModelSpec::linearized_regression(0.1, 10.0);
  const Vector theta = random_theta(3, 5);
  const DerivativeBundle b = evaluate(model, d, theta, {}, {.want_V = true});
  for (int i = 0; i < 30; ++i) {
    double psi[3];
    linearized_basis(d.inputs(0, i), psi);
    const double f = theta[0] * psi[0] + theta[1] * psi[1] + theta[2] * psi[2];
    const double w = -(d.outputs(0, i) - f) / (0.1 * 0.1);
    for (int a = 0; a < 3; ++a)
      CHECK(b.V(a, i) == doctest::Approx(w * psi[a]).epsilon(1e-12));
  }
}

TEST_CASE("evaluate: gradient matches central finite differences") {
  const Dataset d = gen_regression_dataset(40, 0.1, 4);
  for (const auto& model : {ModelSpec::nonlinear_regression(0.1, 10.0),
                            ModelSpec::linearized_regression(0.1, 10.0)}) {
    const Vector theta = random_theta(model.param_count, 77);
    const DerivativeBundle b = evaluate(model, d, theta);
    const Vector fd = fd_gradient(
        [&](const Vector& t) { return loss_value(model, d, t); }, theta);
    CHECK((b.grad - fd).norm() / fd.norm() <= 1e-6);
  }
}

TEST_CASE("evaluate: batch form and batch validation") {
  const Dataset d = gen_regression_dataset(20, 0.1, 6);
  const ModelSpec model = ModelSpec::nonlinear_regression(0.1, 10.0);
  const Vector theta = random_theta(7, 8);
  const std::vector<int> batch = {1, 5, 7};
  const DerivativeBundle b = evaluate(model, d, theta, batch);
  // L_B + R computed by hand from per-sample pieces
  double expect = 10.0 * theta.squaredNorm();
  for (const int i : batch) {
    const double f = [&] {
      const double t1 = std::tanh(theta[0] * d.inputs(0, i) + theta[2]);
      const double t2 = std::tanh(theta[1] * d.inputs(0, i) + theta[3]);
      return theta[4] * t1 + theta[5] * t2 + theta[6];
    }();
    const double r = d.outputs(0, i) - f;
    expect += 20.0 / (2 * 0.1 * 0.1) * r * r / 3.0;
  }
  CHECK(b.loss == doctest::Approx(expect).epsilon(1e-12));

  const std::vector<int> dup = {1, 1, 5};
  CHECK_THROWS_AS(evaluate(model, d, theta, dup), std::invalid_argument);
  const std::vector<int> oob = {1, 25};
  CHECK_THROWS_AS(evaluate(model, d, theta, oob), std::invalid_argument);
  CHECK_THROWS_AS(evaluate(model, d, random_theta(5, 1), {}), std::invalid_argument);
}

TEST_CASE("second_order: analytic Hessians agree with finite differences") {
  const Dataset d = gen_regression_dataset(25, 0.1, 9);
  for (const auto& model : {ModelSpec::nonlinear_regression(0.1, 10.0),
                            ModelSpec::linearized_regression(0.1, 10.0)}) {
    const Vector theta = random_theta(model.param_count, 13);
    const SecondOrderBundle so = second_order(model, d, theta);
    CHECK((so.H - so.H.transpose()).cwiseAbs().maxCoeff() == 0.0);
    const Matrix fd = fd_hessian_of_gradient(
        [&](const Vector& t) {
          Vector g(model.param_count);
          batch_loss_grad(model, d, t, {}, g);
          return g;
        },
        theta);
    CHECK((so.H - fd).cwiseAbs().maxCoeff() / so.H.cwiseAbs().maxCoeff() <= 1e-5);
  }
}

TEST_CASE("second_order: linearized Hessian is the Gauss-Newton constant") {
  const Dataset d = gen_regression_dataset(30, 0.1, 2);
  const ModelSpec model = ModelSpec::linearized_regression(0.1, 10.0);
  const SecondOrderBundle a = second_order(model, d, random_theta(3, 1));
  const SecondOrderBundle b = second_order(model, d, random_theta(3, 2));
  CHECK((a.H - b.H).cwiseAbs().maxCoeff() <= 1e-12 * a.H.cwiseAbs().maxCoeff());
  // (1/eps^2) Psi Psi^T + 2 lambda I
  Matrix expect = 2.0 * 10.0 * Matrix::Identity(3, 3);
  for (int i = 0; i < 30; ++i) {
    double psi[3];
    linearized_basis(d.inputs(0, i), psi);
    const auto p = Eigen::Map<const Eigen::Vector3d>(psi);
    expect += (p * p.transpose()) / (0.1 * 0.1);
  }
  CHECK((a.H - expect).cwiseAbs().maxCoeff() <= 1e-10 * expect.cwiseAbs().maxCoeff());
  // H - 2 lambda I is PSD for the quadratic-in-f loss
  Eigen::SelfAdjointEigenSolver<Matrix> es(a.H - 20.0 * Matrix::Identity(3, 3));
  CHECK(es.eigenvalues().minCoeff() >= -1e-10 * a.H.norm());
}

TEST_CASE("second_order: U slices sum to the data Hessian") {
  const Dataset d = gen_regression_dataset(15, 0.1, 21);
  const ModelSpec model = ModelSpec::nonlinear_regression(0.1, 10.0);
  const Vector theta = random_theta(7, 3);
  const SecondOrderBundle so = second_order(model, d, theta, true);
  REQUIRE(so.has_U);
  Matrix sum = 2.0 * 10.0 * Matrix::Identity(7, 7);
  for (const auto& Ui : so.U) sum += Ui;
  CHECK((sum - so.H).cwiseAbs().maxCoeff() <= 1e-10 * so.H.cwiseAbs().maxCoeff());
}

TEST_CASE("second_order: per-sample tensor is capability-gated at scale") {
  Dataset d;
  d.inputs = Matrix::Random(49, 4000);
  d.outputs = Matrix::Random(10, 4000);
  const ModelSpec model = ModelSpec::linear_classifier(10, 49, 1e-2);
  const Vector theta = Vector::Zero(490);
  CHECK_THROWS_AS(second_order(model, d, theta, true), CapabilityError);
  CHECK_NOTHROW(second_order(model, d, theta, false));
}

TEST_CASE("grad equals V column sum plus regularizer gradient") {
  const Dataset d = gen_regression_dataset(35, 0.1, 31);
  for (const auto& model : {ModelSpec::nonlinear_regression(0.1, 10.0),
                            ModelSpec::linearized_regression(0.1, 10.0)}) {
    const Vector theta = random_theta(model.param_count, 17);
    const DerivativeBundle b = evaluate(model, d, theta, {}, {.want_V = true});
    const Vector recon = b.V.rowwise().sum() + b.reg_grad;
    CHECK((b.grad - recon).norm() <= 1e-10 * b.grad.norm());
  }
}
