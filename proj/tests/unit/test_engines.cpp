#include <doctest.h>

#include <cstdio>
#include <map>
#include <set>

#include "sgdthermo/diffusion.hpp"
#include "sgdthermo/engines.hpp"

using namespace sgdthermo;

namespace {

// data-free quadratic loss: classifier on a single zero sample, so that
// Loss = lambda |theta|^2 exactly
struct QuadraticSetup {
  ModelSpec model;
  Dataset data;
  explicit QuadraticSetup(double lambda, int n_params = 1)
      : model(ModelSpec::linear_classifier(n_params, 1, lambda)) {
    data.inputs = Matrix::Zero(1, 1);
    data.outputs = Matrix::Zero(n_params, 1);
  }
};

}  // namespace

TEST_CASE("sample_wr_batch: exact inclusion frequencies at M=4, m=2") {
  Rng rng(5);
  std::map<int, long> singles;
  std::map<std::pair<int, int>, long> pairs;
  const long trials = 60000;
  for (long t = 0; t < trials; ++t) {
    auto batch = sample_wr_batch(4, 2, rng);
    std::set<int> s(batch.begin(), batch.end());
    REQUIRE(s.size() == 2);
    for (const int i : s) ++singles[i];
    ++pairs[{*s.begin(), *std::next(s.begin())}];
  }
  for (const auto& [i, count] : singles)
    CHECK(static_cast<double>(count) / trials ==
          doctest::Approx(0.5).epsilon(0.03));  // m/M = 1/2
  for (const auto& [p, count] : pairs)
    CHECK(static_cast<double>(count) / trials ==
          doctest::Approx(1.0 / 6.0).epsilon(0.06));  // m(m-1)/(M(M-1)) per pair
  // full batch every time when m = M
  auto all = sample_wr_batch(3, 3, rng);
  std::set<int> s(all.begin(), all.end());
  CHECK(s == std::set<int>{0, 1, 2});
  CHECK_THROWS_AS(sample_wr_batch(3, 4, rng), std::invalid_argument);
}

TEST_CASE("sample_wor_epoch: partitions uniformly") {
  Rng rng(6);
  std::map<std::set<int>, long> first_batch;
  const long trials = 60000;
  for (long t = 0; t < trials; ++t) {
    auto batches = sample_wor_epoch(4, 2, rng);
    REQUIRE(batches.size() == 2);
    std::set<int> all;
    for (const auto& b : batches) all.insert(b.begin(), b.end());
    REQUIRE(all == std::set<int>{0, 1, 2, 3});
    ++first_batch[std::set<int>(batches[0].begin(), batches[0].end())];
  }
  REQUIRE(first_batch.size() == 6);
  // chi-square against uniform over the 6 ordered partitions
  double chi2 = 0;
  for (const auto& [b, count] : first_batch) {
    const double expect = trials / 6.0;
    chi2 += (count - expect) * (count - expect) / expect;
  }
  CHECK(chi2 < 20.5);  // chi2_{0.999, df=5}

  auto single = sample_wor_epoch(3, 3, rng);
  REQUIRE(single.size() == 1);
  CHECK(std::set<int>(single[0].begin(), single[0].end()) == std::set<int>{0, 1, 2});
  CHECK_THROWS_AS(sample_wor_epoch(4, 3, rng), std::invalid_argument);
}

TEST_CASE("gd on a 1-D quadratic follows the closed-form recursion") {
  QuadraticSetup q(10.0);  // Loss = 10 theta^2, curvature h = 20... plus data term 0
  EngineConfig cfg;
  cfg.mode = EngineMode::Gd;
  cfg.eta = 0.01;
  cfg.steps = 50;
  cfg.seed = 1;
  Vector init(1);
  init << 1.0;
  const Trajectory t = run_sgd(q.model, q.data, init, cfg);
  // theta_{t+1} = theta_t - eta * 2 lambda theta = (1 - 0.2) theta
  const double expect = std::pow(1.0 - cfg.eta * 20.0, 50);
  CHECK(t.theta_final[0] == doctest::Approx(expect).epsilon(1e-12));
  CHECK(t.record_count() == 51);  // initial + every step
  CHECK(t.step_index.front() == 0);
  CHECK(t.step_index.back() == 50);
}

TEST_CASE("m = M reduces SGD-WR and SGD-WOR to plain gradient descent") {
  const Dataset d = gen_regression_dataset(20, 0.1, 3);
  const ModelSpec model = ModelSpec::nonlinear_regression(0.1, 10.0);
  Vector init = Vector::Constant(7, 0.1);

  EngineConfig gd;
  gd.mode = EngineMode::Gd;
  gd.eta = 1e-5;
  gd.steps = 200;
  gd.seed = 9;
  const Trajectory t_gd = run_sgd(model, d, init, gd);

  EngineConfig wr = gd;
  wr.mode = EngineMode::SgdWr;
  wr.minibatch = 20;
  const Trajectory t_wr = run_sgd(model, d, init, wr);
  CHECK((t_wr.theta_final - t_gd.theta_final).cwiseAbs().maxCoeff() == 0.0);

  EngineConfig wor = gd;
  wor.mode = EngineMode::SgdWor;
  wor.minibatch = 20;
  const Trajectory t_wor = run_sgd(model, d, init, wor);
  CHECK((t_wor.theta_final - t_gd.theta_final).cwiseAbs().maxCoeff() == 0.0);

  EngineConfig quake = gd;
  quake.mode = EngineMode::Earthquake;
  quake.zeta = 0.0;
  const Trajectory t_quake = run_earthquake(model, d, init, quake);
  CHECK((t_quake.theta_final - t_gd.theta_final).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("identical config and seed give bit-identical trajectories") {
  const Dataset d = gen_regression_dataset(20, 0.1, 3);
  const ModelSpec model = ModelSpec::nonlinear_regression(0.1, 10.0);
  Vector init = Vector::Constant(7, 0.05);
  for (const auto mode : {EngineMode::SgdWr, EngineMode::SgdWor, EngineMode::Sgld,
                          EngineMode::Earthquake, EngineMode::Sgworld}) {
    EngineConfig cfg;
    cfg.mode = mode;
    cfg.eta = 1e-6;
    cfg.minibatch = 5;
    cfg.steps = 200;
    cfg.seed = 4242;
    cfg.zeta = 1e-3;
    const Trajectory a = run_engine(model, d, init, cfg);
    const Trajectory b = run_engine(model, d, init, cfg);
    CAPTURE(to_string(mode));
    CHECK((a.records - b.records).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.theta_final - b.theta_final).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("WOR epoch recording: indices at epoch boundaries") {
  const Dataset d = gen_regression_dataset(20, 0.1, 3);
  const ModelSpec model = ModelSpec::nonlinear_regression(0.1, 10.0);
  EngineConfig cfg;
  cfg.mode = EngineMode::SgdWor;
  cfg.eta = 1e-6;
  cfg.minibatch = 5;  // n = 4
  cfg.steps = 40;     // 10 epochs
  cfg.seed = 11;
  const Trajectory t = run_sgd(model, d, Vector::Constant(7, 0.05), cfg);
  REQUIRE(t.record_count() == 11);
  for (Index k = 0; k < t.record_count(); ++k)
    CHECK(t.step_index[static_cast<std::size_t>(k)] == 4 * k);
  CHECK_THROWS_AS(
      [&] {
        EngineConfig bad = cfg;
        bad.steps = 42;  // not whole epochs
        run_sgd(model, d, Vector::Constant(7, 0.05), bad);
      }(),
      std::invalid_argument);
}

TEST_CASE("divergence guard fires on an unstable learning rate") {
  QuadraticSetup q(10.0);
  EngineConfig cfg;
  cfg.mode = EngineMode::Gd;
  cfg.eta = 1.0;  // 1 - eta h = -19: wildly unstable
  cfg.steps = 5000;
  cfg.seed = 1;
  cfg.divergence_bound = 1e6;
  Vector init(1);
  init << 1.0;
  CHECK_THROWS_AS(run_sgd(q.model, q.data, init, cfg), DivergenceError);
}

TEST_CASE("sgld: data-free stationary variance is 1/(2 lambda)") {
  const double lambda = 2.0;
  QuadraticSetup q(lambda, 2);
  EngineConfig cfg;
  cfg.mode = EngineMode::Sgld;
  cfg.eta = 1e-3;
  cfg.minibatch = 1;
  cfg.steps = 2000000;
  cfg.seed = 31;
  cfg.thinning = 1;
  const Trajectory t = run_sgld(q.model, q.data, Vector::Zero(2), cfg);
  const Index K = t.record_count();
  const Index burn = K / 5;
  double var = 0;
  long count = 0;
  for (Index k = burn; k < K; ++k) {
    var += t.records.col(k).squaredNorm();
    count += 2;
  }
  var /= count;
  CHECK(var == doctest::Approx(1.0 / (2.0 * lambda)).epsilon(0.05));
}

TEST_CASE("sgld with m = M: drift equals the full-batch gradient step") {
  const Dataset d = gen_regression_dataset(20, 0.1, 3);
  const ModelSpec model = ModelSpec::nonlinear_regression(0.1, 10.0);
  EngineConfig cfg;
  cfg.mode = EngineMode::Sgld;
  cfg.eta = 1e-6;
  cfg.minibatch = 20;
  cfg.steps = 4000;
  cfg.seed = 77;
  Vector init = Vector::Constant(7, 0.05);
  const Trajectory t = run_sgld(model, d, init, cfg);
  // theta_{k+1} - theta_k + eta grad(theta_k) is pure injected noise:
  // zero mean, variance 2 eta per component
  Vector grad(7);
  Vector mean = Vector::Zero(7);
  double var = 0;
  long n = 0;
  Vector prev = t.records.col(0);  // record 0 is the initial point
  for (Index k = 1; k < t.record_count(); ++k) {
    batch_loss_grad(model, d, prev, {}, grad);
    const Vector noise = t.records.col(k) - prev + cfg.eta * grad;
    mean += noise;
    var += noise.squaredNorm();
    n += 7;
    prev = t.records.col(k);
  }
  mean /= static_cast<double>(t.record_count() - 1);
  var /= static_cast<double>(n);
  CHECK(var == doctest::Approx(2.0 * cfg.eta).epsilon(0.05));
  CHECK(mean.cwiseAbs().maxCoeff() <= 5.0 * std::sqrt(2.0 * cfg.eta / 4000));
}

TEST_CASE("sgworld: n = 1 makes the correction vanish") {
  const Dataset d = gen_regression_dataset(20, 0.1, 3);
  const ModelSpec model = ModelSpec::linearized_regression(0.1, 10.0);
  const DeltaLossGradient dlg(model, d, 1e-4, 20);  // m = M, n = 1
  Vector theta = Vector::Constant(3, 0.2);
  CHECK(dlg.value(theta) == 0.0);
  CHECK(dlg.gradient(theta).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("trajectory binary and CSV round trip") {
  const Dataset d = gen_regression_dataset(20, 0.1, 3);
  const ModelSpec model = ModelSpec::nonlinear_regression(0.1, 10.0);
  EngineConfig cfg;
  cfg.mode = EngineMode::SgdWr;
  cfg.eta = 1e-6;
  cfg.minibatch = 5;
  cfg.steps = 64;
  cfg.seed = 123;
  const Trajectory t = run_sgd(model, d, Vector::Constant(7, 0.05), cfg);
  const std::string path = "/tmp/sgdthermo_traj_test.bin";
  save_trajectory(t, path);
  const Trajectory back = load_trajectory(path);
  CHECK(back.total_steps == t.total_steps);
  CHECK(back.config.seed == t.config.seed);
  CHECK(back.config.mode == t.config.mode);
  CHECK((back.records - t.records).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.theta_final - t.theta_final).cwiseAbs().maxCoeff() == 0.0);
  CHECK(back.step_index == t.step_index);
  std::remove(path.c_str());
}
