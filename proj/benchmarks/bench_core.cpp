#include <benchmark/benchmark.h>

#include "sgdthermo/diffusion.hpp"
#include "sgdthermo/engines.hpp"
#include "sgdthermo/stationary.hpp"

using namespace sgdthermo;

namespace {

struct RegressionFixture {
  Dataset data = gen_regression_dataset(200, 0.1, 1);
  ModelSpec model = ModelSpec::nonlinear_regression(0.1, 10.0);
  Vector theta0;
  RegressionFixture() {
    Vector start(7);
    start << 1.0, -1.0, 0.5, 0.5, 0.6, -0.6, 0.3;
    theta0 = find_minimum(model, data, start);
  }
};

RegressionFixture& fixture() {
  static RegressionFixture f;
  return f;
}

}  // namespace

static void BM_WrSgdStep(benchmark::State& state) {
  auto& f = fixture();
  EngineConfig cfg;
  cfg.mode = EngineMode::SgdWr;
  cfg.eta = 1e-7;
  cfg.minibatch = static_cast<int>(state.range(0));
  cfg.steps = 20000;
  cfg.seed = 1;
  cfg.thinning = cfg.steps;
  for (auto _ : state) {
    Trajectory t = run_sgd(f.model, f.data, f.theta0, cfg);
    benchmark::DoNotOptimize(t.theta_final);
  }
  state.SetItemsProcessed(state.iterations() * cfg.steps);
}
BENCHMARK(BM_WrSgdStep)->Arg(10)->Arg(50);

static void BM_FullGradient(benchmark::State& state) {
  auto& f = fixture();
  Vector grad(7);
  for (auto _ : state) {
    batch_loss_grad(f.model, f.data, f.theta0, {}, grad);
    benchmark::DoNotOptimize(grad);
  }
  state.SetItemsProcessed(state.iterations() * f.data.sample_count());
}
BENCHMARK(BM_FullGradient);

static void BM_WrDiffusionExact(benchmark::State& state) {
  auto& f = fixture();
  const DerivativeBundle b = evaluate(f.model, f.data, f.theta0, {}, {.want_V = true});
  const Vector gradL = b.grad - b.reg_grad;
  for (auto _ : state) {
    Matrix D = diffusion_wr(b.V, gradL, 1e-7, 10, 200, WrVariant::Exact);
    benchmark::DoNotOptimize(D);
  }
}
BENCHMARK(BM_WrDiffusionExact);

static void BM_WorDiffusionFull(benchmark::State& state) {
  auto& f = fixture();
  const DerivativeBundle b = evaluate(f.model, f.data, f.theta0, {}, {.want_V = true});
  const SecondOrderBundle so = second_order(f.model, f.data, f.theta0, true);
  for (auto _ : state) {
    Matrix D = diffusion_wor(b.V, &so.U, b.reg_grad, b.reg_hess, 1e-7, 10, 200,
                             WorVariant::Full, &so.H);
    benchmark::DoNotOptimize(D);
  }
}
BENCHMARK(BM_WorDiffusionFull);

static void BM_LyapunovSolve(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(7);
  Matrix A(n, n), B(n, n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      A(r, c) = rng.normal();
      B(r, c) = rng.normal();
    }
  const Matrix H = A * A.transpose() + Matrix::Identity(n, n);
  const Matrix D = B * B.transpose();
  for (auto _ : state) {
    Matrix S = solve_lyapunov(H, D, 0.01);
    benchmark::DoNotOptimize(S);
  }
}
BENCHMARK(BM_LyapunovSolve)->Arg(7)->Arg(50)->Arg(490);

BENCHMARK_MAIN();
