#include "sgdthermo/experiment.hpp"

#include <atomic>
#include <chrono>
#include <limits>
#include <mutex>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "sgdthermo/diffusion.hpp"
#include "sgdthermo/hashing.hpp"
#include "sgdthermo/io.hpp"
#include "sgdthermo/svg.hpp"

namespace sgdthermo {

namespace fs = std::filesystem;
using nlohmann::json;

Workspace build_workspace(const ModelConfig& mc, const DataConfig& dc) {
  Workspace ws{ModelSpec::nonlinear_regression(1, 0), {}};
  if (dc.source == "synthetic-regression") {
    ws.data = gen_regression_dataset(dc.M, dc.noise_sd, dc.seed);
  } else if (dc.source == "mnist") {
    std::string images = dc.images_path, labels = dc.labels_path;
    if (images.empty() || labels.empty()) {
      const char* dir = std::getenv("SGDTHERMO_DATA_DIR");
      if (!dir)
        throw ConfigError("MNIST paths not given and SGDTHERMO_DATA_DIR is not set");
      if (images.empty()) images = std::string(dir) + "/train-images-idx3-ubyte";
      if (labels.empty()) labels = std::string(dir) + "/train-labels-idx1-ubyte";
    }
    ws.data = load_mnist(images, labels);
  } else if (dc.source == "csv") {
    ws.data = load_dataset_csv(dc.csv_path);
  } else {
    throw ConfigError("unknown data source: " + dc.source);
  }

  const ModelKind kind = model_kind_from_string(mc.kind);
  switch (kind) {
    case ModelKind::NonlinearRegression:
      ws.model = ModelSpec::nonlinear_regression(mc.eps, mc.lambda);
      break;
    case ModelKind::LinearizedRegression:
      ws.model = ModelSpec::linearized_regression(mc.eps, mc.lambda);
      break;
    case ModelKind::LinearClassifier:
      ws.model = ModelSpec::linear_classifier(static_cast<int>(ws.data.output_dim()),
                                              static_cast<int>(ws.data.input_dim()),
                                              mc.lambda);
      break;
  }
  ws.model.check_dataset(ws.data);
  return ws;
}

Vector stage1_minimum(const ModelSpec& model, const Dataset& data, const InitConfig& init) {
  const Index N = model.param_count;
  Vector best;
  double best_loss = std::numeric_limits<double>::infinity();
  for (int trial = 0; trial < std::max(1, init.minimizer_trials); ++trial) {
    Rng rng(derive_seed(init.minimizer_seed, trial));
    Vector start(N);
    for (Index a = 0; a < N; ++a) start[a] = 0.5 * rng.normal();
    try {
      const Vector theta = find_minimum(model, data, start);
      const Matrix H = second_order(model, data, theta).H;
      Eigen::SelfAdjointEigenSolver<Matrix> es(H);
      if (es.eigenvalues().minCoeff() <= 0) continue;  // saddle, try again
      const double loss = loss_value(model, data, theta);
      if (loss < best_loss) {
        best_loss = loss;
        best = theta;
      }
    } catch (const ConvergenceError&) {
      continue;
    }
  }
  if (best.size() == 0)
    throw ConvergenceError("stage-1 minimization failed for every restart");
  return best;
}

namespace {

Matrix wr_diffusion_at(const ModelSpec& model, const Dataset& data, const Vector& theta,
                       double eta, int m) {
  const int M = static_cast<int>(data.sample_count());
  const DerivativeBundle b = evaluate(model, data, theta, {}, {.want_V = true});
  const Vector gradL = b.grad - b.reg_grad;
  return diffusion_wr(b.V, gradL, eta, m, M, WrVariant::Exact);
}

WorVariant wor_variant_from_string(const std::string& s) {
  if (s == "full") return WorVariant::Full;
  if (s == "dominant") return WorVariant::Dominant;
  if (s == "hdh") return WorVariant::Hdh;
  throw ConfigError("unknown wor_variant: " + s);
}

Matrix wor_diffusion_at(const ModelSpec& model, const Dataset& data, const Vector& theta,
                        double eta, int m, WorVariant variant) {
  const int M = static_cast<int>(data.sample_count());
  const DerivativeBundle b = evaluate(model, data, theta, {}, {.want_V = true});
  if (variant == WorVariant::Hdh) {
    const Matrix H = second_order(model, data, theta).H;
    return diffusion_wor(b.V, nullptr, b.reg_grad, b.reg_hess, eta, m, M, variant, &H);
  }
  const SecondOrderBundle so = second_order(model, data, theta, /*want_U=*/true);
  return diffusion_wor(b.V, &so.U, b.reg_grad, b.reg_hess, eta, m, M, variant, &so.H);
}

}  // namespace

StationaryTheory build_theory(const ExperimentConfig& cfg, const Workspace& ws,
                              const Vector& theta0_plain) {
  const int M = static_cast<int>(ws.data.sample_count());
  const double eta = cfg.engine.eta;
  const int m = cfg.engine.minibatch;
  StationaryTheory th;
  th.eta = eta;
  th.mode = cfg.analysis.theory;

  if (cfg.analysis.theory == "wr") {
    th.theta0 = theta0_plain;
    th.H0 = second_order(ws.model, ws.data, th.theta0).H;
    th.D0 = wr_diffusion_at(ws.model, ws.data, th.theta0, eta, m);
    th.Sigma = solve_lyapunov(th.H0, th.D0, eta);
  } else if (cfg.analysis.theory == "wor") {
    const double n = static_cast<double>(M) / m;
    th.theta0 = find_minimum(ws.model, ws.data, theta0_plain,
                             {LandscapeKind::WorEffective, eta, m});
    th.H0 = n * second_order(ws.model, ws.data, th.theta0).H;
    th.D0 = wor_diffusion_at(ws.model, ws.data, th.theta0, eta, m,
                             wor_variant_from_string(cfg.analysis.wor_variant));
    th.Sigma = solve_lyapunov(th.H0, th.D0, eta);
  } else if (cfg.analysis.theory == "earthquake") {
    th.theta0 = theta0_plain;
    th.H0 = second_order(ws.model, ws.data, th.theta0).H;
    const double z2 = cfg.engine.zeta * cfg.engine.zeta;
    th.D0 = 0.5 * eta * eta * z2 * (th.H0 * th.H0);
    th.Sigma = solve_lyapunov(th.H0, th.D0, eta);
  } else if (cfg.analysis.theory == "sgld") {
    th.theta0 = theta0_plain;
    th.H0 = second_order(ws.model, ws.data, th.theta0).H;
    const Index N = th.H0.rows();
    auto D_fn = [&](const Vector& t) {
      return (eta * Matrix::Identity(N, N) +
              wr_diffusion_at(ws.model, ws.data, t, eta, m))
          .eval();
    };
    th.D0 = D_fn(th.theta0);
    th.Sigma = solve_lyapunov_corrected(th.H0, D_fn, th.theta0, eta, 1.0);
  } else if (cfg.analysis.theory == "sgworld") {
    const double n = static_cast<double>(M) / m;
    th.theta0 = theta0_plain;
    th.H0 = second_order(ws.model, ws.data, th.theta0).H;
    const Index N = th.H0.rows();
    const WorVariant variant = wor_variant_from_string(cfg.analysis.wor_variant);
    auto D_fn = [&](const Vector& t) {
      return (eta * n * Matrix::Identity(N, N) +
              wor_diffusion_at(ws.model, ws.data, t, eta, m, variant))
          .eval();
    };
    th.D0 = D_fn(th.theta0);
    th.Sigma = solve_lyapunov_corrected(th.H0, D_fn, th.theta0, eta, n);
    th.H0 = n * th.H0;  // epoch-level drift Hessian, for trajectory statistics
  } else {
    throw ConfigError("build_theory: no theory for mode " + cfg.analysis.theory);
  }

  const CirculationRates rates = circulation_and_rates(th.H0, th.Sigma, th.D0, eta);
  th.C = rates.C;
  th.entropy_rate = rates.entropy_rate;
  return th;
}

// ---------------------------------------------------------------------
// stationary-type pipeline
// ---------------------------------------------------------------------

namespace {

struct Hist2d {
  int i = -1, j = -1;
  int bins = 0;
  double half_i = 0, half_j = 0;
  std::vector<long> counts;

  void init(const std::vector<int>& idx, int nbins, const Matrix& sigma) {
    if (idx.size() != 2) return;
    i = idx[0] - 1;  // configs use 1-based parameter indices
    j = idx[1] - 1;
    bins = nbins;
    half_i = 5.0 * std::sqrt(std::max(sigma(i, i), 1e-300));
    half_j = 5.0 * std::sqrt(std::max(sigma(j, j), 1e-300));
    counts.assign(static_cast<std::size_t>(bins) * bins, 0);
  }
  bool active() const { return i >= 0; }
  void add(const Vector& dtheta) {
    const double u = (dtheta[i] / half_i + 1.0) * 0.5 * bins;
    const double v = (dtheta[j] / half_j + 1.0) * 0.5 * bins;
    const long bu = static_cast<long>(std::floor(u));
    const long bv = static_cast<long>(std::floor(v));
    if (bu < 0 || bu >= bins || bv < 0 || bv >= bins) return;
    ++counts[static_cast<std::size_t>(bv) * bins + bu];
  }
  void merge(const Hist2d& o) {
    for (std::size_t k = 0; k < counts.size(); ++k) counts[k] += o.counts[k];
  }
};

struct RunResult {
  FluctuationAccumulator acc;
  Hist2d hist;
  long steps_done = 0;
};

struct EnsemblePlan {
  long burn_in_steps = 0;
  long main_steps = 0;
  long chunk_steps = 0;
  long epoch = 1;  // steps per record (n for epoch modes)
};

EnsemblePlan make_plan(const ExperimentConfig& cfg, Index M) {
  EnsemblePlan plan;
  const long n = (cfg.engine.epoch_mode()) ? static_cast<long>(M) / cfg.engine.minibatch : 1;
  plan.epoch = n;
  long steps = cfg.engine.steps;
  if (steps < 0) steps = -steps * n;  // [engine] epochs = ...
  steps = (steps / n) * n;
  plan.burn_in_steps = static_cast<long>(cfg.init.burn_in_fraction * steps / n) * n;
  plan.main_steps = steps - plan.burn_in_steps;
  return plan;
}

Vector draw_initial(const ExperimentConfig& cfg, const StationaryTheory* theory,
                    const Vector& theta_ref, Index N, std::uint64_t seed) {
  Rng rng(seed);
  if (cfg.init.start == "minimum") return theta_ref;
  if (cfg.init.start == "zero") return Vector::Zero(N);
  Vector z(N);
  for (Index a = 0; a < N; ++a) z[a] = rng.normal();
  if (cfg.init.start == "random-offset") return theta_ref + cfg.init.scale * z;
  // stationary-sample
  if (!theory) return theta_ref;
  Eigen::LLT<Matrix> llt(theory->Sigma +
                         1e-18 * theory->Sigma.norm() * Matrix::Identity(N, N));
  if (llt.info() != Eigen::Success) return theta_ref;
  return theta_ref + llt.matrixL() * z;
}

json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_hist2d(const std::string& path, const Hist2d& h) {
  std::ofstream out(path);
  out << "# bins=" << h.bins << " half_i=" << format_double(h.half_i)
      << " half_j=" << format_double(h.half_j) << " params=" << h.i + 1 << ","
      << h.j + 1 << "\n";
  for (int r = 0; r < h.bins; ++r) {
    for (int c = 0; c < h.bins; ++c) {
      if (c) out << ',';
      out << h.counts[static_cast<std::size_t>(r) * h.bins + c];
    }
    out << '\n';
  }
}

bool has_format(const ExperimentConfig& cfg, const std::string& f) {
  return std::find(cfg.output.formats.begin(), cfg.output.formats.end(), f) !=
         cfg.output.formats.end();
}

bool has_check(const ExperimentConfig& cfg, const std::string& c) {
  return std::find(cfg.analysis.checks.begin(), cfg.analysis.checks.end(), c) !=
         cfg.analysis.checks.end();
}

void run_one_member(const ExperimentConfig& cfg, const Workspace& ws,
                    const StationaryTheory* theory, const Vector& theta_ref,
                    const EnsemblePlan& plan, int run_index, RunResult& result,
                    Trajectory* keep_last_chunk) {
  const Index N = ws.model.param_count;
  const std::uint64_t run_seed = derive_seed(cfg.engine.seed, run_index);
  Vector theta =
      draw_initial(cfg, theory, theta_ref, N, derive_seed(run_seed, 999));

  EngineConfig ec = cfg.engine;
  ec.record_initial = false;

  // burn-in: run without per-step recording
  if (plan.burn_in_steps > 0) {
    ec.steps = plan.burn_in_steps;
    ec.thinning = std::max<long>(1, plan.burn_in_steps / plan.epoch);
    ec.seed = derive_seed(run_seed, 0);
    Trajectory t = run_engine(ws.model, ws.data, theta, ec);
    theta = t.theta_final;
  }

  // main phase, chunked, records fed straight into the accumulator
  const long chunk_cols = 500'000;
  long remaining = plan.main_steps;
  long chunk_id = 1;
  result.acc.begin_run();
  while (remaining > 0) {
    const long cols = std::min<long>(chunk_cols, remaining / plan.epoch);
    ec.steps = cols * plan.epoch;
    ec.thinning = 1;
    ec.seed = derive_seed(run_seed, chunk_id);
    Trajectory t = run_engine(ws.model, ws.data, theta, ec);
    result.acc.feed(t.records);
    if (result.hist.active()) {
      Vector d(N);
      for (Index k = 0; k < t.records.cols(); ++k) {
        d = t.records.col(k) - theta_ref;
        result.hist.add(d);
      }
    }
    theta = t.theta_final;
    remaining -= ec.steps;
    result.steps_done += ec.steps;
    ++chunk_id;
    if (keep_last_chunk && remaining <= 0) *keep_last_chunk = std::move(t);
  }
}

void write_summary(const fs::path& dir, const ExperimentConfig& cfg, const json& extra,
                   double wall_seconds) {
  json j;
  j["name"] = cfg.name;
  j["code_version"] = kVersion;
  j["config_hash"] = hex64(fnv1a64(cfg.raw_text));
  j["wall_time_seconds"] = wall_seconds;
  j["master_seed"] = cfg.engine.seed;
  json runs = json::array();
  for (int k = 0; k < cfg.runs; ++k) runs.push_back(derive_seed(cfg.engine.seed, k));
  j["run_seeds"] = std::move(runs);
  j["parameters"] = {
      {"burn_in_fraction", cfg.init.burn_in_fraction},
      {"init", cfg.init.start},
      {"ells", cfg.analysis.ells},
      {"dft_half_bins", cfg.analysis.dft_half_bins},
      {"min_bin_count", cfg.analysis.min_bin_count},
      {"area_block", cfg.analysis.area_block},
      {"wor_variant", cfg.analysis.wor_variant},
  };
  j["results"] = extra;
  std::ofstream out(dir / "summary.json");
  out << j.dump(1) << "\n";
}

std::string theta_hash(const Vector& theta) { return hex64(fnv1a64(theta)); }

json run_stationary(const ExperimentConfig& cfg, const fs::path& dir, int workers) {
  Workspace ws = build_workspace(cfg.model, cfg.data);
  const Index N = ws.model.param_count;
  const Vector theta0_plain = stage1_minimum(ws.model, ws.data, cfg.init);

  std::optional<StationaryTheory> theory;
  if (cfg.analysis.theory != "none") theory = build_theory(cfg, ws, theta0_plain);
  const Vector theta_ref = theory ? theory->theta0 : theta0_plain;

  if (theory) {
    theory->save((dir / "theory.json").string());
    const std::string h = theta_hash(theory->theta0);
    save_matrix_csv((dir / "sigma_theory.csv").string(), theory->Sigma, "Sigma", h);
    save_matrix_csv((dir / "C_theory.csv").string(), theory->C, "C", h);
    save_matrix_csv((dir / "H0.csv").string(), theory->H0, "H0", h);
    save_matrix_csv((dir / "D0.csv").string(), theory->D0, "D0", h);
  }

  const EnsemblePlan plan = make_plan(cfg, ws.data.sample_count());

  FluctuationOptions fopts;
  fopts.ells = cfg.analysis.ells;
  fopts.dft_half_bins = cfg.analysis.dft_half_bins;
  fopts.min_bin_count = cfg.analysis.min_bin_count;
  fopts.area_block = cfg.analysis.area_block;

  StationaryTheory stats_theory;
  if (theory) {
    stats_theory = *theory;
  } else {
    // theory-free run: moments about theta0 only
    stats_theory.theta0 = theta0_plain;
    stats_theory.H0 = Matrix::Identity(N, N);
    stats_theory.D0 = Matrix::Identity(N, N);
    stats_theory.Sigma = Matrix::Identity(N, N);
    stats_theory.C = Matrix::Zero(N, N);
    stats_theory.eta = cfg.engine.eta;
    stats_theory.entropy_rate = 0;
  }

  std::vector<RunResult> results;
  results.reserve(cfg.runs);
  for (int k = 0; k < cfg.runs; ++k) {
    results.emplace_back(RunResult{FluctuationAccumulator(stats_theory, fopts), {}, 0});
    if (!cfg.analysis.hist2d.empty() && theory)
      results.back().hist.init(cfg.analysis.hist2d, cfg.analysis.hist2d_bins, theory->Sigma);
  }

  Trajectory fdt_traj;
  const bool want_fdt = has_check(cfg, "fdt") && theory && plan.epoch == 1;

  std::atomic<int> next_run{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto worker = [&]() {
    for (;;) {
      const int k = next_run.fetch_add(1);
      if (k >= cfg.runs) return;
      try {
        Trajectory* keep = (want_fdt && k == 0) ? &fdt_traj : nullptr;
        run_one_member(cfg, ws, theory ? &*theory : nullptr, theta_ref, plan, k,
                       results[static_cast<std::size_t>(k)], keep);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  const int W = workers > 0 ? workers
                            : std::max(1u, std::thread::hardware_concurrency());
  {
    std::vector<std::thread> pool;
    for (int w = 0; w < std::min(W, cfg.runs); ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  FluctuationAccumulator merged = std::move(results[0].acc);
  Hist2d hist = std::move(results[0].hist);
  long total_steps = results[0].steps_done;
  for (std::size_t k = 1; k < results.size(); ++k) {
    merged.merge(results[k].acc);
    if (hist.active()) hist.merge(results[k].hist);
    total_steps += results[k].steps_done;
  }

  FluctuationReport report = merged.finalize();
  if (want_fdt && fdt_traj.record_count() > 100) {
    const long max_records = cfg.analysis.fdt_records;
    if (fdt_traj.record_count() > max_records) {
      fdt_traj.records =
          fdt_traj.records.rightCols(max_records).eval();
      fdt_traj.step_index.erase(fdt_traj.step_index.begin(),
                                fdt_traj.step_index.end() - max_records);
    }
    auto [lhs, rhs] = fdt_trace_check(fdt_traj, ws.model, ws.data, theory->theta0,
                                      cfg.engine.eta, theory->D0);
    report.fdt_lhs = lhs;
    report.fdt_rhs = rhs;
    report.has_fdt = true;
  }

  const std::string h = theta_hash(theta_ref);
  save_matrix_csv((dir / "sigma_empirical.csv").string(), report.sigma_emp, "Sigma_emp", h);
  save_matrix_csv((dir / "C_empirical.csv").string(), report.area_rate_emp, "C_emp", h);
  save_matrix_csv((dir / "C_empirical_se.csv").string(), report.area_rate_se, "C_emp_se", h);
  {
    std::vector<std::vector<double>> rows;
    for (Index a = 0; a < N; ++a) rows.push_back({static_cast<double>(a + 1), report.mu_emp[a]});
    save_table_csv((dir / "mu_empirical.csv").string(), {"param", "mu"}, rows);
  }
  if (has_format(cfg, "json")) report.save_json((dir / "fluctuation_report.json").string());
  report.save_csv(dir.string());
  if (theory) {
    std::vector<std::vector<double>> rows;
    for (const auto& s : report.per_ell)
      rows.push_back({static_cast<double>(s.ell), s.mean_sigma / s.ell,
                      theory->entropy_rate, s.mean_sigma,
                      theory->entropy_rate * s.ell});
    save_table_csv((dir / "entropy_vs_ell.csv").string(),
                   {"ell", "mean_sigma_per_step", "theory_rate", "mean_sigma",
                    "theory_sigma"},
                   rows);
  }
  if (report.has_fdt) {
    save_table_csv((dir / "fdt.csv").string(), {"lhs", "rhs", "ratio"},
                   {{report.fdt_lhs, report.fdt_rhs,
                     report.fdt_rhs != 0 ? report.fdt_lhs / report.fdt_rhs : 0}});
  }
  if (hist.active()) write_hist2d((dir / "hist2d.csv").string(), hist);

  if (cfg.output.save_trajectories) {
    // a short representative trajectory for the report subcommand
    EngineConfig ec = cfg.engine;
    ec.steps = std::min<long>(cfg.engine.steps, 20000 * plan.epoch);
    ec.thinning = 1;
    ec.seed = derive_seed(cfg.engine.seed, 777);
    ec.record_initial = true;
    Trajectory t = run_engine(ws.model, ws.data, theta_ref, ec);
    save_trajectory(t, (dir / "trajectory_sample.bin").string());
    if (t.record_count() <= 20001)
      save_trajectory_csv(t, (dir / "trajectory_sample.csv").string());
  }

  if (has_format(cfg, "svg") && theory) {
    SvgPlotSpec plot;
    plot.title = "stationary covariance: theory vs simulation";
    plot.x_label = "|Sigma| simulation";
    plot.y_label = "|Sigma| theory";
    plot.log_x = plot.log_y = true;
    plot.diagonal = true;
    SvgSeries s;
    s.label = "Sigma elements";
    for (Index r = 0; r < N; ++r)
      for (Index c = r; c < N; ++c) {
        s.x.push_back(std::abs(report.sigma_emp(r, c)));
        s.y.push_back(std::abs(theory->Sigma(r, c)));
      }
    plot.series.push_back(std::move(s));
    SvgSeries c;
    c.label = "C elements";
    c.color = "#d62728";
    for (Index r = 0; r < N; ++r)
      for (Index cc = r + 1; cc < N; ++cc) {
        c.x.push_back(std::abs(report.area_rate_emp(r, cc)));
        c.y.push_back(std::abs(theory->C(r, cc)));
      }
    plot.series.push_back(std::move(c));
    write_svg_plot((dir / "sigma_scatter.svg").string(), plot);

    for (const auto& s2 : report.per_ell) {
      if (s2.dft_curve.empty()) continue;
      SvgPlotSpec dft;
      dft.title = "detailed fluctuation theorem, l=" + std::to_string(s2.ell);
      dft.x_label = "sigma";
      dft.y_label = "ln P(-s)/P(s)";
      SvgSeries pts, line;
      pts.label = "measured";
      for (const auto& p : s2.dft_curve) {
        pts.x.push_back(p.sigma);
        pts.y.push_back(p.log_ratio);
        line.x.push_back(p.sigma);
        line.y.push_back(-p.sigma);
      }
      line.label = "-sigma";
      line.line = true;
      line.color = "#333333";
      dft.series.push_back(std::move(pts));
      dft.series.push_back(std::move(line));
      write_svg_plot((dir / ("dft_l" + std::to_string(s2.ell) + ".svg")).string(), dft);
    }
  }

  json extra;
  extra["theta0_plain"] =
      std::vector<double>(theta0_plain.data(), theta0_plain.data() + theta0_plain.size());
  extra["total_stationary_steps"] = total_steps;
  extra["n_samples"] = report.n_samples;
  if (theory) {
    extra["theta_ref"] = std::vector<double>(theta_ref.data(), theta_ref.data() + N);
    extra["trace_sigma_theory"] = theory->Sigma.trace();
    extra["trace_sigma_empirical"] = report.sigma_emp.trace();
    extra["entropy_rate_theory"] = theory->entropy_rate;
    json ift = json::array();
    for (const auto& s : report.per_ell)
      ift.push_back({{"ell", s.ell},
                     {"ift", s.ift},
                     {"ift_se", s.ift_se},
                     {"mean_sigma", s.mean_sigma},
                     {"n_windows", s.n_windows}});
    extra["ift"] = std::move(ift);
    if (report.has_fdt) extra["fdt"] = {{"lhs", report.fdt_lhs}, {"rhs", report.fdt_rhs}};
  }
  return extra;
}

// ---------------------------------------------------------------------
// training-curves pipeline (relative loss error vs steps, WR vs WOR)
// ---------------------------------------------------------------------

json run_training_curves(const ExperimentConfig& cfg, const fs::path& dir, int workers) {
  Workspace ws = build_workspace(cfg.model, cfg.data);
  const Index N = ws.model.param_count;
  const Vector theta0 = stage1_minimum(ws.model, ws.data, cfg.init);
  const double loss0 = loss_value(ws.model, ws.data, theta0);
  const int M = static_cast<int>(ws.data.sample_count());
  const long n = M / cfg.engine.minibatch;
  long steps = cfg.engine.steps;
  if (steps < 0) steps = -steps * n;

  const long record_every = cfg.curves.record_every;
  if (record_every % n != 0 && std::find(cfg.curves.modes.begin(), cfg.curves.modes.end(),
                                         std::string("sgd-wor")) != cfg.curves.modes.end())
    throw ConfigError("training_curves: record_every must be a multiple of the epoch");
  const long points = steps / record_every;

  struct ModeCurve {
    std::vector<long double> sum;
    std::vector<long double> sumsq;
  };
  std::vector<ModeCurve> curves(cfg.curves.modes.size());
  for (auto& c : curves) {
    c.sum.assign(points + 1, 0.0L);
    c.sumsq.assign(points + 1, 0.0L);
  }
  std::mutex merge_mutex;

  std::atomic<int> next{0};
  std::exception_ptr first_error;
  auto worker = [&]() {
    for (;;) {
      const int job = next.fetch_add(1);
      if (job >= cfg.runs * static_cast<int>(cfg.curves.modes.size())) return;
      const int run = job % cfg.runs;
      const std::size_t mode_idx = static_cast<std::size_t>(job / cfg.runs);
      try {
        EngineConfig ec = cfg.engine;
        ec.mode = engine_mode_from_string(cfg.curves.modes[mode_idx]);
        ec.steps = steps;
        ec.seed = derive_seed(cfg.engine.seed, run);
        ec.record_initial = true;
        ec.thinning = ec.epoch_mode() ? record_every / n : record_every;
        Rng rng(derive_seed(derive_seed(cfg.engine.seed, run), 555));
        Vector init(N);
        for (Index a = 0; a < N; ++a) init[a] = cfg.init.scale * rng.normal();
        const Trajectory t = run_engine(ws.model, ws.data, init, ec);
        std::vector<double> rel(t.record_count());
        for (Index k = 0; k < t.record_count(); ++k)
          rel[static_cast<std::size_t>(k)] =
              loss_value(ws.model, ws.data, t.records.col(k)) / loss0 - 1.0;
        std::lock_guard<std::mutex> lock(merge_mutex);
        auto& c = curves[mode_idx];
        for (std::size_t k = 0; k < rel.size() && k < c.sum.size(); ++k) {
          c.sum[k] += rel[k];
          c.sumsq[k] += static_cast<long double>(rel[k]) * rel[k];
        }
      } catch (...) {
        std::lock_guard<std::mutex> lock(merge_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  const int W = workers > 0 ? workers
                            : std::max(1u, std::thread::hardware_concurrency());
  {
    std::vector<std::thread> pool;
    for (int w = 0; w < W; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  std::vector<std::string> cols = {"step"};
  for (const auto& mode : cfg.curves.modes) {
    cols.push_back("rel_err_" + mode);
    cols.push_back("rel_err_se_" + mode);
  }
  std::vector<std::vector<double>> rows;
  for (long k = 0; k <= points; ++k) {
    std::vector<double> row = {static_cast<double>(k * record_every)};
    for (const auto& c : curves) {
      const double mean = static_cast<double>(c.sum[k] / cfg.runs);
      const double var =
          std::max(0.0, static_cast<double>(c.sumsq[k] / cfg.runs) - mean * mean);
      row.push_back(mean);
      row.push_back(cfg.runs > 1 ? std::sqrt(var / (cfg.runs - 1)) : 0.0);
    }
    rows.push_back(std::move(row));
  }
  save_table_csv((dir / "loss_curves.csv").string(), cols, rows);

  if (has_format(cfg, "svg")) {
    SvgPlotSpec plot;
    plot.title = "relative loss error vs training steps";
    plot.x_label = "step";
    plot.y_label = "L/L0 - 1";
    plot.log_y = true;
    const char* colors[] = {"#1f77b4", "#17becf", "#d62728", "#2ca02c"};
    for (std::size_t mi = 0; mi < cfg.curves.modes.size(); ++mi) {
      SvgSeries s;
      s.label = cfg.curves.modes[mi];
      s.color = colors[mi % 4];
      s.line = true;
      for (long k = 0; k <= points; ++k) {
        s.x.push_back(static_cast<double>(k * record_every));
        s.y.push_back(static_cast<double>(curves[mi].sum[k] / cfg.runs));
      }
      plot.series.push_back(std::move(s));
    }
    write_svg_plot((dir / "loss_curves.svg").string(), plot);
  }

  json extra;
  for (std::size_t mi = 0; mi < cfg.curves.modes.size(); ++mi)
    extra["final_rel_err_" + cfg.curves.modes[mi]] =
        static_cast<double>(curves[mi].sum[points] / cfg.runs);
  extra["loss_at_minimum"] = loss0;
  return extra;
}

// ---------------------------------------------------------------------
// posterior-scan pipeline (theory-side KL vs learning rate)
// ---------------------------------------------------------------------

namespace {

double fit_loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int n = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0) || !(y[i] > 0)) continue;
    const double lx = std::log(x[i]), ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
    ++n;
  }
  if (n < 2) return std::numeric_limits<double>::quiet_NaN();
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace

json run_posterior_scan(const ExperimentConfig& cfg, const fs::path& dir, int /*workers*/) {
  Workspace ws = build_workspace(cfg.model, cfg.data);
  if (ws.model.kind != ModelKind::LinearizedRegression)
    throw ConfigError("posterior-scan requires the linearized-regression model");
  const int M = static_cast<int>(ws.data.sample_count());
  const int m = cfg.scan.m;
  if (M % m != 0) throw ConfigError("posterior-scan: M must be a multiple of m");
  const double n = static_cast<double>(M) / m;
  const Index N = ws.model.param_count;

  // exact posterior
  Matrix Psi(N, M);
  for (int i = 0; i < M; ++i) {
    double psi[3];
    linearized_basis(ws.data.inputs(0, i), psi);
    for (Index a = 0; a < 3; ++a) Psi(a, i) = psi[a];
  }
  const Vector y = ws.data.outputs.row(0).transpose();
  auto [post, kl_zero] =
      exact_posterior_and_kl(Psi, y, ws.model.eps, ws.model.lambda,
                             Matrix::Identity(N, N).eval());
  (void)kl_zero;
  const Matrix H0 = second_order(ws.model, ws.data, post.theta0).H;

  std::vector<double> etas = cfg.scan.etas;
  std::sort(etas.begin(), etas.end());
  std::vector<double> kl_sgld, kl_sgworld, kl_unc;
  for (const double eta : etas) {
    auto Dp_fn = [&](const Vector& t) {
      return (eta * Matrix::Identity(N, N) + wr_diffusion_at(ws.model, ws.data, t, eta, m))
          .eval();
    };
    const Matrix sigma_sgld = solve_lyapunov_corrected(H0, Dp_fn, post.theta0, eta, 1.0);
    kl_sgld.push_back(gaussian_kl_bits(sigma_sgld, post.sigma_po));

    auto Dpp_fn = [&](const Vector& t) {
      return (eta * n * Matrix::Identity(N, N) +
              wor_diffusion_at(ws.model, ws.data, t, eta, m, WorVariant::Full))
          .eval();
    };
    const Matrix sigma_sgw = solve_lyapunov_corrected(H0, Dpp_fn, post.theta0, eta, n);
    kl_sgworld.push_back(gaussian_kl_bits(sigma_sgw, post.sigma_po));

    // uncorrected SGWORLD: drift on the shifted effective landscape
    const Vector theta_hat = find_minimum(ws.model, ws.data, post.theta0,
                                          {LandscapeKind::WorEffective, eta, m});
    DeltaLossGradient dlg(ws.model, ws.data, eta, m);
    const Matrix H_delta = fd_hessian_of_gradient(
        [&](const Vector& t) { return dlg.gradient(t); }, theta_hat, 1e-4);
    const Matrix H_hat = n * second_order(ws.model, ws.data, theta_hat).H + H_delta;
    const Matrix sigma_unc =
        solve_lyapunov_corrected(H_hat, Dpp_fn, theta_hat, eta, 1.0);
    const Vector offset = theta_hat - post.theta0;
    kl_unc.push_back(gaussian_kl_bits(sigma_unc, post.sigma_po, &offset));
  }

  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < etas.size(); ++i)
    rows.push_back({etas[i], kl_sgld[i], kl_sgworld[i], kl_unc[i]});
  save_table_csv((dir / "kl_vs_eta.csv").string(),
                 {"eta", "kl_sgld", "kl_sgworld", "kl_sgworld_uncorrected"}, rows);

  if (has_format(cfg, "svg")) {
    SvgPlotSpec plot;
    plot.title = "KL divergence to the exact posterior";
    plot.x_label = "eta";
    plot.y_label = "KL (bits)";
    plot.log_x = plot.log_y = true;
    const char* names[] = {"sgld", "sgworld", "sgworld uncorrected"};
    const char* colors[] = {"#d62728", "#1f77b4", "#2ca02c"};
    const std::vector<double>* ys[] = {&kl_sgld, &kl_sgworld, &kl_unc};
    for (int s = 0; s < 3; ++s) {
      SvgSeries ser;
      ser.label = names[s];
      ser.color = colors[s];
      ser.line = true;
      ser.x = etas;
      ser.y = *ys[s];
      plot.series.push_back(std::move(ser));
    }
    write_svg_plot((dir / "kl_vs_eta.svg").string(), plot);
  }

  json extra;
  extra["slope_sgld"] = fit_loglog_slope(etas, kl_sgld);
  extra["slope_sgworld"] = fit_loglog_slope(etas, kl_sgworld);
  // small-eta behaviour of the uncorrected variant (two smallest points)
  if (etas.size() >= 2) {
    extra["slope_sgworld_uncorrected_small_eta"] =
        std::log(kl_unc[1] / kl_unc[0]) / std::log(etas[1] / etas[0]);
  }
  extra["theta0"] =
      std::vector<double>(post.theta0.data(), post.theta0.data() + post.theta0.size());
  extra["sigma_po"] = matrix_json(post.sigma_po);
  return extra;
}

}  // namespace

std::string run_experiment(const ExperimentConfig& cfg, const ExperimentOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentConfig c = cfg;
  if (opts.seed_override) c.engine.seed = *opts.seed_override;
  const fs::path dir =
      opts.out_override.empty() ? fs::path(c.output.directory) : fs::path(opts.out_override);
  fs::create_directories(dir);

  json extra;
  switch (c.type) {
    case ExperimentType::Stationary:
      extra = run_stationary(c, dir, opts.workers);
      break;
    case ExperimentType::TrainingCurves:
      extra = run_training_curves(c, dir, opts.workers);
      break;
    case ExperimentType::PosteriorScan:
      extra = run_posterior_scan(c, dir, opts.workers);
      break;
  }
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_summary(dir, c, extra, wall);
  return dir.string();
}

void report_from_files(const std::string& trajectory_path, const std::string& theory_path,
                       const std::string& out_dir, double burn_in_fraction) {
  const Trajectory traj = load_trajectory(trajectory_path);
  const StationaryTheory theory = StationaryTheory::load(theory_path);
  fs::create_directories(out_dir);
  FluctuationOptions fopts;
  FluctuationAccumulator acc(theory, fopts);
  const Index burn = static_cast<Index>(burn_in_fraction * traj.record_count());
  acc.begin_run();
  acc.feed(traj.records.rightCols(traj.record_count() - burn));
  FluctuationReport rep = acc.finalize();
  rep.save_json((fs::path(out_dir) / "fluctuation_report.json").string());
  rep.save_csv(out_dir);
  const std::string h = hex64(fnv1a64(theory.theta0));
  save_matrix_csv((fs::path(out_dir) / "sigma_empirical.csv").string(), rep.sigma_emp,
                  "Sigma_emp", h);
  save_matrix_csv((fs::path(out_dir) / "C_empirical.csv").string(), rep.area_rate_emp,
                  "C_emp", h);
}

}  // namespace sgdthermo
