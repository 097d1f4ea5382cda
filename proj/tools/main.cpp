// Experiment driver: run declarative experiment configs, execute the
// enumeration/finite-difference oracle suite, or rebuild reports from
// stored trajectories.
//
// Exit codes: 0 success, 2 config/validation failure, 3 engine divergence,
// 4 capability error, 1 anything else.

#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "sgdthermo/config.hpp"
#include "sgdthermo/experiment.hpp"

using namespace sgdthermo;

int main(int argc, char** argv) {
  CLI::App app{"sgdthermo: stochastic-thermodynamics analysis of SGD training"};
  app.require_subcommand(1);

  std::string config_path, out_dir, traj_path, theory_path, oracle_out;
  int workers = 0;
  std::uint64_t seed_override = 0;
  double perturb_a2 = 0.0;
  double burn_in = 0.2;

  auto* run = app.add_subcommand("run", "execute an experiment config");
  run->add_option("--config", config_path, "experiment config (TOML)")->required();
  run->add_option("--out", out_dir, "artifact directory (overrides [output])");
  run->add_option("--workers", workers, "worker threads (default: cores)");
  auto* seed_opt = run->add_option("--seed-override", seed_override,
                                   "replace the engine seed");

  auto* oracle = app.add_subcommand("oracle", "run enumeration + FD oracle suite");
  oracle->add_option("--out", oracle_out, "write the JSON report here");
  oracle->add_option("--perturb-a2", perturb_a2,
                     "offset the closed-form a2 (negative-control hook)");

  auto* report = app.add_subcommand("report", "fluctuation report from a trajectory");
  report->add_option("--trajectory", traj_path, "trajectory .bin file")->required();
  report->add_option("--theory", theory_path, "stationary theory .json")->required();
  report->add_option("--out", out_dir, "output directory")->required();
  report->add_option("--burn-in", burn_in, "burn-in fraction (default 0.2)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      ExperimentConfig cfg = ExperimentConfig::from_file(config_path);
      ExperimentOptions opts;
      opts.out_override = out_dir;
      opts.workers = workers;
      if (seed_opt->count() > 0) opts.seed_override = seed_override;
      const std::string dir = run_experiment(cfg, opts);
      std::cout << "artifacts: " << dir << "\n";
      return 0;
    }
    if (oracle->parsed()) {
      const OracleSuiteResult result = oracle_suite(perturb_a2);
      if (!oracle_out.empty()) {
        std::ofstream out(oracle_out);
        out << result.json << "\n";
      } else {
        std::cout << result.json << "\n";
      }
      if (!result.pass) {
        std::cerr << "oracle suite FAILED\n";
        return 1;
      }
      std::cout << "oracle suite passed\n";
      return 0;
    }
    if (report->parsed()) {
      report_from_files(traj_path, theory_path, out_dir, burn_in);
      std::cout << "report written to " << out_dir << "\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << " (step " << e.step() << ")\n";
    return 3;
  } catch (const CapabilityError& e) {
    std::cerr << "capability error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
