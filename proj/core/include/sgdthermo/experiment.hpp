#pragma once

#include <optional>
#include <string>

#include "sgdthermo/config.hpp"
#include "sgdthermo/stationary.hpp"
#include "sgdthermo/trajstats.hpp"

namespace sgdthermo {

// Dataset + model resolved from a config ([data]/[model] sections).
struct Workspace {
  ModelSpec model;
  Dataset data;
};

Workspace build_workspace(const ModelConfig& mc, const DataConfig& dc);

// Stage-1 minimization with seeded multi-start (the tanh network has
// saddles on symmetry manifolds; restarts make the result deterministic
// and land it in the global basin).
Vector stage1_minimum(const ModelSpec& model, const Dataset& data, const InitConfig& init);

// Theoretical stationary state for the configured dynamics.
StationaryTheory build_theory(const ExperimentConfig& cfg, const Workspace& ws,
                              const Vector& theta0_plain);

struct ExperimentOptions {
  std::string out_override;  // overrides [output] directory when non-empty
  int workers = 0;           // 0 = hardware concurrency
  std::optional<std::uint64_t> seed_override;
};

// Executes a config end to end; returns the artifact directory.
std::string run_experiment(const ExperimentConfig& cfg, const ExperimentOptions& opts = {});

// Runs the enumeration and finite-difference oracle suite. perturb_a2 is a
// test hook that offsets the closed-form a2 before comparison (negative
// control). Returns machine-readable JSON; `pass` reflects implementation
// checks only (documented paper-formula deviations are reported, not failed).
struct OracleSuiteResult {
  bool pass = false;
  std::string json;
};

OracleSuiteResult oracle_suite(double perturb_a2 = 0.0);

// Recomputes a fluctuation report from a saved trajectory + theory JSON.
void report_from_files(const std::string& trajectory_path, const std::string& theory_path,
                       const std::string& out_dir, double burn_in_fraction = 0.2);

}  // namespace sgdthermo
