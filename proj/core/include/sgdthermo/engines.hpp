#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sgdthermo/models.hpp"
#include "sgdthermo/rng.hpp"
#include "sgdthermo/types.hpp"

namespace sgdthermo {

enum class EngineMode { Gd, SgdWr, SgdWor, Earthquake, Sgld, Sgworld };

const char* to_string(EngineMode mode);
EngineMode engine_mode_from_string(const std::string& name);

// Run length is given in steps; for the epoch modes (sgd-wor, sgworld) it
// must be a whole number of epochs (n = M/m steps each) and recording
// happens at epoch boundaries.
struct EngineConfig {
  EngineMode mode = EngineMode::SgdWr;
  double eta = 0;
  int minibatch = 1;
  long steps = 0;
  std::uint64_t seed = 0;
  double zeta = 0;              // earthquake noise magnitude
  long thinning = 1;            // record every k-th step (or epoch)
  double divergence_bound = 1e6;  // abort when |theta|_inf exceeds this
  bool record_initial = true;

  void validate(Index M) const;
  bool epoch_mode() const {
    return mode == EngineMode::SgdWor || mode == EngineMode::Sgworld;
  }
  std::string to_json() const;
  static EngineConfig from_json(const std::string& text);
};

struct Trajectory {
  Matrix records;                // N x K, one column per recorded point
  std::vector<long> step_index;  // engine step count at each record
  Vector theta_final;
  long total_steps = 0;
  EngineConfig config;

  Index record_count() const { return records.cols(); }
};

// Uniformly random m-subset of {0..M-1}; independent across calls.
std::vector<int> sample_wr_batch(int M, int m, Rng& rng);

// A uniformly random permutation of {0..M-1} cut into n = M/m consecutive
// batches; batches returned in epoch order.
std::vector<std::vector<int>> sample_wor_epoch(int M, int m, Rng& rng);

Trajectory run_sgd(const ModelSpec& model, const Dataset& data, const Vector& theta_init,
                   const EngineConfig& config);  // gd | sgd-wr | sgd-wor
Trajectory run_earthquake(const ModelSpec& model, const Dataset& data,
                          const Vector& theta_init, const EngineConfig& config);
Trajectory run_sgld(const ModelSpec& model, const Dataset& data, const Vector& theta_init,
                    const EngineConfig& config);
Trajectory run_sgworld(const ModelSpec& model, const Dataset& data,
                       const Vector& theta_init, const EngineConfig& config);

// Dispatch on config.mode.
Trajectory run_engine(const ModelSpec& model, const Dataset& data,
                      const Vector& theta_init, const EngineConfig& config);

// Binary columnar trajectory file: header (magic, N, record count, total
// steps, config JSON) followed by step indices and little-endian doubles.
void save_trajectory(const Trajectory& traj, const std::string& path);
Trajectory load_trajectory(const std::string& path);
void save_trajectory_csv(const Trajectory& traj, const std::string& path);

}  // namespace sgdthermo
