#include "sgdthermo/engines.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "sgdthermo/diffusion.hpp"
#include "sgdthermo/io.hpp"

namespace sgdthermo {

using nlohmann::json;

const char* to_string(EngineMode mode) {
  switch (mode) {
    case EngineMode::Gd: return "gd";
    case EngineMode::SgdWr: return "sgd-wr";
    case EngineMode::SgdWor: return "sgd-wor";
    case EngineMode::Earthquake: return "earthquake";
    case EngineMode::Sgld: return "sgld";
    case EngineMode::Sgworld: return "sgworld";
  }
  return "?";
}

EngineMode engine_mode_from_string(const std::string& name) {
  if (name == "gd") return EngineMode::Gd;
  if (name == "sgd-wr") return EngineMode::SgdWr;
  if (name == "sgd-wor") return EngineMode::SgdWor;
  if (name == "earthquake") return EngineMode::Earthquake;
  if (name == "sgld") return EngineMode::Sgld;
  if (name == "sgworld") return EngineMode::Sgworld;
  throw ConfigError("unknown engine mode: " + name);
}

void EngineConfig::validate(Index M) const {
  if (eta <= 0) throw std::invalid_argument("engine: eta must be > 0");
  if (steps < 1) throw std::invalid_argument("engine: steps must be >= 1");
  if (thinning < 1) throw std::invalid_argument("engine: thinning must be >= 1");
  if (zeta < 0) throw std::invalid_argument("engine: zeta must be >= 0");
  if (divergence_bound <= 0) throw std::invalid_argument("engine: divergence bound <= 0");
  if (mode == EngineMode::SgdWr || mode == EngineMode::SgdWor ||
      mode == EngineMode::Sgld || mode == EngineMode::Sgworld) {
    if (minibatch < 1 || minibatch > M)
      throw std::invalid_argument("engine: minibatch must satisfy 1 <= m <= M");
  }
  if (epoch_mode()) {
    if (M % minibatch != 0)
      throw std::invalid_argument("engine: WOR modes need M to be a multiple of m");
    const long n = M / minibatch;
    if (steps % n != 0)
      throw std::invalid_argument("engine: WOR modes need steps to be whole epochs");
  }
}

std::string EngineConfig::to_json() const {
  json j;
  j["mode"] = to_string(mode);
  j["eta"] = eta;
  j["minibatch"] = minibatch;
  j["steps"] = steps;
  j["seed"] = seed;
  j["zeta"] = zeta;
  j["thinning"] = thinning;
  j["divergence_bound"] = divergence_bound;
  j["record_initial"] = record_initial;
  return j.dump();
}

EngineConfig EngineConfig::from_json(const std::string& text) {
  const json j = json::parse(text);
  EngineConfig c;
  c.mode = engine_mode_from_string(j.at("mode").get<std::string>());
  c.eta = j.at("eta").get<double>();
  c.minibatch = j.at("minibatch").get<int>();
  c.steps = j.at("steps").get<long>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.zeta = j.value("zeta", 0.0);
  c.thinning = j.value("thinning", 1L);
  c.divergence_bound = j.value("divergence_bound", 1e6);
  c.record_initial = j.value("record_initial", true);
  return c;
}

std::vector<int> sample_wr_batch(int M, int m, Rng& rng) {
  if (m < 1 || m > M) throw std::invalid_argument("sample_wr_batch: need 1 <= m <= M");
  std::vector<int> pool(M);
  std::iota(pool.begin(), pool.end(), 0);
  for (int j = 0; j < m; ++j) {
    const int k = j + static_cast<int>(rng.below(static_cast<std::uint64_t>(M - j)));
    std::swap(pool[j], pool[k]);
  }
  pool.resize(m);
  return pool;
}

std::vector<std::vector<int>> sample_wor_epoch(int M, int m, Rng& rng) {
  if (m < 1 || m > M) throw std::invalid_argument("sample_wor_epoch: need 1 <= m <= M");
  if (M % m != 0) throw std::invalid_argument("sample_wor_epoch: M must be a multiple of m");
  std::vector<int> perm(M);
  std::iota(perm.begin(), perm.end(), 0);
  for (int j = M - 1; j > 0; --j) {
    const int k = static_cast<int>(rng.below(static_cast<std::uint64_t>(j + 1)));
    std::swap(perm[j], perm[k]);
  }
  const int n = M / m;
  std::vector<std::vector<int>> batches(n);
  for (int t = 0; t < n; ++t)
    batches[t].assign(perm.begin() + t * m, perm.begin() + (t + 1) * m);
  return batches;
}

namespace {

// partial Fisher-Yates on a persistent pool; uniform m-subset per call
inline void draw_wr_batch(std::vector<int>& pool, int m, Rng& rng) {
  const int M = static_cast<int>(pool.size());
  for (int j = 0; j < m; ++j) {
    const int k = j + static_cast<int>(rng.below(static_cast<std::uint64_t>(M - j)));
    std::swap(pool[j], pool[k]);
  }
}

inline void shuffle_all(std::vector<int>& perm, Rng& rng) {
  for (int j = static_cast<int>(perm.size()) - 1; j > 0; --j) {
    const int k = static_cast<int>(rng.below(static_cast<std::uint64_t>(j + 1)));
    std::swap(perm[j], perm[k]);
  }
}

class Recorder {
public:
  Recorder(Index N, long steps, long interval, bool record_initial, long stride)
      : interval_(interval), stride_(stride) {
    const long points = steps / (interval * stride);
    const Index total = points + (record_initial ? 1 : 0);
    records_.resize(N, total);
    step_index_.reserve(total);
  }

  void record_if_due(const Vector& theta, long unit /* step or epoch */, long step) {
    if (unit % interval_ != 0) return;
    records_.col(next_) = theta;
    step_index_.push_back(step);
    ++next_;
  }

  void take(Trajectory& out) {
    records_.conservativeResize(Eigen::NoChange, next_);
    out.records = std::move(records_);
    out.step_index = std::move(step_index_);
  }

private:
  Matrix records_;
  std::vector<long> step_index_;
  long interval_;
  long stride_;
  Index next_ = 0;
};

inline void check_divergence(const Vector& theta, double bound, long step) {
  if (!(theta.lpNorm<Eigen::Infinity>() <= bound))
    throw DivergenceError("engine diverged: |theta|_inf exceeded bound", step);
}

void common_prologue(const ModelSpec& model, const Dataset& data,
                     const Vector& theta_init, const EngineConfig& config) {
  model.check_dataset(data);
  config.validate(data.sample_count());
  if (theta_init.size() != model.param_count)
    throw std::invalid_argument("engine: theta_init size mismatch");
}

}  // namespace

Trajectory run_sgd(const ModelSpec& model, const Dataset& data, const Vector& theta_init,
                   const EngineConfig& config) {
  if (config.mode != EngineMode::Gd && config.mode != EngineMode::SgdWr &&
      config.mode != EngineMode::SgdWor)
    throw std::invalid_argument("run_sgd expects mode gd, sgd-wr or sgd-wor");
  common_prologue(model, data, theta_init, config);

  const int M = static_cast<int>(data.sample_count());
  const int m = config.minibatch;
  const Index N = model.param_count;
  Rng rng(derive_seed(config.seed, 0));

  Trajectory out;
  out.config = config;
  out.total_steps = config.steps;

  Vector theta = theta_init;
  Vector grad(N);

  if (config.mode == EngineMode::Gd) {
    Recorder rec(N, config.steps, config.thinning, config.record_initial, 1);
    if (config.record_initial) rec.record_if_due(theta, 0, 0);
    for (long t = 1; t <= config.steps; ++t) {
      batch_loss_grad(model, data, theta, {}, grad);
      theta.noalias() -= config.eta * grad;
      if ((t & 1023) == 0) check_divergence(theta, config.divergence_bound, t);
      rec.record_if_due(theta, t, t);
    }
    check_divergence(theta, config.divergence_bound, config.steps);
    rec.take(out);
  } else if (config.mode == EngineMode::SgdWr) {
    Recorder rec(N, config.steps, config.thinning, config.record_initial, 1);
    if (config.record_initial) rec.record_if_due(theta, 0, 0);
    std::vector<int> pool(M);
    std::iota(pool.begin(), pool.end(), 0);
    for (long t = 1; t <= config.steps; ++t) {
      draw_wr_batch(pool, m, rng);
      batch_loss_grad(model, data, theta, std::span<const int>(pool.data(), m), grad);
      theta.noalias() -= config.eta * grad;
      if ((t & 1023) == 0) check_divergence(theta, config.divergence_bound, t);
      rec.record_if_due(theta, t, t);
    }
    check_divergence(theta, config.divergence_bound, config.steps);
    rec.take(out);
  } else {  // SgdWor: record at epoch boundaries
    const long n = M / m;
    const long epochs = config.steps / n;
    Recorder rec(N, config.steps, config.thinning, config.record_initial, n);
    if (config.record_initial) rec.record_if_due(theta, 0, 0);
    std::vector<int> perm(M);
    std::iota(perm.begin(), perm.end(), 0);
    for (long ep = 1; ep <= epochs; ++ep) {
      shuffle_all(perm, rng);
      for (long t = 0; t < n; ++t) {
        batch_loss_grad(model, data, theta,
                        std::span<const int>(perm.data() + t * m, m), grad);
        theta.noalias() -= config.eta * grad;
      }
      check_divergence(theta, config.divergence_bound, ep * n);
      rec.record_if_due(theta, ep, ep * n);
    }
    rec.take(out);
  }
  out.theta_final = std::move(theta);
  return out;
}

Trajectory run_earthquake(const ModelSpec& model, const Dataset& data,
                          const Vector& theta_init, const EngineConfig& config) {
  if (config.mode != EngineMode::Earthquake)
    throw std::invalid_argument("run_earthquake expects mode earthquake");
  common_prologue(model, data, theta_init, config);
  const Index N = model.param_count;
  Rng rng(derive_seed(config.seed, 0));

  Trajectory out;
  out.config = config;
  out.total_steps = config.steps;
  Vector theta = theta_init;
  Vector shifted(N), grad(N);
  Recorder rec(N, config.steps, config.thinning, config.record_initial, 1);
  if (config.record_initial) rec.record_if_due(theta, 0, 0);
  for (long t = 1; t <= config.steps; ++t) {
    for (Index a = 0; a < N; ++a) shifted[a] = theta[a] + config.zeta * rng.normal();
    batch_loss_grad(model, data, shifted, {}, grad);
    theta.noalias() -= config.eta * grad;
    if ((t & 1023) == 0) check_divergence(theta, config.divergence_bound, t);
    rec.record_if_due(theta, t, t);
  }
  check_divergence(theta, config.divergence_bound, config.steps);
  rec.take(out);
  out.theta_final = std::move(theta);
  return out;
}

Trajectory run_sgld(const ModelSpec& model, const Dataset& data, const Vector& theta_init,
                    const EngineConfig& config) {
  if (config.mode != EngineMode::Sgld)
    throw std::invalid_argument("run_sgld expects mode sgld");
  common_prologue(model, data, theta_init, config);
  const int M = static_cast<int>(data.sample_count());
  const int m = config.minibatch;
  const Index N = model.param_count;
  Rng rng(derive_seed(config.seed, 0));

  Trajectory out;
  out.config = config;
  out.total_steps = config.steps;
  Vector theta = theta_init;
  Vector grad(N);
  const double noise_sd = std::sqrt(2.0 * config.eta);
  std::vector<int> pool(M);
  std::iota(pool.begin(), pool.end(), 0);
  Recorder rec(N, config.steps, config.thinning, config.record_initial, 1);
  if (config.record_initial) rec.record_if_due(theta, 0, 0);
  for (long t = 1; t <= config.steps; ++t) {
    draw_wr_batch(pool, m, rng);
    batch_loss_grad(model, data, theta, std::span<const int>(pool.data(), m), grad);
    theta.noalias() -= config.eta * grad;
    for (Index a = 0; a < N; ++a) theta[a] += noise_sd * rng.normal();
    if ((t & 1023) == 0) check_divergence(theta, config.divergence_bound, t);
    rec.record_if_due(theta, t, t);
  }
  check_divergence(theta, config.divergence_bound, config.steps);
  rec.take(out);
  out.theta_final = std::move(theta);
  return out;
}

Trajectory run_sgworld(const ModelSpec& model, const Dataset& data,
                       const Vector& theta_init, const EngineConfig& config) {
  if (config.mode != EngineMode::Sgworld)
    throw std::invalid_argument("run_sgworld expects mode sgworld");
  common_prologue(model, data, theta_init, config);
  const int M = static_cast<int>(data.sample_count());
  const int m = config.minibatch;
  const long n = M / m;
  const long epochs = config.steps / n;
  const Index N = model.param_count;
  Rng rng(derive_seed(config.seed, 0));

  DeltaLossGradient delta_grad(model, data, config.eta, m);

  Trajectory out;
  out.config = config;
  out.total_steps = config.steps;
  Vector theta = theta_init;
  Vector theta_epoch_start(N), grad(N);
  const double noise_sd = std::sqrt(2.0 * config.eta * static_cast<double>(n));
  std::vector<int> perm(M);
  std::iota(perm.begin(), perm.end(), 0);
  Recorder rec(N, config.steps, config.thinning, config.record_initial, n);
  if (config.record_initial) rec.record_if_due(theta, 0, 0);
  for (long ep = 1; ep <= epochs; ++ep) {
    theta_epoch_start = theta;
    shuffle_all(perm, rng);
    for (long t = 0; t < n; ++t) {
      batch_loss_grad(model, data, theta,
                      std::span<const int>(perm.data() + t * m, m), grad);
      theta.noalias() -= config.eta * grad;
    }
    for (Index a = 0; a < N; ++a) theta[a] += noise_sd * rng.normal();
    // correction toward the plain-loss posterior, evaluated at epoch start
    theta.noalias() += config.eta * delta_grad.gradient(theta_epoch_start);
    check_divergence(theta, config.divergence_bound, ep * n);
    rec.record_if_due(theta, ep, ep * n);
  }
  rec.take(out);
  out.theta_final = std::move(theta);
  return out;
}

Trajectory run_engine(const ModelSpec& model, const Dataset& data,
                      const Vector& theta_init, const EngineConfig& config) {
  switch (config.mode) {
    case EngineMode::Gd:
    case EngineMode::SgdWr:
    case EngineMode::SgdWor:
      return run_sgd(model, data, theta_init, config);
    case EngineMode::Earthquake:
      return run_earthquake(model, data, theta_init, config);
    case EngineMode::Sgld:
      return run_sgld(model, data, theta_init, config);
    case EngineMode::Sgworld:
      return run_sgworld(model, data, theta_init, config);
  }
  throw std::invalid_argument("unknown engine mode");
}

namespace {
constexpr char kTrajMagic[8] = {'S', 'G', 'D', 'T', 'R', 'J', '0', '1'};
}

void save_trajectory(const Trajectory& traj, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out.write(kTrajMagic, 8);
  const std::uint64_t N = traj.records.rows();
  const std::uint64_t K = traj.records.cols();
  const std::uint64_t total = traj.total_steps;
  const std::string cfg = traj.config.to_json();
  const std::uint64_t cfg_len = cfg.size();
  out.write(reinterpret_cast<const char*>(&N), 8);
  out.write(reinterpret_cast<const char*>(&K), 8);
  out.write(reinterpret_cast<const char*>(&total), 8);
  out.write(reinterpret_cast<const char*>(&cfg_len), 8);
  out.write(cfg.data(), cfg_len);
  for (const long s : traj.step_index) {
    const std::int64_t v = s;
    out.write(reinterpret_cast<const char*>(&v), 8);
  }
  out.write(reinterpret_cast<const char*>(traj.records.data()),
            static_cast<std::streamsize>(sizeof(double) * N * K));
  out.write(reinterpret_cast<const char*>(traj.theta_final.data()),
            static_cast<std::streamsize>(sizeof(double) * N));
}

Trajectory load_trajectory(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kTrajMagic, 8) != 0)
    throw ConfigError("not a trajectory file: " + path);
  std::uint64_t N, K, total, cfg_len;
  in.read(reinterpret_cast<char*>(&N), 8);
  in.read(reinterpret_cast<char*>(&K), 8);
  in.read(reinterpret_cast<char*>(&total), 8);
  in.read(reinterpret_cast<char*>(&cfg_len), 8);
  std::string cfg(cfg_len, '\0');
  in.read(cfg.data(), static_cast<std::streamsize>(cfg_len));
  Trajectory traj;
  traj.config = EngineConfig::from_json(cfg);
  traj.total_steps = static_cast<long>(total);
  traj.step_index.resize(K);
  for (auto& s : traj.step_index) {
    std::int64_t v;
    in.read(reinterpret_cast<char*>(&v), 8);
    s = static_cast<long>(v);
  }
  traj.records.resize(static_cast<Index>(N), static_cast<Index>(K));
  in.read(reinterpret_cast<char*>(traj.records.data()),
          static_cast<std::streamsize>(sizeof(double) * N * K));
  traj.theta_final.resize(static_cast<Index>(N));
  in.read(reinterpret_cast<char*>(traj.theta_final.data()),
          static_cast<std::streamsize>(sizeof(double) * N));
  if (!in) throw ConfigError("trajectory file truncated: " + path);
  return traj;
}

void save_trajectory_csv(const Trajectory& traj, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "step";
  for (Index a = 0; a < traj.records.rows(); ++a) out << ",theta" << a + 1;
  out << '\n';
  for (Index k = 0; k < traj.records.cols(); ++k) {
    out << traj.step_index[static_cast<std::size_t>(k)];
    for (Index a = 0; a < traj.records.rows(); ++a)
      out << ',' << format_double(traj.records(a, k));
    out << '\n';
  }
}

}  // namespace sgdthermo
