#pragma once

#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "sgdthermo/engines.hpp"
#include "sgdthermo/types.hpp"

namespace sgdthermo {

// ---------------------------------------------------------------------
// Minimal TOML subset: [tables], key = value with strings, integers,
// floats, booleans and single-line homogeneous arrays; # comments.
// Enough for the bundled experiment configs; anything else is rejected
// with a line-numbered ConfigError.
// ---------------------------------------------------------------------
struct TomlValue {
  std::variant<bool, long, double, std::string, std::vector<TomlValue>> v;

  bool is_number() const {
    return std::holds_alternative<long>(v) || std::holds_alternative<double>(v);
  }
  double as_double() const;
  long as_int() const;
  bool as_bool() const;
  const std::string& as_string() const;
  const std::vector<TomlValue>& as_array() const;
};

using TomlTable = std::map<std::string, TomlValue>;
using TomlDocument = std::map<std::string, TomlTable>;  // "" = root table

TomlDocument parse_toml(const std::string& text);

// ---------------------------------------------------------------------
// Experiment configuration (validated schema over the TOML document)
// ---------------------------------------------------------------------
enum class ExperimentType { Stationary, TrainingCurves, PosteriorScan };

struct DataConfig {
  std::string source;  // synthetic-regression | mnist | csv
  int M = 200;
  double noise_sd = 0.1;
  std::uint64_t seed = 1;
  std::string images_path, labels_path, csv_path;
};

struct ModelConfig {
  std::string kind = "nonlinear-regression";
  double eps = 0.1;
  double lambda = 10.0;
};

struct InitConfig {
  std::string start = "stationary-sample";  // minimum | stationary-sample | random-offset | zero
  double scale = 0.1;
  double burn_in_fraction = 0.2;
  int minimizer_trials = 8;
  std::uint64_t minimizer_seed = 7;
};

struct AnalysisConfig {
  std::string theory = "wr";  // wr | wor | earthquake | sgld | sgworld | none
  std::vector<int> ells = {1, 2, 3};
  int dft_half_bins = 40;
  long min_bin_count = 100;
  long area_block = 65536;
  std::vector<std::string> checks = {"moments", "area", "entropy", "ift", "dft"};
  std::string wor_variant = "full";  // full | dominant | hdh
  long fdt_records = 20000;
  std::vector<int> hist2d;  // two 1-based parameter indices, empty = off
  int hist2d_bins = 60;
};

struct OutputConfig {
  std::string directory;
  std::vector<std::string> formats = {"csv", "json"};
  bool save_trajectories = false;
};

struct ScanConfig {
  std::vector<double> etas;
  int m = 10;
};

struct CurvesConfig {
  std::vector<std::string> modes = {"sgd-wr", "sgd-wor"};
  long record_every = 2000;
};

struct ExperimentConfig {
  std::string name;
  ExperimentType type = ExperimentType::Stationary;
  ModelConfig model;
  DataConfig data;
  EngineConfig engine;
  int runs = 1;
  InitConfig init;
  AnalysisConfig analysis;
  OutputConfig output;
  ScanConfig scan;
  CurvesConfig curves;
  std::string raw_text;  // exact file contents, hashed into summaries

  static ExperimentConfig from_file(const std::string& path);
  static ExperimentConfig from_string(const std::string& text, const std::string& name_hint);
  void validate() const;
};

}  // namespace sgdthermo
