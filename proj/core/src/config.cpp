#include "sgdthermo/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

namespace sgdthermo {

double TomlValue::as_double() const {
  if (std::holds_alternative<double>(v)) return std::get<double>(v);
  if (std::holds_alternative<long>(v)) return static_cast<double>(std::get<long>(v));
  throw ConfigError("expected a number");
}

long TomlValue::as_int() const {
  if (std::holds_alternative<long>(v)) return std::get<long>(v);
  throw ConfigError("expected an integer");
}

bool TomlValue::as_bool() const {
  if (std::holds_alternative<bool>(v)) return std::get<bool>(v);
  throw ConfigError("expected a boolean");
}

const std::string& TomlValue::as_string() const {
  if (std::holds_alternative<std::string>(v)) return std::get<std::string>(v);
  throw ConfigError("expected a string");
}

const std::vector<TomlValue>& TomlValue::as_array() const {
  if (std::holds_alternative<std::vector<TomlValue>>(v))
    return std::get<std::vector<TomlValue>>(v);
  throw ConfigError("expected an array");
}

namespace {

std::string strip(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void fail(int line, const std::string& msg) {
  throw ConfigError("config line " + std::to_string(line) + ": " + msg);
}

TomlValue parse_scalar(const std::string& tok, int line) {
  if (tok.empty()) fail(line, "empty value");
  if (tok == "true") return {true};
  if (tok == "false") return {false};
  if (tok.front() == '"') {
    if (tok.size() < 2 || tok.back() != '"') fail(line, "unterminated string");
    return {tok.substr(1, tok.size() - 2)};
  }
  const bool looks_float = tok.find_first_of(".eE") != std::string::npos ||
                           tok == "inf" || tok == "-inf" || tok == "nan";
  try {
    std::size_t used = 0;
    if (!looks_float) {
      const long n = std::stol(tok, &used);
      if (used == tok.size()) return {n};
    }
    const double d = std::stod(tok, &used);
    if (used != tok.size()) fail(line, "trailing characters in number: " + tok);
    return {d};
  } catch (const std::exception&) {
    fail(line, "cannot parse value: " + tok);
  }
}

TomlValue parse_value(const std::string& raw, int line) {
  const std::string tok = strip(raw);
  if (!tok.empty() && tok.front() == '[') {
    if (tok.back() != ']') fail(line, "unterminated array");
    std::vector<TomlValue> items;
    std::string inner = tok.substr(1, tok.size() - 2);
    std::string cur;
    bool in_string = false;
    for (const char c : inner) {
      if (c == '"') in_string = !in_string;
      if (c == ',' && !in_string) {
        if (!strip(cur).empty()) items.push_back(parse_scalar(strip(cur), line));
        cur.clear();
      } else {
        cur += c;
      }
    }
    if (!strip(cur).empty()) items.push_back(parse_scalar(strip(cur), line));
    return {items};
  }
  return parse_scalar(tok, line);
}

// strips a trailing comment that is not inside a string
std::string strip_comment(const std::string& s) {
  bool in_string = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"') in_string = !in_string;
    if (s[i] == '#' && !in_string) return s.substr(0, i);
  }
  return s;
}

}  // namespace

TomlDocument parse_toml(const std::string& text) {
  TomlDocument doc;
  std::string table;
  std::istringstream in(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const std::string line = strip(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail(lineno, "unterminated table header");
      table = strip(line.substr(1, line.size() - 2));
      if (table.empty()) fail(lineno, "empty table name");
      doc[table];  // declare
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(lineno, "expected key = value");
    const std::string key = strip(line.substr(0, eq));
    if (key.empty()) fail(lineno, "empty key");
    if (doc[table].count(key)) fail(lineno, "duplicate key: " + key);
    doc[table][key] = parse_value(line.substr(eq + 1), lineno);
  }
  return doc;
}

// ---------------------------------------------------------------------

namespace {

class SchemaReader {
public:
  SchemaReader(const TomlDocument& doc, const std::string& table) : table_(table) {
    auto it = doc.find(table);
    if (it != doc.end()) tbl_ = &it->second;
  }

  bool present() const { return tbl_ != nullptr; }

  template <typename F>
  void with(const std::string& key, F&& f) {
    if (!tbl_) return;
    auto it = tbl_->find(key);
    if (it == tbl_->end()) return;
    seen_.insert(key);
    try {
      f(it->second);
    } catch (const ConfigError& e) {
      throw ConfigError("[" + table_ + "] " + key + ": " + e.what());
    }
  }

  void finish() const {
    if (!tbl_) return;
    for (const auto& [key, _] : *tbl_) {
      if (!seen_.count(key))
        throw ConfigError("[" + table_ + "] unknown key: " + key);
    }
  }

private:
  const TomlTable* tbl_ = nullptr;
  std::string table_;
  std::set<std::string> seen_;
};

std::vector<int> int_array(const TomlValue& v) {
  std::vector<int> out;
  for (const auto& item : v.as_array()) out.push_back(static_cast<int>(item.as_int()));
  return out;
}

std::vector<double> double_array(const TomlValue& v) {
  std::vector<double> out;
  for (const auto& item : v.as_array()) out.push_back(item.as_double());
  return out;
}

std::vector<std::string> string_array(const TomlValue& v) {
  std::vector<std::string> out;
  for (const auto& item : v.as_array()) out.push_back(item.as_string());
  return out;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::string name = path;
  const auto slash = name.find_last_of('/');
  if (slash != std::string::npos) name = name.substr(slash + 1);
  const auto dot = name.find_last_of('.');
  if (dot != std::string::npos) name = name.substr(0, dot);
  return from_string(text, name);
}

ExperimentConfig ExperimentConfig::from_string(const std::string& text,
                                               const std::string& name_hint) {
  const TomlDocument doc = parse_toml(text);
  ExperimentConfig cfg;
  cfg.raw_text = text;
  cfg.name = name_hint;

  SchemaReader root(doc, "");
  root.with("name", [&](const TomlValue& v) { cfg.name = v.as_string(); });
  root.with("type", [&](const TomlValue& v) {
    const std::string& t = v.as_string();
    if (t == "stationary") cfg.type = ExperimentType::Stationary;
    else if (t == "training-curves") cfg.type = ExperimentType::TrainingCurves;
    else if (t == "posterior-scan") cfg.type = ExperimentType::PosteriorScan;
    else throw ConfigError("unknown experiment type: " + t);
  });
  root.finish();

  SchemaReader model(doc, "model");
  model.with("kind", [&](const TomlValue& v) { cfg.model.kind = v.as_string(); });
  model.with("eps", [&](const TomlValue& v) { cfg.model.eps = v.as_double(); });
  model.with("lambda", [&](const TomlValue& v) { cfg.model.lambda = v.as_double(); });
  model.finish();

  SchemaReader data(doc, "data");
  data.with("source", [&](const TomlValue& v) { cfg.data.source = v.as_string(); });
  data.with("M", [&](const TomlValue& v) { cfg.data.M = static_cast<int>(v.as_int()); });
  data.with("noise_sd", [&](const TomlValue& v) { cfg.data.noise_sd = v.as_double(); });
  data.with("seed", [&](const TomlValue& v) { cfg.data.seed = static_cast<std::uint64_t>(v.as_int()); });
  data.with("images_path", [&](const TomlValue& v) { cfg.data.images_path = v.as_string(); });
  data.with("labels_path", [&](const TomlValue& v) { cfg.data.labels_path = v.as_string(); });
  data.with("csv_path", [&](const TomlValue& v) { cfg.data.csv_path = v.as_string(); });
  data.finish();
  if (cfg.data.source.empty()) cfg.data.source = "synthetic-regression";

  SchemaReader engine(doc, "engine");
  engine.with("mode", [&](const TomlValue& v) {
    cfg.engine.mode = engine_mode_from_string(v.as_string());
  });
  engine.with("eta", [&](const TomlValue& v) { cfg.engine.eta = v.as_double(); });
  engine.with("m", [&](const TomlValue& v) { cfg.engine.minibatch = static_cast<int>(v.as_int()); });
  engine.with("steps", [&](const TomlValue& v) { cfg.engine.steps = v.as_int(); });
  engine.with("epochs", [&](const TomlValue& v) { cfg.engine.steps = -v.as_int(); });  // resolved later
  engine.with("runs", [&](const TomlValue& v) { cfg.runs = static_cast<int>(v.as_int()); });
  engine.with("seed", [&](const TomlValue& v) { cfg.engine.seed = static_cast<std::uint64_t>(v.as_int()); });
  engine.with("zeta", [&](const TomlValue& v) { cfg.engine.zeta = v.as_double(); });
  engine.with("thinning", [&](const TomlValue& v) { cfg.engine.thinning = v.as_int(); });
  engine.with("divergence_bound", [&](const TomlValue& v) { cfg.engine.divergence_bound = v.as_double(); });
  engine.finish();

  SchemaReader init(doc, "init");
  init.with("start", [&](const TomlValue& v) { cfg.init.start = v.as_string(); });
  init.with("scale", [&](const TomlValue& v) { cfg.init.scale = v.as_double(); });
  init.with("burn_in_fraction", [&](const TomlValue& v) { cfg.init.burn_in_fraction = v.as_double(); });
  init.with("minimizer_trials", [&](const TomlValue& v) { cfg.init.minimizer_trials = static_cast<int>(v.as_int()); });
  init.with("minimizer_seed", [&](const TomlValue& v) { cfg.init.minimizer_seed = static_cast<std::uint64_t>(v.as_int()); });
  init.finish();

  SchemaReader analysis(doc, "analysis");
  analysis.with("theory", [&](const TomlValue& v) { cfg.analysis.theory = v.as_string(); });
  analysis.with("ells", [&](const TomlValue& v) { cfg.analysis.ells = int_array(v); });
  analysis.with("dft_half_bins", [&](const TomlValue& v) { cfg.analysis.dft_half_bins = static_cast<int>(v.as_int()); });
  analysis.with("min_bin_count", [&](const TomlValue& v) { cfg.analysis.min_bin_count = v.as_int(); });
  analysis.with("area_block", [&](const TomlValue& v) { cfg.analysis.area_block = v.as_int(); });
  analysis.with("checks", [&](const TomlValue& v) { cfg.analysis.checks = string_array(v); });
  analysis.with("wor_variant", [&](const TomlValue& v) { cfg.analysis.wor_variant = v.as_string(); });
  analysis.with("fdt_records", [&](const TomlValue& v) { cfg.analysis.fdt_records = v.as_int(); });
  analysis.with("hist2d", [&](const TomlValue& v) { cfg.analysis.hist2d = int_array(v); });
  analysis.with("hist2d_bins", [&](const TomlValue& v) { cfg.analysis.hist2d_bins = static_cast<int>(v.as_int()); });
  analysis.finish();

  SchemaReader output(doc, "output");
  output.with("directory", [&](const TomlValue& v) { cfg.output.directory = v.as_string(); });
  output.with("formats", [&](const TomlValue& v) { cfg.output.formats = string_array(v); });
  output.with("save_trajectories", [&](const TomlValue& v) { cfg.output.save_trajectories = v.as_bool(); });
  output.finish();

  SchemaReader scan(doc, "posterior_scan");
  scan.with("etas", [&](const TomlValue& v) { cfg.scan.etas = double_array(v); });
  scan.with("m", [&](const TomlValue& v) { cfg.scan.m = static_cast<int>(v.as_int()); });
  scan.finish();

  SchemaReader curves(doc, "training_curves");
  curves.with("modes", [&](const TomlValue& v) { cfg.curves.modes = string_array(v); });
  curves.with("record_every", [&](const TomlValue& v) { cfg.curves.record_every = v.as_int(); });
  curves.finish();

  cfg.validate();
  return cfg;
}

void ExperimentConfig::validate() const {
  if (output.directory.empty())
    throw ConfigError("[output] directory is required");
  if (model.eps <= 0) throw ConfigError("[model] eps must be > 0");
  if (model.lambda < 0) throw ConfigError("[model] lambda must be >= 0");
  model_kind_from_string(model.kind);
  if (data.source != "synthetic-regression" && data.source != "mnist" && data.source != "csv")
    throw ConfigError("[data] unknown source: " + data.source);
  if (data.source == "synthetic-regression" && data.M < 1)
    throw ConfigError("[data] M must be >= 1");
  if (runs < 1) throw ConfigError("[engine] runs must be >= 1");
  if (init.burn_in_fraction < 0 || init.burn_in_fraction >= 1)
    throw ConfigError("[init] burn_in_fraction must be in [0, 1)");
  if (type == ExperimentType::Stationary || type == ExperimentType::TrainingCurves) {
    if (engine.eta <= 0) throw ConfigError("[engine] eta must be > 0");
    if (engine.steps == 0) throw ConfigError("[engine] steps (or epochs) required");
  }
  if (type == ExperimentType::PosteriorScan) {
    if (scan.etas.empty()) throw ConfigError("[posterior_scan] etas required");
    if (scan.m < 1) throw ConfigError("[posterior_scan] m must be >= 1");
    for (const double e : scan.etas)
      if (e <= 0) throw ConfigError("[posterior_scan] etas must be > 0");
  }
  const auto& th = analysis.theory;
  if (th != "wr" && th != "wor" && th != "earthquake" && th != "sgld" &&
      th != "sgworld" && th != "none")
    throw ConfigError("[analysis] unknown theory: " + th);
  if (analysis.wor_variant != "full" && analysis.wor_variant != "dominant" &&
      analysis.wor_variant != "hdh")
    throw ConfigError("[analysis] unknown wor_variant: " + analysis.wor_variant);
  if (!analysis.hist2d.empty() && analysis.hist2d.size() != 2)
    throw ConfigError("[analysis] hist2d needs exactly two parameter indices");
  for (const int ell : analysis.ells)
    if (ell < 1) throw ConfigError("[analysis] ells must be >= 1");
  const auto& st = init.start;
  if (st != "minimum" && st != "stationary-sample" && st != "random-offset" && st != "zero")
    throw ConfigError("[init] unknown start: " + st);
}

}  // namespace sgdthermo
