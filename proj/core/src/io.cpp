#include "sgdthermo/io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace sgdthermo {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf);
}

void save_matrix_csv(const std::string& path, const Matrix& mat,
                     const std::string& symbol, const std::string& theta_hash) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "# rows=" << mat.rows() << " cols=" << mat.cols() << " symbol=" << symbol
      << " theta_hash=" << theta_hash << "\n";
  for (Index r = 0; r < mat.rows(); ++r) {
    for (Index c = 0; c < mat.cols(); ++c) {
      if (c) out << ',';
      out << format_double(mat(r, c));
    }
    out << '\n';
  }
}

Matrix load_matrix_csv(const std::string& path, std::string* symbol,
                       std::string* theta_hash) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::string header;
  std::getline(in, header);
  Index rows = -1, cols = -1;
  std::istringstream hs(header);
  std::string tok;
  while (hs >> tok) {
    auto eq = tok.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
    if (key == "rows") rows = std::stol(val);
    else if (key == "cols") cols = std::stol(val);
    else if (key == "symbol" && symbol) *symbol = val;
    else if (key == "theta_hash" && theta_hash) *theta_hash = val;
  }
  if (rows < 0 || cols < 0) throw std::runtime_error("bad matrix CSV header in " + path);
  Matrix mat(rows, cols);
  std::string line;
  for (Index r = 0; r < rows; ++r) {
    if (!std::getline(in, line)) throw std::runtime_error("truncated matrix CSV: " + path);
    std::istringstream ls(line);
    std::string cell;
    for (Index c = 0; c < cols; ++c) {
      if (!std::getline(ls, cell, ',')) throw std::runtime_error("short row in " + path);
      mat(r, c) = std::stod(cell);
    }
  }
  return mat;
}

void save_table_csv(const std::string& path,
                    const std::vector<std::string>& columns,
                    const std::vector<std::vector<double>>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (i) out << ',';
    out << columns[i];
  }
  out << '\n';
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out << ',';
      out << format_double(row[i]);
    }
    out << '\n';
  }
}

}  // namespace sgdthermo
