#pragma once

#include <string>
#include <vector>

#include "sgdthermo/types.hpp"

namespace sgdthermo {

// Matrix CSV files carry a one-line header:
//   # rows=<r> cols=<c> symbol=<name> theta_hash=<hex>
// followed by one CSV row per matrix row, full 17-significant-digit floats.
void save_matrix_csv(const std::string& path, const Matrix& mat,
                     const std::string& symbol, const std::string& theta_hash);
Matrix load_matrix_csv(const std::string& path, std::string* symbol = nullptr,
                       std::string* theta_hash = nullptr);

std::string format_double(double v);  // round-trip safe ("%.17g")

// Generic table writer: header row then rows of doubles.
void save_table_csv(const std::string& path,
                    const std::vector<std::string>& columns,
                    const std::vector<std::vector<double>>& rows);

}  // namespace sgdthermo
