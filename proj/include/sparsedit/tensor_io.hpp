#pragma once

#include "sparsedit/types.hpp"

#include <iosfwd>
#include <string>

namespace sparsedit {

// Binary tensor layout (all integers little-endian):
//   bytes 0..3   magic "SDTN"
//   byte  4      format version (1)
//   byte  5      dtype: 0 = float64, 1 = float32
//   bytes 6..7   reserved, zero
//   bytes 8..15  rows (u64)
//   bytes 16..23 cols (u64)
//   then rows*cols IEEE-754 values, row-major.
enum class DType : std::uint8_t { kFloat64 = 0, kFloat32 = 1 };

void write_tensor(std::ostream& os, const MatrixXd& m, DType dtype = DType::kFloat64);
void write_tensor(std::ostream& os, const MatrixXf& m);
/// Reads either dtype, widening float32 to double.
MatrixXd read_tensor(std::istream& is);

void save_tensor(const std::string& path, const MatrixXd& m, DType dtype = DType::kFloat64);
MatrixXd load_tensor(const std::string& path);

/// One row per line, comma-separated, shortest round-trip decimal form.
void write_tensor_csv(std::ostream& os, const MatrixXd& m);
MatrixXd read_tensor_csv(std::istream& is);

}  // namespace sparsedit
