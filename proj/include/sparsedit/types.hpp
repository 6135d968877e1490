#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace sparsedit {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixXd = Matrix<double>;
using MatrixXf = Matrix<float>;
using VectorXd = Vector<double>;

// Rows are tokens, columns are features.
template <typename Scalar>
using HeadTensor = Matrix<Scalar>;

using KvIndex = std::uint32_t;

/// Raised for shape mismatches and out-of-range arguments.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a configuration file is malformed or incomplete.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when no parallel configuration satisfies the constraints.
class Infeasible : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised on NaN/Inf losses or gradients that cannot be skipped.
class NumericalFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidInput(what);
}

/// A 3D latent token grid, flattened frame-major then row then column:
/// flat = (f * height + h) * width + w.
struct TokenGrid {
  int frames = 1;
  int height = 1;
  int width = 1;

  TokenGrid() = default;
  TokenGrid(int f, int h, int w) : frames(f), height(h), width(w) {
    require(f > 0 && h > 0 && w > 0, "TokenGrid: dimensions must be positive");
  }

  [[nodiscard]] Eigen::Index size() const {
    return static_cast<Eigen::Index>(frames) * height * width;
  }

  [[nodiscard]] Eigen::Index flat(int f, int h, int w) const {
    return (static_cast<Eigen::Index>(f) * height + h) * width + w;
  }

  [[nodiscard]] std::array<int, 3> coords(Eigen::Index flat_index) const {
    const int w = static_cast<int>(flat_index % width);
    const Eigen::Index rest = flat_index / width;
    const int h = static_cast<int>(rest % height);
    const int f = static_cast<int>(rest / height);
    return {f, h, w};
  }

  bool operator==(const TokenGrid&) const = default;
};

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

}  // namespace sparsedit
