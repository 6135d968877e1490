#pragma once

#include "sparsedit/types.hpp"

#include <cstdint>
#include <random>

namespace sparsedit {

/// Low-frequency random field on a token grid: each channel is a sum of
/// `modes` 3D sinusoids with integer frequencies in [0, max_freq] plus i.i.d.
/// Gaussian noise. Returns S x channels, rows in grid flattening order.
MatrixXd smooth_field(const TokenGrid& grid, Eigen::Index channels, int modes, int max_freq,
                      double noise_std, std::mt19937_64& rng);

/// i.i.d. N(0, std^2) matrix.
MatrixXd gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double std_dev, std::mt19937_64& rng);

}  // namespace sparsedit
