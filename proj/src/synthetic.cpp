#include "sparsedit/synthetic.hpp"

#include <cmath>
#include <numbers>

namespace sparsedit {

MatrixXd smooth_field(const TokenGrid& grid, Eigen::Index channels, int modes, int max_freq,
                      double noise_std, std::mt19937_64& rng) {
  require(channels > 0 && modes > 0 && max_freq >= 0, "smooth_field: bad parameters");
  std::uniform_int_distribution<int> freq(0, max_freq);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> amp(0.0, 1.0 / std::sqrt(static_cast<double>(modes)));
  std::normal_distribution<double> noise(0.0, 1.0);

  MatrixXd out = MatrixXd::Zero(grid.size(), channels);
  for (Eigen::Index c = 0; c < channels; ++c) {
    for (int m = 0; m < modes; ++m) {
      const int ft = freq(rng), fh = freq(rng), fw = freq(rng);
      const double ph = phase(rng);
      const double a = amp(rng);
      for (int f = 0; f < grid.frames; ++f) {
        for (int h = 0; h < grid.height; ++h) {
          for (int w = 0; w < grid.width; ++w) {
            const double arg = 2.0 * std::numbers::pi *
                                   (ft * static_cast<double>(f) / grid.frames +
                                    fh * static_cast<double>(h) / grid.height +
                                    fw * static_cast<double>(w) / grid.width) +
                               ph;
            out(grid.flat(f, h, w), c) += a * std::sin(arg);
          }
        }
      }
    }
  }
  if (noise_std > 0.0) {
    for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] += noise_std * noise(rng);
  }
  return out;
}

MatrixXd gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double std_dev, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, std_dev);
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
  return m;
}

}  // namespace sparsedit
