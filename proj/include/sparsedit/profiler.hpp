#pragma once

#include "sparsedit/types.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace sparsedit {

struct SampleConfig {
  int factor = 16;            // keep ceil(S / factor) query rows
  std::uint64_t seed = 0;
  int stage1_period = 50;     // iterations between measurements in stage 1
  int stage2_period = 500;    // and in stage 2
};

/// ceil(S / factor) distinct query rows, uniform without replacement, sorted.
/// `stream` decorrelates draws for different (iteration, block) pairs.
std::vector<Eigen::Index> sample_queries(Eigen::Index num_queries, const SampleConfig& cfg,
                                         std::uint64_t stream = 0);

/// Per-head sparsity of the critical-KV oracle restricted to sampled query rows.
/// Scores are computed for the sampled rows only.
std::vector<double> measure_block_sparsity(const std::vector<MatrixXd>& q_heads,
                                           const std::vector<MatrixXd>& k_heads, double theta,
                                           const SampleConfig& cfg, std::uint64_t stream = 0);

/// alpha * sample + (1 - alpha) * prev.
double ema_update(double prev, double sample, double alpha);

/// EMA-smoothed sparsity per (block, head).
class SparsityProfile {
 public:
  struct Entry {
    double ema = 0.0;
    double sample = 0.0;
    std::int64_t iteration = -1;
    int updates = 0;
  };

  explicit SparsityProfile(double alpha = 0.1);

  // The first sample of an entry seeds the EMA directly.
  void update(int block, int head, double sample, std::int64_t iteration);
  void update_block(int block, const std::vector<double>& samples, std::int64_t iteration);

  [[nodiscard]] bool has(int block, int head) const;
  [[nodiscard]] const Entry& entry(int block, int head) const;
  [[nodiscard]] double ema(int block, int head) const { return entry(block, head).ema; }
  [[nodiscard]] std::vector<double> block_ema(int block) const;
  [[nodiscard]] double alpha() const { return alpha_; }
  [[nodiscard]] const std::map<std::pair<int, int>, Entry>& entries() const { return entries_; }

  /// {"alpha": a, "entries": [{"block", "head", "ema", "sample", "iteration"}, ...]}
  [[nodiscard]] std::string to_json() const;
  static SparsityProfile from_json(const std::string& text);

 private:
  double alpha_;
  std::map<std::pair<int, int>, Entry> entries_;
};

}  // namespace sparsedit
