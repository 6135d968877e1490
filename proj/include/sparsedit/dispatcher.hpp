#pragma once

// Per-block gate between full and sparse attention, driven by a calibrated
// cost table, the profiled sparsity and a memory budget for index sets.

#include "sparsedit/flops.hpp"
#include "sparsedit/types.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace sparsedit {

/// Smallest power of two >= length.
std::int64_t length_bucket(std::int64_t length);
/// floor(sparsity / 0.05), so bucket b covers [0.05 b, 0.05 (b + 1)).
int sparsity_bucket(double sparsity);
inline double bucket_sparsity(int bucket) { return bucket / 20.0; }

/// Index bytes for S queries keeping k keys each, fixed 32-bit encoding.
inline std::uint64_t index_memory_bytes(std::int64_t queries, std::int64_t k) {
  return static_cast<std::uint64_t>(queries) * static_cast<std::uint64_t>(k) * 4u;
}

/// Counters the attention paths produce for one head at (S, k): full path is
/// dense scores and values; sparse path is k keys per query plus the
/// low-rank estimate. Selection comparisons are worst-case heap tests.
struct PathFlops {
  FlopCounter full;
  FlopCounter sparse;
};
PathFlops path_flops(std::int64_t length, std::int64_t k, int d_k, int d_lr);

struct CostEntry {
  std::int64_t length = 0;  // bucket
  int bucket = 0;
  std::int64_t k = 0;
  double full_time = 0.0;      // seconds
  double sparse_time = 0.0;    // estimate + select + sparse attention
  double estimate_time = 0.0;  // estimate + select share of sparse_time
  std::uint64_t full_flops = 0;
  std::uint64_t sparse_flops = 0;  // score-value only
  std::uint64_t estimate_flops = 0;
  std::uint64_t select_comparisons = 0;
  std::uint64_t index_bytes = 0;
};

class CostProfileTable {
 public:
  void add(const CostEntry& e);
  [[nodiscard]] const std::map<std::pair<std::int64_t, int>, CostEntry>& entries() const { return entries_; }
  [[nodiscard]] std::vector<std::int64_t> lengths() const;
  [[nodiscard]] bool has_length(std::int64_t length_bucket) const;
  /// Calibrated length bucket closest to `length` (log2 distance, smaller wins ties).
  [[nodiscard]] std::int64_t nearest_length(std::int64_t length) const;
  /// Lowest sparsity bucket where the sparse path beats the full path.
  [[nodiscard]] std::optional<int> crossover_bucket(std::int64_t length_bucket) const;

  [[nodiscard]] std::string to_csv() const;
  static CostProfileTable from_csv(const std::string& text);

 private:
  std::map<std::pair<std::int64_t, int>, CostEntry> entries_;
};

enum class TimingMode { kModel, kWall };

struct CalibrationConfig {
  std::vector<std::int64_t> lengths{256, 512, 1024, 2048, 4096};
  std::vector<double> sparsities{0.0, 0.5, 0.7, 0.8, 0.85, 0.9, 0.95};
  int reps = 3;
  int d_k = 64;
  int d_lr = 16;
  TimingMode mode = TimingMode::kModel;
  // Model timing: dense GEMM rate, and the fraction of it that gathered
  // (index-driven) products and low-rank scans achieve.
  double dense_rate = 2.0e10;
  double gather_efficiency = 0.25;
  double compare_time = 1.0e-9;  // seconds per heap comparison
  std::uint64_t seed = 0;
};

CostProfileTable calibrate(const CalibrationConfig& cfg);

std::string calibration_to_json(const CalibrationConfig& cfg);
/// Missing keys keep their defaults; unknown keys are a ConfigError.
CalibrationConfig calibration_from_json(const std::string& text);

enum class DispatchReason { kEnabled, kBelowThreshold, kMemory, kNoCrossover };
const char* to_string(DispatchReason r);

struct DispatchDecision {
  int block = 0;
  bool enabled = false;
  DispatchReason reason = DispatchReason::kBelowThreshold;
  std::int64_t k = 0;  // effective keys per query if sparse
  std::optional<double> crossover;
  std::uint64_t index_bytes = 0;
  bool bucket_fallback = false;  // length bucket missing, nearest one used
};

/// Enabled iff sparsity >= crossover (inclusive) and S k 4 <= mem_free.
DispatchDecision decide(int block, double sparsity, std::int64_t length, std::uint64_t mem_free,
                        const CostProfileTable& table);

struct DispatchTransition {
  std::int64_t iteration = 0;
  int block = 0;
  bool enabled = false;
  DispatchReason reason = DispatchReason::kEnabled;
};

/// Keeps the last decision per block and logs every flip.
class Dispatcher {
 public:
  Dispatcher(CostProfileTable table, std::uint64_t mem_budget)
      : table_(std::move(table)), mem_budget_(mem_budget) {}

  const DispatchDecision& update(int block, double sparsity, std::int64_t length, std::int64_t iteration);
  [[nodiscard]] bool enabled(int block) const;
  [[nodiscard]] const std::vector<DispatchTransition>& transitions() const { return transitions_; }
  [[nodiscard]] const CostProfileTable& table() const { return table_; }
  void force(int block, bool on, std::int64_t iteration);

 private:
  CostProfileTable table_;
  std::uint64_t mem_budget_;
  std::map<int, DispatchDecision> last_;
  std::vector<DispatchTransition> transitions_;
};

}  // namespace sparsedit
