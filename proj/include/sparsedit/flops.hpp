#pragma once

#include <cstdint>

namespace sparsedit {

// Operation counters filled in by the attention and selection routines as they
// run. A multiply-add counts as two FLOPs.
struct FlopCounter {
  std::uint64_t score_flops = 0;     // q.k logits
  std::uint64_t value_flops = 0;     // softmax-weighted V accumulation
  std::uint64_t softmax_ops = 0;     // exp evaluations
  std::uint64_t estimate_flops = 0;  // low-rank q_lr.k_lr logits
  std::uint64_t select_comparisons = 0;

  [[nodiscard]] std::uint64_t score_value_flops() const { return score_flops + value_flops; }
  [[nodiscard]] std::uint64_t total_flops() const {
    return score_flops + value_flops + estimate_flops;
  }

  FlopCounter& operator+=(const FlopCounter& o) {
    score_flops += o.score_flops;
    value_flops += o.value_flops;
    softmax_ops += o.softmax_ops;
    estimate_flops += o.estimate_flops;
    select_comparisons += o.select_comparisons;
    return *this;
  }
};

}  // namespace sparsedit
