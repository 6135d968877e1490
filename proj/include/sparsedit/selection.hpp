#pragma once

// Critical-KV selection from low-rank scores without materializing the S x S
// product. Scores are produced tile by tile and folded into a bounded per-query
// heap; a two-pass threshold variant recomputes products instead of keeping
// candidate lists. Ties are always resolved toward the lower key index.

#include "sparsedit/flops.hpp"
#include "sparsedit/index_set.hpp"
#include "sparsedit/types.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <span>
#include <thread>
#include <vector>

namespace sparsedit {

/// Counts auxiliary entries (scores or indices) alive during selection.
class SelectionMemoryCounter {
 public:
  void acquire(std::size_t entries) {
    const std::size_t now = current_.fetch_add(entries) + entries;
    std::size_t prev = peak_.load();
    while (now > prev && !peak_.compare_exchange_weak(prev, now)) {
    }
  }
  void release(std::size_t entries) { current_.fetch_sub(entries); }
  [[nodiscard]] std::size_t current() const { return current_.load(); }
  [[nodiscard]] std::size_t peak() const { return peak_.load(); }

 private:
  std::atomic<std::size_t> current_{0};
  std::atomic<std::size_t> peak_{0};
};

struct SelectionOptions {
  Eigen::Index tile = 128;  // key columns per partial product
  int threads = 1;
  SelectionMemoryCounter* memory = nullptr;
  FlopCounter* flops = nullptr;
};

struct TopKResult {
  Eigen::Index num_keys = 0;
  std::vector<std::vector<KvIndex>> indices;  // ascending per query
  std::vector<double> threshold;              // k-th largest score per query

  [[nodiscard]] CriticalIndexSet to_index_set() const {
    CriticalIndexSet set;
    set.num_keys = num_keys;
    set.rows = indices;
    return set;
  }
};

/// k = max(1, ceil((1 - sparsity) * S)).
inline Eigen::Index k_from_sparsity(double sparsity, Eigen::Index num_keys) {
  require(sparsity >= 0.0 && sparsity < 1.0, "k_from_sparsity: sparsity must lie in [0, 1)");
  require(num_keys > 0, "k_from_sparsity: num_keys must be positive");
  // Absolute slack of 1e-9 keeps (1 - 0.9) * 1000 at 100 instead of rounding to 101.
  const double raw = (1.0 - sparsity) * static_cast<double>(num_keys);
  const auto k = static_cast<Eigen::Index>(std::ceil(raw - 1e-9));
  return std::clamp<Eigen::Index>(k, 1, num_keys);
}

namespace detail {

// Fixed left-to-right accumulation, so every pass produces bit-identical scores.
template <typename Scalar>
inline double lowrank_score(const Scalar* q, const Scalar* k, Eigen::Index dim) {
  double acc = 0.0;
  for (Eigen::Index t = 0; t < dim; ++t) acc += static_cast<double>(q[t]) * static_cast<double>(k[t]);
  return acc;
}

struct Candidate {
  double score;
  KvIndex index;
};

// Heap ordering: "less" means better, so the heap top is the worst survivor.
inline bool better(const Candidate& a, const Candidate& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.index < b.index;
}

template <typename Fn>
void for_query_ranges(Eigen::Index num_queries, int threads, Fn&& fn) {
  threads = std::max(1, std::min<int>(threads, static_cast<int>(std::max<Eigen::Index>(1, num_queries))));
  if (threads == 1) {
    fn(Eigen::Index{0}, num_queries);
    return;
  }
  std::vector<std::thread> pool;
  const Eigen::Index chunk = (num_queries + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    const Eigen::Index lo = t * chunk;
    const Eigen::Index hi = std::min(num_queries, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  for (auto& th : pool) th.join();
}

template <typename Scalar, typename KFn>
TopKResult streaming_topk_impl(const HeadTensor<Scalar>& q_lr, const HeadTensor<Scalar>& k_lr,
                               KFn&& k_for, const SelectionOptions& opt) {
  require(q_lr.cols() == k_lr.cols(), "streaming_topk: low-rank dims differ");
  require(opt.tile > 0, "streaming_topk: tile must be positive");
  require(q_lr.allFinite() && k_lr.allFinite(), "streaming_topk: non-finite input");
  const Eigen::Index s_keys = k_lr.rows();
  const Eigen::Index dim = q_lr.cols();
  TopKResult res;
  res.num_keys = s_keys;
  res.indices.resize(static_cast<std::size_t>(q_lr.rows()));
  res.threshold.resize(static_cast<std::size_t>(q_lr.rows()));
  std::atomic<std::uint64_t> comparisons{0};

  for_query_ranges(q_lr.rows(), opt.threads, [&](Eigen::Index lo, Eigen::Index hi) {
    const Eigen::Index tile = std::min(opt.tile, s_keys);
    std::vector<double> tile_buf(static_cast<std::size_t>(tile));
    if (opt.memory) opt.memory->acquire(tile_buf.size());
    std::vector<Candidate> heap;
    std::uint64_t local_cmp = 0;
    for (Eigen::Index qi = lo; qi < hi; ++qi) {
      const Eigen::Index k = k_for(qi);
      require(k >= 1 && k <= s_keys, "streaming_topk: k must lie in [1, S]");
      heap.clear();
      heap.reserve(static_cast<std::size_t>(k));
      if (opt.memory) opt.memory->acquire(static_cast<std::size_t>(k));
      const Scalar* qrow = q_lr.data() + qi * dim;
      for (Eigen::Index c0 = 0; c0 < s_keys; c0 += tile) {
        const Eigen::Index c1 = std::min(s_keys, c0 + tile);
        for (Eigen::Index c = c0; c < c1; ++c) {
          tile_buf[static_cast<std::size_t>(c - c0)] = lowrank_score(qrow, k_lr.data() + c * dim, dim);
        }
        for (Eigen::Index c = c0; c < c1; ++c) {
          const Candidate cand{tile_buf[static_cast<std::size_t>(c - c0)], static_cast<KvIndex>(c)};
          if (static_cast<Eigen::Index>(heap.size()) < k) {
            heap.push_back(cand);
            std::push_heap(heap.begin(), heap.end(), better);
          } else {
            ++local_cmp;
            if (better(cand, heap.front())) {
              std::pop_heap(heap.begin(), heap.end(), better);
              heap.back() = cand;
              std::push_heap(heap.begin(), heap.end(), better);
            }
          }
        }
      }
      auto& out = res.indices[static_cast<std::size_t>(qi)];
      out.reserve(heap.size());
      for (const auto& c : heap) out.push_back(c.index);
      std::sort(out.begin(), out.end());
      res.threshold[static_cast<std::size_t>(qi)] = heap.front().score;
      // Heap scratch is released; the index list itself stays resident.
      if (opt.memory) {
        opt.memory->acquire(out.size());
        opt.memory->release(static_cast<std::size_t>(k));
      }
    }
    if (opt.memory) opt.memory->release(tile_buf.size());
    comparisons += local_cmp;
  });

  if (opt.flops) {
    opt.flops->estimate_flops += 2ull * static_cast<std::uint64_t>(q_lr.rows() * s_keys * dim);
    opt.flops->select_comparisons += comparisons.load();
  }
  return res;
}

}  // namespace detail

/// Top-k keys per query by q_lr . k_lr, never storing more than one tile of scores.
template <typename Scalar>
TopKResult streaming_topk(const HeadTensor<Scalar>& q_lr, const HeadTensor<Scalar>& k_lr,
                          Eigen::Index k, const SelectionOptions& opt = {}) {
  require(k >= 1 && k <= k_lr.rows(), "streaming_topk: k must lie in [1, S]");
  return detail::streaming_topk_impl(q_lr, k_lr, [k](Eigen::Index) { return k; }, opt);
}

/// Variant with an individual k per query row.
template <typename Scalar>
TopKResult streaming_topk(const HeadTensor<Scalar>& q_lr, const HeadTensor<Scalar>& k_lr,
                          std::span<const Eigen::Index> k_per_query, const SelectionOptions& opt = {}) {
  require(static_cast<Eigen::Index>(k_per_query.size()) == q_lr.rows(),
          "streaming_topk: one k per query required");
  for (Eigen::Index k : k_per_query) {
    require(k >= 1 && k <= k_lr.rows(), "streaming_topk: k must lie in [1, S]");
  }
  return detail::streaming_topk_impl(
      q_lr, k_lr, [k_per_query](Eigen::Index q) { return k_per_query[static_cast<std::size_t>(q)]; }, opt);
}

/// Pass 1 finds each query's k-th largest score; pass 2 recomputes the scores
/// and emits indices at or above it, keeping only the lowest-index ties.
template <typename Scalar>
TopKResult twopass_select(const HeadTensor<Scalar>& q_lr, const HeadTensor<Scalar>& k_lr,
                          Eigen::Index k, const SelectionOptions& opt = {}) {
  require(q_lr.cols() == k_lr.cols(), "twopass_select: low-rank dims differ");
  require(k >= 1 && k <= k_lr.rows(), "twopass_select: k must lie in [1, S]");
  require(opt.tile > 0, "twopass_select: tile must be positive");
  require(q_lr.allFinite() && k_lr.allFinite(), "twopass_select: non-finite input");
  const Eigen::Index s_keys = k_lr.rows();
  const Eigen::Index dim = q_lr.cols();
  TopKResult res;
  res.num_keys = s_keys;
  res.indices.resize(static_cast<std::size_t>(q_lr.rows()));
  res.threshold.resize(static_cast<std::size_t>(q_lr.rows()));
  std::atomic<std::uint64_t> comparisons{0};

  detail::for_query_ranges(q_lr.rows(), opt.threads, [&](Eigen::Index lo, Eigen::Index hi) {
    const Eigen::Index tile = std::min(opt.tile, s_keys);
    std::vector<double> tile_buf(static_cast<std::size_t>(tile));
    std::vector<double> heap;  // min-heap of the k best scores
    if (opt.memory) opt.memory->acquire(tile_buf.size());
    std::uint64_t local_cmp = 0;
    for (Eigen::Index qi = lo; qi < hi; ++qi) {
      const Scalar* qrow = q_lr.data() + qi * dim;
      heap.clear();
      heap.reserve(static_cast<std::size_t>(k));
      if (opt.memory) opt.memory->acquire(static_cast<std::size_t>(k));
      for (Eigen::Index c0 = 0; c0 < s_keys; c0 += tile) {
        const Eigen::Index c1 = std::min(s_keys, c0 + tile);
        for (Eigen::Index c = c0; c < c1; ++c) {
          tile_buf[static_cast<std::size_t>(c - c0)] = detail::lowrank_score(qrow, k_lr.data() + c * dim, dim);
        }
        for (Eigen::Index c = c0; c < c1; ++c) {
          const double sc = tile_buf[static_cast<std::size_t>(c - c0)];
          if (static_cast<Eigen::Index>(heap.size()) < k) {
            heap.push_back(sc);
            std::push_heap(heap.begin(), heap.end(), std::greater<>());
          } else {
            ++local_cmp;
            if (sc > heap.front()) {
              std::pop_heap(heap.begin(), heap.end(), std::greater<>());
              heap.back() = sc;
              std::push_heap(heap.begin(), heap.end(), std::greater<>());
            }
          }
        }
      }
      const double thr = heap.front();
      const auto above = static_cast<Eigen::Index>(std::count_if(heap.begin(), heap.end(),
                                                                 [thr](double x) { return x > thr; }));
      const Eigen::Index ties_allowed = k - above;
      if (opt.memory) opt.memory->release(static_cast<std::size_t>(k));

      auto& out = res.indices[static_cast<std::size_t>(qi)];
      out.reserve(static_cast<std::size_t>(k));
      if (opt.memory) opt.memory->acquire(static_cast<std::size_t>(k));
      Eigen::Index ties = 0;
      for (Eigen::Index c0 = 0; c0 < s_keys; c0 += tile) {
        const Eigen::Index c1 = std::min(s_keys, c0 + tile);
        for (Eigen::Index c = c0; c < c1; ++c) {
          const double sc = detail::lowrank_score(qrow, k_lr.data() + c * dim, dim);
          if (sc > thr) {
            out.push_back(static_cast<KvIndex>(c));
          } else if (sc == thr && ties < ties_allowed) {
            out.push_back(static_cast<KvIndex>(c));
            ++ties;
          }
        }
      }
      res.threshold[static_cast<std::size_t>(qi)] = thr;
    }
    if (opt.memory) opt.memory->release(tile_buf.size());
    comparisons += local_cmp;
  });

  if (opt.flops) {
    opt.flops->estimate_flops += 4ull * static_cast<std::uint64_t>(q_lr.rows() * s_keys * dim);
    opt.flops->select_comparisons += comparisons.load();
  }
  return res;
}

}  // namespace sparsedit
