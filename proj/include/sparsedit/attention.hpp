#pragma once

// Dense reference attention, the critical-KV oracle, sparse attention over
// explicit index sets, and score-distribution statistics. All routines are
// pure and templated on the scalar type (double for reference math, float for
// throughput runs).

#include "sparsedit/flops.hpp"
#include "sparsedit/index_set.hpp"
#include "sparsedit/types.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

namespace sparsedit {

// Oracle prefix sums may land an ulp short of theta * total; this relative
// slack keeps exact-arithmetic cutoffs (0.5 + 0.3 + 0.1 against 0.9) stable.
inline constexpr double kMassSlack = 1e-12;

/// In-place numerically stable row softmax.
template <typename Scalar>
void softmax_rows(Matrix<Scalar>& logits) {
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    const Scalar m = row.maxCoeff();
    row = (row.array() - m).exp();
    row /= row.sum();
  }
}

/// softmax(Q K^T / sqrt(d_k)). Q may hold a subset of query rows.
template <typename Scalar>
Matrix<Scalar> attention_scores(const HeadTensor<Scalar>& q, const HeadTensor<Scalar>& k,
                                FlopCounter* counter = nullptr) {
  require(q.cols() == k.cols(), "attention_scores: Q and K head dims differ");
  require(q.cols() > 0 && k.rows() > 0, "attention_scores: empty input");
  require(q.allFinite() && k.allFinite(), "attention_scores: non-finite input");
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(q.cols()));
  Matrix<Scalar> a = (q * k.transpose()) * scale;
  softmax_rows(a);
  if (counter) {
    counter->score_flops += 2ull * q.rows() * k.rows() * q.cols();
    counter->softmax_ops += static_cast<std::uint64_t>(q.rows() * k.rows());
  }
  return a;
}

/// softmax(Q K^T / sqrt(d_k)) V.
template <typename Scalar>
HeadTensor<Scalar> full_attention(const HeadTensor<Scalar>& q, const HeadTensor<Scalar>& k,
                                  const HeadTensor<Scalar>& v, FlopCounter* counter = nullptr) {
  require(k.rows() == v.rows(), "full_attention: K and V row counts differ");
  require(v.allFinite(), "full_attention: non-finite V");
  const Matrix<Scalar> a = attention_scores(q, k, counter);
  if (counter) counter->value_flops += 2ull * q.rows() * k.rows() * v.cols();
  return a * v;
}

namespace detail {

// Indices of one score row ordered by descending score, lower index first on ties.
template <typename RowType>
std::vector<KvIndex> descending_order(const RowType& row) {
  std::vector<KvIndex> order(static_cast<std::size_t>(row.size()));
  std::iota(order.begin(), order.end(), KvIndex{0});
  std::sort(order.begin(), order.end(), [&](KvIndex a, KvIndex b) {
    if (row(a) != row(b)) return row(a) > row(b);
    return a < b;
  });
  return order;
}

}  // namespace detail

/// Per query, the minimal prefix of descending scores whose cumulative mass
/// reaches theta of the row total.
template <typename Scalar>
CriticalIndexSet critical_kv_oracle(const Matrix<Scalar>& scores, double theta) {
  require(theta > 0.0 && theta <= 1.0, "critical_kv_oracle: theta must lie in (0, 1]");
  CriticalIndexSet set;
  set.num_keys = scores.cols();
  set.theta = theta;
  set.rows.resize(static_cast<std::size_t>(scores.rows()));
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    const auto row = scores.row(r);
    const auto order = detail::descending_order(row);
    double total = 0.0;
    for (KvIndex j : order) total += static_cast<double>(row(j));
    const double target = theta * total - kMassSlack * total;
    auto& out = set.rows[static_cast<std::size_t>(r)];
    double cum = 0.0;
    for (KvIndex j : order) {
      out.push_back(j);
      cum += static_cast<double>(row(j));
      if (cum >= target) break;
    }
    std::sort(out.begin(), out.end());
  }
  return set;
}

/// Mean fraction of non-selected keys per query.
inline double head_sparsity(const CriticalIndexSet& idx, Eigen::Index num_keys) {
  require(num_keys > 0, "head_sparsity: num_keys must be positive");
  if (idx.rows.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& r : idx.rows) {
    acc += static_cast<double>(num_keys - static_cast<Eigen::Index>(r.size())) /
           static_cast<double>(num_keys);
  }
  return acc / static_cast<double>(idx.rows.size());
}

namespace detail {

template <typename Scalar>
inline Scalar dot_row(const Scalar* a, const Scalar* b, Eigen::Index n) {
  Scalar acc(0);
  for (Eigen::Index t = 0; t < n; ++t) acc += a[t] * b[t];
  return acc;
}

// One query's attention over `sel`, written into `out` (length v.cols()).
// Fixed loop order: every caller with the same selection gets identical bits.
template <typename Scalar>
void attend_selected(const Scalar* q_row, const HeadTensor<Scalar>& k, const HeadTensor<Scalar>& v,
                     const std::vector<KvIndex>& sel, Scalar scale, std::vector<Scalar>& weights,
                     Scalar* out) {
  const Eigen::Index dk = k.cols(), dv = v.cols();
  weights.resize(sel.size());
  Scalar m = -std::numeric_limits<Scalar>::infinity();
  for (std::size_t t = 0; t < sel.size(); ++t) {
    require(static_cast<Eigen::Index>(sel[t]) < k.rows(), "sparse_attention: index out of range");
    weights[t] = dot_row(q_row, k.data() + static_cast<Eigen::Index>(sel[t]) * dk, dk) * scale;
    m = std::max(m, weights[t]);
  }
  Scalar denom(0);
  for (auto& w : weights) {
    w = std::exp(w - m);
    denom += w;
  }
  for (Eigen::Index c = 0; c < dv; ++c) out[c] = Scalar(0);
  for (std::size_t t = 0; t < sel.size(); ++t) {
    const Scalar w = weights[t] / denom;
    const Scalar* vr = v.data() + static_cast<Eigen::Index>(sel[t]) * dv;
    for (Eigen::Index c = 0; c < dv; ++c) out[c] += w * vr[c];
  }
}

}  // namespace detail

/// Attention restricted to each query's index list; the softmax is
/// renormalized over the selected logits only.
template <typename Scalar>
HeadTensor<Scalar> sparse_attention(const HeadTensor<Scalar>& q, const HeadTensor<Scalar>& k,
                                    const HeadTensor<Scalar>& v, const CriticalIndexSet& idx,
                                    FlopCounter* counter = nullptr) {
  require(q.cols() == k.cols(), "sparse_attention: Q and K head dims differ");
  require(k.rows() == v.rows(), "sparse_attention: K and V row counts differ");
  require(idx.rows.size() == static_cast<std::size_t>(q.rows()),
          "sparse_attention: index set does not cover every query");
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(q.cols()));
  HeadTensor<Scalar> out(q.rows(), v.cols());
  std::vector<Scalar> weights;
  for (Eigen::Index r = 0; r < q.rows(); ++r) {
    const auto& sel = idx.rows[static_cast<std::size_t>(r)];
    require(!sel.empty(), "sparse_attention: empty index list for a query");
    detail::attend_selected(q.data() + r * q.cols(), k, v, sel, scale, weights, out.data() + r * v.cols());
    if (counter) {
      counter->score_flops += 2ull * sel.size() * q.cols();
      counter->value_flops += 2ull * sel.size() * v.cols();
      counter->softmax_ops += sel.size();
    }
  }
  return out;
}

struct DistributionReport {
  // Histogram bin upper edges on the score axis; the last bin is closed at 1.
  std::vector<double> bin_edges{1e-4, 1e-3, 1e-2, 1e-1, 1.0};
  Matrix<double> per_query_histogram;   // queries x bins, counts
  std::vector<double> aggregate_histogram;
  std::vector<double> top10_mass;       // per query, mass held by the top ceil(S/10) keys
  double frac_queries_top10_ge_90 = 0.0;
  double mean_top10_mass = 0.0;
  double theta = 0.9;
  double mean_critical_distance = 0.0;  // Euclidean, grid coordinates
  double frac_critical_within_5 = 0.0;
  double frac_critical_beyond_10 = 0.0;
};

/// Score-distribution statistics over a square score matrix laid out on `grid`.
template <typename Scalar>
DistributionReport analyze_distribution(const Matrix<Scalar>& scores, const TokenGrid& grid,
                                        double theta = 0.9) {
  require(scores.cols() == grid.size(), "analyze_distribution: score columns must match grid");
  require(scores.rows() == scores.cols(), "analyze_distribution: expected a square score matrix");
  DistributionReport rep;
  rep.theta = theta;
  const Eigen::Index s = scores.cols();
  const auto bins = static_cast<Eigen::Index>(rep.bin_edges.size());
  rep.per_query_histogram = Matrix<double>::Zero(scores.rows(), bins);
  rep.aggregate_histogram.assign(rep.bin_edges.size(), 0.0);
  rep.top10_mass.resize(static_cast<std::size_t>(scores.rows()));
  const auto top_count = static_cast<std::size_t>(std::max<Eigen::Index>(1, (s + 9) / 10));

  const CriticalIndexSet critical = critical_kv_oracle(scores, theta);
  double dist_sum = 0.0;
  std::uint64_t n_crit = 0, within5 = 0, beyond10 = 0;
  std::size_t ge90 = 0;

  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    const auto row = scores.row(r);
    for (Eigen::Index c = 0; c < s; ++c) {
      const double x = static_cast<double>(row(c));
      Eigen::Index b = 0;
      while (b + 1 < bins && x >= rep.bin_edges[static_cast<std::size_t>(b)]) ++b;
      rep.per_query_histogram(r, b) += 1.0;
    }
    const auto order = detail::descending_order(row);
    double total = 0.0, top = 0.0;
    for (std::size_t t = 0; t < order.size(); ++t) {
      total += static_cast<double>(row(order[t]));
      if (t < top_count) top += static_cast<double>(row(order[t]));
    }
    const double frac = total > 0.0 ? top / total : 0.0;
    rep.top10_mass[static_cast<std::size_t>(r)] = frac;
    rep.mean_top10_mass += frac;
    if (frac >= 0.9 - kMassSlack) ++ge90;

    const auto qc = grid.coords(r);
    for (KvIndex j : critical.rows[static_cast<std::size_t>(r)]) {
      const auto kc = grid.coords(j);
      const double df = qc[0] - kc[0], dh = qc[1] - kc[1], dw = qc[2] - kc[2];
      const double d = std::sqrt(df * df + dh * dh + dw * dw);
      dist_sum += d;
      ++n_crit;
      if (d <= 5.0) ++within5;
      if (d > 10.0) ++beyond10;
    }
  }
  for (Eigen::Index b = 0; b < bins; ++b) {
    rep.aggregate_histogram[static_cast<std::size_t>(b)] = rep.per_query_histogram.col(b).sum();
  }
  const auto nq = static_cast<double>(scores.rows());
  rep.mean_top10_mass /= nq;
  rep.frac_queries_top10_ge_90 = static_cast<double>(ge90) / nq;
  if (n_crit > 0) {
    rep.mean_critical_distance = dist_sum / static_cast<double>(n_crit);
    rep.frac_critical_within_5 = static_cast<double>(within5) / static_cast<double>(n_crit);
    rep.frac_critical_beyond_10 = static_cast<double>(beyond10) / static_cast<double>(n_crit);
  }
  return rep;
}

}  // namespace sparsedit
