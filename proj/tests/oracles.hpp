#pragma once

// Independent reference implementations used by the unit and acceptance
// tests. Nothing here calls into the library's algorithms.

#include "sparsedit/index_set.hpp"
#include "sparsedit/types.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

namespace oracle {

using sparsedit::CriticalIndexSet;
using sparsedit::KvIndex;
using sparsedit::MatrixXd;

inline MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = n(rng);
  return m;
}

/// Softmax(q k^T / sqrt(d)) row by row, plain loops.
inline MatrixXd probabilities(const MatrixXd& q, const MatrixXd& k) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  MatrixXd p(q.rows(), k.rows());
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    double mx = -INFINITY;
    for (Eigen::Index j = 0; j < k.rows(); ++j) {
      double s = 0.0;
      for (Eigen::Index c = 0; c < q.cols(); ++c) s += q(i, c) * k(j, c);
      p(i, j) = s * scale;
      mx = std::max(mx, p(i, j));
    }
    double z = 0.0;
    for (Eigen::Index j = 0; j < k.rows(); ++j) z += (p(i, j) = std::exp(p(i, j) - mx));
    for (Eigen::Index j = 0; j < k.rows(); ++j) p(i, j) /= z;
  }
  return p;
}

/// Attention restricted to `keys[i]` for query i (all keys when empty).
inline MatrixXd attention(const MatrixXd& q, const MatrixXd& k, const MatrixXd& v,
                          const std::vector<std::vector<KvIndex>>* keys = nullptr) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  MatrixXd out = MatrixXd::Zero(q.rows(), v.cols());
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    std::vector<KvIndex> sel;
    if (keys) sel = (*keys)[static_cast<std::size_t>(i)];
    else
      for (Eigen::Index j = 0; j < k.rows(); ++j) sel.push_back(static_cast<KvIndex>(j));
    std::vector<double> w;
    double mx = -INFINITY;
    for (KvIndex j : sel) {
      double s = 0.0;
      for (Eigen::Index c = 0; c < q.cols(); ++c) s += q(i, c) * k(j, c);
      w.push_back(s * scale);
      mx = std::max(mx, w.back());
    }
    double z = 0.0;
    for (double& x : w) z += (x = std::exp(x - mx));
    for (std::size_t t = 0; t < sel.size(); ++t)
      for (Eigen::Index c = 0; c < v.cols(); ++c) out(i, c) += w[t] / z * v(sel[t], c);
  }
  return out;
}

/// Keys ordered by (score desc, index asc).
inline std::vector<KvIndex> ranked(const std::vector<double>& scores) {
  std::vector<KvIndex> o(scores.size());
  std::iota(o.begin(), o.end(), KvIndex{0});
  std::stable_sort(o.begin(), o.end(), [&](KvIndex a, KvIndex b) { return scores[a] > scores[b]; });
  return o;
}

/// Full-sort top-k of q_lr k_lr^T, dot products accumulated left to right.
inline std::vector<std::vector<KvIndex>> topk(const MatrixXd& q, const MatrixXd& k, Eigen::Index kk) {
  std::vector<std::vector<KvIndex>> res;
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    std::vector<double> s(static_cast<std::size_t>(k.rows()));
    for (Eigen::Index j = 0; j < k.rows(); ++j) {
      double acc = 0.0;
      for (Eigen::Index c = 0; c < q.cols(); ++c) acc += q(i, c) * k(j, c);
      s[static_cast<std::size_t>(j)] = acc;
    }
    auto o = ranked(s);
    o.resize(static_cast<std::size_t>(kk));
    std::sort(o.begin(), o.end());
    res.push_back(std::move(o));
  }
  return res;
}

/// Smallest prefix of the ranked keys whose mass reaches theta.
inline std::vector<std::vector<KvIndex>> critical(const MatrixXd& probs, double theta) {
  std::vector<std::vector<KvIndex>> res;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    std::vector<double> s(static_cast<std::size_t>(probs.cols()));
    double total = 0.0;
    for (Eigen::Index j = 0; j < probs.cols(); ++j) total += (s[static_cast<std::size_t>(j)] = probs(i, j));
    const auto o = ranked(s);
    std::vector<KvIndex> keep;
    double mass = 0.0;
    for (KvIndex j : o) {
      keep.push_back(j);
      mass += s[j];
      if (mass >= theta * total - 1e-12) break;
    }
    std::sort(keep.begin(), keep.end());
    res.push_back(std::move(keep));
  }
  return res;
}

/// Minimum makespan over every assignment of loads to n bins.
inline double brute_makespan(const std::vector<double>& loads, int n) {
  const std::size_t h = loads.size();
  std::vector<int> a(h, 0);
  double best = INFINITY;
  while (true) {
    std::vector<double> bin(static_cast<std::size_t>(n), 0.0);
    for (std::size_t i = 0; i < h; ++i) bin[static_cast<std::size_t>(a[i])] += loads[i];
    best = std::min(best, *std::max_element(bin.begin(), bin.end()));
    std::size_t i = 0;
    while (i < h && ++a[i] == n) a[i++] = 0;
    if (i == h) break;
  }
  return best;
}

/// Minimum makespan of integer loads over n bins: binary search on the
/// capacity with a subset DP feasibility test (fewest bins, least fill).
inline std::int64_t dp_makespan(const std::vector<std::int64_t>& loads, int n) {
  const int h = static_cast<int>(loads.size());
  if (h == 0) return 0;
  const std::int64_t total = std::accumulate(loads.begin(), loads.end(), std::int64_t{0});
  std::int64_t lo = *std::max_element(loads.begin(), loads.end()), hi = total;
  const auto fits = [&](std::int64_t cap) {
    const std::size_t m = std::size_t{1} << h;
    std::vector<std::pair<int, std::int64_t>> best(m, {h + 1, 0});
    best[0] = {1, 0};
    for (std::size_t mask = 1; mask < m; ++mask) {
      for (int i = 0; i < h; ++i) {
        if (!(mask >> i & 1)) continue;
        auto [bins, fill] = best[mask ^ (std::size_t{1} << i)];
        if (fill + loads[static_cast<std::size_t>(i)] <= cap) fill += loads[static_cast<std::size_t>(i)];
        else {
          ++bins;
          fill = loads[static_cast<std::size_t>(i)];
        }
        best[mask] = std::min(best[mask], std::make_pair(bins, fill));
      }
    }
    return best[m - 1].first <= n;
  };
  while (lo < hi) {
    const std::int64_t mid = lo + (hi - lo) / 2;
    if (fits(mid)) hi = mid;
    else lo = mid + 1;
  }
  return lo;
}

/// Central finite difference of f at x along every entry of x.
inline MatrixXd finite_difference(const std::function<double(const MatrixXd&)>& f, MatrixXd x, double h) {
  MatrixXd g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double keep = x(i, j);
      x(i, j) = keep + h;
      const double up = f(x);
      x(i, j) = keep - h;
      const double down = f(x);
      x(i, j) = keep;
      g(i, j) = (up - down) / (2 * h);
    }
  return g;
}

}  // namespace oracle
