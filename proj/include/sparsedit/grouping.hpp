#pragma once

// Voxel query grouping: adjacent queries on the token grid share one critical
// KV set, selected for a single proxy member of the voxel.

#include "sparsedit/attention.hpp"
#include "sparsedit/index_set.hpp"
#include "sparsedit/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace sparsedit {

struct GroupDims {
  int t = 1;
  int h = 1;
  int w = 1;

  [[nodiscard]] int member_count() const { return t * h * w; }
  bool operator==(const GroupDims&) const = default;
};

/// Axis-aligned tiling of a grid. Boundary voxels are truncated. Members are
/// listed in ascending flat order; the proxy sits at offset floor(extent/2)
/// on each axis of its (possibly truncated) voxel.
struct VoxelGroupPlan {
  TokenGrid grid;
  GroupDims dims;
  std::vector<std::vector<Eigen::Index>> members;
  std::vector<Eigen::Index> proxies;

  [[nodiscard]] std::size_t num_groups() const { return members.size(); }
};

VoxelGroupPlan build_groups(const TokenGrid& grid, const GroupDims& dims);

std::string plan_to_json(const VoxelGroupPlan& plan);
/// Members are rebuilt from grid and dims; stored proxies must agree.
VoxelGroupPlan plan_from_json(const std::string& text);

/// Mean over non-proxy members of |I_m & I_proxy| / |I_m|. `member_sets`
/// holds one list per member; `proxy_pos` is the proxy's position in it.
/// A single-member group has ratio 1.
double overlap_ratio(const CriticalIndexSet& member_sets, std::size_t proxy_pos);

/// How critical sets are formed during calibration.
struct CriticalRule {
  enum class Kind { kTheta, kTopK } kind = Kind::kTheta;
  double theta = 0.9;
  Eigen::Index k = 8;

  static CriticalRule by_theta(double theta) { return {Kind::kTheta, theta, 0}; }
  static CriticalRule by_topk(Eigen::Index k) { return {Kind::kTopK, 0.0, k}; }
};

/// Critical sets of the given score rows under `rule`.
CriticalIndexSet critical_sets(const MatrixXd& scores, const CriticalRule& rule);

std::vector<GroupDims> default_group_ladder();

struct CalibrationCandidate {
  GroupDims dims;
  double mean_overlap = 0.0;
  bool passed = false;
};

struct GroupCalibration {
  GroupDims chosen;
  std::vector<CalibrationCandidate> candidates;
};

/// Samples `samples` groups per ladder entry (per head, same group draw),
/// averages overlap_ratio, and keeps the largest member count that meets
/// `target_ratio`. Ladder entries that do not fit the grid are skipped.
GroupCalibration calibrate_group_size(const std::vector<MatrixXd>& q_heads,
                                      const std::vector<MatrixXd>& k_heads, const TokenGrid& grid,
                                      const CriticalRule& rule, double target_ratio,
                                      std::uint64_t seed = 0, int samples = 32,
                                      const std::vector<GroupDims>& ladder = default_group_ladder());

/// Query rows of every proxy, in group order.
std::vector<Eigen::Index> proxy_rows(const VoxelGroupPlan& plan);

/// Expands per-group sets to one list per query.
CriticalIndexSet expand_group_indices(const VoxelGroupPlan& plan, const CriticalIndexSet& group_sets);

/// Every member of a group attends over the group's shared set.
template <typename Scalar>
HeadTensor<Scalar> grouped_sparse_attention(const HeadTensor<Scalar>& q, const HeadTensor<Scalar>& k,
                                            const HeadTensor<Scalar>& v, const VoxelGroupPlan& plan,
                                            const CriticalIndexSet& group_sets,
                                            FlopCounter* counter = nullptr) {
  require(q.rows() == plan.grid.size(), "grouped_sparse_attention: Q rows do not match the grid");
  require(q.cols() == k.cols() && k.rows() == v.rows(), "grouped_sparse_attention: shape mismatch");
  require(group_sets.rows.size() == plan.num_groups(),
          "grouped_sparse_attention: need one index set per group");
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(q.cols()));
  HeadTensor<Scalar> out(q.rows(), v.cols());
  std::vector<Scalar> weights;
  for (std::size_t g = 0; g < plan.num_groups(); ++g) {
    const auto& sel = group_sets.rows[g];
    require(!sel.empty(), "grouped_sparse_attention: empty group index set");
    for (Eigen::Index r : plan.members[g]) {
      detail::attend_selected(q.data() + r * q.cols(), k, v, sel, scale, weights, out.data() + r * v.cols());
      if (counter) {
        counter->score_flops += 2ull * sel.size() * q.cols();
        counter->value_flops += 2ull * sel.size() * v.cols();
        counter->softmax_ops += sel.size();
      }
    }
  }
  return out;
}

}  // namespace sparsedit
