#include "sparsedit/grouping.hpp"

#include <json.hpp>

#include <algorithm>
#include <numeric>
#include <random>

namespace sparsedit {

namespace {

int ceil_div(int a, int b) { return (a + b - 1) / b; }

}  // namespace

VoxelGroupPlan build_groups(const TokenGrid& grid, const GroupDims& dims) {
  require(dims.t >= 1 && dims.h >= 1 && dims.w >= 1, "build_groups: group dims must be positive");
  require(dims.t <= grid.frames && dims.h <= grid.height && dims.w <= grid.width,
          "build_groups: group dims exceed the grid");
  VoxelGroupPlan plan;
  plan.grid = grid;
  plan.dims = dims;
  const int nt = ceil_div(grid.frames, dims.t), nh = ceil_div(grid.height, dims.h),
            nw = ceil_div(grid.width, dims.w);
  plan.members.reserve(static_cast<std::size_t>(nt) * nh * nw);
  for (int bt = 0; bt < nt; ++bt) {
    for (int bh = 0; bh < nh; ++bh) {
      for (int bw = 0; bw < nw; ++bw) {
        const int f0 = bt * dims.t, h0 = bh * dims.h, w0 = bw * dims.w;
        const int et = std::min(dims.t, grid.frames - f0);
        const int eh = std::min(dims.h, grid.height - h0);
        const int ew = std::min(dims.w, grid.width - w0);
        std::vector<Eigen::Index> m;
        m.reserve(static_cast<std::size_t>(et) * eh * ew);
        for (int f = f0; f < f0 + et; ++f)
          for (int h = h0; h < h0 + eh; ++h)
            for (int w = w0; w < w0 + ew; ++w) m.push_back(grid.flat(f, h, w));
        plan.members.push_back(std::move(m));
        plan.proxies.push_back(grid.flat(f0 + et / 2, h0 + eh / 2, w0 + ew / 2));
      }
    }
  }
  return plan;
}

std::string plan_to_json(const VoxelGroupPlan& plan) {
  nlohmann::json j;
  j["grid"] = {plan.grid.frames, plan.grid.height, plan.grid.width};
  j["dims"] = {plan.dims.t, plan.dims.h, plan.dims.w};
  j["proxies"] = plan.proxies;
  return j.dump();
}

VoxelGroupPlan plan_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    const auto g = j.at("grid").get<std::vector<int>>();
    const auto d = j.at("dims").get<std::vector<int>>();
    if (g.size() != 3 || d.size() != 3) throw ConfigError("group plan: grid and dims need 3 entries");
    VoxelGroupPlan plan = build_groups(TokenGrid(g[0], g[1], g[2]), GroupDims{d[0], d[1], d[2]});
    if (j.contains("proxies") && j.at("proxies").get<std::vector<Eigen::Index>>() != plan.proxies)
      throw ConfigError("group plan: stored proxies disagree with the rebuilt plan");
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("group plan: ") + e.what());
  } catch (const InvalidInput& e) {
    throw ConfigError(std::string("group plan: ") + e.what());
  }
}

double overlap_ratio(const CriticalIndexSet& member_sets, std::size_t proxy_pos) {
  require(proxy_pos < member_sets.rows.size() || member_sets.rows.empty(),
          "overlap_ratio: proxy position out of range");
  if (member_sets.rows.size() <= 1) return 1.0;
  const auto& proxy = member_sets.rows[proxy_pos];
  double acc = 0.0;
  std::vector<KvIndex> common;
  for (std::size_t m = 0; m < member_sets.rows.size(); ++m) {
    if (m == proxy_pos) continue;
    const auto& own = member_sets.rows[m];
    require(!own.empty(), "overlap_ratio: empty member set");
    common.clear();
    std::set_intersection(own.begin(), own.end(), proxy.begin(), proxy.end(), std::back_inserter(common));
    acc += static_cast<double>(common.size()) / static_cast<double>(own.size());
  }
  return acc / static_cast<double>(member_sets.rows.size() - 1);
}

CriticalIndexSet critical_sets(const MatrixXd& scores, const CriticalRule& rule) {
  if (rule.kind == CriticalRule::Kind::kTheta) return critical_kv_oracle(scores, rule.theta);
  require(rule.k >= 1 && rule.k <= scores.cols(), "critical_sets: k must lie in [1, S]");
  CriticalIndexSet set;
  set.num_keys = scores.cols();
  set.rows.resize(static_cast<std::size_t>(scores.rows()));
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    auto order = detail::descending_order(scores.row(r));
    order.resize(static_cast<std::size_t>(rule.k));
    std::sort(order.begin(), order.end());
    set.rows[static_cast<std::size_t>(r)] = std::move(order);
  }
  return set;
}

std::vector<GroupDims> default_group_ladder() {
  return {{1, 1, 1}, {2, 2, 1}, {2, 2, 2}, {4, 2, 2}, {4, 4, 2}, {4, 4, 4}};
}

GroupCalibration calibrate_group_size(const std::vector<MatrixXd>& q_heads,
                                      const std::vector<MatrixXd>& k_heads, const TokenGrid& grid,
                                      const CriticalRule& rule, double target_ratio, std::uint64_t seed,
                                      int samples, const std::vector<GroupDims>& ladder) {
  require(target_ratio > 0.0 && target_ratio <= 1.0, "calibrate_group_size: target ratio must lie in (0, 1]");
  require(!q_heads.empty() && q_heads.size() == k_heads.size(),
          "calibrate_group_size: need matching per-head Q and K");
  require(samples >= 1, "calibrate_group_size: need at least one sample");
  for (const auto& q : q_heads) require(q.rows() == grid.size(), "calibrate_group_size: Q rows do not match grid");

  GroupCalibration out;
  out.chosen = GroupDims{1, 1, 1};
  int best_members = 1;
  std::mt19937_64 rng(seed);
  for (const GroupDims& dims : ladder) {
    if (dims.t > grid.frames || dims.h > grid.height || dims.w > grid.width) continue;
    const VoxelGroupPlan plan = build_groups(grid, dims);
    std::vector<std::size_t> picks(plan.num_groups());
    std::iota(picks.begin(), picks.end(), std::size_t{0});
    std::shuffle(picks.begin(), picks.end(), rng);
    picks.resize(std::min(picks.size(), static_cast<std::size_t>(samples)));

    double acc = 0.0;
    for (std::size_t h = 0; h < q_heads.size(); ++h) {
      for (std::size_t g : picks) {
        const auto& members = plan.members[g];
        MatrixXd q_rows(static_cast<Eigen::Index>(members.size()), q_heads[h].cols());
        std::size_t proxy_pos = 0;
        for (std::size_t m = 0; m < members.size(); ++m) {
          q_rows.row(static_cast<Eigen::Index>(m)) = q_heads[h].row(members[m]);
          if (members[m] == plan.proxies[g]) proxy_pos = m;
        }
        acc += overlap_ratio(critical_sets(attention_scores(q_rows, k_heads[h]), rule), proxy_pos);
      }
    }
    const double mean = acc / static_cast<double>(picks.size() * q_heads.size());
    const bool passed = mean >= target_ratio;
    out.candidates.push_back({dims, mean, passed});
    if (passed && dims.member_count() > best_members) {
      best_members = dims.member_count();
      out.chosen = dims;
    }
  }
  return out;
}

std::vector<Eigen::Index> proxy_rows(const VoxelGroupPlan& plan) { return plan.proxies; }

CriticalIndexSet expand_group_indices(const VoxelGroupPlan& plan, const CriticalIndexSet& group_sets) {
  require(group_sets.rows.size() == plan.num_groups(), "expand_group_indices: need one set per group");
  CriticalIndexSet out;
  out.num_keys = group_sets.num_keys;
  out.theta = group_sets.theta;
  out.rows.resize(static_cast<std::size_t>(plan.grid.size()));
  for (std::size_t g = 0; g < plan.num_groups(); ++g)
    for (Eigen::Index r : plan.members[g]) out.rows[static_cast<std::size_t>(r)] = group_sets.rows[g];
  return out;
}

}  // namespace sparsedit
