#include "oracles.hpp"

#include "sparsedit/attention.hpp"
#include "sparsedit/grouping.hpp"

#include <doctest.h>

#include <set>

using namespace sparsedit;

TEST_CASE("voxel tiling with truncated boundary groups") {
  const auto plan = build_groups(TokenGrid{5, 4, 4}, GroupDims{2, 2, 2});
  CHECK(plan.num_groups() == 12);
  int full = 0, edge = 0;
  for (const auto& m : plan.members) {
    if (m.size() == 8) ++full;
    else if (m.size() == 4) ++edge;
  }
  CHECK(full == 8);
  CHECK(edge == 4);
}

TEST_CASE("groups partition the grid") {
  for (const auto& [grid, dims] : {std::pair{TokenGrid{3, 5, 7}, GroupDims{2, 2, 3}},
                                   std::pair{TokenGrid{4, 4, 4}, GroupDims{4, 4, 4}},
                                   std::pair{TokenGrid{2, 3, 1}, GroupDims{1, 1, 1}}}) {
    const auto plan = build_groups(grid, dims);
    std::vector<int> seen(static_cast<std::size_t>(grid.size()), 0);
    for (std::size_t g = 0; g < plan.num_groups(); ++g) {
      const auto& m = plan.members[g];
      CHECK(std::is_sorted(m.begin(), m.end()));
      CHECK(std::find(m.begin(), m.end(), plan.proxies[g]) != m.end());
      for (auto i : m) ++seen[static_cast<std::size_t>(i)];
    }
    CHECK(std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; }));
  }
}

TEST_CASE("proxy sits at the floor-half offset of its voxel") {
  const TokenGrid grid{5, 4, 4};
  const auto plan = build_groups(grid, GroupDims{2, 2, 2});
  CHECK(plan.proxies[0] == grid.flat(1, 1, 1));
  // Last frame slab is one frame thick: offset 0 on that axis.
  CHECK(plan.proxies.back() == grid.flat(4, 3, 3));
}

TEST_CASE("group plan JSON round trip and tamper check") {
  const auto plan = build_groups(TokenGrid{2, 4, 4}, GroupDims{1, 2, 2});
  const auto back = plan_from_json(plan_to_json(plan));
  CHECK(back.members == plan.members);
  CHECK(back.proxies == plan.proxies);
  auto text = plan_to_json(plan);
  const auto pos = text.find("\"proxies\"");
  REQUIRE(pos != std::string::npos);
  const auto digit = text.find_first_of("0123456789", pos);
  text[digit] = text[digit] == '9' ? '8' : static_cast<char>(text[digit] + 1);
  CHECK_THROWS_AS(plan_from_json(text), ConfigError);
  CHECK_THROWS_AS(plan_from_json("[1,2"), ConfigError);
}

TEST_CASE("overlap ratio") {
  CriticalIndexSet s;
  s.num_keys = 10;
  s.rows = {{1, 2, 3, 4}, {1, 2}, {5, 6}};
  CHECK(overlap_ratio(s, 0) == doctest::Approx((1.0 + 0.0) / 2));
  CriticalIndexSet one;
  one.num_keys = 3;
  one.rows = {{0}};
  CHECK(overlap_ratio(one, 0) == 1.0);
}

TEST_CASE("critical_sets by rule") {
  MatrixXd p(1, 4);
  p << 0.1, 0.6, 0.2, 0.1;
  CHECK(critical_sets(p, CriticalRule::by_topk(2)).rows[0] == std::vector<KvIndex>{1, 2});
  CHECK(critical_sets(p, CriticalRule::by_theta(0.7)).rows[0] == std::vector<KvIndex>{1, 2});
}

TEST_CASE("expanded group sets and grouped attention") {
  std::mt19937_64 rng(51);
  const TokenGrid grid{2, 3, 3};
  const auto plan = build_groups(grid, GroupDims{2, 2, 2});
  const Eigen::Index s = grid.size();
  const MatrixXd q = oracle::random_matrix(s, 4, rng), k = oracle::random_matrix(s, 4, rng),
                 v = oracle::random_matrix(s, 3, rng);
  CriticalIndexSet groups;
  groups.num_keys = s;
  for (std::size_t g = 0; g < plan.num_groups(); ++g) {
    std::vector<KvIndex> row;
    for (KvIndex j = 0; j < s; ++j)
      if ((j + g) % 3 == 0) row.push_back(j);
    groups.rows.push_back(row);
  }
  const auto expanded = expand_group_indices(plan, groups);
  for (std::size_t g = 0; g < plan.num_groups(); ++g)
    for (auto m : plan.members[g]) CHECK(expanded.rows[static_cast<std::size_t>(m)] == groups.rows[g]);
  const MatrixXd got = grouped_sparse_attention(q, k, v, plan, groups);
  CHECK((got - oracle::attention(q, k, v, &expanded.rows)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(proxy_rows(plan) == plan.proxies);
}

TEST_CASE("group size calibration keeps the largest passing entry") {
  std::mt19937_64 rng(52);
  const TokenGrid grid{4, 4, 4};
  // Identical queries everywhere: every member shares the proxy's set.
  const MatrixXd row = oracle::random_matrix(1, 4, rng, 3.0);
  const MatrixXd q = row.replicate(grid.size(), 1);
  const MatrixXd k = oracle::random_matrix(grid.size(), 4, rng);
  const auto cal = calibrate_group_size({q}, {k}, grid, CriticalRule::by_theta(0.9), 0.99);
  CHECK(cal.chosen == GroupDims{4, 4, 4});
  for (const auto& c : cal.candidates) CHECK(c.mean_overlap == doctest::Approx(1.0));

  // Unrelated queries: only singletons pass a strict target.
  const MatrixXd q2 = oracle::random_matrix(grid.size(), 4, rng, 4.0);
  const auto cal2 = calibrate_group_size({q2}, {k}, grid, CriticalRule::by_topk(2), 0.999);
  CHECK(cal2.chosen == GroupDims{1, 1, 1});
}
