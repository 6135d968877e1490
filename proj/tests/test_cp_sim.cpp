#include "oracles.hpp"

#include "sparsedit/attention.hpp"
#include "sparsedit/cp_sim.hpp"

#include <doctest.h>

#include <set>

using namespace sparsedit;

namespace {

struct Case {
  std::vector<MatrixXd> q, k, v;
  std::vector<CriticalIndexSet> sets;
};

Case random_case(std::mt19937_64& rng, int heads, Eigen::Index s, int d, int keep_mod) {
  Case c;
  for (int h = 0; h < heads; ++h) {
    c.q.push_back(oracle::random_matrix(s, d, rng));
    c.k.push_back(oracle::random_matrix(s, d, rng));
    c.v.push_back(oracle::random_matrix(s, d, rng));
    CriticalIndexSet set;
    set.num_keys = s;
    for (Eigen::Index r = 0; r < s; ++r) {
      std::vector<KvIndex> row;
      for (KvIndex j = 0; j < s; ++j)
        if (rng() % static_cast<std::uint64_t>(keep_mod) == 0 || static_cast<Eigen::Index>(j) == r) row.push_back(j);
      set.rows.push_back(row);
    }
    c.sets.push_back(set);
  }
  return c;
}

std::vector<MatrixXd> reference(const Case& c) {
  std::vector<MatrixXd> out;
  for (std::size_t h = 0; h < c.q.size(); ++h) out.push_back(oracle::attention(c.q[h], c.k[h], c.v[h], &c.sets[h].rows));
  return out;
}

double max_error(const std::vector<MatrixXd>& a, const std::vector<MatrixXd>& b) {
  double m = 0.0;
  for (std::size_t h = 0; h < a.size(); ++h) m = std::max(m, (a[h] - b[h]).cwiseAbs().maxCoeff());
  return m;
}

}  // namespace

TEST_CASE("single device equals local sparse attention with no traffic") {
  std::mt19937_64 rng(81);
  const auto c = random_case(rng, 2, 12, 4, 3);
  const SimPlan plan{1, 1, Placement::kHcpFirst, {0, 0}};
  const auto res = run_hybrid_sparse_cp(c.q, c.k, c.v, c.sets, plan);
  CHECK(max_error(res.output, reference(c)) < 1e-12);
  CHECK(res.log.messages.empty());
}

TEST_CASE("all-index sets reproduce full attention") {
  std::mt19937_64 rng(82);
  auto c = random_case(rng, 4, 16, 4, 2);
  for (auto& s : c.sets) s = all_indices(16, 16);
  for (auto pl : {Placement::kHcpFirst, Placement::kScpFirst}) {
    const SimPlan plan{2, 2, pl, {0, 1, 1, 0}};
    const auto res = run_hybrid_sparse_cp(c.q, c.k, c.v, c.sets, plan);
    for (int h = 0; h < 4; ++h)
      CHECK((res.output[static_cast<std::size_t>(h)] - oracle::attention(c.q[static_cast<std::size_t>(h)], c.k[static_cast<std::size_t>(h)], c.v[static_cast<std::size_t>(h)]))
                .cwiseAbs()
                .maxCoeff() < 1e-6);
    // Every remote key is gathered: full-gather volume per device.
    for (int r = 0; r < 4; ++r)
      CHECK(res.log.received(r, SimPhase::kScpKv) == 2ull * 2 * 4 * 16 / 2 * 1 * 2);
  }
}

TEST_CASE("uneven plans: equivalence, conservation and the byte ledger") {
  std::mt19937_64 rng(83);
  const int heads = 5, d = 4, width = 2;
  const Eigen::Index s = 24;
  const auto c = random_case(rng, heads, s, d, 4);
  const auto want = reference(c);
  for (auto [gh, gs] : {std::pair{1, 4}, std::pair{2, 2}, std::pair{4, 1}, std::pair{2, 3}, std::pair{3, 2}}) {
    std::vector<int> assign(heads);
    for (int h = 0; h < heads; ++h) assign[static_cast<std::size_t>(h)] = static_cast<int>(rng() % static_cast<std::uint64_t>(gh));
    for (auto pl : {Placement::kHcpFirst, Placement::kScpFirst}) {
      const SimPlan plan{gh, gs, pl, assign};
      const auto res = run_hybrid_sparse_cp(c.q, c.k, c.v, c.sets, plan, width);
      CHECK(max_error(res.output, want) < 1e-6);
      for (int p = 0; p < kNumSimPhases; ++p)
        CHECK(res.log.total_sent(static_cast<SimPhase>(p)) == res.log.total_received(static_cast<SimPhase>(p)));
      const auto check = check_ledger(res, plan, c.sets, d, width);
      CHECK_MESSAGE(check.ok, (check.mismatches.empty() ? "" : check.mismatches.front()));

      // Independent count of gathered KV: distinct remote keys per head over
      // the device's query chunk, K and V rows each.
      const Eigen::Index chunk = s / gs;
      for (const auto& dev : res.devices) {
        std::uint64_t rows = 0;
        for (int h = 0; h < heads; ++h) {
          if (assign[static_cast<std::size_t>(h)] != dev.hcp_pos) continue;
          std::set<KvIndex> need;
          for (Eigen::Index q = dev.scp_idx * chunk; q < (dev.scp_idx + 1) * chunk; ++q)
            for (auto kv : c.sets[static_cast<std::size_t>(h)].rows[static_cast<std::size_t>(q)])
              if (static_cast<Eigen::Index>(kv) / chunk != dev.scp_idx) need.insert(kv);
          rows += need.size();
        }
        CHECK(res.log.received(dev.rank, SimPhase::kScpKv) == rows * 2 * d * width);
        CHECK(dev.resident_remote_kv_bytes == rows * 2 * d * width);
        CHECK(dev.resident_qkvo_bytes == hcp_mem(dev.heads, chunk, d, width));
      }
    }
  }
}

TEST_CASE("a device keeping no heads sends all and receives none") {
  std::mt19937_64 rng(84);
  const auto c = random_case(rng, 3, 8, 2, 2);
  const SimPlan plan{2, 1, Placement::kHcpFirst, {0, 0, 0}};
  const auto res = run_hybrid_sparse_cp(c.q, c.k, c.v, c.sets, plan, 1);
  CHECK(res.log.received(1, SimPhase::kHcpFwd) == 0u);
  CHECK(res.log.sent(1, SimPhase::kHcpFwd) == 3ull * 4 * 3 * 2);
  CHECK(max_error(res.output, reference(c)) < 1e-6);
}

TEST_CASE("simulation is deterministic") {
  std::mt19937_64 rng(85);
  const auto c = random_case(rng, 4, 16, 4, 3);
  const SimPlan plan{2, 2, Placement::kScpFirst, {1, 0, 0, 1}};
  const auto a = run_hybrid_sparse_cp(c.q, c.k, c.v, c.sets, plan);
  const auto b = run_hybrid_sparse_cp(c.q, c.k, c.v, c.sets, plan);
  CHECK(a.log.to_json(4) == b.log.to_json(4));
  CHECK(max_error(a.output, b.output) == 0.0);
}

TEST_CASE("bad plans are rejected before any exchange") {
  std::mt19937_64 rng(86);
  const auto c = random_case(rng, 2, 8, 2, 2);
  CHECK_THROWS(run_hybrid_sparse_cp(c.q, c.k, c.v, c.sets, SimPlan{2, 2, Placement::kHcpFirst, {0}}));
  CHECK_THROWS(run_hybrid_sparse_cp(c.q, c.k, c.v, c.sets, SimPlan{2, 3, Placement::kHcpFirst, {0, 1}}));
  CHECK_THROWS(run_hybrid_sparse_cp(c.q, c.k, c.v, c.sets, SimPlan{2, 1, Placement::kHcpFirst, {0, 2}}));
}

TEST_CASE("equivalence report") {
  std::vector<MatrixXd> a{MatrixXd::Zero(3, 2)}, b = a;
  CHECK(verify_equivalence(a, b, 1e-6).pass);
  b[0](2, 1) = 1e-3;
  const auto rep = verify_equivalence(a, b, 1e-6);
  CHECK_FALSE(rep.pass);
  CHECK(rep.row == 2);
  CHECK(rep.col == 1);
  CHECK(rep.max_error == doctest::Approx(1e-3));
}
