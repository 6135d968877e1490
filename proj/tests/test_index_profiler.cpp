#include "oracles.hpp"

#include "sparsedit/attention.hpp"
#include "sparsedit/index_set.hpp"
#include "sparsedit/profiler.hpp"
#include "sparsedit/tensor_io.hpp"

#include <doctest.h>

#include <filesystem>
#include <set>
#include <sstream>

using namespace sparsedit;

namespace {

CriticalIndexSet random_set(std::mt19937_64& rng, std::size_t rows, Eigen::Index keys) {
  CriticalIndexSet s;
  s.num_keys = keys;
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<KvIndex> row;
    for (KvIndex j = 0; j < keys; ++j)
      if (rng() % 4 == 0) row.push_back(j);
    s.rows.push_back(row);
  }
  return s;
}

}  // namespace

TEST_CASE("index encodings round trip") {
  std::mt19937_64 rng(31);
  const auto set = random_set(rng, 17, 300);
  for (auto enc : {IndexEncoding::kFixed32, IndexEncoding::kVarintDelta}) {
    const auto bytes = encode_indices(set, enc);
    CHECK(decode_indices(bytes).rows == set.rows);
    CHECK(decode_indices(bytes).num_keys == 300);
  }
  CHECK(fixed32_payload_bytes(set) == set.total_selected() * 4);
  CHECK(indices_from_json(indices_to_json(set)).rows == set.rows);
}

TEST_CASE("varint edge values") {
  for (std::uint64_t v : {0ull, 1ull, 127ull, 128ull, 300ull, ~0ull}) {
    std::vector<std::uint8_t> b;
    append_varint(b, v);
    std::size_t pos = 0;
    CHECK(read_varint(b, pos) == v);
    CHECK(pos == b.size());
  }
}

TEST_CASE("truncated or malformed index data is rejected") {
  std::mt19937_64 rng(32);
  auto bytes = encode_indices(random_set(rng, 3, 20));
  bytes.resize(bytes.size() - 1);
  CHECK_THROWS(decode_indices(bytes));
  CriticalIndexSet bad;
  bad.num_keys = 4;
  bad.rows = {{2, 1}};
  CHECK_THROWS_AS(bad.validate(), InvalidInput);
  bad.rows = {{1, 4}};
  CHECK_THROWS_AS(bad.validate(), InvalidInput);
}

TEST_CASE("select_rows and all_indices") {
  const auto all = all_indices(3, 4);
  CHECK(all.rows[2] == std::vector<KvIndex>{0, 1, 2, 3});
  const std::vector<Eigen::Index> pick{2, 0};
  CriticalIndexSet s;
  s.num_keys = 5;
  s.rows = {{0}, {1}, {2, 3}};
  CHECK(select_rows(s, pick).rows == std::vector<std::vector<KvIndex>>{{2, 3}, {0}});
}

TEST_CASE("tensor files round trip") {
  std::mt19937_64 rng(33);
  const MatrixXd m = oracle::random_matrix(5, 7, rng);
  std::stringstream ss;
  write_tensor(ss, m);
  CHECK(read_tensor(ss) == m);
  const auto path = (std::filesystem::temp_directory_path() / "sparsedit_tensor.bin").string();
  save_tensor(path, m, DType::kFloat32);
  CHECK((load_tensor(path) - m).cwiseAbs().maxCoeff() < 1e-6);
  std::filesystem::remove(path);
}

TEST_CASE("query sampling") {
  SampleConfig cfg;
  cfg.seed = 5;
  const auto rows = sample_queries(1000, cfg, 3);
  CHECK(rows.size() == 63);
  CHECK(std::is_sorted(rows.begin(), rows.end()));
  CHECK(std::set<Eigen::Index>(rows.begin(), rows.end()).size() == rows.size());
  CHECK(rows.back() < 1000);
  CHECK(sample_queries(1000, cfg, 3) == rows);
  CHECK(sample_queries(1000, cfg, 4) != rows);
  cfg.factor = 1;
  CHECK(sample_queries(10, cfg).size() == 10);
}

TEST_CASE("block sparsity uses the sampled rows only") {
  std::mt19937_64 rng(34);
  std::vector<MatrixXd> q, k;
  for (int h = 0; h < 3; ++h) {
    q.push_back(oracle::random_matrix(64, 8, rng, 3.0));
    k.push_back(oracle::random_matrix(64, 8, rng));
  }
  SampleConfig cfg;
  cfg.factor = 4;
  cfg.seed = 9;
  const auto got = measure_block_sparsity(q, k, 0.9, cfg, 2);
  REQUIRE(got.size() == 3);
  for (int h = 0; h < 3; ++h) {
    const auto rows = sample_queries(64, cfg, 2 * 1315423911ull + static_cast<std::uint64_t>(h));
    MatrixXd qr(static_cast<Eigen::Index>(rows.size()), 8);
    for (std::size_t r = 0; r < rows.size(); ++r) qr.row(static_cast<Eigen::Index>(r)) = q[static_cast<std::size_t>(h)].row(rows[r]);
    const auto crit = oracle::critical(oracle::probabilities(qr, k[static_cast<std::size_t>(h)]), 0.9);
    double kept = 0.0;
    for (const auto& r : crit) kept += static_cast<double>(r.size()) / 64.0;
    CHECK(got[static_cast<std::size_t>(h)] == doctest::Approx(1.0 - kept / static_cast<double>(crit.size())));
  }
}

TEST_CASE("profile EMA") {
  CHECK(ema_update(0.5, 1.0, 0.25) == doctest::Approx(0.625));
  SparsityProfile p(0.5);
  CHECK_FALSE(p.has(0, 0));
  p.update(0, 0, 0.8, 0);
  CHECK(p.ema(0, 0) == 0.8);
  p.update(0, 0, 0.6, 10);
  CHECK(p.ema(0, 0) == doctest::Approx(0.7));
  CHECK(p.entry(0, 0).updates == 2);
  CHECK(p.entry(0, 0).iteration == 10);
  p.update_block(1, {0.1, 0.2}, 11);
  CHECK(p.block_ema(1) == std::vector<double>{0.1, 0.2});
  const auto back = SparsityProfile::from_json(p.to_json());
  CHECK(back.ema(0, 0) == p.ema(0, 0));
  CHECK(back.alpha() == 0.5);
  CHECK_THROWS(SparsityProfile::from_json("{"));
}
