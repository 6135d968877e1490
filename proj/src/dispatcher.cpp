#include "sparsedit/dispatcher.hpp"

#include "sparsedit/attention.hpp"
#include "sparsedit/selection.hpp"
#include "sparsedit/synthetic.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <random>
#include <sstream>

namespace sparsedit {

std::int64_t length_bucket(std::int64_t length) {
  require(length >= 1, "length_bucket: length must be positive");
  return static_cast<std::int64_t>(std::bit_ceil(static_cast<std::uint64_t>(length)));
}

int sparsity_bucket(double sparsity) {
  require(sparsity >= 0.0 && sparsity <= 1.0, "sparsity_bucket: sparsity must lie in [0, 1]");
  // Grid points like 0.7 sit a hair below their bucket edge in binary.
  return std::min(19, static_cast<int>(std::floor(sparsity * 20.0 + 1e-9)));
}

PathFlops path_flops(std::int64_t length, std::int64_t k, int d_k, int d_lr) {
  require(length >= 1 && k >= 1 && k <= length, "path_flops: need 1 <= k <= S");
  require(d_k >= 1 && d_lr >= 1, "path_flops: dims must be positive");
  const auto s = static_cast<std::uint64_t>(length), kk = static_cast<std::uint64_t>(k);
  PathFlops p;
  p.full.score_flops = 2 * s * s * static_cast<std::uint64_t>(d_k);
  p.full.value_flops = 2 * s * s * static_cast<std::uint64_t>(d_k);
  p.full.softmax_ops = s * s;
  p.sparse.score_flops = 2 * s * kk * static_cast<std::uint64_t>(d_k);
  p.sparse.value_flops = 2 * s * kk * static_cast<std::uint64_t>(d_k);
  p.sparse.softmax_ops = s * kk;
  p.sparse.estimate_flops = 2 * s * s * static_cast<std::uint64_t>(d_lr);
  p.sparse.select_comparisons = s * (s - kk);
  return p;
}

void CostProfileTable::add(const CostEntry& e) {
  require(e.full_time > 0.0 && e.sparse_time > 0.0, "CostProfileTable: times must be positive");
  entries_[{e.length, e.bucket}] = e;
}

std::vector<std::int64_t> CostProfileTable::lengths() const {
  std::vector<std::int64_t> out;
  for (const auto& [key, e] : entries_) {
    if (out.empty() || out.back() != key.first) out.push_back(key.first);
  }
  return out;
}

bool CostProfileTable::has_length(std::int64_t lb) const {
  auto it = entries_.lower_bound({lb, -1});
  return it != entries_.end() && it->first.first == lb;
}

std::int64_t CostProfileTable::nearest_length(std::int64_t length) const {
  require(!entries_.empty(), "CostProfileTable: table is empty");
  const double target = std::log2(static_cast<double>(length));
  std::int64_t best = 0;
  double best_dist = 0.0;
  for (std::int64_t lb : lengths()) {
    const double dist = std::abs(std::log2(static_cast<double>(lb)) - target);
    if (best == 0 || dist < best_dist) {
      best = lb;
      best_dist = dist;
    }
  }
  return best;
}

std::optional<int> CostProfileTable::crossover_bucket(std::int64_t lb) const {
  for (auto it = entries_.lower_bound({lb, -1}); it != entries_.end() && it->first.first == lb; ++it) {
    if (it->second.sparse_time < it->second.full_time) return it->first.second;
  }
  return std::nullopt;
}

std::string CostProfileTable::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "length,bucket,k,full_time,sparse_time,estimate_time,full_flops,sparse_flops,estimate_flops,"
        "select_comparisons,index_bytes\n";
  for (const auto& [key, e] : entries_) {
    os << e.length << ',' << e.bucket << ',' << e.k << ',' << e.full_time << ',' << e.sparse_time << ','
       << e.estimate_time << ',' << e.full_flops << ',' << e.sparse_flops << ',' << e.estimate_flops << ','
       << e.select_comparisons << ',' << e.index_bytes << '\n';
  }
  return os.str();
}

CostProfileTable CostProfileTable::from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line.rfind("length,bucket", 0) != 0)
    throw ConfigError("cost table: missing header");
  CostProfileTable t;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    CostEntry e;
    char c1, c2, c3, c4, c5, c6, c7, c8, c9, c10;
    ls >> e.length >> c1 >> e.bucket >> c2 >> e.k >> c3 >> e.full_time >> c4 >> e.sparse_time >> c5 >>
        e.estimate_time >> c6 >> e.full_flops >> c7 >> e.sparse_flops >> c8 >> e.estimate_flops >> c9 >>
        e.select_comparisons >> c10 >> e.index_bytes;
    if (!ls || e.full_time <= 0.0 || e.sparse_time <= 0.0)
      throw ConfigError("cost table: malformed row at line " + std::to_string(lineno));
    t.add(e);
  }
  if (t.entries_.empty()) throw ConfigError("cost table: no rows");
  return t;
}

namespace {

template <typename Fn>
double median_seconds(int reps, Fn&& fn) {
  std::vector<double> times;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(times.begin(), times.end());
  return times[times.size() / 2];
}

}  // namespace

CostProfileTable calibrate(const CalibrationConfig& cfg) {
  require(!cfg.lengths.empty() && !cfg.sparsities.empty(), "calibrate: empty grid");
  require(cfg.reps >= 1, "calibrate: reps must be >= 1");
  require(cfg.dense_rate > 0.0 && cfg.gather_efficiency > 0.0, "calibrate: rates must be positive");
  CostProfileTable table;
  std::mt19937_64 rng(cfg.seed);
  for (std::int64_t len : cfg.lengths) {
    const std::int64_t lb = length_bucket(len);
    MatrixXd q, k, v, q_lr, k_lr;
    double full_wall = 0.0;
    if (cfg.mode == TimingMode::kWall) {
      q = gaussian_matrix(lb, cfg.d_k, 1.0, rng);
      k = gaussian_matrix(lb, cfg.d_k, 1.0, rng);
      v = gaussian_matrix(lb, cfg.d_k, 1.0, rng);
      q_lr = gaussian_matrix(lb, cfg.d_lr, 1.0, rng);
      k_lr = gaussian_matrix(lb, cfg.d_lr, 1.0, rng);
      full_wall = median_seconds(cfg.reps, [&] { (void)full_attention(q, k, v); });
    }
    for (double s : cfg.sparsities) {
      const int b = sparsity_bucket(s);
      const std::int64_t kk = k_from_sparsity(bucket_sparsity(b), lb);
      const PathFlops pf = path_flops(lb, kk, cfg.d_k, cfg.d_lr);
      CostEntry e;
      e.length = lb;
      e.bucket = b;
      e.k = kk;
      e.full_flops = pf.full.score_value_flops();
      e.sparse_flops = pf.sparse.score_value_flops();
      e.estimate_flops = pf.sparse.estimate_flops;
      e.select_comparisons = pf.sparse.select_comparisons;
      e.index_bytes = index_memory_bytes(lb, kk);
      if (cfg.mode == TimingMode::kModel) {
        const double gather_rate = cfg.dense_rate * cfg.gather_efficiency;
        e.full_time = static_cast<double>(e.full_flops) / cfg.dense_rate;
        e.estimate_time = static_cast<double>(e.estimate_flops) / gather_rate +
                          static_cast<double>(e.select_comparisons) * cfg.compare_time;
        e.sparse_time = e.estimate_time + static_cast<double>(e.sparse_flops) / gather_rate;
      } else {
        TopKResult sel;
        e.estimate_time = median_seconds(cfg.reps, [&] { sel = streaming_topk(q_lr, k_lr, kk); });
        const CriticalIndexSet idx = sel.to_index_set();
        e.sparse_time = e.estimate_time + median_seconds(cfg.reps, [&] { (void)sparse_attention(q, k, v, idx); });
        e.full_time = full_wall;
      }
      table.add(e);
    }
  }
  return table;
}

const char* to_string(DispatchReason r) {
  switch (r) {
    case DispatchReason::kEnabled: return "enabled";
    case DispatchReason::kBelowThreshold: return "sparsity_below_threshold";
    case DispatchReason::kMemory: return "memory_exceeded";
    case DispatchReason::kNoCrossover: return "no_crossover";
  }
  return "unknown";
}

DispatchDecision decide(int block, double sparsity, std::int64_t length, std::uint64_t mem_free,
                        const CostProfileTable& table) {
  require(sparsity >= 0.0 && sparsity < 1.0, "decide: sparsity must lie in [0, 1)");
  require(length >= 1, "decide: length must be positive");
  DispatchDecision d;
  d.block = block;
  std::int64_t lb = length_bucket(length);
  if (!table.has_length(lb)) {
    lb = table.nearest_length(length);
    d.bucket_fallback = true;
  }
  d.k = k_from_sparsity(sparsity, length);
  d.index_bytes = index_memory_bytes(length, d.k);
  const auto cross = table.crossover_bucket(lb);
  if (!cross) {
    d.reason = DispatchReason::kNoCrossover;
    return d;
  }
  d.crossover = bucket_sparsity(*cross);
  if (sparsity < *d.crossover) {
    d.reason = DispatchReason::kBelowThreshold;
  } else if (d.index_bytes > mem_free) {
    d.reason = DispatchReason::kMemory;
  } else {
    d.enabled = true;
    d.reason = DispatchReason::kEnabled;
  }
  return d;
}

const DispatchDecision& Dispatcher::update(int block, double sparsity, std::int64_t length,
                                           std::int64_t iteration) {
  DispatchDecision d = decide(block, sparsity, length, mem_budget_, table_);
  auto it = last_.find(block);
  const bool was = it != last_.end() && it->second.enabled;
  if (was != d.enabled) transitions_.push_back({iteration, block, d.enabled, d.reason});
  return last_[block] = d;
}

bool Dispatcher::enabled(int block) const {
  auto it = last_.find(block);
  return it != last_.end() && it->second.enabled;
}

void Dispatcher::force(int block, bool on, std::int64_t iteration) {
  DispatchDecision& d = last_[block];
  if (d.enabled != on) transitions_.push_back({iteration, block, on, on ? DispatchReason::kEnabled : d.reason});
  d.block = block;
  d.enabled = on;
  if (on) d.reason = DispatchReason::kEnabled;
}

std::string calibration_to_json(const CalibrationConfig& cfg) {
  const nlohmann::json j{{"lengths", cfg.lengths},
                         {"sparsities", cfg.sparsities},
                         {"reps", cfg.reps},
                         {"d_k", cfg.d_k},
                         {"d_lr", cfg.d_lr},
                         {"mode", cfg.mode == TimingMode::kWall ? "wall" : "model"},
                         {"dense_rate", cfg.dense_rate},
                         {"gather_efficiency", cfg.gather_efficiency},
                         {"compare_time", cfg.compare_time},
                         {"seed", cfg.seed}};
  return j.dump(2);
}

CalibrationConfig calibration_from_json(const std::string& text) {
  CalibrationConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    if (!j.is_object()) throw ConfigError("calibration: expected an object");
    for (const auto& [key, value] : j.items()) {
      if (key == "lengths") c.lengths = value.get<std::vector<std::int64_t>>();
      else if (key == "sparsities") c.sparsities = value.get<std::vector<double>>();
      else if (key == "reps") c.reps = value.get<int>();
      else if (key == "d_k") c.d_k = value.get<int>();
      else if (key == "d_lr") c.d_lr = value.get<int>();
      else if (key == "mode") {
        const auto m = value.get<std::string>();
        if (m == "wall") c.mode = TimingMode::kWall;
        else if (m == "model") c.mode = TimingMode::kModel;
        else throw ConfigError("calibration: mode must be 'model' or 'wall'");
      } else if (key == "dense_rate") c.dense_rate = value.get<double>();
      else if (key == "gather_efficiency") c.gather_efficiency = value.get<double>();
      else if (key == "compare_time") c.compare_time = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else throw ConfigError("calibration: unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("calibration: ") + e.what());
  }
  if (c.lengths.empty() || c.sparsities.empty() || c.reps < 1 || c.d_k < 1 || c.d_lr < 1)
    throw ConfigError("calibration: lengths and sparsities must be non-empty, reps, d_k, d_lr >= 1");
  return c;
}

}  // namespace sparsedit
