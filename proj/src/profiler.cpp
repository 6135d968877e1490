#include "sparsedit/profiler.hpp"

#include "sparsedit/attention.hpp"

#include <json.hpp>

#include <algorithm>
#include <numeric>
#include <random>

namespace sparsedit {

std::vector<Eigen::Index> sample_queries(Eigen::Index num_queries, const SampleConfig& cfg,
                                         std::uint64_t stream) {
  require(num_queries >= 1, "sample_queries: need at least one query");
  require(cfg.factor >= 1, "sample_queries: factor must be >= 1");
  const Eigen::Index want = (num_queries + cfg.factor - 1) / cfg.factor;
  std::vector<Eigen::Index> pool(static_cast<std::size_t>(num_queries));
  std::iota(pool.begin(), pool.end(), Eigen::Index{0});
  if (want == num_queries) return pool;

  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  std::mt19937_64 rng(seq);
  // Partial Fisher-Yates: the first `want` slots become a uniform sample.
  for (Eigen::Index i = 0; i < want; ++i) {
    std::uniform_int_distribution<Eigen::Index> pick(i, num_queries - 1);
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(pick(rng))]);
  }
  pool.resize(static_cast<std::size_t>(want));
  std::sort(pool.begin(), pool.end());
  return pool;
}

std::vector<double> measure_block_sparsity(const std::vector<MatrixXd>& q_heads,
                                           const std::vector<MatrixXd>& k_heads, double theta,
                                           const SampleConfig& cfg, std::uint64_t stream) {
  require(q_heads.size() == k_heads.size() && !q_heads.empty(),
          "measure_block_sparsity: need matching, non-empty per-head Q and K");
  std::vector<double> out;
  out.reserve(q_heads.size());
  for (std::size_t h = 0; h < q_heads.size(); ++h) {
    const MatrixXd& q = q_heads[h];
    const MatrixXd& k = k_heads[h];
    const auto rows = sample_queries(q.rows(), cfg, stream * 1315423911ull + h);
    MatrixXd q_sampled(static_cast<Eigen::Index>(rows.size()), q.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) q_sampled.row(static_cast<Eigen::Index>(r)) = q.row(rows[r]);
    const MatrixXd scores = attention_scores(q_sampled, k);
    out.push_back(head_sparsity(critical_kv_oracle(scores, theta), k.rows()));
  }
  return out;
}

double ema_update(double prev, double sample, double alpha) {
  require(prev >= 0.0 && prev <= 1.0, "ema_update: prev must lie in [0, 1]");
  require(sample >= 0.0 && sample <= 1.0, "ema_update: sample must lie in [0, 1]");
  require(alpha > 0.0 && alpha <= 1.0, "ema_update: alpha must lie in (0, 1]");
  return alpha * sample + (1.0 - alpha) * prev;
}

SparsityProfile::SparsityProfile(double alpha) : alpha_(alpha) {
  require(alpha > 0.0 && alpha <= 1.0, "SparsityProfile: alpha must lie in (0, 1]");
}

void SparsityProfile::update(int block, int head, double sample, std::int64_t iteration) {
  require(sample >= 0.0 && sample <= 1.0, "SparsityProfile: sample must lie in [0, 1]");
  Entry& e = entries_[{block, head}];
  e.ema = e.updates == 0 ? sample : ema_update(e.ema, sample, alpha_);
  e.sample = sample;
  e.iteration = iteration;
  ++e.updates;
}

void SparsityProfile::update_block(int block, const std::vector<double>& samples, std::int64_t iteration) {
  for (std::size_t h = 0; h < samples.size(); ++h) update(block, static_cast<int>(h), samples[h], iteration);
}

bool SparsityProfile::has(int block, int head) const { return entries_.count({block, head}) > 0; }

const SparsityProfile::Entry& SparsityProfile::entry(int block, int head) const {
  auto it = entries_.find({block, head});
  require(it != entries_.end(), "SparsityProfile: no entry for block/head");
  return it->second;
}

std::vector<double> SparsityProfile::block_ema(int block) const {
  std::vector<double> out;
  for (const auto& [key, e] : entries_) {
    if (key.first == block) out.push_back(e.ema);
  }
  return out;
}

std::string SparsityProfile::to_json() const {
  nlohmann::json j;
  j["alpha"] = alpha_;
  j["entries"] = nlohmann::json::array();
  for (const auto& [key, e] : entries_) {
    j["entries"].push_back({{"block", key.first},
                            {"head", key.second},
                            {"ema", e.ema},
                            {"sample", e.sample},
                            {"iteration", e.iteration},
                            {"updates", e.updates}});
  }
  return j.dump(2);
}

SparsityProfile SparsityProfile::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("sparsity profile: ") + e.what());
  }
  try {
    SparsityProfile p(j.value("alpha", 0.1));
    for (const auto& e : j.at("entries")) {
      Entry& dst = p.entries_[{e.at("block").get<int>(), e.at("head").get<int>()}];
      dst.ema = e.at("ema").get<double>();
      dst.sample = e.value("sample", dst.ema);
      dst.iteration = e.value("iteration", std::int64_t{0});
      dst.updates = e.value("updates", 1);
      if (dst.ema < 0.0 || dst.ema > 1.0) throw ConfigError("sparsity profile: ema outside [0, 1]");
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("sparsity profile: ") + e.what());
  }
}

}  // namespace sparsedit
