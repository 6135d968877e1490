#include "sparsedit/cp_model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

namespace sparsedit {

void ClusterSpec::validate() const {
  require(devices >= 1 && devices_per_node >= 1, "ClusterSpec: device counts must be positive");
  require(devices % devices_per_node == 0 || devices < devices_per_node,
          "ClusterSpec: devices_per_node must divide the device count");
  require(intra_bw > 0 && inter_bw > 0 && compute_rate > 0 && memory_cap > 0 && elem_width > 0,
          "ClusterSpec: rates, memory cap and element width must be positive");
}

std::string ClusterSpec::to_json() const {
  nlohmann::json j{{"devices", devices},         {"devices_per_node", devices_per_node},
                   {"intra_bw", intra_bw},       {"inter_bw", inter_bw},
                   {"compute_rate", compute_rate}, {"memory_cap", memory_cap},
                   {"elem_width", elem_width}};
  return j.dump(2);
}

ClusterSpec ClusterSpec::from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    static const std::set<std::string> known{"devices",      "devices_per_node", "intra_bw",  "inter_bw",
                                             "compute_rate", "memory_cap",       "elem_width"};
    for (const auto& [key, value] : j.items())
      if (!known.count(key)) throw ConfigError("cluster spec: unknown key '" + key + "'");
    ClusterSpec c;
    c.devices = j.at("devices").get<int>();
    c.devices_per_node = j.value("devices_per_node", c.devices);
    c.intra_bw = j.at("intra_bw").get<double>();
    c.inter_bw = j.value("inter_bw", c.intra_bw);
    c.compute_rate = j.at("compute_rate").get<double>();
    c.memory_cap = j.at("memory_cap").get<double>();
    c.elem_width = j.value("elem_width", 2);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("cluster spec: ") + e.what());
  } catch (const InvalidInput& e) {
    throw ConfigError(std::string("cluster spec: ") + e.what());
  }
}

std::vector<std::vector<int>> HcpPlan::device_heads() const {
  std::vector<std::vector<int>> out(heads_per_device.size());
  for (std::size_t h = 0; h < assignment.size(); ++h)
    out[static_cast<std::size_t>(assignment[h])].push_back(static_cast<int>(h));
  return out;
}

double plan_makespan(std::span<const double> loads, std::span<const int> assignment, int devices) {
  std::vector<double> acc(static_cast<std::size_t>(devices), 0.0);
  for (std::size_t h = 0; h < loads.size(); ++h) acc[static_cast<std::size_t>(assignment[h])] += loads[h];
  return *std::max_element(acc.begin(), acc.end());
}

namespace {

HcpPlan finish_plan(std::span<const double> loads, std::vector<int> assignment, int devices, bool optimal) {
  HcpPlan p;
  p.assignment = std::move(assignment);
  p.heads_per_device.assign(static_cast<std::size_t>(devices), 0);
  p.device_load.assign(static_cast<std::size_t>(devices), 0.0);
  for (std::size_t h = 0; h < loads.size(); ++h) {
    const auto d = static_cast<std::size_t>(p.assignment[h]);
    ++p.heads_per_device[d];
    p.device_load[d] += loads[h];
  }
  p.comp = *std::max_element(p.device_load.begin(), p.device_load.end());
  p.optimal = optimal;
  return p;
}

struct BranchAndBound {
  std::span<const double> loads;
  std::vector<int> order;  // heads by descending load
  int devices = 1;
  double lower = 0.0;
  std::vector<double> bins;
  std::vector<int> current;
  std::vector<int> best;
  double best_val = 0.0;

  void run(std::size_t pos) {
    if (best_val <= lower) return;
    if (pos == order.size()) {
      const double val = *std::max_element(bins.begin(), bins.end());
      if (val < best_val) {
        best_val = val;
        best = current;
      }
      return;
    }
    const int head = order[pos];
    const double l = loads[static_cast<std::size_t>(head)];
    bool tried_empty = false;
    for (int d = 0; d < devices; ++d) {
      auto& bin = bins[static_cast<std::size_t>(d)];
      if (bin == 0.0) {
        // Empty devices are interchangeable.
        if (tried_empty) continue;
        tried_empty = true;
      }
      if (bin + l >= best_val) continue;
      bin += l;
      current[static_cast<std::size_t>(head)] = d;
      run(pos + 1);
      bin -= l;
      if (best_val <= lower) return;
    }
  }
};

std::vector<int> lpt(std::span<const double> loads, std::span<const int> order, int devices) {
  std::vector<double> bins(static_cast<std::size_t>(devices), 0.0);
  std::vector<int> assign(loads.size(), 0);
  for (int h : order) {
    const auto d = std::min_element(bins.begin(), bins.end()) - bins.begin();
    bins[static_cast<std::size_t>(d)] += loads[static_cast<std::size_t>(h)];
    assign[static_cast<std::size_t>(h)] = static_cast<int>(d);
  }
  return assign;
}

}  // namespace

HcpPlan balance_heads(std::span<const double> loads, int devices, int exact_limit) {
  require(!loads.empty(), "balance_heads: need at least one head");
  require(devices >= 1, "balance_heads: need at least one device");
  for (double l : loads) require(l >= 0.0 && std::isfinite(l), "balance_heads: loads must be finite and >= 0");

  std::vector<int> order(loads.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return loads[static_cast<std::size_t>(a)] > loads[static_cast<std::size_t>(b)];
  });
  const double total = std::accumulate(loads.begin(), loads.end(), 0.0);
  const double lower = std::max(loads[static_cast<std::size_t>(order.front())], total / devices);

  std::vector<int> assign = lpt(loads, order, devices);
  double val = plan_makespan(loads, assign, devices);

  if (static_cast<int>(loads.size()) <= exact_limit) {
    BranchAndBound bb{loads, order, devices, lower, std::vector<double>(static_cast<std::size_t>(devices), 0.0),
                      std::vector<int>(loads.size(), 0), assign, val};
    bb.run(0);
    return finish_plan(loads, bb.best, devices, true);
  }

  // Local search: move or swap a head off the most loaded device while that
  // strictly lowers the pair's maximum.
  bool improved = true;
  while (improved) {
    improved = false;
    std::vector<double> bins(static_cast<std::size_t>(devices), 0.0);
    for (std::size_t h = 0; h < loads.size(); ++h) bins[static_cast<std::size_t>(assign[h])] += loads[h];
    const int top = static_cast<int>(std::max_element(bins.begin(), bins.end()) - bins.begin());
    const double top_load = bins[static_cast<std::size_t>(top)];
    for (std::size_t a = 0; a < loads.size() && !improved; ++a) {
      if (assign[a] != top) continue;
      for (int d = 0; d < devices && !improved; ++d) {
        if (d == top) continue;
        const double other = bins[static_cast<std::size_t>(d)];
        if (other + loads[a] < top_load) {
          assign[a] = d;
          improved = true;
          break;
        }
        for (std::size_t b = 0; b < loads.size(); ++b) {
          if (assign[b] != d) continue;
          const double delta = loads[a] - loads[b];
          if (delta > 0.0 && std::max(top_load - delta, other + delta) < top_load) {
            std::swap(assign[a], assign[b]);
            improved = true;
            break;
          }
        }
      }
    }
  }
  val = plan_makespan(loads, assign, devices);
  return finish_plan(loads, assign, devices, val <= lower);
}

std::vector<double> head_loads(std::span<const double> sparsity, std::int64_t queries, std::int64_t keys,
                               int head_dim) {
  std::vector<double> out;
  out.reserve(sparsity.size());
  const double unit = 4.0 * static_cast<double>(queries) * static_cast<double>(keys) * head_dim;
  for (double s : sparsity) {
    require(s >= 0.0 && s <= 1.0, "head_loads: sparsity must lie in [0, 1]");
    out.push_back((1.0 - s) * unit);
  }
  return out;
}

std::uint64_t hcp_comm(int heads, int heads_kept, std::int64_t seq, int head_dim, int devices, int width) {
  require(heads >= 1 && heads_kept >= 0 && heads_kept <= heads, "hcp_comm: need 0 <= H_r <= H");
  require(devices >= 1 && seq % devices == 0, "hcp_comm: sequence must split evenly over devices");
  const auto chunk = static_cast<std::uint64_t>(seq / devices);
  const auto d = static_cast<std::uint64_t>(head_dim);
  // Heads pulled in from the other N-1 chunks vs local chunk heads sent away.
  const std::uint64_t recv = static_cast<std::uint64_t>(heads_kept) * static_cast<std::uint64_t>(devices - 1) * chunk;
  const std::uint64_t sent = static_cast<std::uint64_t>(heads - heads_kept) * chunk;
  return static_cast<std::uint64_t>(width) * (3 * d * std::max(recv, sent) + d * std::max(sent, recv));
}

std::uint64_t hcp_mem(int heads_kept, std::int64_t seq, int head_dim, int width) {
  require(heads_kept >= 0 && seq >= 0 && head_dim >= 0, "hcp_mem: negative argument");
  return 4ull * static_cast<std::uint64_t>(seq) * static_cast<std::uint64_t>(head_dim) *
         static_cast<std::uint64_t>(heads_kept) * static_cast<std::uint64_t>(width);
}

namespace {

void check_alpha(const AlphaMatrix& alpha, int device, int devices) {
  require(alpha.rows() == devices && alpha.cols() == devices, "scp: alpha must be N x N");
  require(device >= 0 && device < devices, "scp: device out of range");
  for (Eigen::Index i = 0; i < alpha.rows(); ++i)
    for (Eigen::Index j = 0; j < alpha.cols(); ++j)
      require(i == j || (alpha(i, j) >= 0.0 && alpha(i, j) <= 1.0), "scp: alpha entries must lie in [0, 1]");
}

}  // namespace

double scp_comm(const AlphaMatrix& alpha, int device, int heads, int head_dim, std::int64_t seq, int devices,
                int width) {
  check_alpha(alpha, device, devices);
  double needed = 0.0, requested = 0.0;
  for (int j = 0; j < devices; ++j) {
    if (j == device) continue;
    needed += alpha(device, j);
    requested += alpha(j, device);
  }
  const double base = static_cast<double>(width) * 2.0 * heads * head_dim * static_cast<double>(seq) / devices;
  return base * std::max(needed, requested);
}

double scp_mem(const AlphaMatrix& alpha, int device, int heads, int head_dim, std::int64_t seq, int devices,
               int width) {
  check_alpha(alpha, device, devices);
  double needed = 0.0;
  for (int j = 0; j < devices; ++j)
    if (j != device) needed += alpha(device, j) * static_cast<double>(seq) / devices;
  return static_cast<double>(width) * 2.0 * heads * head_dim * needed;
}

AlphaMatrix alpha_from_indices(const std::vector<CriticalIndexSet>& per_head, int parts, std::span<const int> heads) {
  require(!per_head.empty(), "alpha_from_indices: need at least one head");
  require(parts >= 1, "alpha_from_indices: parts must be positive");
  const Eigen::Index seq = per_head.front().num_keys;
  require(seq % parts == 0, "alpha_from_indices: sequence must split evenly");
  const Eigen::Index chunk = seq / parts;
  std::vector<int> use(heads.begin(), heads.end());
  if (use.empty()) {
    use.resize(per_head.size());
    std::iota(use.begin(), use.end(), 0);
  }
  AlphaMatrix alpha = AlphaMatrix::Zero(parts, parts);
  std::vector<char> seen(static_cast<std::size_t>(seq));
  for (int h : use) {
    require(h >= 0 && static_cast<std::size_t>(h) < per_head.size(), "alpha_from_indices: head out of range");
    const auto& set = per_head[static_cast<std::size_t>(h)];
    require(set.num_keys == seq && static_cast<Eigen::Index>(set.rows.size()) == seq,
            "alpha_from_indices: every head needs S query rows over S keys");
    for (int i = 0; i < parts; ++i) {
      std::fill(seen.begin(), seen.end(), 0);
      for (Eigen::Index q = i * chunk; q < (i + 1) * chunk; ++q)
        for (KvIndex kv : set.rows[static_cast<std::size_t>(q)]) {
          require(static_cast<Eigen::Index>(kv) < seq, "alpha_from_indices: index out of range");
          seen[kv] = 1;
        }
      for (int j = 0; j < parts; ++j) {
        if (j == i) continue;
        const auto cnt = std::count(seen.begin() + j * chunk, seen.begin() + (j + 1) * chunk, 1);
        alpha(i, j) += static_cast<double>(cnt) / static_cast<double>(chunk);
      }
    }
  }
  alpha /= static_cast<double>(use.size());
  return alpha;
}

AlphaProvider uniform_alpha(double value) {
  require(value >= 0.0 && value <= 1.0, "uniform_alpha: value must lie in [0, 1]");
  return [value](int g_s, const std::vector<int>&) {
    AlphaMatrix a = AlphaMatrix::Constant(g_s, g_s, value);
    a.diagonal().setZero();
    return a;
  };
}

AlphaProvider indices_alpha(std::vector<CriticalIndexSet> per_head) {
  return [sets = std::move(per_head)](int g_s, const std::vector<int>& heads) {
    if (heads.empty()) return AlphaMatrix(AlphaMatrix::Zero(g_s, g_s));
    return alpha_from_indices(sets, g_s, heads);
  };
}

const char* to_string(Placement p) { return p == Placement::kHcpFirst ? "hcp_first" : "scp_first"; }

int device_rank(Placement p, int g_h, int g_s, int hcp_pos, int scp_idx) {
  return p == Placement::kHcpFirst ? scp_idx * g_h + hcp_pos : hcp_pos * g_s + scp_idx;
}

CPConfig build_config(int g_h, int g_s, const Workload& w, const AlphaProvider& alpha, const ClusterSpec& c) {
  c.validate();
  require(g_h >= 1 && g_s >= 1 && g_h * g_s == c.devices, "build_config: g_h * g_s must equal N");
  require(g_h <= w.heads(), "build_config: g_h exceeds the head count");
  require(w.seq % c.devices == 0, "build_config: sequence must split evenly over devices");
  CPConfig cfg;
  cfg.g_h = g_h;
  cfg.g_s = g_s;
  const std::int64_t chunk = w.seq / g_s;
  const auto loads = head_loads(w.sparsity, chunk, w.seq, w.head_dim);
  cfg.plan = balance_heads(loads, g_h);
  const auto dev_heads = cfg.plan.device_heads();
  for (int pos = 0; pos < g_h; ++pos) {
    AlphaMatrix a = g_s > 1 ? alpha(g_s, dev_heads[static_cast<std::size_t>(pos)]) : AlphaMatrix::Zero(1, 1);
    require(a.rows() == g_s && a.cols() == g_s, "build_config: alpha provider returned the wrong shape");
    cfg.alpha.push_back(std::move(a));
  }
  for (int si = 0; si < g_s; ++si) {
    for (int pos = 0; pos < g_h; ++pos) {
      DeviceCost d;
      d.hcp_pos = pos;
      d.scp_idx = si;
      d.heads = cfg.plan.heads_per_device[static_cast<std::size_t>(pos)];
      d.hcp_bytes = g_h > 1 ? hcp_comm(w.heads(), d.heads, chunk, w.head_dim, g_h, c.elem_width) : 0;
      d.hcp_mem_bytes = hcp_mem(d.heads, chunk, w.head_dim, c.elem_width);
      if (g_s > 1) {
        const auto& a = cfg.alpha[static_cast<std::size_t>(pos)];
        d.scp_bytes = scp_comm(a, si, d.heads, w.head_dim, w.seq, g_s, c.elem_width);
        d.scp_mem_bytes = scp_mem(a, si, d.heads, w.head_dim, w.seq, g_s, c.elem_width);
      }
      cfg.devices.push_back(d);
    }
  }
  return cfg;
}

namespace {

bool group_spans_nodes(Placement p, int g_h, int g_s, bool hcp_group, int fixed, const ClusterSpec& c) {
  const int n = hcp_group ? g_h : g_s;
  const int first = hcp_group ? device_rank(p, g_h, g_s, 0, fixed) : device_rank(p, g_h, g_s, fixed, 0);
  for (int m = 1; m < n; ++m) {
    const int r = hcp_group ? device_rank(p, g_h, g_s, m, fixed) : device_rank(p, g_h, g_s, fixed, m);
    if (c.node_of(r) != c.node_of(first)) return true;
  }
  return false;
}

}  // namespace

Placement choose_placement(const CPConfig& config, const ClusterSpec& c) {
  double cross[2] = {0.0, 0.0};
  for (int p = 0; p < 2; ++p) {
    const auto pl = static_cast<Placement>(p);
    double hcp = 0.0, scp = 0.0;
    for (const auto& d : config.devices) {
      if (group_spans_nodes(pl, config.g_h, config.g_s, true, d.scp_idx, c)) hcp += static_cast<double>(d.hcp_bytes);
      if (group_spans_nodes(pl, config.g_h, config.g_s, false, d.hcp_pos, c)) scp += d.scp_bytes;
    }
    cross[p] = std::max(hcp, scp);
  }
  return cross[1] < cross[0] ? Placement::kScpFirst : Placement::kHcpFirst;
}

void apply_placement(CPConfig& config, Placement placement, const ClusterSpec& c) {
  config.placement = placement;
  const double t_comp = config.plan.comp / c.compute_rate;
  config.objective = 0.0;
  config.max_mem = 0.0;
  for (auto& d : config.devices) {
    d.rank = device_rank(placement, config.g_h, config.g_s, d.hcp_pos, d.scp_idx);
    const double bw_h =
        group_spans_nodes(placement, config.g_h, config.g_s, true, d.scp_idx, c) ? c.inter_bw : c.intra_bw;
    const double bw_s =
        group_spans_nodes(placement, config.g_h, config.g_s, false, d.hcp_pos, c) ? c.inter_bw : c.intra_bw;
    d.t_comm = static_cast<double>(d.hcp_bytes) / bw_h + d.scp_bytes / bw_s;
    d.t_comp = t_comp;
    config.objective = std::max(config.objective, d.total_time());
    config.max_mem = std::max(config.max_mem, d.mem());
  }
  config.feasible = config.max_mem <= c.memory_cap;
}

HybridSolution solve_hybrid(const Workload& w, const AlphaProvider& alpha, const ClusterSpec& c) {
  c.validate();
  require(w.heads() >= 1 && w.seq >= 1 && w.head_dim >= 1, "solve_hybrid: empty workload");
  require(w.seq % c.devices == 0, "solve_hybrid: sequence must split evenly over devices");
  HybridSolution sol;
  const CPConfig* best = nullptr;
  for (int g_h = 1; g_h <= std::min(c.devices, w.heads()); ++g_h) {
    if (c.devices % g_h != 0) continue;
    CPConfig cfg = build_config(g_h, c.devices / g_h, w, alpha, c);
    apply_placement(cfg, choose_placement(cfg, c), c);
    sol.evaluated.push_back(std::move(cfg));
  }
  double min_mem = std::numeric_limits<double>::infinity();
  for (const auto& cfg : sol.evaluated) {
    min_mem = std::min(min_mem, cfg.max_mem);
    if (cfg.feasible && (!best || cfg.objective < best->objective)) best = &cfg;
  }
  if (!best) {
    std::ostringstream os;
    os << "memory: every (g_h, g_s) exceeds the per-device cap of " << c.memory_cap << " bytes (smallest need "
       << min_mem << " bytes)";
    throw Infeasible(os.str());
  }
  sol.best = *best;
  return sol;
}

namespace {

nlohmann::json config_json(const CPConfig& cfg) {
  nlohmann::json j;
  j["g_h"] = cfg.g_h;
  j["g_s"] = cfg.g_s;
  j["placement"] = to_string(cfg.placement);
  j["objective"] = cfg.objective;
  j["max_mem"] = cfg.max_mem;
  j["feasible"] = cfg.feasible;
  j["comp_hcp"] = cfg.plan.comp;
  j["balance_optimal"] = cfg.plan.optimal;
  j["head_assignment"] = cfg.plan.assignment;
  j["heads_per_device"] = cfg.plan.heads_per_device;
  nlohmann::json devs = nlohmann::json::array();
  for (const auto& d : cfg.devices) {
    devs.push_back({{"rank", d.rank},
                    {"hcp_pos", d.hcp_pos},
                    {"scp_idx", d.scp_idx},
                    {"heads", d.heads},
                    {"hcp_bytes", d.hcp_bytes},
                    {"scp_bytes", d.scp_bytes},
                    {"hcp_mem", d.hcp_mem_bytes},
                    {"scp_mem", d.scp_mem_bytes},
                    {"t_comm", d.t_comm},
                    {"t_comp", d.t_comp}});
  }
  j["devices"] = std::move(devs);
  return j;
}

}  // namespace

std::string cp_config_to_json(const CPConfig& config) { return config_json(config).dump(2); }

std::string evaluation_table_csv(const HybridSolution& sol) {
  std::ostringstream os;
  os.precision(17);
  os << "g_h,g_s,placement,comp_hcp,max_mem,objective,feasible,chosen\n";
  for (const auto& cfg : sol.evaluated) {
    const bool chosen = cfg.g_h == sol.best.g_h;
    os << cfg.g_h << ',' << cfg.g_s << ',' << to_string(cfg.placement) << ',' << cfg.plan.comp << ','
       << cfg.max_mem << ',' << cfg.objective << ',' << (cfg.feasible ? 1 : 0) << ',' << (chosen ? 1 : 0) << '\n';
  }
  return os.str();
}

}  // namespace sparsedit
