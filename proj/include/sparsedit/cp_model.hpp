#pragma once

// Cost and memory model for head-wise (HCP) and sequence-wise (SCP) context
// parallelism under attention sparsity, min-max head balancing and the
// hybrid degree search.
//
// Device layout for a hybrid config: g_s HCP groups, each holding one
// contiguous sequence chunk of S / g_s tokens and spreading all H heads over
// its g_h members with the same head plan. Device `pos` of every HCP group
// therefore owns the same heads, and those g_s devices form an SCP group.

#include "sparsedit/index_set.hpp"
#include "sparsedit/types.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace sparsedit {

struct ClusterSpec {
  int devices = 1;
  int devices_per_node = 1;
  double intra_bw = 1.0;      // bytes / s
  double inter_bw = 1.0;      // bytes / s
  double compute_rate = 1.0;  // score-value FLOPs / s
  double memory_cap = 1.0;    // bytes per device
  int elem_width = 2;         // bytes per element

  void validate() const;
  [[nodiscard]] int node_of(int rank) const { return rank / devices_per_node; }
  std::string to_json() const;
  static ClusterSpec from_json(const std::string& text);
};

struct HcpPlan {
  std::vector<int> assignment;  // head -> device
  std::vector<int> heads_per_device;
  std::vector<double> device_load;
  double comp = 0.0;  // max device load
  bool optimal = false;

  [[nodiscard]] std::vector<std::vector<int>> device_heads() const;
};

/// Max device load of `assignment`, each device summed in ascending head order.
double plan_makespan(std::span<const double> loads, std::span<const int> assignment, int devices);

/// Min-max assignment of heads to devices. Exact branch and bound (seeded
/// with the LPT schedule) when H <= exact_limit; LPT plus move/swap
/// refinement otherwise.
HcpPlan balance_heads(std::span<const double> loads, int devices, int exact_limit = 16);

/// Burden of each head: (1 - s_h) * 4 * queries * keys * D.
std::vector<double> head_loads(std::span<const double> sparsity, std::int64_t queries, std::int64_t keys,
                               int head_dim);

/// Bytes of the QKV and output all-to-alls for a device keeping H_r of H
/// heads. S must be divisible by N.
std::uint64_t hcp_comm(int heads, int heads_kept, std::int64_t seq, int head_dim, int devices, int width);
std::uint64_t hcp_mem(int heads_kept, std::int64_t seq, int head_dim, int width);

/// alpha(i, j): fraction of device j's KV chunk needed by device i.
using AlphaMatrix = Eigen::MatrixXd;

double scp_comm(const AlphaMatrix& alpha, int device, int heads, int head_dim, std::int64_t seq, int devices,
                int width);
double scp_mem(const AlphaMatrix& alpha, int device, int heads, int head_dim, std::int64_t seq, int devices,
               int width);

/// Sequence split into `parts` contiguous chunks; alpha(i, j) is the number of
/// distinct chunk-j keys used by any chunk-i query, over S / parts, averaged
/// over `heads` (all heads when empty).
AlphaMatrix alpha_from_indices(const std::vector<CriticalIndexSet>& per_head, int parts,
                               std::span<const int> heads = {});

/// Alpha for an SCP group of size g_s whose devices hold `heads`.
using AlphaProvider = std::function<AlphaMatrix(int g_s, const std::vector<int>& heads)>;
AlphaProvider uniform_alpha(double value);
AlphaProvider indices_alpha(std::vector<CriticalIndexSet> per_head);

enum class Placement { kHcpFirst, kScpFirst };
const char* to_string(Placement p);

/// HCP-first: HCP groups are runs of consecutive ranks. SCP-first: SCP groups are.
int device_rank(Placement p, int g_h, int g_s, int hcp_pos, int scp_idx);

struct Workload {
  std::vector<double> sparsity;  // one per head
  std::int64_t seq = 0;
  int head_dim = 0;
  [[nodiscard]] int heads() const { return static_cast<int>(sparsity.size()); }
};

struct DeviceCost {
  int rank = 0;
  int hcp_pos = 0;
  int scp_idx = 0;
  int heads = 0;
  std::uint64_t hcp_bytes = 0;
  double scp_bytes = 0.0;
  std::uint64_t hcp_mem_bytes = 0;
  double scp_mem_bytes = 0.0;
  double t_comm = 0.0;
  double t_comp = 0.0;
  [[nodiscard]] double total_time() const { return t_comm + t_comp; }
  [[nodiscard]] double mem() const { return static_cast<double>(hcp_mem_bytes) + scp_mem_bytes; }
};

struct CPConfig {
  int g_h = 1;
  int g_s = 1;
  Placement placement = Placement::kHcpFirst;
  HcpPlan plan;
  std::vector<AlphaMatrix> alpha;  // one per HCP position (SCP group)
  std::vector<DeviceCost> devices;  // ordered by (scp_idx, hcp_pos)
  double objective = 0.0;
  double max_mem = 0.0;
  bool feasible = false;
};

/// Volumes, memory and head plan for (g_h, g_s); no placement or times yet.
CPConfig build_config(int g_h, int g_s, const Workload& w, const AlphaProvider& alpha, const ClusterSpec& c);

/// Placement with less node-crossing traffic, counting for each mapping the
/// larger of the HCP and SCP volumes whose group spans nodes. Ties pick HCP-first.
Placement choose_placement(const CPConfig& config, const ClusterSpec& c);

/// Fills ranks, times, objective and feasibility for `placement`.
void apply_placement(CPConfig& config, Placement placement, const ClusterSpec& c);

struct HybridSolution {
  CPConfig best;
  std::vector<CPConfig> evaluated;  // every divisor pair, g_h ascending
};

/// Minimizes max_i (T_comm + T_comp) over g_h * g_s = N with g_h <= H under the
/// memory cap. Throws Infeasible naming the binding constraint.
HybridSolution solve_hybrid(const Workload& w, const AlphaProvider& alpha, const ClusterSpec& c);

std::string cp_config_to_json(const CPConfig& config);
std::string evaluation_table_csv(const HybridSolution& sol);

}  // namespace sparsedit
