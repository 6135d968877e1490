#pragma once

// Logical multi-device run of hybrid sparse context parallelism over an
// in-memory message bus: head re-sharding inside HCP groups, selective KV
// gathering inside SCP groups, local sparse attention, and the output
// all-to-all back to the original sequence layout. Every payload is copied
// through the bus and recorded in a byte ledger.

#include "sparsedit/cp_model.hpp"
#include "sparsedit/index_set.hpp"
#include "sparsedit/types.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace sparsedit {

/// A device asked for KV rows it does not own.
class ProtocolError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class SimPhase { kHcpFwd = 0, kScpIndexExchange = 1, kScpKv = 2, kOutputRedistribute = 3 };
inline constexpr int kNumSimPhases = 4;
const char* to_string(SimPhase p);

struct Message {
  SimPhase phase;
  int from;
  int to;
  std::uint64_t bytes;
};

struct MessageLog {
  std::vector<Message> messages;  // in send order

  [[nodiscard]] std::uint64_t sent(int rank, SimPhase p) const;
  [[nodiscard]] std::uint64_t received(int rank, SimPhase p) const;
  [[nodiscard]] std::uint64_t total_sent(SimPhase p) const;
  [[nodiscard]] std::uint64_t total_received(SimPhase p) const;
  [[nodiscard]] std::string to_json(int devices) const;
};

/// What the simulator needs from a CPConfig.
struct SimPlan {
  int g_h = 1;
  int g_s = 1;
  Placement placement = Placement::kHcpFirst;
  std::vector<int> head_to_pos;  // head -> HCP position

  static SimPlan from_config(const CPConfig& cfg);
  [[nodiscard]] int devices() const { return g_h * g_s; }
};

struct SimDeviceReport {
  int rank = 0;
  int hcp_pos = 0;
  int scp_idx = 0;
  int chunk = 0;  // initial sequence chunk index
  int heads = 0;
  std::uint64_t resident_qkvo_bytes = 0;
  std::uint64_t resident_remote_kv_bytes = 0;
};

struct SimResult {
  std::vector<MatrixXd> output;  // per head, S x D, reassembled from device chunks
  MessageLog log;
  std::vector<SimDeviceReport> devices;  // by rank
};

/// Device (pos, s) starts with chunk s * g_h + pos of every head; its rank
/// follows the placement. `indices` are global per-head sets (S queries over
/// S keys) that query-owning devices consult.
SimResult run_hybrid_sparse_cp(const std::vector<MatrixXd>& q, const std::vector<MatrixXd>& k,
                               const std::vector<MatrixXd>& v, const std::vector<CriticalIndexSet>& indices,
                               const SimPlan& plan, int elem_width = 2);

struct LedgerCheck {
  bool ok = true;
  std::vector<std::string> mismatches;
};

/// Compares the ledger against the closed forms: per device
/// max(sent, recv) over hcp_fwd plus output_redistribute equals hcp_comm,
/// max(sent, recv) over scp_kv equals scp_comm, resident bytes equal
/// hcp_mem and scp_mem; and every phase conserves bytes.
LedgerCheck check_ledger(const SimResult& result, const SimPlan& plan, const std::vector<CriticalIndexSet>& indices,
                         int head_dim, int elem_width);

struct EquivalenceReport {
  bool pass = false;
  double max_error = 0.0;
  int head = -1;
  Eigen::Index row = -1;
  Eigen::Index col = -1;
  double tol = 0.0;
  [[nodiscard]] std::string to_json() const;
};

EquivalenceReport verify_equivalence(const std::vector<MatrixXd>& simulated, const std::vector<MatrixXd>& reference,
                                     double tol);

}  // namespace sparsedit
