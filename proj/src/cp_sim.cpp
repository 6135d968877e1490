#include "sparsedit/cp_sim.hpp"

#include "sparsedit/attention.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <limits>
#include <map>
#include <sstream>
#include <tuple>

namespace sparsedit {

const char* to_string(SimPhase p) {
  switch (p) {
    case SimPhase::kHcpFwd: return "hcp_fwd";
    case SimPhase::kScpIndexExchange: return "scp_index_exchange";
    case SimPhase::kScpKv: return "scp_kv";
    case SimPhase::kOutputRedistribute: return "output_redistribute";
  }
  return "unknown";
}

std::uint64_t MessageLog::sent(int rank, SimPhase p) const {
  std::uint64_t acc = 0;
  for (const auto& m : messages)
    if (m.phase == p && m.from == rank) acc += m.bytes;
  return acc;
}

std::uint64_t MessageLog::received(int rank, SimPhase p) const {
  std::uint64_t acc = 0;
  for (const auto& m : messages)
    if (m.phase == p && m.to == rank) acc += m.bytes;
  return acc;
}

std::uint64_t MessageLog::total_sent(SimPhase p) const {
  std::uint64_t acc = 0;
  for (const auto& m : messages)
    if (m.phase == p) acc += m.bytes;
  return acc;
}

std::uint64_t MessageLog::total_received(SimPhase p) const { return total_sent(p); }

std::string MessageLog::to_json(int devices) const {
  nlohmann::json j;
  nlohmann::json per = nlohmann::json::array();
  for (int r = 0; r < devices; ++r) {
    nlohmann::json d{{"rank", r}};
    for (int p = 0; p < kNumSimPhases; ++p) {
      const auto ph = static_cast<SimPhase>(p);
      d[to_string(ph)] = {{"sent", sent(r, ph)}, {"received", received(r, ph)}};
    }
    per.push_back(std::move(d));
  }
  j["devices"] = std::move(per);
  nlohmann::json totals;
  for (int p = 0; p < kNumSimPhases; ++p) totals[to_string(static_cast<SimPhase>(p))] = total_sent(static_cast<SimPhase>(p));
  j["totals"] = std::move(totals);
  j["messages"] = messages.size();
  return j.dump(2);
}

SimPlan SimPlan::from_config(const CPConfig& cfg) {
  return SimPlan{cfg.g_h, cfg.g_s, cfg.placement, cfg.plan.assignment};
}

namespace {

// Point-to-point payloads keyed by (phase, from, to); each send is logged.
class Bus {
 public:
  explicit Bus(MessageLog& log) : log_(log) {}

  void send_values(SimPhase p, int from, int to, std::vector<double> values, int width) {
    log_.messages.push_back({p, from, to, static_cast<std::uint64_t>(values.size()) * static_cast<std::uint64_t>(width)});
    values_[{static_cast<int>(p), from, to}] = std::move(values);
  }
  std::vector<double> recv_values(SimPhase p, int from, int to) {
    auto it = values_.find({static_cast<int>(p), from, to});
    if (it == values_.end()) throw ProtocolError("bus: missing value message");
    auto out = std::move(it->second);
    values_.erase(it);
    return out;
  }
  void send_bytes(SimPhase p, int from, int to, std::vector<std::uint8_t> bytes) {
    log_.messages.push_back({p, from, to, static_cast<std::uint64_t>(bytes.size())});
    bytes_[{static_cast<int>(p), from, to}] = std::move(bytes);
  }
  std::vector<std::uint8_t> recv_bytes(SimPhase p, int from, int to) {
    auto it = bytes_.find({static_cast<int>(p), from, to});
    if (it == bytes_.end()) throw ProtocolError("bus: missing byte message");
    auto out = std::move(it->second);
    bytes_.erase(it);
    return out;
  }

 private:
  MessageLog& log_;
  std::map<std::tuple<int, int, int>, std::vector<double>> values_;
  std::map<std::tuple<int, int, int>, std::vector<std::uint8_t>> bytes_;
};

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}
std::uint64_t get_u64(const std::vector<std::uint8_t>& in, std::size_t& pos) {
  if (pos + 8 > in.size()) throw ProtocolError("index message truncated");
  std::uint64_t v = 0;
  for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(in[pos + b]) << (8 * b);
  pos += 8;
  return v;
}
std::uint32_t get_u32(const std::vector<std::uint8_t>& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw ProtocolError("index message truncated");
  std::uint32_t v = 0;
  for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(in[pos + b]) << (8 * b);
  pos += 4;
  return v;
}

struct Device {
  int rank = 0, pos = 0, si = 0, chunk = 0;
  std::vector<MatrixXd> q0, k0, v0;  // all heads, own chunk
  std::vector<int> heads;            // owned after re-sharding
  std::vector<MatrixXd> q, k, v;     // owned heads, HCP-group sequence range
  std::vector<std::map<KvIndex, std::pair<VectorXd, VectorXd>>> remote;  // per owned head
  std::vector<MatrixXd> out;        // owned heads, group range
  std::vector<MatrixXd> final_out;  // all heads, own chunk
};

}  // namespace

SimResult run_hybrid_sparse_cp(const std::vector<MatrixXd>& q, const std::vector<MatrixXd>& k,
                               const std::vector<MatrixXd>& v, const std::vector<CriticalIndexSet>& indices,
                               const SimPlan& plan, int elem_width) {
  const int H = static_cast<int>(q.size());
  require(H >= 1 && k.size() == q.size() && v.size() == q.size() && indices.size() == q.size(),
          "simulate: need Q, K, V and index sets for every head");
  const Eigen::Index S = q.front().rows();
  const Eigen::Index D = q.front().cols();
  for (int h = 0; h < H; ++h) {
    require(q[h].rows() == S && k[h].rows() == S && v[h].rows() == S, "simulate: heads must share S");
    require(q[h].cols() == D && k[h].cols() == D && v[h].cols() == D, "simulate: heads must share D");
    require(indices[h].num_keys == S && static_cast<Eigen::Index>(indices[h].rows.size()) == S,
            "simulate: index sets must cover S queries over S keys");
  }
  require(plan.g_h >= 1 && plan.g_s >= 1 && plan.g_h <= H, "simulate: invalid degrees");
  require(static_cast<int>(plan.head_to_pos.size()) == H, "simulate: plan must place every head");
  for (int p : plan.head_to_pos) require(p >= 0 && p < plan.g_h, "simulate: head placed outside the HCP group");
  const int N = plan.devices();
  require(S % N == 0, "simulate: sequence must split evenly over devices");
  require(elem_width >= 1, "simulate: element width must be positive");
  const Eigen::Index chunk = S / N;
  const Eigen::Index range = S / plan.g_s;

  std::vector<std::vector<int>> pos_heads(static_cast<std::size_t>(plan.g_h));
  for (int h = 0; h < H; ++h) pos_heads[static_cast<std::size_t>(plan.head_to_pos[h])].push_back(h);

  std::vector<Device> dev(static_cast<std::size_t>(N));
  auto at = [&](int pos, int si) -> Device& {
    return dev[static_cast<std::size_t>(device_rank(plan.placement, plan.g_h, plan.g_s, pos, si))];
  };
  for (int si = 0; si < plan.g_s; ++si) {
    for (int pos = 0; pos < plan.g_h; ++pos) {
      Device& d = at(pos, si);
      d.rank = device_rank(plan.placement, plan.g_h, plan.g_s, pos, si);
      d.pos = pos;
      d.si = si;
      d.chunk = si * plan.g_h + pos;
      for (int h = 0; h < H; ++h) {
        d.q0.push_back(q[h].middleRows(d.chunk * chunk, chunk));
        d.k0.push_back(k[h].middleRows(d.chunk * chunk, chunk));
        d.v0.push_back(v[h].middleRows(d.chunk * chunk, chunk));
      }
    }
  }

  SimResult res;
  Bus bus(res.log);

  // Head re-sharding inside each HCP group.
  for (auto& d : dev) {
    d.heads = pos_heads[static_cast<std::size_t>(d.pos)];
    d.q.assign(d.heads.size(), MatrixXd(range, D));
    d.k.assign(d.heads.size(), MatrixXd(range, D));
    d.v.assign(d.heads.size(), MatrixXd(range, D));
  }
  for (int r = 0; r < N; ++r) {
    const Device& src = dev[static_cast<std::size_t>(r)];
    for (int dst_pos = 0; dst_pos < plan.g_h; ++dst_pos) {
      Device& dst = at(dst_pos, src.si);
      if (&dst == &src) continue;
      std::vector<double> payload;
      for (int h : dst.heads)
        for (const auto* m : {&src.q0[h], &src.k0[h], &src.v0[h]}) payload.insert(payload.end(), m->data(), m->data() + m->size());
      bus.send_values(SimPhase::kHcpFwd, src.rank, dst.rank, std::move(payload), elem_width);
    }
  }
  for (auto& d : dev) {
    for (int src_pos = 0; src_pos < plan.g_h; ++src_pos) {
      const Device& src = at(src_pos, d.si);
      const Eigen::Index off = src_pos * chunk;
      if (&src == &d) {
        for (std::size_t t = 0; t < d.heads.size(); ++t) {
          d.q[t].middleRows(off, chunk) = d.q0[d.heads[t]];
          d.k[t].middleRows(off, chunk) = d.k0[d.heads[t]];
          d.v[t].middleRows(off, chunk) = d.v0[d.heads[t]];
        }
        continue;
      }
      const auto payload = bus.recv_values(SimPhase::kHcpFwd, src.rank, d.rank);
      if (payload.size() != d.heads.size() * 3 * static_cast<std::size_t>(chunk * D))
        throw ProtocolError("hcp_fwd: payload size mismatch");
      std::size_t cur = 0;
      for (std::size_t t = 0; t < d.heads.size(); ++t) {
        for (auto* m : {&d.q[t], &d.k[t], &d.v[t]}) {
          std::memcpy(m->data() + off * D, payload.data() + cur, sizeof(double) * chunk * D);
          cur += static_cast<std::size_t>(chunk * D);
        }
      }
    }
  }

  // Selective KV gathering inside each SCP group: index requests, then rows.
  std::map<std::pair<int, int>, std::vector<std::vector<KvIndex>>> requests;  // (requester, owner) -> per head
  for (auto& d : dev) {
    d.remote.assign(d.heads.size(), {});
    if (plan.g_s == 1) continue;
    for (int sj = 0; sj < plan.g_s; ++sj) {
      if (sj == d.si) continue;
      const Device& owner = at(d.pos, sj);
      std::vector<std::uint8_t> msg;
      auto& lists = requests[{d.rank, owner.rank}];
      for (int h : d.heads) {
        std::vector<char> need(static_cast<std::size_t>(range), 0);
        for (Eigen::Index qi = d.si * range; qi < (d.si + 1) * range; ++qi)
          for (KvIndex kv : indices[h].rows[static_cast<std::size_t>(qi)])
            if (static_cast<Eigen::Index>(kv) / range == sj) need[static_cast<std::size_t>(kv - sj * range)] = 1;
        std::vector<KvIndex> list;
        for (Eigen::Index t = 0; t < range; ++t)
          if (need[static_cast<std::size_t>(t)]) list.push_back(static_cast<KvIndex>(sj * range + t));
        put_u64(msg, list.size());
        for (KvIndex kv : list) put_u32(msg, kv);
        lists.push_back(std::move(list));
      }
      bus.send_bytes(SimPhase::kScpIndexExchange, d.rank, owner.rank, std::move(msg));
    }
  }
  for (auto& owner : dev) {
    if (plan.g_s == 1) continue;
    for (int si = 0; si < plan.g_s; ++si) {
      if (si == owner.si) continue;
      const Device& req = at(owner.pos, si);
      const auto msg = bus.recv_bytes(SimPhase::kScpIndexExchange, req.rank, owner.rank);
      std::size_t cur = 0;
      std::vector<double> payload;
      for (std::size_t t = 0; t < owner.heads.size(); ++t) {
        const std::uint64_t n = get_u64(msg, cur);
        for (std::uint64_t e = 0; e < n; ++e) {
          const Eigen::Index local = static_cast<Eigen::Index>(get_u32(msg, cur)) - owner.si * range;
          if (local < 0 || local >= range) throw ProtocolError("scp: requested KV row is not owned by the device");
          const auto kr = owner.k[t].row(local);
          const auto vr = owner.v[t].row(local);
          payload.insert(payload.end(), kr.data(), kr.data() + D);
          payload.insert(payload.end(), vr.data(), vr.data() + D);
        }
      }
      if (cur != msg.size()) throw ProtocolError("scp: trailing bytes in index request");
      bus.send_values(SimPhase::kScpKv, owner.rank, req.rank, std::move(payload), elem_width);
    }
  }
  for (auto& d : dev) {
    if (plan.g_s == 1) continue;
    for (int sj = 0; sj < plan.g_s; ++sj) {
      if (sj == d.si) continue;
      const Device& owner = at(d.pos, sj);
      const auto payload = bus.recv_values(SimPhase::kScpKv, owner.rank, d.rank);
      // The requester knows which rows it asked for and in what order.
      const auto& ids = requests.at({d.rank, owner.rank});
      std::size_t cur = 0;
      for (std::size_t t = 0; t < d.heads.size(); ++t) {
        for (KvIndex kv : ids[t]) {
          if (cur + static_cast<std::size_t>(2 * D) > payload.size()) throw ProtocolError("scp_kv: payload too short");
          VectorXd kr = Eigen::Map<const VectorXd>(payload.data() + cur, D);
          VectorXd vr = Eigen::Map<const VectorXd>(payload.data() + cur + D, D);
          cur += static_cast<std::size_t>(2 * D);
          d.remote[t].emplace(kv, std::make_pair(std::move(kr), std::move(vr)));
        }
      }
      if (cur != payload.size()) throw ProtocolError("scp_kv: payload size mismatch");
    }
  }

  // Local sparse attention over local plus gathered rows.
  for (auto& d : dev) {
    d.out.assign(d.heads.size(), MatrixXd(range, D));
    const Eigen::Index base = d.si * range;
    for (std::size_t t = 0; t < d.heads.size(); ++t) {
      const int h = d.heads[t];
      // Compact key store in ascending global order, so selected lists keep
      // the same order as on a single device.
      std::vector<Eigen::Index> slot(static_cast<std::size_t>(S), -1);
      std::vector<Eigen::Index> globals;
      for (Eigen::Index g = 0; g < S; ++g) {
        const bool local = g >= base && g < base + range;
        if (local || d.remote[t].count(static_cast<KvIndex>(g))) {
          slot[static_cast<std::size_t>(g)] = static_cast<Eigen::Index>(globals.size());
          globals.push_back(g);
        }
      }
      MatrixXd kc(static_cast<Eigen::Index>(globals.size()), D), vc(static_cast<Eigen::Index>(globals.size()), D);
      for (std::size_t c = 0; c < globals.size(); ++c) {
        const Eigen::Index g = globals[c];
        if (g >= base && g < base + range) {
          kc.row(static_cast<Eigen::Index>(c)) = d.k[t].row(g - base);
          vc.row(static_cast<Eigen::Index>(c)) = d.v[t].row(g - base);
        } else {
          const auto& kv = d.remote[t].at(static_cast<KvIndex>(g));
          kc.row(static_cast<Eigen::Index>(c)) = kv.first.transpose();
          vc.row(static_cast<Eigen::Index>(c)) = kv.second.transpose();
        }
      }
      const double scale = 1.0 / std::sqrt(static_cast<double>(D));
      std::vector<double> weights;
      std::vector<KvIndex> sel;
      for (Eigen::Index r = 0; r < range; ++r) {
        const auto& global_sel = indices[h].rows[static_cast<std::size_t>(base + r)];
        require(!global_sel.empty(), "simulate: empty index list for a query");
        sel.clear();
        for (KvIndex g : global_sel) {
          const Eigen::Index s = slot[g];
          if (s < 0) throw ProtocolError("simulate: selected KV row missing after gathering");
          sel.push_back(static_cast<KvIndex>(s));
        }
        detail::attend_selected(d.q[t].data() + r * D, kc, vc, sel, scale, weights, d.out[t].data() + r * D);
      }
    }
  }

  // Outputs back to the owner of each query chunk.
  for (auto& d : dev) {
    d.final_out.assign(static_cast<std::size_t>(H), MatrixXd(chunk, D));
    for (int dst_pos = 0; dst_pos < plan.g_h; ++dst_pos) {
      Device& dst = at(dst_pos, d.si);
      if (&dst == &d) {
        for (std::size_t t = 0; t < d.heads.size(); ++t)
          d.final_out[static_cast<std::size_t>(d.heads[t])] = d.out[t].middleRows(d.pos * chunk, chunk);
        continue;
      }
      std::vector<double> payload;
      for (std::size_t t = 0; t < d.heads.size(); ++t) {
        const MatrixXd part = d.out[t].middleRows(dst_pos * chunk, chunk);
        payload.insert(payload.end(), part.data(), part.data() + part.size());
      }
      bus.send_values(SimPhase::kOutputRedistribute, d.rank, dst.rank, std::move(payload), elem_width);
    }
  }
  for (auto& d : dev) {
    for (int src_pos = 0; src_pos < plan.g_h; ++src_pos) {
      const Device& src = at(src_pos, d.si);
      if (&src == &d) continue;
      const auto payload = bus.recv_values(SimPhase::kOutputRedistribute, src.rank, d.rank);
      if (payload.size() != src.heads.size() * static_cast<std::size_t>(chunk * D))
        throw ProtocolError("output_redistribute: payload size mismatch");
      for (std::size_t t = 0; t < src.heads.size(); ++t) {
        MatrixXd& dst = d.final_out[static_cast<std::size_t>(src.heads[t])];
        std::memcpy(dst.data(), payload.data() + t * static_cast<std::size_t>(chunk * D), sizeof(double) * chunk * D);
      }
    }
  }

  res.output.assign(static_cast<std::size_t>(H), MatrixXd(S, D));
  for (const auto& d : dev) {
    for (int h = 0; h < H; ++h) res.output[h].middleRows(d.chunk * chunk, chunk) = d.final_out[h];
    SimDeviceReport rep;
    rep.rank = d.rank;
    rep.hcp_pos = d.pos;
    rep.scp_idx = d.si;
    rep.chunk = d.chunk;
    rep.heads = static_cast<int>(d.heads.size());
    std::uint64_t elems = 0;
    for (std::size_t t = 0; t < d.heads.size(); ++t)
      elems += static_cast<std::uint64_t>(d.q[t].size() + d.k[t].size() + d.v[t].size() + d.out[t].size());
    rep.resident_qkvo_bytes = elems * static_cast<std::uint64_t>(elem_width);
    std::uint64_t remote = 0;
    for (const auto& m : d.remote) remote += m.size() * static_cast<std::uint64_t>(2 * D);
    rep.resident_remote_kv_bytes = remote * static_cast<std::uint64_t>(elem_width);
    res.devices.push_back(rep);
  }
  std::sort(res.devices.begin(), res.devices.end(),
            [](const SimDeviceReport& a, const SimDeviceReport& b) { return a.rank < b.rank; });
  return res;
}

LedgerCheck check_ledger(const SimResult& result, const SimPlan& plan, const std::vector<CriticalIndexSet>& indices,
                         int head_dim, int elem_width) {
  LedgerCheck chk;
  auto fail = [&](const std::string& what) {
    chk.ok = false;
    chk.mismatches.push_back(what);
  };
  const int H = static_cast<int>(indices.size());
  const std::int64_t S = indices.front().num_keys;
  const std::int64_t range = S / plan.g_s;
  std::vector<std::vector<int>> pos_heads(static_cast<std::size_t>(plan.g_h));
  for (int h = 0; h < H; ++h) pos_heads[static_cast<std::size_t>(plan.head_to_pos[h])].push_back(h);
  std::vector<AlphaMatrix> alpha;
  for (int pos = 0; pos < plan.g_h; ++pos) {
    const auto& hs = pos_heads[static_cast<std::size_t>(pos)];
    alpha.push_back(plan.g_s > 1 && !hs.empty() ? alpha_from_indices(indices, plan.g_s, hs)
                                                : AlphaMatrix(AlphaMatrix::Zero(plan.g_s, plan.g_s)));
  }

  for (const auto& d : result.devices) {
    const auto& log = result.log;
    const auto tag = "rank " + std::to_string(d.rank) + ": ";
    const std::uint64_t hcp_seen =
        std::max(log.sent(d.rank, SimPhase::kHcpFwd), log.received(d.rank, SimPhase::kHcpFwd)) +
        std::max(log.sent(d.rank, SimPhase::kOutputRedistribute), log.received(d.rank, SimPhase::kOutputRedistribute));
    const std::uint64_t hcp_formula =
        plan.g_h > 1 ? hcp_comm(H, d.heads, range, head_dim, plan.g_h, elem_width) : 0;
    if (hcp_seen != hcp_formula)
      fail(tag + "hcp bytes " + std::to_string(hcp_seen) + " != formula " + std::to_string(hcp_formula));

    const std::uint64_t scp_seen = std::max(log.sent(d.rank, SimPhase::kScpKv), log.received(d.rank, SimPhase::kScpKv));
    const auto& a = alpha[static_cast<std::size_t>(d.hcp_pos)];
    const double scp_formula =
        plan.g_s > 1 ? scp_comm(a, d.scp_idx, d.heads, head_dim, S, plan.g_s, elem_width) : 0.0;
    if (static_cast<double>(scp_seen) != static_cast<double>(std::llround(scp_formula)) ||
        std::abs(scp_formula - std::round(scp_formula)) > 1e-6 * std::max(1.0, scp_formula))
      fail(tag + "scp bytes " + std::to_string(scp_seen) + " != formula " + std::to_string(scp_formula));

    const std::uint64_t mem_formula = hcp_mem(d.heads, range, head_dim, elem_width);
    if (d.resident_qkvo_bytes != mem_formula)
      fail(tag + "resident QKVO " + std::to_string(d.resident_qkvo_bytes) + " != hcp_mem " + std::to_string(mem_formula));
    const double smem = plan.g_s > 1 ? scp_mem(a, d.scp_idx, d.heads, head_dim, S, plan.g_s, elem_width) : 0.0;
    if (static_cast<double>(d.resident_remote_kv_bytes) != static_cast<double>(std::llround(smem)))
      fail(tag + "resident remote KV " + std::to_string(d.resident_remote_kv_bytes) + " != scp_mem " +
           std::to_string(smem));
  }
  for (int p = 0; p < kNumSimPhases; ++p) {
    const auto ph = static_cast<SimPhase>(p);
    std::uint64_t s = 0, r = 0;
    for (const auto& d : result.devices) {
      s += result.log.sent(d.rank, ph);
      r += result.log.received(d.rank, ph);
    }
    if (s != r) fail(std::string("phase ") + to_string(ph) + " does not conserve bytes");
  }
  return chk;
}

std::string EquivalenceReport::to_json() const {
  nlohmann::json j{{"pass", pass}, {"max_error", max_error}, {"tol", tol},
                   {"head", head}, {"row", row},             {"col", col}};
  return j.dump(2);
}

EquivalenceReport verify_equivalence(const std::vector<MatrixXd>& simulated, const std::vector<MatrixXd>& reference,
                                     double tol) {
  require(simulated.size() == reference.size(), "verify_equivalence: head count differs");
  EquivalenceReport rep;
  rep.tol = tol;
  for (std::size_t h = 0; h < simulated.size(); ++h) {
    require(simulated[h].rows() == reference[h].rows() && simulated[h].cols() == reference[h].cols(),
            "verify_equivalence: shape mismatch");
    for (Eigen::Index r = 0; r < simulated[h].rows(); ++r) {
      for (Eigen::Index c = 0; c < simulated[h].cols(); ++c) {
        const double e = std::abs(simulated[h](r, c) - reference[h](r, c));
        const double err = std::isnan(e) ? std::numeric_limits<double>::infinity() : e;
        if (rep.head < 0 || err > rep.max_error) {
          rep.max_error = err;
          rep.head = static_cast<int>(h);
          rep.row = r;
          rep.col = c;
        }
      }
    }
  }
  rep.pass = rep.max_error <= tol;
  return rep;
}

}  // namespace sparsedit
