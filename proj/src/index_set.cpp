#include "sparsedit/index_set.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstring>
#include <numeric>

namespace sparsedit {

namespace {

constexpr char kMagic[4] = {'S', 'D', 'I', 'X'};

void append_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t read_u64(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  require(pos + 8 <= bytes.size(), "decode_indices: truncated header");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[pos + i]) << (8 * i);
  pos += 8;
  return v;
}

}  // namespace

std::size_t CriticalIndexSet::total_selected() const {
  std::size_t n = 0;
  for (const auto& r : rows) n += r.size();
  return n;
}

void CriticalIndexSet::validate() const {
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      require(static_cast<Eigen::Index>(r[i]) < num_keys, "CriticalIndexSet: index out of range");
      if (i > 0) require(r[i - 1] < r[i], "CriticalIndexSet: indices must be sorted and unique");
    }
  }
}

CriticalIndexSet all_indices(std::size_t num_queries, Eigen::Index num_keys) {
  CriticalIndexSet set;
  set.num_keys = num_keys;
  set.theta = 1.0;
  std::vector<KvIndex> row(static_cast<std::size_t>(num_keys));
  std::iota(row.begin(), row.end(), KvIndex{0});
  set.rows.assign(num_queries, row);
  return set;
}

CriticalIndexSet select_rows(const CriticalIndexSet& set, std::span<const Eigen::Index> query_rows) {
  CriticalIndexSet out;
  out.num_keys = set.num_keys;
  out.theta = set.theta;
  out.rows.reserve(query_rows.size());
  for (Eigen::Index q : query_rows) {
    require(q >= 0 && static_cast<std::size_t>(q) < set.rows.size(), "select_rows: row out of range");
    out.rows.push_back(set.rows[static_cast<std::size_t>(q)]);
  }
  return out;
}

std::size_t fixed32_payload_bytes(const CriticalIndexSet& set) {
  return set.total_selected() * sizeof(std::uint32_t);
}

void append_varint(std::vector<std::uint8_t>& out, std::uint64_t value) {
  while (value >= 0x80) {
    out.push_back(static_cast<std::uint8_t>(value | 0x80));
    value >>= 7;
  }
  out.push_back(static_cast<std::uint8_t>(value));
}

std::uint64_t read_varint(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  std::uint64_t value = 0;
  int shift = 0;
  while (true) {
    require(pos < bytes.size(), "read_varint: truncated input");
    require(shift < 64, "read_varint: varint too long");
    const std::uint8_t b = bytes[pos++];
    value |= static_cast<std::uint64_t>(b & 0x7f) << shift;
    if ((b & 0x80) == 0) break;
    shift += 7;
  }
  return value;
}

std::vector<std::uint8_t> encode_indices(const CriticalIndexSet& set, IndexEncoding encoding) {
  set.validate();
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  out.push_back(static_cast<std::uint8_t>(encoding));
  append_u64(out, set.rows.size());
  append_u64(out, static_cast<std::uint64_t>(set.num_keys));
  for (const auto& row : set.rows) {
    append_varint(out, row.size());
    if (encoding == IndexEncoding::kFixed32) {
      for (KvIndex idx : row) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(idx >> (8 * i)));
      }
    } else {
      KvIndex prev = 0;
      for (std::size_t i = 0; i < row.size(); ++i) {
        append_varint(out, i == 0 ? row[i] : row[i] - prev);
        prev = row[i];
      }
    }
  }
  return out;
}

CriticalIndexSet decode_indices(std::span<const std::uint8_t> bytes) {
  require(bytes.size() >= 5 && std::memcmp(bytes.data(), kMagic, 4) == 0,
          "decode_indices: bad magic");
  std::size_t pos = 4;
  const auto encoding = static_cast<IndexEncoding>(bytes[pos++]);
  require(encoding == IndexEncoding::kFixed32 || encoding == IndexEncoding::kVarintDelta,
          "decode_indices: unknown encoding");
  CriticalIndexSet set;
  const std::uint64_t nq = read_u64(bytes, pos);
  set.num_keys = static_cast<Eigen::Index>(read_u64(bytes, pos));
  set.rows.resize(nq);
  for (auto& row : set.rows) {
    const std::uint64_t len = read_varint(bytes, pos);
    require(len <= static_cast<std::uint64_t>(set.num_keys), "decode_indices: row too long");
    row.resize(len);
    if (encoding == IndexEncoding::kFixed32) {
      require(pos + 4 * len <= bytes.size(), "decode_indices: truncated payload");
      for (auto& idx : row) {
        idx = 0;
        for (int i = 0; i < 4; ++i) idx |= static_cast<KvIndex>(bytes[pos + i]) << (8 * i);
        pos += 4;
      }
    } else {
      std::uint64_t acc = 0;
      for (std::size_t i = 0; i < len; ++i) {
        const std::uint64_t d = read_varint(bytes, pos);
        acc = i == 0 ? d : acc + d;
        row[i] = static_cast<KvIndex>(acc);
      }
    }
  }
  require(pos == bytes.size(), "decode_indices: trailing bytes");
  set.validate();
  return set;
}

std::string indices_to_json(const CriticalIndexSet& set) {
  nlohmann::json j;
  j["num_keys"] = set.num_keys;
  j["theta"] = set.theta ? nlohmann::json(*set.theta) : nlohmann::json(nullptr);
  j["rows"] = set.rows;
  return j.dump();
}

CriticalIndexSet indices_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  CriticalIndexSet set;
  set.num_keys = j.at("num_keys").get<Eigen::Index>();
  if (!j.at("theta").is_null()) set.theta = j.at("theta").get<double>();
  set.rows = j.at("rows").get<std::vector<std::vector<KvIndex>>>();
  set.validate();
  return set;
}

}  // namespace sparsedit
