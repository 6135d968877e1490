#pragma once

#include "sparsedit/types.hpp"

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sparsedit {

/// Per-query lists of selected KV indices into [0, num_keys).
/// Lists are sorted ascending and duplicate free.
struct CriticalIndexSet {
  std::vector<std::vector<KvIndex>> rows;
  Eigen::Index num_keys = 0;
  // Cumulative-mass threshold for oracle-built sets; empty for top-k sets.
  std::optional<double> theta;

  [[nodiscard]] std::size_t num_queries() const { return rows.size(); }
  [[nodiscard]] std::size_t total_selected() const;

  /// Throws InvalidInput when a list is unsorted, has duplicates or is out of range.
  void validate() const;

  bool operator==(const CriticalIndexSet&) const = default;
};

/// Full index set: every query keeps every key.
CriticalIndexSet all_indices(std::size_t num_queries, Eigen::Index num_keys);

/// Restricts `set` to the listed query rows, in the given order.
CriticalIndexSet select_rows(const CriticalIndexSet& set, std::span<const Eigen::Index> query_rows);

// Binary encodings. kFixed32 stores each index as a little-endian u32 and is
// the layout used for index-memory accounting. kVarintDelta stores per-row
// ascending deltas as LEB128 varints.
enum class IndexEncoding : std::uint8_t { kFixed32 = 0, kVarintDelta = 1 };

/// Bytes of the kFixed32 index payload alone (no header, no row lengths).
std::size_t fixed32_payload_bytes(const CriticalIndexSet& set);

/// Header: "SDIX" magic, u8 encoding, u64 num_queries, u64 num_keys,
/// then per row a varint length followed by the encoded indices.
std::vector<std::uint8_t> encode_indices(const CriticalIndexSet& set,
                                         IndexEncoding encoding = IndexEncoding::kVarintDelta);
CriticalIndexSet decode_indices(std::span<const std::uint8_t> bytes);

std::string indices_to_json(const CriticalIndexSet& set);
CriticalIndexSet indices_from_json(const std::string& text);

void append_varint(std::vector<std::uint8_t>& out, std::uint64_t value);
std::uint64_t read_varint(std::span<const std::uint8_t> bytes, std::size_t& pos);

}  // namespace sparsedit
