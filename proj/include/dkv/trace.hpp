#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dkv/common.hpp"
#include "dkv/model.hpp"

namespace dkv {

struct StepRecord {
  int step = 0;
  int block = 0;
  int masked_count = 0;          // |M_t| at the start of the step
  PositionList compute_set;      // C_t, sorted
  PositionList cached;           // rows served from cache, storage order
  PositionList decoded;          // D_t, sorted
  std::vector<TokenId> decoded_ids;
  bool refresh = false;
  std::optional<double> millis;  // absent in counters-only runs
  std::int64_t query_rows = 0;   // == |C_t|
  std::int64_t macs = 0;
};

/// Post-rotary keys/values of one layer in natural position order.
struct KVSnapshot {
  int step = 0;
  Matrix keys;
  Matrix values;
};

struct StepTrace {
  int seq_len = 0;
  int prompt_len = 0;
  int gen_len = 0;
  int total_steps = 0;
  std::string variant;
  std::vector<StepRecord> records;
  std::optional<int> snapshot_layer;
  std::vector<KVSnapshot> snapshots;
};

/// Multiply-accumulates for one query row at sequence length `seq_len`:
/// Q/K/V/O projections, feed-forward, attention scores and mixing, and the
/// output head. Norms and activations are not counted.
std::int64_t macs_per_row(const ModelConfig& config, int seq_len);

}  // namespace dkv
