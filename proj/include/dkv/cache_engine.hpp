#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>

#include "dkv/common.hpp"
#include "dkv/model.hpp"

namespace dkv {

/// Steps between forced full recomputations; nullopt means never.
using RefreshInterval = std::optional<int>;

enum class WindowCenter { CurrentDecoded, PreviousDecoded };

struct NoCache {};
struct DecodeCache {
  RefreshInterval refresh_interval;
};
struct GreedyCache {
  RefreshInterval refresh_interval;
  int window_size = 4;
  WindowCenter window_center = WindowCenter::PreviousDecoded;
};
/// Prompt rows cached after the first pass and never recomputed.
struct PrefillCache {};
/// Prompt rows cached forever; decoded rows cached with one-step delay and
/// dropped every refresh interval.
struct PrefillDecodeCache {
  RefreshInterval refresh_interval;
};

using CacheVariant = std::variant<NoCache, DecodeCache, GreedyCache, PrefillCache, PrefillDecodeCache>;

RefreshInterval refresh_interval(const CacheVariant& variant);
std::string to_string(const CacheVariant& variant);

/// Parses "none", "decode", "decode(8)", "greedy(2,4)", "greedy(2,4,current)",
/// "prefill", "pd(4)". "inf" is accepted as an interval. Throws
/// std::invalid_argument.
CacheVariant parse_cache_variant(std::string_view text);

/// Which row's keys/values stand in for a decoded token on shifted-output
/// (AR-adapted) models.
enum class ShiftMode { UnShift, RightShift, UnAndRightShift };

std::string to_string(ShiftMode mode);
ShiftMode parse_shift_mode(std::string_view text);

/// How cached rows are combined with fresh rows.
enum class ExecutionPath {
  /// Cached rows left, fresh rows right; one concat and one gather per layer.
  Reorder,
  /// Scatter into natural order, gather cached rows back out.
  Naive,
};

std::string to_string(ExecutionPath path);
ExecutionPath parse_execution_path(std::string_view text);

class LayoutError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Source row whose K/V is cached for decoded position `p`. nullopt when the
/// row does not exist (RightShift at the last position).
std::optional<Position> shift_rows(ShiftMode mode, Position p, int seq_len);

/// Rows whose K/V may be served from cache given the set of positions
/// decoded at least one step ago (sorted). UnAndRightShift additionally
/// requires the row's output position p+1 to be decoded.
PositionList cacheable_rows(ShiftMode mode, std::span<const Position> settled, int seq_len);

struct GenerationRegion {
  Position begin = 0;  // first generated position (== prompt length)
  Position end = 0;    // one past the last position (== sequence length)
};

/// Union over centers c of [c - ceil(w/2), c + floor(w/2)], clipped to the
/// generation region.
PositionList greedy_window(std::span<const Position> centers, int window_size,
                           GenerationRegion region);

struct PlanRequest {
  int seq_len = 0;
  int prompt_len = 0;
  int step = 0;
  PositionList masked;                      // M_t, sorted
  std::optional<PositionList> prev_masked;  // M_{t-1}; nullopt at step 0 (treated as I)
  PositionList prev_decoded;                // D_{t-1}, sorted
  std::optional<PositionList> decoded;      // D_t when known before the pass
  PositionList logit_rows;                  // rows whose logits this step needs
  ShiftMode shift = ShiftMode::UnShift;
};

struct PlanDecision {
  PositionList compute_set;  // sorted
  bool refresh = false;
};

/// Chooses the rows recomputed at one step. Throws std::invalid_argument for
/// M_t not contained in M_{t-1}, or Greedy without a known D_t.
PlanDecision plan_compute_set(const CacheVariant& variant, const PlanRequest& request);

/// True when `step` is a refresh step for `interval` (step > 0, step % N == 0).
bool is_refresh_step(RefreshInterval interval, int step);

struct ComputePlan {
  PositionList compute_set;    // fresh rows, storage order
  PositionList layout;         // [cached ; fresh]
  PositionList pe_order;       // rotary position per layout row
  std::vector<int> reorder_index;  // layout indices kept as next-step cache
  bool refresh = false;
  int step = 0;
};

/// layout = [cached ; compute_set]; pe_order mirrors it; reorder_index lists,
/// in layout order, the layout indices whose positions are in `next_cached`.
/// Throws LayoutError if the sets overlap or do not cover [0, seq_len).
ComputePlan build_layout(std::span<const Position> cached_positions,
                         std::span<const Position> compute_set,
                         std::span<const Position> next_cached, int seq_len);

/// Layout indices (ascending) whose positions belong to `next_cached` (sorted).
std::vector<int> reorder_index(std::span<const Position> layout,
                               std::span<const Position> next_cached);

/// Rows of `full` at `index`, in that order. Pure copy.
KVSlab reorder(const KVSlab& full, std::span<const int> index);

struct ConcatReorderResult {
  KVSlab full;
  KVSlab next_cached;
};

/// full = [cached ; fresh] by rows, next_cached = rows of full at `index`.
ConcatReorderResult concat_reorder(const KVSlab& cached, const KVSlab& fresh,
                                   std::span<const int> index);

/// Logits for a partial pass placed back at original positions. Positions
/// outside the compute set have no row.
class ScatteredLogits {
 public:
  ScatteredLogits() = default;
  ScatteredLogits(int seq_len, std::span<const Position> compute_set, Matrix rows);

  bool has(Position p) const;
  /// Throws std::out_of_range when `p` has no logits.
  Eigen::Ref<const RowVector> row(Position p) const;
  int seq_len() const { return static_cast<int>(row_of_.size()); }

 private:
  std::vector<int> row_of_;
  Matrix rows_;
};

ScatteredLogits scatter_outputs(const ComputePlan& plan, Matrix partial_logits);

struct CacheState {
  LayerCache layers;             // rows served from cache this step
  PositionList prefill;          // prompt positions
  int step = 0;
  int epoch_start = 0;           // step of the last refresh
  CacheVariant variant;
  ShiftMode shift = ShiftMode::UnShift;

  PositionList cached_positions() const;
};

/// Empties the cache. Counters restart at `step`.
CacheState refresh(CacheState state, int step);

/// Owns the cache for one generation and turns plan decisions into layouts.
class CacheEngine {
 public:
  CacheEngine(CacheVariant variant, ShiftMode shift, ExecutionPath path, int seq_len,
              int prompt_len, int n_layers);

  /// Builds the layout for this step. Throws LayoutError if the cached rows
  /// and the compute set do not partition the sequence.
  const ComputePlan& open_step(int step, const PlanDecision& decision);

  /// Keeps the rows that are not in the next step's compute set. Call with
  /// nullopt after the last step.
  void close_step(const ForwardResult& result, const std::optional<PlanDecision>& next);

  const ComputePlan& plan() const { return plan_; }
  const CacheState& state() const { return state_; }
  ExecutionPath path() const { return path_; }
  KeyAssembly key_assembly() const;

 private:
  CacheState state_;
  ExecutionPath path_;
  int seq_len_;
  int n_layers_;
  ComputePlan plan_;
};

namespace testing {
/// Corrupts the next computed reorder index (mutation check for self-test).
void inject_reorder_fault(bool enabled);
}  // namespace testing

}  // namespace dkv
