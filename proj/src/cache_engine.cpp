#include "dkv/cache_engine.hpp"

#include <atomic>
#include <cctype>
#include <charconv>

namespace dkv {

namespace {

std::atomic<bool> g_reorder_fault{false};

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};

std::string lower(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    if (!std::isspace(static_cast<unsigned char>(c))) {
      out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  return out;
}

std::string interval_string(RefreshInterval n) { return n ? std::to_string(*n) : "inf"; }

RefreshInterval parse_interval(std::string_view s) {
  if (s == "inf" || s == "never") return std::nullopt;
  int value = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw std::invalid_argument("cache variant: bad refresh interval '" + std::string(s) + "'");
  }
  if (value < 1) throw std::invalid_argument("cache variant: refresh interval must be >= 1");
  return value;
}

int parse_int(std::string_view s, const char* what) {
  int value = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw std::invalid_argument(std::string("cache variant: bad ") + what + " '" +
                                std::string(s) + "'");
  }
  return value;
}

std::vector<std::string_view> split_args(std::string_view args) {
  std::vector<std::string_view> out;
  if (args.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto comma = args.find(',', start);
    out.push_back(args.substr(start, comma == std::string_view::npos ? args.npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

void check_position_set(std::span<const Position> s, int seq_len, const char* name) {
  if (!positions::is_set(s)) {
    throw std::invalid_argument(std::string("plan: ") + name + " must be sorted and unique");
  }
  if (!s.empty() && (s.front() < 0 || s.back() >= seq_len)) {
    throw std::invalid_argument(std::string("plan: ") + name + " out of range");
  }
}

}  // namespace

RefreshInterval refresh_interval(const CacheVariant& variant) {
  return std::visit(overloaded{[](const NoCache&) -> RefreshInterval { return std::nullopt; },
                               [](const DecodeCache& v) { return v.refresh_interval; },
                               [](const GreedyCache& v) { return v.refresh_interval; },
                               [](const PrefillCache&) -> RefreshInterval { return std::nullopt; },
                               [](const PrefillDecodeCache& v) { return v.refresh_interval; }},
                    variant);
}

std::string to_string(const CacheVariant& variant) {
  return std::visit(
      overloaded{
          [](const NoCache&) -> std::string { return "none"; },
          [](const DecodeCache& v) { return "decode(" + interval_string(v.refresh_interval) + ")"; },
          [](const GreedyCache& v) {
            return "greedy(" + interval_string(v.refresh_interval) + "," +
                   std::to_string(v.window_size) + "," +
                   (v.window_center == WindowCenter::CurrentDecoded ? "current" : "previous") +
                   ")";
          },
          [](const PrefillCache&) -> std::string { return "prefill"; },
          [](const PrefillDecodeCache& v) {
            return "pd(" + interval_string(v.refresh_interval) + ")";
          }},
      variant);
}

CacheVariant parse_cache_variant(std::string_view text) {
  const std::string s = lower(text);
  std::string name = s;
  std::string args;
  if (const auto open = s.find('('); open != std::string::npos) {
    if (s.back() != ')') throw std::invalid_argument("cache variant: missing ')' in '" + s + "'");
    name = s.substr(0, open);
    args = s.substr(open + 1, s.size() - open - 2);
  }
  const auto parts = split_args(args);
  auto expect_at_most = [&](std::size_t n) {
    if (parts.size() > n) {
      throw std::invalid_argument("cache variant: too many arguments in '" + s + "'");
    }
  };

  if (name == "none") {
    expect_at_most(0);
    return NoCache{};
  }
  if (name == "decode") {
    expect_at_most(1);
    return DecodeCache{parts.empty() ? std::nullopt : parse_interval(parts[0])};
  }
  if (name == "greedy") {
    expect_at_most(3);
    GreedyCache g;
    if (!parts.empty()) g.refresh_interval = parse_interval(parts[0]);
    if (parts.size() > 1) g.window_size = parse_int(parts[1], "window size");
    if (g.window_size < 0) throw std::invalid_argument("cache variant: window size must be >= 0");
    if (parts.size() > 2) {
      if (parts[2] == "current") {
        g.window_center = WindowCenter::CurrentDecoded;
      } else if (parts[2] == "previous") {
        g.window_center = WindowCenter::PreviousDecoded;
      } else {
        throw std::invalid_argument("cache variant: unknown window center '" +
                                    std::string(parts[2]) + "'");
      }
    }
    return g;
  }
  if (name == "prefill") {
    expect_at_most(0);
    return PrefillCache{};
  }
  if (name == "pd") {
    expect_at_most(1);
    return PrefillDecodeCache{parts.empty() ? std::nullopt : parse_interval(parts[0])};
  }
  throw std::invalid_argument("cache variant: unknown variant '" + std::string(text) + "'");
}

std::string to_string(ShiftMode mode) {
  switch (mode) {
    case ShiftMode::UnShift: return "un_shift";
    case ShiftMode::RightShift: return "right_shift";
    case ShiftMode::UnAndRightShift: return "un_and_right_shift";
  }
  return "?";
}

ShiftMode parse_shift_mode(std::string_view text) {
  const std::string s = lower(text);
  if (s == "un_shift" || s == "unshift") return ShiftMode::UnShift;
  if (s == "right_shift" || s == "rightshift") return ShiftMode::RightShift;
  if (s == "un_and_right_shift" || s == "unandrightshift") return ShiftMode::UnAndRightShift;
  throw std::invalid_argument("unknown shift mode '" + std::string(text) + "'");
}

std::string to_string(ExecutionPath path) {
  return path == ExecutionPath::Reorder ? "reorder" : "naive";
}

ExecutionPath parse_execution_path(std::string_view text) {
  const std::string s = lower(text);
  if (s == "reorder") return ExecutionPath::Reorder;
  if (s == "naive") return ExecutionPath::Naive;
  throw std::invalid_argument("unknown execution path '" + std::string(text) + "'");
}

std::optional<Position> shift_rows(ShiftMode mode, Position p, int seq_len) {
  if (p < 0 || p >= seq_len) throw std::out_of_range("shift_rows: position out of range");
  if (mode == ShiftMode::RightShift) {
    if (p + 1 >= seq_len) return std::nullopt;
    return p + 1;
  }
  return p;
}

PositionList cacheable_rows(ShiftMode mode, std::span<const Position> settled, int seq_len) {
  PositionList rows;
  rows.reserve(settled.size());
  for (Position p : settled) {
    if (mode == ShiftMode::UnAndRightShift) {
      const bool output_settled = p + 1 >= seq_len || positions::contains(settled, p + 1);
      if (output_settled) rows.push_back(p);
      continue;
    }
    if (auto row = shift_rows(mode, p, seq_len)) rows.push_back(*row);
  }
  return rows;  // shift is monotone, so still sorted
}

PositionList greedy_window(std::span<const Position> centers, int window_size,
                           GenerationRegion region) {
  if (window_size < 0) throw std::invalid_argument("greedy_window: window size must be >= 0");
  PositionList out;
  const int left = (window_size + 1) / 2;
  const int right = window_size / 2;
  for (Position c : centers) {
    const Position lo = std::max(region.begin, c - left);
    const Position hi = std::min(region.end - 1, c + right);
    for (Position p = lo; p <= hi; ++p) out.push_back(p);
  }
  return positions::sorted_copy(out);
}

bool is_refresh_step(RefreshInterval interval, int step) {
  return interval && step > 0 && step % *interval == 0;
}

PlanDecision plan_compute_set(const CacheVariant& variant, const PlanRequest& req) {
  const int S = req.seq_len;
  if (req.prompt_len < 0 || req.prompt_len > S) throw std::invalid_argument("plan: bad prompt length");
  check_position_set(req.masked, S, "masked set");
  check_position_set(req.prev_decoded, S, "previous decoded set");
  check_position_set(req.logit_rows, S, "logit rows");
  if (req.prev_masked) {
    check_position_set(*req.prev_masked, S, "previous masked set");
    if (!positions::is_subset(req.masked, *req.prev_masked)) {
      throw std::invalid_argument("plan: masked set is not contained in the previous masked set");
    }
  }
  if (req.decoded) check_position_set(*req.decoded, S, "decoded set");

  const PositionList all = positions::range(0, S);
  const PositionList generated = positions::range(req.prompt_len, S);
  const PositionList prefill = positions::range(0, req.prompt_len);

  if (std::holds_alternative<GreedyCache>(variant) && !req.decoded) {
    throw std::invalid_argument("plan: greedy caching needs a predefined decode order");
  }
  if (req.step == 0 || !req.prev_masked || std::holds_alternative<NoCache>(variant)) {
    return {all, false};
  }
  const PositionList settled = positions::set_difference(all, *req.prev_masked);

  return std::visit(
      overloaded{
          [&](const NoCache&) { return PlanDecision{all, false}; },
          [&](const DecodeCache& v) {
            if (is_refresh_step(v.refresh_interval, req.step)) return PlanDecision{all, true};
            const auto reusable = cacheable_rows(req.shift, settled, S);
            return PlanDecision{
                positions::set_union(positions::set_difference(all, reusable), req.logit_rows),
                false};
          },
          [&](const GreedyCache& v) {
            if (is_refresh_step(v.refresh_interval, req.step)) return PlanDecision{all, true};
            const PositionList& centers =
                v.window_center == WindowCenter::CurrentDecoded ? *req.decoded : req.prev_decoded;
            auto c = positions::set_union(*req.decoded, req.prev_decoded);
            c = positions::set_union(c, greedy_window(centers, v.window_size,
                                                      {req.prompt_len, S}));
            return PlanDecision{positions::set_union(c, req.logit_rows), false};
          },
          [&](const PrefillCache&) {
            return PlanDecision{positions::set_union(generated, req.logit_rows), false};
          },
          [&](const PrefillDecodeCache& v) {
            if (is_refresh_step(v.refresh_interval, req.step)) {
              return PlanDecision{positions::set_union(generated, req.logit_rows), true};
            }
            const auto reusable =
                positions::set_union(prefill, cacheable_rows(req.shift, settled, S));
            return PlanDecision{
                positions::set_union(positions::set_difference(all, reusable), req.logit_rows),
                false};
          }},
      variant);
}

std::vector<int> reorder_index(std::span<const Position> layout,
                               std::span<const Position> next_cached) {
  std::vector<int> index;
  index.reserve(next_cached.size());
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (positions::contains(next_cached, layout[i])) index.push_back(static_cast<int>(i));
  }
  if (index.size() != next_cached.size()) {
    throw LayoutError("reorder index: next cached set is not covered by the layout");
  }
  if (g_reorder_fault.load() && !index.empty()) index.pop_back();
  return index;
}

ComputePlan build_layout(std::span<const Position> cached_positions,
                         std::span<const Position> compute_set,
                         std::span<const Position> next_cached, int seq_len) {
  ComputePlan plan;
  plan.compute_set.assign(compute_set.begin(), compute_set.end());
  plan.layout.reserve(cached_positions.size() + compute_set.size());
  plan.layout.insert(plan.layout.end(), cached_positions.begin(), cached_positions.end());
  plan.layout.insert(plan.layout.end(), compute_set.begin(), compute_set.end());
  if (!positions::is_permutation_of_range(plan.layout, seq_len)) {
    throw LayoutError("layout soundness: cached " + positions::to_string(cached_positions) +
                      " and compute " + positions::to_string(compute_set) +
                      " do not partition the sequence");
  }
  plan.pe_order = plan.layout;
  if (!positions::is_set(next_cached)) {
    throw LayoutError("build_layout: next cached set must be sorted and unique");
  }
  plan.reorder_index = reorder_index(plan.layout, next_cached);
  return plan;
}

KVSlab reorder(const KVSlab& full, std::span<const int> index) {
  KVSlab out;
  out.layer = full.layer;
  const auto n = static_cast<Eigen::Index>(index.size());
  out.keys.resize(n, full.keys.cols());
  out.values.resize(n, full.values.cols());
  out.row_positions.reserve(index.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const int src = index[static_cast<std::size_t>(i)];
    if (src < 0 || src >= full.rows()) {
      throw std::out_of_range("reorder: index " + std::to_string(src) + " out of bounds");
    }
    out.keys.row(i) = full.keys.row(src);
    out.values.row(i) = full.values.row(src);
    out.row_positions.push_back(full.row_positions[static_cast<std::size_t>(src)]);
  }
  return out;
}

ConcatReorderResult concat_reorder(const KVSlab& cached, const KVSlab& fresh,
                                   std::span<const int> index) {
  if (cached.rows() > 0 && cached.keys.cols() != fresh.keys.cols()) {
    throw std::invalid_argument("concat_reorder: width mismatch");
  }
  if (cached.layer != fresh.layer) throw std::invalid_argument("concat_reorder: layer mismatch");
  ConcatReorderResult out;
  out.full.layer = fresh.layer;
  const auto nc = static_cast<Eigen::Index>(cached.rows());
  const auto nf = static_cast<Eigen::Index>(fresh.rows());
  out.full.keys.resize(nc + nf, fresh.keys.cols());
  out.full.values.resize(nc + nf, fresh.values.cols());
  if (nc > 0) {
    out.full.keys.topRows(nc) = cached.keys;
    out.full.values.topRows(nc) = cached.values;
  }
  out.full.keys.bottomRows(nf) = fresh.keys;
  out.full.values.bottomRows(nf) = fresh.values;
  out.full.row_positions = cached.row_positions;
  out.full.row_positions.insert(out.full.row_positions.end(), fresh.row_positions.begin(),
                                fresh.row_positions.end());
  out.next_cached = reorder(out.full, index);
  return out;
}

ScatteredLogits::ScatteredLogits(int seq_len, std::span<const Position> compute_set, Matrix rows)
    : row_of_(static_cast<std::size_t>(seq_len), -1), rows_(std::move(rows)) {
  if (static_cast<Eigen::Index>(compute_set.size()) != rows_.rows()) {
    throw std::invalid_argument("scatter: logit row count does not match compute set");
  }
  for (std::size_t i = 0; i < compute_set.size(); ++i) {
    const Position p = compute_set[i];
    if (p < 0 || p >= seq_len || row_of_[static_cast<std::size_t>(p)] != -1) {
      throw std::invalid_argument("scatter: bad compute position " + std::to_string(p));
    }
    row_of_[static_cast<std::size_t>(p)] = static_cast<int>(i);
  }
}

bool ScatteredLogits::has(Position p) const {
  return p >= 0 && p < seq_len() && row_of_[static_cast<std::size_t>(p)] >= 0;
}

Eigen::Ref<const RowVector> ScatteredLogits::row(Position p) const {
  if (!has(p)) throw std::out_of_range("no logits at position " + std::to_string(p));
  return rows_.row(row_of_[static_cast<std::size_t>(p)]);
}

ScatteredLogits scatter_outputs(const ComputePlan& plan, Matrix partial_logits) {
  return ScatteredLogits(static_cast<int>(plan.layout.size()), plan.compute_set,
                         std::move(partial_logits));
}

PositionList CacheState::cached_positions() const {
  return layers.empty() ? PositionList{} : layers.front().row_positions;
}

CacheState refresh(CacheState state, int step) {
  state.layers.clear();
  state.epoch_start = step;
  return state;
}

CacheEngine::CacheEngine(CacheVariant variant, ShiftMode shift, ExecutionPath path, int seq_len,
                         int prompt_len, int n_layers)
    : path_(path), seq_len_(seq_len), n_layers_(n_layers) {
  if (shift == ShiftMode::UnAndRightShift && path == ExecutionPath::Reorder) {
    throw std::invalid_argument("un_and_right_shift requires the naive execution path");
  }
  state_.variant = variant;
  state_.shift = shift;
  state_.prefill = positions::range(0, prompt_len);
}

KeyAssembly CacheEngine::key_assembly() const {
  return path_ == ExecutionPath::Reorder ? KeyAssembly::Layout : KeyAssembly::Natural;
}

const ComputePlan& CacheEngine::open_step(int step, const PlanDecision& decision) {
  const PositionList cached = state_.cached_positions();
  ComputePlan plan;
  plan.step = step;
  plan.refresh = decision.refresh;
  plan.compute_set = decision.compute_set;
  plan.layout = cached;
  plan.layout.insert(plan.layout.end(), decision.compute_set.begin(), decision.compute_set.end());
  if (!positions::is_permutation_of_range(plan.layout, seq_len_)) {
    throw LayoutError("layout soundness: step " + std::to_string(step) + " cached " +
                      positions::to_string(cached) + " and compute " +
                      positions::to_string(decision.compute_set) +
                      " do not partition the sequence");
  }
  plan.pe_order = plan.layout;
  plan_ = std::move(plan);
  state_.step = step;
  return plan_;
}

void CacheEngine::close_step(const ForwardResult& result, const std::optional<PlanDecision>& next) {
  if (static_cast<int>(result.full_kv.size()) != n_layers_) {
    throw std::invalid_argument("close_step: forward result layer count mismatch");
  }
  if (!next) {
    plan_.reorder_index.clear();
    return;
  }
  const PositionList next_cached =
      positions::set_difference(positions::range(0, seq_len_), next->compute_set);
  if (next->refresh) state_ = refresh(std::move(state_), plan_.step + 1);

  if (next_cached.empty()) {
    plan_.reorder_index.clear();
    state_.layers.clear();
    return;
  }

  if (path_ == ExecutionPath::Reorder) {
    plan_.reorder_index = reorder_index(result.full_kv.front().row_positions, next_cached);
  } else {
    // natural order: row index == position
    plan_.reorder_index.assign(next_cached.begin(), next_cached.end());
    if (g_reorder_fault.load()) plan_.reorder_index.pop_back();
  }
  LayerCache next_layers;
  next_layers.reserve(result.full_kv.size());
  for (const KVSlab& full : result.full_kv) next_layers.push_back(reorder(full, plan_.reorder_index));
  state_.layers = std::move(next_layers);
}

namespace testing {
void inject_reorder_fault(bool enabled) { g_reorder_fault.store(enabled); }
}  // namespace testing

}  // namespace dkv
