#include <doctest.h>

#include "dkv/analysis.hpp"
#include "dkv/sampler.hpp"

using namespace dkv;

namespace {

ModelConfig toy(bool shifted = false) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_head = 16;
  c.d_model = 32;
  c.d_ff = 64;
  c.vocab_size = 64;
  c.mask_token_id = 63;
  c.max_positions = 256;
  c.weight_seed = 21;
  c.shifted_output = shifted;
  return c;
}

std::vector<TokenId> prompt_of(int n) {
  std::vector<TokenId> p;
  for (int i = 0; i < n; ++i) p.push_back(static_cast<TokenId>((i * 7 + 3) % 60));
  return p;
}

SamplerConfig sampler(int L, int T, int B, CacheVariant cache, Remasking r = Remasking::LowConfidence) {
  SamplerConfig c;
  c.gen_len = L;
  c.steps = T;
  c.block_size = B;
  c.cache = cache;
  c.remasking = r;
  c.record_timing = false;
  return c;
}

std::int64_t rows(const GenerationResult& r) {
  std::int64_t n = 0;
  for (const auto& s : r.trace.records) n += s.query_rows;
  return n;
}

}  // namespace

TEST_CASE("none fills every position and is reproducible") {
  const ModelWeights w = init_weights(toy());
  const auto prompt = prompt_of(6);
  const auto a = generate(prompt, sampler(20, 10, 10, NoCache{}), w);
  const auto b = generate(prompt, sampler(20, 10, 10, NoCache{}), w);
  CHECK(a.tokens == b.tokens);
  REQUIRE(a.tokens.size() == 26);
  CHECK(std::equal(prompt.begin(), prompt.end(), a.tokens.begin()));
  for (TokenId t : a.tokens) CHECK(t != w.config().mask_token_id);
  CHECK(a.trace.records.size() == 10);
  CHECK(rows(a) == 10 * 26);
}

TEST_CASE("decode(1) is bit-identical to none for every remasking strategy") {
  const ModelWeights w = init_weights(toy());
  for (Remasking r : {Remasking::LowConfidence, Remasking::TopMargin, Remasking::Random}) {
    const auto none = generate(prompt_of(5), sampler(16, 16, 8, NoCache{}, r), w);
    const auto dec = generate(prompt_of(5), sampler(16, 16, 8, DecodeCache{1}, r), w);
    CHECK(none.tokens == dec.tokens);
  }
}

TEST_CASE("decode(inf) rows match the closed form") {
  const ModelWeights w = init_weights(toy());
  for (int L : {8, 16, 32}) {
    const auto r = generate({}, sampler(L, L, L, DecodeCache{std::nullopt}), w);
    std::int64_t expect = L;
    for (int s = 1; s < L; ++s) expect += L - s + 1;
    CHECK(rows(r) == expect);
    double ratio = 0;
    for (int t = 1; t < L; ++t) ratio += static_cast<double>(t - 1) / L;
    CHECK(cache_ratio(r.trace) == doctest::Approx(ratio / L));
  }
}

TEST_CASE("reorder and naive paths agree") {
  const ModelWeights w = init_weights(toy());
  for (CacheVariant v : {CacheVariant{DecodeCache{4}}, CacheVariant{PrefillDecodeCache{3}}, CacheVariant{PrefillCache{}}}) {
    auto cfg = sampler(24, 12, 12, v);
    const auto a = generate(prompt_of(8), cfg, w);
    cfg.path = ExecutionPath::Naive;
    const auto b = generate(prompt_of(8), cfg, w);
    CHECK(a.tokens == b.tokens);
    REQUIRE(a.trace.records.size() == b.trace.records.size());
    for (std::size_t t = 0; t < a.trace.records.size(); ++t)
      CHECK(a.trace.records[t].compute_set == b.trace.records[t].compute_set);
  }
}

TEST_CASE("pd never recomputes the prompt after step 0") {
  const ModelWeights w = init_weights(toy());
  const auto r = generate(prompt_of(10), sampler(16, 16, 16, PrefillDecodeCache{4}), w);
  for (const auto& s : r.trace.records) {
    if (s.step == 0) continue;
    CHECK(s.compute_set.front() >= 10);
    if (s.step % 4 == 0) {
      CHECK(s.refresh);
      CHECK(s.compute_set == positions::range(10, 26));
    }
  }
}

TEST_CASE("greedy per-step rows stay bounded") {
  const ModelWeights w = init_weights(toy());
  auto cfg = sampler(64, 64, 64, GreedyCache{std::nullopt, 4, WindowCenter::PreviousDecoded}, Remasking::Random);
  const auto r = generate({}, cfg, w);
  for (const auto& s : r.trace.records)
    if (s.step > 0) CHECK(s.query_rows <= 7);
  cfg.cache = GreedyCache{std::nullopt, 4, WindowCenter::CurrentDecoded};
  for (const auto& s : generate({}, cfg, w).trace.records)
    if (s.step > 0) CHECK(s.query_rows <= 6);
}

TEST_CASE("random remasking follows the predefined order") {
  const ModelWeights w = init_weights(toy());
  const auto cfg = sampler(12, 6, 6, DecodeCache{}, Remasking::Random);
  Generator gen(w, cfg, prompt_of(3));
  const auto order = gen.predefined_order();
  REQUIRE(order.size() == 6);
  while (!gen.done()) {
    const StepRecord& rec = gen.step();
    CHECK(rec.decoded == order[static_cast<std::size_t>(rec.step)]);
  }
}

TEST_CASE("shifted-output models with each shift mode") {
  const ModelWeights w = init_weights(toy(true));
  auto cfg = sampler(12, 12, 12, DecodeCache{});
  for (ShiftMode m : {ShiftMode::UnShift, ShiftMode::RightShift, ShiftMode::UnAndRightShift}) {
    cfg.shift = m;
    cfg.path = m == ShiftMode::UnAndRightShift ? ExecutionPath::Naive : ExecutionPath::Reorder;
    const auto r = generate(prompt_of(4), cfg, w);
    for (TokenId t : r.tokens) CHECK(t != w.config().mask_token_id);
  }
  cfg.shift = ShiftMode::UnShift;
  cfg.path = ExecutionPath::Reorder;
  const auto un = generate(prompt_of(4), cfg, w);
  cfg.shift = ShiftMode::UnAndRightShift;
  cfg.path = ExecutionPath::Naive;
  const auto ur = generate(prompt_of(4), cfg, w);
  CHECK(rows(ur) >= rows(un));
}

TEST_CASE("sampling temperature is reproducible per seed") {
  const ModelWeights w = init_weights(toy());
  auto cfg = sampler(16, 8, 8, DecodeCache{2});
  cfg.temperature = 1.0f;
  cfg.sample_seed = 9;
  const auto a = generate(prompt_of(4), cfg, w);
  const auto b = generate(prompt_of(4), cfg, w);
  CHECK(a.tokens == b.tokens);
  cfg.sample_seed = 10;
  CHECK(generate(prompt_of(4), cfg, w).tokens != a.tokens);
}

TEST_CASE("failures carry the partial trace") {
  const ModelWeights w = init_weights(toy());
  testing::inject_reorder_fault(true);
  try {
    generate(prompt_of(4), sampler(8, 8, 8, DecodeCache{}), w);
    testing::inject_reorder_fault(false);
    FAIL("expected GenerationError");
  } catch (const GenerationError& e) {
    testing::inject_reorder_fault(false);
    CHECK(std::string(e.what()).find("layout soundness") != std::string::npos);
    CHECK(e.partial_trace().records.size() == 1);
  }
}

TEST_CASE("snapshots are natural-order full K/V of one layer") {
  const ModelWeights w = init_weights(toy());
  auto cfg = sampler(8, 8, 8, NoCache{});
  cfg.snapshot_layer = 1;
  const auto none = generate(prompt_of(4), cfg, w);
  cfg.cache = DecodeCache{};
  const auto dec = generate(prompt_of(4), cfg, w);
  REQUIRE(none.trace.snapshots.size() == 8);
  CHECK(none.trace.snapshots[0].keys.rows() == 12);
  // both runs take the same full pass at step 0
  CHECK(none.trace.snapshots[0].keys == dec.trace.snapshots[0].keys);
  std::vector<TokenId> initial = prompt_of(4);
  initial.resize(12, w.config().mask_token_id);
  const ForwardResult full = forward_full(initial, w);
  CHECK(full.full_kv[1].keys == none.trace.snapshots[0].keys);
  CHECK(full.full_kv[1].values == none.trace.snapshots[0].values);
}
