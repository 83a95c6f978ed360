#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dkv/sampler.hpp"

using namespace dkv;

namespace {

/// Hands out units one at a time to the index with the largest exact deficit
/// total*w_i/W - n_i, earliest index on ties.
std::vector<int> deficit_apportion(int total, const std::vector<int>& weights) {
  const std::int64_t W = std::accumulate(weights.begin(), weights.end(), std::int64_t{0});
  std::vector<int> n(weights.size(), 0);
  for (int unit = 0; unit < total; ++unit) {
    std::size_t best = 0;
    std::int64_t best_num = std::numeric_limits<std::int64_t>::min();
    for (std::size_t i = 0; i < weights.size(); ++i) {
      const std::int64_t num = static_cast<std::int64_t>(total) * weights[i] - W * n[i];  // deficit * W
      if (num > best_num) {
        best_num = num;
        best = i;
      }
    }
    ++n[best];
  }
  return n;
}

std::vector<int> oracle_schedule(int L, int T, int B) {
  std::vector<int> sizes;
  for (int off = 0; off < L; off += B) sizes.push_back(std::min(B, L - off));
  std::vector<int> out;
  for (std::size_t b = 0; b < sizes.size(); ++b) {
    const int steps = deficit_apportion(T, sizes)[b];
    const auto per = deficit_apportion(sizes[b], std::vector<int>(static_cast<std::size_t>(steps), 1));
    out.insert(out.end(), per.begin(), per.end());
  }
  return out;
}

Proposal prop(float conf, float margin) { return Proposal{0, conf, margin}; }

}  // namespace

TEST_CASE("schedule: documented example") {
  const StepSchedule s = tokens_per_step_schedule(10, 4, 10);
  CHECK(s.tokens_per_step == std::vector<int>{3, 3, 2, 2});
  CHECK(s.block_of_step == std::vector<int>{0, 0, 0, 0});
}

TEST_CASE("schedule matches the deficit oracle and its invariants") {
  for (int L = 1; L <= 24; ++L)
    for (int T = 1; T <= L; ++T)
      for (int B = 1; B <= L; ++B) {
        const int blocks = (L + B - 1) / B;
        std::vector<int> sizes;
        for (int off = 0; off < L; off += B) sizes.push_back(std::min(B, L - off));
        const auto per_block = deficit_apportion(T, sizes);
        if (std::count(per_block.begin(), per_block.end(), 0) > 0) {
          CHECK_THROWS_AS(tokens_per_step_schedule(L, T, B), std::invalid_argument);
          continue;
        }
        const StepSchedule s = tokens_per_step_schedule(L, T, B);
        REQUIRE(s.tokens_per_step == oracle_schedule(L, T, B));
        CHECK(std::accumulate(s.tokens_per_step.begin(), s.tokens_per_step.end(), 0) == L);
        CHECK(static_cast<int>(s.tokens_per_step.size()) == T);
        CHECK(std::is_sorted(s.block_of_step.begin(), s.block_of_step.end()));
        for (int b = 0; b < blocks; ++b) {
          int tokens = 0;
          for (int t = 0; t < T; ++t) tokens += s.block_of_step[static_cast<std::size_t>(t)] == b ? s.tokens_per_step[static_cast<std::size_t>(t)] : 0;
          CHECK(tokens == s.block_end[static_cast<std::size_t>(b)] - s.block_begin[static_cast<std::size_t>(b)]);
        }
      }
  CHECK_THROWS_AS(tokens_per_step_schedule(8, 4, 9), std::invalid_argument);
  CHECK_THROWS_AS(tokens_per_step_schedule(0, 4, 1), std::invalid_argument);
}

TEST_CASE("noise schedule") {
  const NoiseSchedule s(8);
  CHECK(s.alpha_bar(0) == 1.0);
  CHECK(s.alpha_bar(8) == 0.0);
  CHECK(s.alpha_bar(2) == doctest::Approx(0.75));
  CHECK(s.time(4) == doctest::Approx(0.5));
  double prod = 1.0;
  for (int t = 1; t <= 8; ++t) {
    prod *= 1.0 - s.beta(t);
    CHECK(prod == doctest::Approx(s.alpha_bar(t)));
  }
  CHECK_THROWS_AS(s.alpha_bar(9), std::out_of_range);
  CHECK_THROWS_AS(NoiseSchedule(0), std::invalid_argument);
}

TEST_CASE("corruption: masks are absorbing, endpoints are exact") {
  const NoiseSchedule s(4);
  Rng rng(3);
  const std::vector<TokenId> x0{1, 2, 99, 3, 99, 4};
  for (int i = 0; i < 50; ++i) {
    const auto x = corrupt(x0, 2, s, 99, rng);
    for (std::size_t p = 0; p < x0.size(); ++p) {
      if (x0[p] == 99) CHECK(x[p] == 99);
      CHECK((x[p] == x0[p] || x[p] == 99));
    }
  }
  CHECK(corrupt(x0, 0, s, 99, rng) == x0);
  CHECK(corrupt(x0, 4, s, 99, rng) == std::vector<TokenId>(6, 99));
}

TEST_CASE("corruption rate is unbiased across seeds") {
  const NoiseSchedule s(4);
  const std::vector<TokenId> x0(100, 5);
  const int seeds = 100, trials = 200;
  double sum_z = 0, sum_z2 = 0;
  for (int seed = 0; seed < seeds; ++seed) {
    Rng rng(Rng::derive(static_cast<std::uint64_t>(seed), 50));
    std::int64_t masked = 0;
    for (int i = 0; i < trials; ++i)
      for (TokenId t : corrupt(x0, 2, s, 511, rng)) masked += t == 511;
    const double n = 100.0 * trials;
    const double z = (masked / n - 0.5) / std::sqrt(0.25 / n);
    sum_z += z;
    sum_z2 += z * z;
  }
  const double mean = sum_z / seeds;
  const double var = sum_z2 / seeds - mean * mean;
  CHECK(std::abs(mean) < 0.4);  // 4 standard errors
  CHECK(var > 0.6);
  CHECK(var < 1.5);
}

TEST_CASE("predict_x0: argmax, confidence and margin") {
  Rng rng(1);
  Matrix logits(3, 4);
  logits << 0, 0, 0, 0,     // uniform: lowest id wins
      0, 100, 0, 0,         // one-hot
      1, 3, 3, 2;           // tie between 1 and 2
  const auto p = predict_x0(logits, 0.0f, rng);
  CHECK(p[0].token == 0);
  CHECK(p[0].confidence == doctest::Approx(0.25));
  CHECK(p[0].margin == doctest::Approx(0.0));
  CHECK(p[1].token == 1);
  CHECK(p[1].confidence == doctest::Approx(1.0));
  CHECK(p[1].margin == doctest::Approx(1.0));
  CHECK(p[2].token == 1);
  CHECK(p[2].margin == doctest::Approx(0.0));
  CHECK_THROWS_AS(predict_x0(logits, -1.0f, rng), std::invalid_argument);
}

TEST_CASE("predict_x0 sampling follows the softmax") {
  Rng rng(2);
  Matrix logits(1, 3);
  logits << std::log(0.2f), std::log(0.3f), std::log(0.5f);
  std::vector<int> counts(3, 0);
  const int n = 30000;
  for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(predict_x0(logits, 1.0f, rng)[0].token)];
  const double expect[] = {0.2, 0.3, 0.5};
  for (int k = 0; k < 3; ++k) {
    const double sd = std::sqrt(expect[k] * (1 - expect[k]) / n);
    CHECK(std::abs(counts[static_cast<std::size_t>(k)] / double(n) - expect[k]) < 5 * sd);
  }
}

TEST_CASE("select_to_unmask") {
  Rng rng(4);
  const std::vector<Candidate> c{{7, prop(0.9f, 0.1f)}, {3, prop(0.5f, 0.4f)},
                                 {5, prop(0.9f, 0.3f)}, {9, prop(0.2f, 0.9f)}};
  CHECK(select_to_unmask(c, Remasking::LowConfidence, 2, rng) == PositionList{5, 7});
  CHECK(select_to_unmask(c, Remasking::LowConfidence, 1, rng) == PositionList{5});  // tie -> lower position
  CHECK(select_to_unmask(c, Remasking::TopMargin, 2, rng) == PositionList{3, 9});
  CHECK(select_to_unmask(c, Remasking::Random, 0, rng).empty());
  CHECK(select_to_unmask(c, Remasking::Random, 4, rng) == PositionList{3, 5, 7, 9});
  CHECK_THROWS_AS(select_to_unmask(c, Remasking::Random, 5, rng), std::invalid_argument);

  std::vector<int> hits(10, 0);
  for (int i = 0; i < 8000; ++i)
    for (Position p : select_to_unmask(c, Remasking::Random, 1, rng)) ++hits[static_cast<std::size_t>(p)];
  for (Position p : {3, 5, 7, 9}) CHECK(std::abs(hits[static_cast<std::size_t>(p)] - 2000) < 5 * std::sqrt(1500.0));
}

TEST_CASE("remasking names") {
  for (Remasking r : {Remasking::Random, Remasking::LowConfidence, Remasking::TopMargin})
    CHECK(parse_remasking(to_string(r)) == r);
  CHECK_THROWS(parse_remasking("entropy"));
}

TEST_CASE("sampler config validation") {
  ModelConfig m;
  SamplerConfig c;
  CHECK_NOTHROW(validate_sampler_config(c, m, 16));
  c.steps = 65;
  CHECK_THROWS(validate_sampler_config(c, m, 16));
  c = SamplerConfig{};
  c.shift = ShiftMode::RightShift;
  CHECK_THROWS(validate_sampler_config(c, m, 16));
  m.shifted_output = true;
  CHECK_NOTHROW(validate_sampler_config(c, m, 16));
  CHECK_THROWS(validate_sampler_config(c, m, 0));
  c.cache = PrefillCache{};
  CHECK_THROWS(validate_sampler_config(c, m, 16));
  m.shifted_output = false;
  c = SamplerConfig{};
  c.cache = GreedyCache{};
  CHECK_THROWS(validate_sampler_config(c, m, 16));
  c.remasking = Remasking::Random;
  CHECK_NOTHROW(validate_sampler_config(c, m, 16));
  c.snapshot_layer = 4;
  CHECK_THROWS(validate_sampler_config(c, m, 16));
  c = SamplerConfig{};
  CHECK_THROWS(validate_sampler_config(c, m, 990));
}
