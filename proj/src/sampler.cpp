#include "dkv/sampler.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

namespace dkv {

namespace {

/// Splits `total` across `weights` proportionally; leftovers go to the
/// largest fractional parts, earlier index first on ties.
std::vector<int> largest_remainder(int total, std::span<const int> weights) {
  const std::int64_t weight_sum = std::accumulate(weights.begin(), weights.end(), std::int64_t{0});
  std::vector<int> out(weights.size());
  std::vector<std::int64_t> remainder(weights.size());
  int assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const std::int64_t scaled = static_cast<std::int64_t>(total) * weights[i];
    out[i] = static_cast<int>(scaled / weight_sum);
    remainder[i] = scaled % weight_sum;
    assigned += out[i];
  }
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (int i = 0; i < total - assigned; ++i) ++out[order[static_cast<std::size_t>(i)]];
  return out;
}

using Clock = std::chrono::steady_clock;

double millis_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

}  // namespace

NoiseSchedule::NoiseSchedule(int total_steps) : total_steps_(total_steps) {
  if (total_steps < 1) throw std::invalid_argument("noise schedule: total steps must be >= 1");
}

double NoiseSchedule::alpha_bar(int t) const { return dkv::alpha_bar(t, total_steps_); }

double NoiseSchedule::beta(int t) const {
  if (t < 1 || t > total_steps_) throw std::out_of_range("beta: step out of range");
  // 1 - alpha_bar(t)/alpha_bar(t-1) = 1/(T - t + 1)
  return 1.0 / static_cast<double>(total_steps_ - t + 1);
}

double NoiseSchedule::time(int t) const {
  if (t < 0 || t > total_steps_) throw std::out_of_range("time: step out of range");
  return static_cast<double>(t) / total_steps_;
}

double alpha_bar(int t, int total_steps) {
  if (total_steps < 1) throw std::invalid_argument("alpha_bar: total steps must be >= 1");
  if (t < 0 || t > total_steps) {
    throw std::out_of_range("alpha_bar: step " + std::to_string(t) + " outside [0, " +
                            std::to_string(total_steps) + "]");
  }
  return 1.0 - static_cast<double>(t) / total_steps;
}

std::vector<TokenId> corrupt(std::span<const TokenId> x0, int t, const NoiseSchedule& schedule,
                             TokenId mask_token_id, Rng& rng) {
  const double p_mask = 1.0 - schedule.alpha_bar(t);
  std::vector<TokenId> out(x0.begin(), x0.end());
  for (TokenId& tok : out) {
    if (tok == mask_token_id) continue;
    if (rng.uniform() < p_mask) tok = mask_token_id;
  }
  return out;
}

StepSchedule tokens_per_step_schedule(int gen_len, int total_steps, int block_size) {
  if (gen_len < 1) throw std::invalid_argument("schedule: gen_len must be >= 1");
  if (total_steps < 1) throw std::invalid_argument("schedule: steps must be >= 1");
  if (block_size < 1 || block_size > gen_len) {
    throw std::invalid_argument("schedule: block size must be in [1, gen_len]");
  }
  const int n_blocks = (gen_len + block_size - 1) / block_size;
  std::vector<int> sizes(static_cast<std::size_t>(n_blocks), block_size);
  sizes.back() = gen_len - (n_blocks - 1) * block_size;

  const std::vector<int> steps_per_block = largest_remainder(total_steps, sizes);
  StepSchedule s;
  int offset = 0;
  for (int b = 0; b < n_blocks; ++b) {
    const int steps = steps_per_block[static_cast<std::size_t>(b)];
    const int size = sizes[static_cast<std::size_t>(b)];
    if (steps == 0) {
      throw std::invalid_argument("schedule: block " + std::to_string(b) +
                                  " gets no steps (need steps >= number of blocks)");
    }
    const std::vector<int> even(static_cast<std::size_t>(steps), 1);
    for (int k : largest_remainder(size, even)) {
      s.tokens_per_step.push_back(k);
      s.block_of_step.push_back(b);
    }
    s.block_begin.push_back(offset);
    s.block_end.push_back(offset + size);
    offset += size;
  }
  return s;
}

std::vector<Proposal> predict_x0(const Matrix& logits, float temperature, Rng& rng) {
  if (temperature < 0.0f) throw std::invalid_argument("predict_x0: negative temperature");
  if (logits.cols() < 2) throw std::invalid_argument("predict_x0: need at least two classes");
  std::vector<Proposal> out;
  out.reserve(static_cast<std::size_t>(logits.rows()));
  const double inv_temp = temperature > 0.0f ? 1.0 / temperature : 1.0;
  std::vector<double> probs(static_cast<std::size_t>(logits.cols()));

  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    double m = -INFINITY;
    for (Eigen::Index j = 0; j < row.size(); ++j) m = std::max(m, row(j) * inv_temp);
    double sum = 0.0;
    for (Eigen::Index j = 0; j < row.size(); ++j) {
      probs[static_cast<std::size_t>(j)] = std::exp(row(j) * inv_temp - m);
      sum += probs[static_cast<std::size_t>(j)];
    }
    for (double& p : probs) p /= sum;

    std::size_t top1 = 0;
    std::size_t top2 = 1;
    if (probs[1] > probs[0]) std::swap(top1, top2);
    for (std::size_t j = 2; j < probs.size(); ++j) {
      if (probs[j] > probs[top1]) {
        top2 = top1;
        top1 = j;
      } else if (probs[j] > probs[top2]) {
        top2 = j;
      }
    }

    std::size_t chosen = top1;
    if (temperature > 0.0f) {
      const double u = rng.uniform();
      double acc = 0.0;
      chosen = probs.size() - 1;
      for (std::size_t j = 0; j < probs.size(); ++j) {
        acc += probs[j];
        if (u < acc) {
          chosen = j;
          break;
        }
      }
    }
    out.push_back({static_cast<TokenId>(chosen), static_cast<float>(probs[chosen]),
                   static_cast<float>(probs[top1] - probs[top2])});
  }
  return out;
}

std::string to_string(Remasking r) {
  switch (r) {
    case Remasking::Random: return "random";
    case Remasking::LowConfidence: return "low_confidence";
    case Remasking::TopMargin: return "top_margin";
  }
  return "?";
}

Remasking parse_remasking(std::string_view text) {
  if (text == "random") return Remasking::Random;
  if (text == "low_confidence" || text == "confidence") return Remasking::LowConfidence;
  if (text == "top_margin" || text == "margin") return Remasking::TopMargin;
  throw std::invalid_argument("unknown remasking strategy '" + std::string(text) + "'");
}

PositionList select_to_unmask(std::span<const Candidate> candidates, Remasking strategy, int k,
                              Rng& rng) {
  if (k < 0 || k > static_cast<int>(candidates.size())) {
    throw std::invalid_argument("select_to_unmask: k=" + std::to_string(k) + " exceeds " +
                                std::to_string(candidates.size()) + " candidates");
  }
  std::vector<Candidate> pool(candidates.begin(), candidates.end());
  std::sort(pool.begin(), pool.end(),
            [](const Candidate& a, const Candidate& b) { return a.position < b.position; });

  PositionList chosen;
  chosen.reserve(static_cast<std::size_t>(k));
  if (strategy == Remasking::Random) {
    const std::size_t n = pool.size();
    for (std::size_t i = 0; i < static_cast<std::size_t>(k); ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
      std::swap(pool[i], pool[j]);
      chosen.push_back(pool[i].position);
    }
  } else {
    auto score = [strategy](const Candidate& c) {
      return strategy == Remasking::LowConfidence ? c.proposal.confidence : c.proposal.margin;
    };
    std::stable_sort(pool.begin(), pool.end(), [&](const Candidate& a, const Candidate& b) {
      return score(a) > score(b);
    });
    for (int i = 0; i < k; ++i) chosen.push_back(pool[static_cast<std::size_t>(i)].position);
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

void validate_sampler_config(const SamplerConfig& c, const ModelConfig& model, int prompt_len) {
  auto fail = [](const std::string& what) { throw std::invalid_argument(what); };
  if (c.gen_len < 1) fail("sampler.gen_len must be >= 1");
  if (c.steps < 1) fail("sampler.steps must be >= 1");
  if (c.steps > c.gen_len) fail("sampler.steps must not exceed gen_len");
  if (c.block_size < 1 || c.block_size > c.gen_len) fail("sampler.block_size must be in [1, gen_len]");
  if (!(c.temperature >= 0.0f)) fail("sampler.temperature must be >= 0");
  if (prompt_len < 0 || prompt_len + c.gen_len > model.max_positions) {
    fail("prompt length + gen_len exceeds model.max_positions");
  }
  if (c.snapshot_layer && (*c.snapshot_layer < 0 || *c.snapshot_layer >= model.n_layers)) {
    fail("snapshot_layer out of range");
  }
  if (c.shift != ShiftMode::UnShift && !model.shifted_output) {
    fail("cache.shift other than un_shift requires a shifted-output model");
  }
  if (c.shift == ShiftMode::UnAndRightShift && c.path != ExecutionPath::Naive) {
    fail("cache.shift un_and_right_shift requires the naive execution path");
  }
  if (model.shifted_output && prompt_len < 1) fail("shifted-output models need a non-empty prompt");
  if (std::holds_alternative<GreedyCache>(c.cache)) {
    if (c.remasking != Remasking::Random) {
      fail("greedy caching needs a predefined decode order (random remasking)");
    }
    if (c.shift != ShiftMode::UnShift) fail("greedy caching supports only un_shift");
  }
  if ((std::holds_alternative<PrefillCache>(c.cache) ||
       std::holds_alternative<PrefillDecodeCache>(c.cache)) &&
      model.shifted_output) {
    fail("prefill caching is not supported for shifted-output models");
  }
  (void)tokens_per_step_schedule(c.gen_len, c.steps, c.block_size);
}

Generator::Generator(const ModelWeights& weights, SamplerConfig config,
                     std::span<const TokenId> prompt)
    : weights_(weights),
      config_(std::move(config)),
      select_rng_(Rng::derive(config_.sample_seed, 1)),
      sample_rng_(Rng::derive(config_.sample_seed, 2)),
      engine_(config_.cache, config_.shift, config_.path,
              static_cast<int>(prompt.size()) + config_.gen_len, static_cast<int>(prompt.size()),
              weights.config().n_layers) {
  const ModelConfig& model = weights_.config();
  const int prompt_len = static_cast<int>(prompt.size());
  validate_sampler_config(config_, model, prompt_len);
  for (TokenId t : prompt) {
    if (t < 0 || t >= model.vocab_size || t == model.mask_token_id) {
      throw std::invalid_argument("prompt contains invalid or mask token id " + std::to_string(t));
    }
  }
  schedule_ = tokens_per_step_schedule(config_.gen_len, config_.steps, config_.block_size);

  const int seq_len = prompt_len + config_.gen_len;
  state_.tokens.assign(prompt.begin(), prompt.end());
  state_.tokens.resize(static_cast<std::size_t>(seq_len), model.mask_token_id);
  state_.prompt_len = prompt_len;
  state_.masked = positions::range(prompt_len, seq_len);

  if (config_.remasking == Remasking::Random) {
    // Random selection never looks at logits, so the whole order is fixed now.
    PositionList masked = state_.masked;
    for (int t = 0; t < config_.steps; ++t) {
      std::vector<Candidate> pool;
      for (Position p : candidates_for(t, masked)) pool.push_back({p, {}});
      order_.push_back(select_to_unmask(pool, Remasking::Random,
                                        schedule_.tokens_per_step[static_cast<std::size_t>(t)],
                                        select_rng_));
      masked = positions::set_difference(masked, order_.back());
    }
  }

  macs_per_row_ = macs_per_row(model, seq_len);
  trace_.seq_len = seq_len;
  trace_.prompt_len = prompt_len;
  trace_.gen_len = config_.gen_len;
  trace_.total_steps = config_.steps;
  trace_.variant = to_string(config_.cache);
  trace_.snapshot_layer = config_.snapshot_layer;

  pending_ = plan_compute_set(config_.cache, request_for(0));
}

PositionList Generator::candidates_for(int step, std::span<const Position> masked) const {
  const int b = schedule_.block_of_step[static_cast<std::size_t>(step)];
  const Position lo = state_.prompt_len + schedule_.block_begin[static_cast<std::size_t>(b)];
  const Position hi = state_.prompt_len + schedule_.block_end[static_cast<std::size_t>(b)];
  PositionList out;
  for (Position p : masked) {
    if (p >= lo && p < hi) out.push_back(p);
  }
  return out;
}

Position Generator::logit_row(Position p) const {
  return weights_.config().shifted_output ? p - 1 : p;
}

PositionList Generator::logit_rows_for(int step, std::span<const Position> masked) const {
  const PositionList needed =
      config_.remasking == Remasking::Random ? order_[static_cast<std::size_t>(step)]
                                             : candidates_for(step, masked);
  PositionList rows;
  rows.reserve(needed.size());
  for (Position p : needed) rows.push_back(logit_row(p));
  return positions::sorted_copy(rows);
}

PlanRequest Generator::request_for(int step) const {
  PlanRequest req;
  req.seq_len = static_cast<int>(state_.tokens.size());
  req.prompt_len = state_.prompt_len;
  req.step = step;
  req.masked = state_.masked;
  req.prev_masked = state_.prev_masked;
  req.prev_decoded = state_.decoded_this_step;
  if (config_.remasking == Remasking::Random) req.decoded = order_[static_cast<std::size_t>(step)];
  req.logit_rows = logit_rows_for(step, state_.masked);
  req.shift = config_.shift;
  return req;
}

const StepRecord& Generator::step() {
  if (done()) throw std::logic_error("generator: all steps already run");
  const int t = state_.step;
  const auto start = Clock::now();

  const LayerCache cache_used = engine_.state().layers;
  const ComputePlan& plan = engine_.open_step(t, pending_);

  StepRecord rec;
  rec.step = t;
  rec.block = schedule_.block_of_step[static_cast<std::size_t>(t)];
  rec.masked_count = static_cast<int>(state_.masked.size());
  rec.compute_set = plan.compute_set;
  rec.cached = engine_.state().cached_positions();
  rec.refresh = plan.refresh;
  rec.query_rows = static_cast<std::int64_t>(plan.compute_set.size());
  rec.macs = rec.query_rows * macs_per_row_;

  ForwardResult fwd = forward_partial(state_.tokens, plan.compute_set, cache_used, weights_,
                                      engine_.key_assembly());
  const ScatteredLogits logits = scatter_outputs(plan, std::move(fwd.logits));

  const int k = schedule_.tokens_per_step[static_cast<std::size_t>(t)];
  const PositionList candidates = config_.remasking == Remasking::Random
                                      ? order_[static_cast<std::size_t>(t)]
                                      : candidates_for(t, state_.masked);
  Matrix rows(static_cast<Eigen::Index>(candidates.size()), weights_.config().vocab_size);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    rows.row(static_cast<Eigen::Index>(i)) = logits.row(logit_row(candidates[i]));
  }
  rows.col(weights_.config().mask_token_id).setConstant(-INFINITY);
  const std::vector<Proposal> proposals = predict_x0(rows, config_.temperature, sample_rng_);
  std::vector<Candidate> pool;
  pool.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) pool.push_back({candidates[i], proposals[i]});

  const PositionList decoded = config_.remasking == Remasking::Random
                                   ? candidates
                                   : select_to_unmask(pool, config_.remasking, k, select_rng_);
  for (const Candidate& c : pool) {
    if (positions::contains(decoded, c.position)) {
      state_.tokens[static_cast<std::size_t>(c.position)] = c.proposal.token;
      rec.decoded_ids.push_back(c.proposal.token);
    }
  }
  rec.decoded = decoded;

  state_.prev_masked = state_.masked;
  state_.masked = positions::set_difference(state_.masked, decoded);
  state_.decoded_this_step = decoded;
  state_.step = t + 1;

  double elapsed = millis_since(start);
  if (observer_) {
    observer_(StepView{plan, cache_used, fwd, logits, state_, rec});
  }
  const auto close_start = Clock::now();

  std::optional<PlanDecision> next;
  if (!done()) next = plan_compute_set(config_.cache, request_for(state_.step));
  engine_.close_step(fwd, next);
  if (next) pending_ = std::move(*next);
  elapsed += millis_since(close_start);

  if (config_.record_timing) rec.millis = elapsed;
  if (config_.snapshot_layer) {
    const KVSlab& full = fwd.full_kv[static_cast<std::size_t>(*config_.snapshot_layer)];
    KVSnapshot snap{t, Matrix(full.keys.rows(), full.keys.cols()),
                    Matrix(full.values.rows(), full.values.cols())};
    for (int i = 0; i < full.rows(); ++i) {
      const Position p = full.row_positions[static_cast<std::size_t>(i)];
      snap.keys.row(p) = full.keys.row(i);
      snap.values.row(p) = full.values.row(i);
    }
    trace_.snapshots.push_back(std::move(snap));
  }
  trace_.records.push_back(std::move(rec));
  return trace_.records.back();
}

GenerationResult Generator::finish() && {
  return GenerationResult{std::move(state_.tokens), std::move(trace_)};
}

GenerationResult generate(std::span<const TokenId> prompt, const SamplerConfig& config,
                          const ModelWeights& weights, StepObserver observer) {
  Generator gen(weights, config, prompt);
  gen.set_observer(std::move(observer));
  try {
    while (!gen.done()) gen.step();
  } catch (const std::exception& e) {
    throw GenerationError(e.what(), gen.trace());
  }
  return std::move(gen).finish();
}

}  // namespace dkv
