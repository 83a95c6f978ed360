#pragma once

#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dkv/cache_engine.hpp"
#include "dkv/common.hpp"
#include "dkv/model.hpp"
#include "dkv/rng.hpp"
#include "dkv/trace.hpp"

namespace dkv {

/// Linear absorbing schedule: alpha_bar(t) = 1 - t/T.
class NoiseSchedule {
 public:
  explicit NoiseSchedule(int total_steps);

  int total_steps() const { return total_steps_; }
  double alpha_bar(int t) const;
  /// Per-step masking probability with alpha_bar(t) = prod_{i<=t} (1 - beta_i).
  double beta(int t) const;
  /// Continuous time c(t) = t/T.
  double time(int t) const;

 private:
  int total_steps_;
};

double alpha_bar(int t, int total_steps);

/// Masks each non-mask token independently with probability 1 - alpha_bar(t).
/// Mask tokens stay masked.
std::vector<TokenId> corrupt(std::span<const TokenId> x0, int t, const NoiseSchedule& schedule,
                             TokenId mask_token_id, Rng& rng);

struct StepSchedule {
  std::vector<int> tokens_per_step;  // k_t, sums to gen_len
  std::vector<int> block_of_step;
  std::vector<int> block_begin;      // offsets into the generation region
  std::vector<int> block_end;
};

/// Steps are split contiguously across blocks in proportion to block size,
/// and each block's tokens across its steps, both by largest remainder with
/// ties going to the earlier index. Throws std::invalid_argument when a
/// block would get no step.
StepSchedule tokens_per_step_schedule(int gen_len, int total_steps, int block_size);

struct Proposal {
  TokenId token = 0;
  float confidence = 0;  // probability of the chosen token
  float margin = 0;      // top-1 minus top-2 probability
};

/// Temperature 0 takes the argmax (lowest id on ties); otherwise samples from
/// softmax(logits / temperature). Probabilities are taken at the sampling
/// temperature (temperature 0 uses the plain softmax).
std::vector<Proposal> predict_x0(const Matrix& logits, float temperature, Rng& rng);

enum class Remasking { Random, LowConfidence, TopMargin };

std::string to_string(Remasking r);
Remasking parse_remasking(std::string_view text);

struct Candidate {
  Position position = 0;
  Proposal proposal;
};

/// Picks k positions to finalize; ties broken by lowest position. Returns a
/// sorted set. Throws std::invalid_argument when k exceeds the candidates.
PositionList select_to_unmask(std::span<const Candidate> candidates, Remasking strategy, int k,
                              Rng& rng);

struct SamplerConfig {
  int gen_len = 64;
  int steps = 64;
  int block_size = 32;
  Remasking remasking = Remasking::LowConfidence;
  float temperature = 0.0f;
  std::uint64_t sample_seed = 0;
  CacheVariant cache = NoCache{};
  ShiftMode shift = ShiftMode::UnShift;
  ExecutionPath path = ExecutionPath::Reorder;
  std::optional<int> snapshot_layer;
  bool record_timing = true;
};

struct GenerationState {
  std::vector<TokenId> tokens;
  int prompt_len = 0;
  PositionList masked;                      // M_t
  std::optional<PositionList> prev_masked;  // M_{t-1}
  PositionList decoded_this_step;           // D_{t-1} once the step has run
  int step = 0;
};

struct StepView {
  const ComputePlan& plan;
  const LayerCache& cache;        // rows served from cache during this step
  const ForwardResult& forward;   // logits moved into `logits`
  const ScatteredLogits& logits;
  const GenerationState& state;   // after finalizing D_t
  const StepRecord& record;
};

using StepObserver = std::function<void(const StepView&)>;

struct GenerationResult {
  std::vector<TokenId> tokens;
  StepTrace trace;
};

class GenerationError : public std::runtime_error {
 public:
  GenerationError(const std::string& what, StepTrace partial)
      : std::runtime_error(what), partial_(std::move(partial)) {}
  const StepTrace& partial_trace() const { return partial_; }

 private:
  StepTrace partial_;
};

/// Throws std::invalid_argument for configurations the pipeline cannot run.
void validate_sampler_config(const SamplerConfig& config, const ModelConfig& model, int prompt_len);

/// Runs the reverse process one denoising step at a time.
class Generator {
 public:
  Generator(const ModelWeights& weights, SamplerConfig config, std::span<const TokenId> prompt);

  bool done() const { return state_.step >= config_.steps; }
  const StepRecord& step();

  const GenerationState& state() const { return state_; }
  const StepTrace& trace() const { return trace_; }
  const StepSchedule& schedule() const { return schedule_; }
  const CacheEngine& engine() const { return engine_; }
  /// Decode order fixed ahead of time (Random remasking only).
  const std::vector<PositionList>& predefined_order() const { return order_; }

  void set_observer(StepObserver observer) { observer_ = std::move(observer); }
  GenerationResult finish() &&;

 private:
  PositionList candidates_for(int step, std::span<const Position> masked) const;
  PositionList logit_rows_for(int step, std::span<const Position> masked) const;
  Position logit_row(Position p) const;
  PlanRequest request_for(int step) const;

  const ModelWeights& weights_;
  SamplerConfig config_;
  StepSchedule schedule_;
  GenerationState state_;
  Rng select_rng_;
  Rng sample_rng_;
  std::vector<PositionList> order_;
  CacheEngine engine_;
  PlanDecision pending_;
  StepTrace trace_;
  StepObserver observer_;
  std::int64_t macs_per_row_ = 0;
};

/// Runs every step. On failure throws GenerationError carrying the trace so far.
GenerationResult generate(std::span<const TokenId> prompt, const SamplerConfig& config,
                          const ModelWeights& weights, StepObserver observer = {});

}  // namespace dkv
