#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dkv/model.hpp"
#include "dkv/sampler.hpp"

namespace dkv::checks {

enum class Status { Pass, Fail, Warn };

std::string to_string(Status s);

struct CheckResult {
  int id = 0;
  std::string name;
  Status status = Status::Fail;
  std::string detail;
  double seconds = 0;
};

/// Problem sizes for the check suite. `full()` is the acceptance gate,
/// `fast()` the embedded self-test.
struct Sizes {
  ModelConfig model;

  int oracle_seeds = 50;
  int oracle_prompt = 16;
  int oracle_gen = 64;
  int oracle_steps = 64;
  int oracle_block = 32;

  int reorder_configs = 100;
  int reorder_max_seq = 64;
  int permutations = 50;

  int delay_seeds = 10;
  int delay_prompt = 16;
  int delay_gen = 64;
  int delay_interval = 8;

  std::vector<int> greedy_lengths{64, 128, 256};

  int reduction_prompt = 64;
  int reduction_gen = 256;
  int reduction_interval = 8;

  bool run_wall_clock = true;
  int wall_prompt = 16;
  int wall_gen = 512;
  int wall_steps = 256;
  int wall_block = 512;

  int corruption_trials = 10000;
  int corruption_len = 100;

  int dynamics_prompt = 16;
  int dynamics_gen = 32;
  int dynamics_runs = 3;

  int prefill_prompt = 128;
  int prefill_gen = 32;

  static Sizes full();
  static Sizes fast();
};

/// Sampler invariants observed across every generation in the suite.
class InvariantMonitor {
 public:
  /// Observer for one run; `config` and `prompt_len` describe that run.
  StepObserver watch(const SamplerConfig& config, int prompt_len, std::string label);
  /// Checks end-of-run invariants for a run started with watch().
  void finish(const std::string& label, const GenerationResult& result, const SamplerConfig& config,
              int prompt_len, TokenId mask_token_id);

  int runs() const { return runs_; }
  const std::vector<std::string>& violations() const { return violations_; }
  void violation(std::string what);

 private:
  int runs_ = 0;
  std::vector<std::string> violations_;
};

/// Runs `generate` with the monitor attached.
GenerationResult monitored_generate(InvariantMonitor& monitor, std::span<const TokenId> prompt,
                                    const SamplerConfig& config, const ModelWeights& weights,
                                    const std::string& label, StepObserver extra = {});

CheckResult oracle_equivalence(const Sizes& sizes, InvariantMonitor& monitor);
CheckResult layout_soundness(const Sizes& sizes, InvariantMonitor& monitor);
CheckResult permutation_invariance(const Sizes& sizes);
CheckResult delay_correctness(const Sizes& sizes, InvariantMonitor& monitor);
CheckResult greedy_boundedness(const Sizes& sizes, InvariantMonitor& monitor);
CheckResult compute_reduction(const Sizes& sizes, InvariantMonitor& monitor);
CheckResult wall_clock(const Sizes& sizes, InvariantMonitor& monitor);
CheckResult corruption_marginal(const Sizes& sizes);
CheckResult sampler_invariants(const InvariantMonitor& monitor);
CheckResult dynamics_reproduction(const Sizes& sizes, InvariantMonitor& monitor);
CheckResult prefill_immutability(const Sizes& sizes, InvariantMonitor& monitor);

/// Runs every check in order (invariants last). `on_result` is called as
/// each check completes.
std::vector<CheckResult> run_all(const Sizes& sizes,
                                 const std::function<void(const CheckResult&)>& on_result = {});

/// One line per result plus a summary; true iff nothing failed.
bool print_table(const std::vector<CheckResult>& results, std::ostream& out);

}  // namespace dkv::checks
