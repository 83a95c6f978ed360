#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dkv/model.hpp"
#include "dkv/trace.hpp"

namespace dkv {

/// Mean over steps of the fraction of positions served from cache.
/// Throws std::invalid_argument on an empty trace.
double cache_ratio(const StepTrace& trace);

struct ComputeCounters {
  std::int64_t total_query_rows = 0;
  std::int64_t total_macs = 0;
  std::int64_t max_step_rows = 0;
};

ComputeCounters compute_counters(const StepTrace& trace, const ModelConfig& config);

/// Generated tokens per second of recorded time; nullopt when the trace has
/// no timings. Throws std::invalid_argument on zero elapsed time.
std::optional<double> throughput(const StepTrace& trace);
std::optional<double> elapsed_seconds(const StepTrace& trace);

struct RunReport {
  std::string variant;
  int seq_len = 0;
  int gen_len = 0;
  int steps = 0;
  double cache_ratio = 0;
  std::optional<double> tokens_per_second;
  std::optional<double> elapsed_seconds;
  std::int64_t total_query_rows = 0;
  std::int64_t total_macs = 0;
  std::int64_t max_step_rows = 0;
  std::int64_t baseline_query_rows = 0;  // full recompute every step
  std::int64_t baseline_macs = 0;
  double row_reduction = 0;              // 1 - rows / baseline rows
  double mac_reduction = 0;
};

RunReport make_report(const StepTrace& trace, const ModelConfig& config);

class MissingSnapshots : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TokenDynamics {
  Position position = 0;
  int decode_step = 0;
  /// Key change when the decoded id first enters the input (step decode+1);
  /// nullopt when the token was decoded at the last step.
  std::optional<double> reveal_change;
  double pre_mean = 0;   // mean change over steps 1..decode (NaN if none)
  double post_mean = 0;  // mean change over steps after the reveal (NaN if none)
  double median_change = 0;
  int max_change_step = 0;
  std::vector<int> largest_steps;   // two steps with the largest key change
  std::vector<int> smallest_steps;  // two steps with the smallest key change
};

struct DynamicsResult {
  // T x T, mean over positions of the per-row distance between steps.
  Eigen::MatrixXd key_euclidean;
  Eigen::MatrixXd key_cosine;
  Eigen::MatrixXd value_euclidean;
  Eigen::MatrixXd value_cosine;
  std::vector<TokenDynamics> tokens;
  int spike_tokens = 0;     // reveal change above the token's median change
  int eligible_tokens = 0;  // tokens with a reveal change
  double spike_fraction() const {
    return eligible_tokens == 0 ? 0.0 : static_cast<double>(spike_tokens) / eligible_tokens;
  }
};

/// Change at step s is the per-row Euclidean key distance between snapshots
/// s-1 and s, over full concatenated head vectors. Throws MissingSnapshots
/// when the trace has no snapshot for every step.
DynamicsResult kv_dynamics(const StepTrace& trace);

// File formats.
void write_sequence(const std::filesystem::path& path, std::span<const TokenId> tokens);
/// First line is a meta record, then one record per step.
void write_trace_jsonl(const std::filesystem::path& path, const StepTrace& trace);
StepTrace read_trace_jsonl(const std::filesystem::path& path);
/// Raw little-endian f32 keys then values per step, plus a JSON sidecar.
void write_snapshots(const std::filesystem::path& bin_path, const StepTrace& trace);
/// Loads snapshots into `trace`. Throws MissingSnapshots if the files are absent.
void read_snapshots(const std::filesystem::path& bin_path, StepTrace& trace);
void write_report_json(const std::filesystem::path& path, const RunReport& report);
std::string report_json(const RunReport& report);
void write_dynamics_csv(const std::filesystem::path& dir, const DynamicsResult& dynamics);

}  // namespace dkv
