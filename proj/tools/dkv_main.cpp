#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "dkv/analysis.hpp"
#include "dkv/cache_engine.hpp"
#include "dkv/checks.hpp"
#include "dkv/config_io.hpp"
#include "dkv/sampler.hpp"

namespace fs = std::filesystem;

namespace {

enum Exit : int { kOk = 0, kCheckFailed = 1, kConfig = 2, kRuntime = 3, kNoSnapshots = 4 };

struct ConfigFlags {
  std::string config_path;
  bool deterministic = false;
  std::optional<int> snapshot_layer;
  std::string output_dir;
};

dkv::RunConfig load(const ConfigFlags& flags) {
  dkv::RunConfig rc = dkv::load_run_config(flags.config_path);
  if (flags.deterministic) rc.deterministic = true;
  if (flags.snapshot_layer) {
    if (*flags.snapshot_layer < 0 || *flags.snapshot_layer >= rc.model.n_layers) {
      throw dkv::ConfigError("--snapshots", "layer out of range");
    }
    rc.sampler.snapshot_layer = flags.snapshot_layer;
  }
  if (!flags.output_dir.empty()) rc.output_dir = flags.output_dir;
  return rc;
}

/// Applies DKV_THREADS; deterministic runs must use one kernel thread.
void configure_threads(bool deterministic) {
  int threads = 1;
  if (const char* env = std::getenv("DKV_THREADS"); env && *env) {
    try {
      threads = std::stoi(env);
    } catch (const std::exception&) {
      throw dkv::ConfigError("DKV_THREADS", "not an integer");
    }
    if (threads < 1) throw dkv::ConfigError("DKV_THREADS", "must be >= 1");
  }
  if (deterministic && threads != 1) {
    throw dkv::ConfigError("DKV_THREADS", "deterministic mode requires 1 thread");
  }
  dkv::set_kernel_threads(threads);
}

dkv::ModelWeights weights_for(const dkv::RunConfig& rc) {
  if (!rc.weights_path) return dkv::init_weights(rc.model);
  dkv::ModelWeights w = dkv::load_weights(*rc.weights_path);
  if (!(w.config() == rc.model)) {
    throw dkv::ConfigError("model.weights", "weights were saved with a different model config");
  }
  return w;
}

void write_outputs(const fs::path& dir, const dkv::StepTrace& trace,
                   const std::vector<dkv::TokenId>* tokens, const dkv::ModelConfig& model) {
  fs::create_directories(dir);
  if (tokens) dkv::write_sequence(dir / "sequence.txt", *tokens);
  dkv::write_trace_jsonl(dir / "trace.jsonl", trace);
  if (!trace.snapshots.empty()) dkv::write_snapshots(dir / "snapshots.bin", trace);
  if (!trace.records.empty()) dkv::write_report_json(dir / "report.json", dkv::make_report(trace, model));
}

int cmd_generate(const ConfigFlags& flags) {
  const dkv::RunConfig rc = load(flags);
  configure_threads(rc.deterministic);
  dkv::SamplerConfig sampler = rc.sampler;
  sampler.record_timing = !rc.deterministic;
  const dkv::ModelWeights weights = weights_for(rc);
  try {
    const dkv::GenerationResult result = dkv::generate(rc.prompt, sampler, weights);
    write_outputs(rc.output_dir, result.trace, &result.tokens, rc.model);
    const dkv::RunReport report = dkv::make_report(result.trace, rc.model);
    std::cout << "wrote " << rc.output_dir.string() << " (" << report.variant << ", cache ratio "
              << report.cache_ratio << ", rows " << report.total_query_rows << ")\n";
  } catch (const dkv::GenerationError& e) {
    write_outputs(rc.output_dir, e.partial_trace(), nullptr, rc.model);
    std::cerr << "generation failed: " << e.what() << " (partial trace in "
              << rc.output_dir.string() << ")\n";
    return kRuntime;
  }
  return kOk;
}

/// Splits on commas outside parentheses, so "none,greedy(2,4)" is two items.
std::vector<std::string> split_variants(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  int depth = 0;
  for (char c : text) {
    if (c == '(') ++depth;
    if (c == ')') --depth;
    if (c == ',' && depth == 0) {
      out.push_back(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::string csv_field(const std::string& s) {
  return s.find(',') == std::string::npos ? s : "\"" + s + "\"";
}

int cmd_bench(const ConfigFlags& flags, const std::string& variants_text, int repeat) {
  const dkv::RunConfig rc = load(flags);
  configure_threads(rc.deterministic);
  if (repeat < 1) throw dkv::ConfigError("--repeat", "must be >= 1");
  std::vector<dkv::CacheVariant> variants;
  for (const std::string& v : split_variants(variants_text)) {
    try {
      variants.push_back(dkv::parse_cache_variant(v));
    } catch (const std::exception& e) {
      throw dkv::ConfigError("--variants", e.what());
    }
  }
  if (variants.empty()) variants.push_back(rc.sampler.cache);
  const dkv::ModelWeights weights = weights_for(rc);

  dkv::SamplerConfig base = rc.sampler;
  base.record_timing = true;
  base.snapshot_layer.reset();
  base.cache = dkv::NoCache{};
  base.shift = dkv::ShiftMode::UnShift;
  std::optional<std::vector<dkv::TokenId>> reference;

  std::ostringstream csv;
  csv << "variant,tokens_per_second,cache_ratio,total_rows,baseline_rows,row_reduction,"
         "mac_reduction,output_match\n";
  for (const dkv::CacheVariant& variant : variants) {
    dkv::SamplerConfig cfg = rc.sampler;
    cfg.cache = variant;
    cfg.record_timing = true;
    cfg.snapshot_layer.reset();
    try {
      dkv::validate_sampler_config(cfg, rc.model, static_cast<int>(rc.prompt.size()));
    } catch (const std::invalid_argument& e) {
      throw dkv::ConfigError("--variants", dkv::to_string(variant) + ": " + e.what());
    }
    if (!reference) reference = dkv::generate(rc.prompt, base, weights).tokens;

    std::vector<double> tps;
    std::optional<dkv::GenerationResult> last;
    for (int r = 0; r < repeat; ++r) {
      last = dkv::generate(rc.prompt, cfg, weights);
      tps.push_back(dkv::throughput(last->trace).value_or(0));
    }
    std::sort(tps.begin(), tps.end());
    const double median = repeat % 2 == 1 ? tps[tps.size() / 2]
                                          : 0.5 * (tps[tps.size() / 2 - 1] + tps[tps.size() / 2]);
    const dkv::RunReport rep = dkv::make_report(last->trace, rc.model);
    csv << csv_field(rep.variant) << ',' << median << ',' << rep.cache_ratio << ','
        << rep.total_query_rows << ',' << rep.baseline_query_rows << ',' << rep.row_reduction << ','
        << rep.mac_reduction << ',' << (last->tokens == *reference ? "true" : "false") << '\n';
  }
  fs::create_directories(rc.output_dir);
  std::ofstream(rc.output_dir / "bench.csv") << csv.str();
  std::cout << csv.str();
  return kOk;
}

int cmd_analyze(const std::string& trace_path, const std::string& out_dir) {
  const fs::path trace_file(trace_path);
  dkv::StepTrace trace = dkv::read_trace_jsonl(trace_file);
  try {
    dkv::read_snapshots(trace_file.parent_path() / "snapshots.bin", trace);
    const dkv::DynamicsResult d = dkv::kv_dynamics(trace);
    const fs::path dir = out_dir.empty() ? trace_file.parent_path() : fs::path(out_dir);
    dkv::write_dynamics_csv(dir, d);
    std::cout << "wrote dynamics for " << d.tokens.size() << " tokens to " << dir.string()
              << " (decode-step spike in " << 100 * d.spike_fraction() << "% of tokens)\n";
  } catch (const dkv::MissingSnapshots& e) {
    std::cerr << e.what() << "\nhint: rerun generate with --snapshots LAYER or sampler.snapshot_layer\n";
    return kNoSnapshots;
  }
  return kOk;
}

int cmd_selftest(bool inject_fault) {
  dkv::testing::inject_reorder_fault(inject_fault);
  const auto results = dkv::checks::run_all(dkv::checks::Sizes::fast());
  dkv::testing::inject_reorder_fault(false);
  return dkv::checks::print_table(results, std::cout) ? kOk : kCheckFailed;
}

int cmd_dump_weights(const ConfigFlags& flags, const std::string& out) {
  const dkv::RunConfig rc = load(flags);
  dkv::save_weights(dkv::init_weights(rc.model), out);
  std::cout << "wrote " << out << " and " << out << ".json\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked diffusion LM inference with delayed KV caching"};
  app.require_subcommand(1);

  ConfigFlags flags;
  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("--config", flags.config_path, "Run config (JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_flag("--deterministic", flags.deterministic, "Single-threaded, no timings in outputs");
    cmd->add_option("--snapshots", flags.snapshot_layer, "Record per-step K/V of this layer");
    cmd->add_option("--output-dir", flags.output_dir, "Override output_dir");
  };

  auto* gen = app.add_subcommand("generate", "Run one generation");
  add_config(gen);

  auto* bench = app.add_subcommand("bench", "Compare cache variants on identical seeds");
  add_config(bench);
  std::string variants;
  int repeat = 1;
  bench->add_option("--variants", variants, "Comma-separated variants, e.g. none,decode(8)");
  bench->add_option("--repeat", repeat, "Runs per variant; throughput is the median");

  auto* analyze = app.add_subcommand("analyze", "Representation dynamics from a snapshot trace");
  std::string trace_path;
  std::string analyze_out;
  analyze->add_option("trace", trace_path, "trace.jsonl from generate --snapshots")->required()->check(CLI::ExistingFile);
  analyze->add_option("--out", analyze_out, "Output directory (default: next to the trace)");

  auto* selftest = app.add_subcommand("selftest", "Run the fast check suite");
  bool inject_fault = false;
  selftest->add_flag("--inject-fault", inject_fault, "Corrupt the reorder index (mutation check)");

  auto* dump = app.add_subcommand("dump-weights", "Write the configured model's weights");
  add_config(dump);
  std::string dump_out;
  dump->add_option("--out", dump_out, "Output .bin path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) return cmd_generate(flags);
    if (*bench) return cmd_bench(flags, variants, repeat);
    if (*analyze) return cmd_analyze(trace_path, analyze_out);
    if (*selftest) return cmd_selftest(inject_fault);
    if (*dump) return cmd_dump_weights(flags, dump_out);
  } catch (const dkv::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kOk;
}
