#include "dkv/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace dkv {

using nlohmann::json;

std::int64_t macs_per_row(const ModelConfig& c, int seq_len) {
  const std::int64_t d = c.d_model;
  const std::int64_t per_layer = 4 * d * d + 2 * d * c.d_ff + 2 * static_cast<std::int64_t>(seq_len) * d;
  return c.n_layers * per_layer + d * c.vocab_size;
}

double cache_ratio(const StepTrace& trace) {
  if (trace.records.empty()) throw std::invalid_argument("cache_ratio: empty trace");
  if (trace.seq_len <= 0) throw std::invalid_argument("cache_ratio: trace has no sequence length");
  double sum = 0;
  for (const StepRecord& r : trace.records) {
    sum += static_cast<double>(trace.seq_len - static_cast<int>(r.compute_set.size())) / trace.seq_len;
  }
  return sum / static_cast<double>(trace.records.size());
}

ComputeCounters compute_counters(const StepTrace& trace, const ModelConfig& config) {
  ComputeCounters c;
  const std::int64_t per_row = macs_per_row(config, trace.seq_len);
  for (const StepRecord& r : trace.records) {
    const auto rows = static_cast<std::int64_t>(r.compute_set.size());
    c.total_query_rows += rows;
    c.total_macs += rows * per_row;
    c.max_step_rows = std::max(c.max_step_rows, rows);
  }
  return c;
}

std::optional<double> elapsed_seconds(const StepTrace& trace) {
  double ms = 0;
  for (const StepRecord& r : trace.records) {
    if (!r.millis) return std::nullopt;
    ms += *r.millis;
  }
  if (trace.records.empty()) return std::nullopt;
  return ms / 1000.0;
}

std::optional<double> throughput(const StepTrace& trace) {
  const auto secs = elapsed_seconds(trace);
  if (!secs) return std::nullopt;
  if (*secs <= 0) throw std::invalid_argument("throughput: zero elapsed time");
  return trace.gen_len / *secs;
}

RunReport make_report(const StepTrace& trace, const ModelConfig& config) {
  RunReport r;
  r.variant = trace.variant;
  r.seq_len = trace.seq_len;
  r.gen_len = trace.gen_len;
  r.steps = static_cast<int>(trace.records.size());
  r.cache_ratio = cache_ratio(trace);
  r.elapsed_seconds = elapsed_seconds(trace);
  if (r.elapsed_seconds && *r.elapsed_seconds > 0) r.tokens_per_second = throughput(trace);
  const ComputeCounters c = compute_counters(trace, config);
  r.total_query_rows = c.total_query_rows;
  r.total_macs = c.total_macs;
  r.max_step_rows = c.max_step_rows;
  r.baseline_query_rows = static_cast<std::int64_t>(r.steps) * trace.seq_len;
  r.baseline_macs = r.baseline_query_rows * macs_per_row(config, trace.seq_len);
  r.row_reduction = 1.0 - static_cast<double>(r.total_query_rows) / r.baseline_query_rows;
  r.mac_reduction = 1.0 - static_cast<double>(r.total_macs) / r.baseline_macs;
  return r;
}

namespace {

double row_euclidean(const Matrix& a, const Matrix& b, Eigen::Index r) {
  return static_cast<double>((a.row(r) - b.row(r)).cast<double>().norm());
}

double row_cosine_distance(const Matrix& a, const Matrix& b, Eigen::Index r) {
  const Eigen::RowVectorXd x = a.row(r).cast<double>();
  const Eigen::RowVectorXd y = b.row(r).cast<double>();
  const double denom = x.norm() * y.norm();
  if (denom == 0) return 0;
  return 1.0 - x.dot(y) / denom;
}

double mean_of(std::span<const double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double median_of(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

DynamicsResult kv_dynamics(const StepTrace& trace) {
  const std::size_t steps = trace.records.size();
  if (!trace.snapshot_layer || trace.snapshots.size() != steps || steps == 0) {
    throw MissingSnapshots("trace has no per-step K/V snapshots (set snapshot_layer)");
  }
  for (std::size_t t = 0; t < steps; ++t) {
    const KVSnapshot& s = trace.snapshots[t];
    if (s.step != static_cast<int>(t) || s.keys.rows() != trace.seq_len ||
        s.values.rows() != trace.seq_len) {
      throw MissingSnapshots("snapshot " + std::to_string(t) + " is missing or malformed");
    }
  }

  const auto T = static_cast<Eigen::Index>(steps);
  const Eigen::Index S = trace.seq_len;
  DynamicsResult out;
  out.key_euclidean = Eigen::MatrixXd::Zero(T, T);
  out.key_cosine = Eigen::MatrixXd::Zero(T, T);
  out.value_euclidean = Eigen::MatrixXd::Zero(T, T);
  out.value_cosine = Eigen::MatrixXd::Zero(T, T);
  for (Eigen::Index i = 0; i < T; ++i) {
    for (Eigen::Index j = i + 1; j < T; ++j) {
      const KVSnapshot& a = trace.snapshots[static_cast<std::size_t>(i)];
      const KVSnapshot& b = trace.snapshots[static_cast<std::size_t>(j)];
      double ke = 0, kc = 0, ve = 0, vc = 0;
      for (Eigen::Index r = 0; r < S; ++r) {
        ke += row_euclidean(a.keys, b.keys, r);
        kc += row_cosine_distance(a.keys, b.keys, r);
        ve += row_euclidean(a.values, b.values, r);
        vc += row_cosine_distance(a.values, b.values, r);
      }
      const double n = static_cast<double>(S);
      out.key_euclidean(i, j) = out.key_euclidean(j, i) = ke / n;
      out.key_cosine(i, j) = out.key_cosine(j, i) = kc / n;
      out.value_euclidean(i, j) = out.value_euclidean(j, i) = ve / n;
      out.value_cosine(i, j) = out.value_cosine(j, i) = vc / n;
    }
  }

  std::vector<int> decode_step(static_cast<std::size_t>(S), -1);
  for (const StepRecord& r : trace.records) {
    for (Position p : r.decoded) decode_step[static_cast<std::size_t>(p)] = r.step;
  }

  for (Position p = trace.prompt_len; p < S; ++p) {
    TokenDynamics tok;
    tok.position = p;
    tok.decode_step = decode_step[static_cast<std::size_t>(p)];
    std::vector<double> change(static_cast<std::size_t>(T), 0.0);  // change[s], s >= 1
    for (Eigen::Index s = 1; s < T; ++s) {
      change[static_cast<std::size_t>(s)] =
          row_euclidean(trace.snapshots[static_cast<std::size_t>(s - 1)].keys,
                        trace.snapshots[static_cast<std::size_t>(s)].keys, p);
    }
    const int reveal = tok.decode_step + 1;
    std::vector<double> pre, post, all;
    for (int s = 1; s < T; ++s) {
      const double c = change[static_cast<std::size_t>(s)];
      all.push_back(c);
      if (s < reveal) pre.push_back(c);
      if (s > reveal) post.push_back(c);
    }
    tok.pre_mean = mean_of(pre);
    tok.post_mean = mean_of(post);
    tok.median_change = median_of(all);

    std::vector<int> order(static_cast<std::size_t>(std::max<Eigen::Index>(T - 1, 0)));
    std::iota(order.begin(), order.end(), 1);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return change[static_cast<std::size_t>(a)] > change[static_cast<std::size_t>(b)];
    });
    if (!order.empty()) tok.max_change_step = order.front();
    for (std::size_t i = 0; i < std::min<std::size_t>(2, order.size()); ++i) {
      tok.largest_steps.push_back(order[i]);
      tok.smallest_steps.push_back(order[order.size() - 1 - i]);
    }

    if (tok.decode_step >= 0 && reveal < T) {
      tok.reveal_change = change[static_cast<std::size_t>(reveal)];
      ++out.eligible_tokens;
      if (*tok.reveal_change > tok.median_change) ++out.spike_tokens;
    }
    out.tokens.push_back(std::move(tok));
  }
  return out;
}

namespace {

std::ofstream open_out(const std::filesystem::path& path, std::ios::openmode mode = {}) {
  std::ofstream out(path, std::ios::out | std::ios::trunc | mode);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

void write_sequence(const std::filesystem::path& path, std::span<const TokenId> tokens) {
  auto out = open_out(path);
  for (std::size_t i = 0; i < tokens.size(); ++i) out << (i ? " " : "") << tokens[i];
  out << '\n';
}

void write_trace_jsonl(const std::filesystem::path& path, const StepTrace& trace) {
  auto out = open_out(path);
  json meta = {{"kind", "meta"},
               {"seq_len", trace.seq_len},
               {"prompt_len", trace.prompt_len},
               {"gen_len", trace.gen_len},
               {"total_steps", trace.total_steps},
               {"variant", trace.variant},
               {"snapshot_layer", trace.snapshot_layer ? json(*trace.snapshot_layer) : json(nullptr)}};
  out << meta.dump() << '\n';
  for (const StepRecord& r : trace.records) {
    json j = {{"kind", "step"},
              {"step", r.step},
              {"block", r.block},
              {"masked", r.masked_count},
              {"compute_set", r.compute_set},
              {"cached", r.cached},
              {"decoded", r.decoded},
              {"decoded_ids", r.decoded_ids},
              {"refresh", r.refresh},
              {"millis", optional_number(r.millis)},
              {"query_rows", r.query_rows},
              {"macs", r.macs}};
    out << j.dump() << '\n';
  }
}

StepTrace read_trace_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  StepTrace trace;
  std::string line;
  bool have_meta = false;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      const std::string kind = j.at("kind").get<std::string>();
      if (kind == "meta") {
        trace.seq_len = j.at("seq_len");
        trace.prompt_len = j.at("prompt_len");
        trace.gen_len = j.at("gen_len");
        trace.total_steps = j.at("total_steps");
        trace.variant = j.at("variant");
        if (!j.at("snapshot_layer").is_null()) trace.snapshot_layer = j.at("snapshot_layer").get<int>();
        have_meta = true;
      } else if (kind == "step") {
        StepRecord r;
        r.step = j.at("step");
        r.block = j.at("block");
        r.masked_count = j.at("masked");
        r.compute_set = j.at("compute_set").get<PositionList>();
        r.cached = j.at("cached").get<PositionList>();
        r.decoded = j.at("decoded").get<PositionList>();
        r.decoded_ids = j.at("decoded_ids").get<std::vector<TokenId>>();
        r.refresh = j.at("refresh");
        if (!j.at("millis").is_null()) r.millis = j.at("millis").get<double>();
        r.query_rows = j.at("query_rows");
        r.macs = j.at("macs");
        trace.records.push_back(std::move(r));
      } else {
        throw std::runtime_error("unknown record kind '" + kind + "'");
      }
    } catch (const json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!have_meta) throw std::runtime_error(path.string() + ": missing meta record");
  return trace;
}

void write_snapshots(const std::filesystem::path& bin_path, const StepTrace& trace) {
  if (trace.snapshots.empty()) throw MissingSnapshots("no snapshots to write");
  auto out = open_out(bin_path, std::ios::binary);
  json steps = json::array();
  std::int64_t offset = 0;
  for (const KVSnapshot& s : trace.snapshots) {
    const auto count = static_cast<std::streamsize>(s.keys.size() * sizeof(float));
    out.write(reinterpret_cast<const char*>(s.keys.data()), count);
    out.write(reinterpret_cast<const char*>(s.values.data()), count);
    steps.push_back({{"step", s.step}, {"rows", s.keys.rows()}, {"cols", s.keys.cols()},
                     {"offset", offset}});
    offset += 2 * count;
  }
  json meta = {{"format", "f32-le"},
               {"layer", trace.snapshot_layer ? json(*trace.snapshot_layer) : json(nullptr)},
               {"order", "natural"},
               {"stage", "post-rotary"},
               {"distance", "full concatenated head vectors"},
               {"steps", steps}};
  auto side = open_out(bin_path.string() + ".json");
  side << meta.dump(2) << '\n';
}

void read_snapshots(const std::filesystem::path& bin_path, StepTrace& trace) {
  const std::filesystem::path side_path = bin_path.string() + ".json";
  if (!std::filesystem::exists(bin_path) || !std::filesystem::exists(side_path)) {
    throw MissingSnapshots("snapshot files not found next to the trace");
  }
  std::ifstream side(side_path);
  const json meta = json::parse(side);
  std::ifstream in(bin_path, std::ios::binary);
  trace.snapshots.clear();
  for (const json& s : meta.at("steps")) {
    const auto rows = s.at("rows").get<Eigen::Index>();
    const auto cols = s.at("cols").get<Eigen::Index>();
    KVSnapshot snap{s.at("step").get<int>(), Matrix(rows, cols), Matrix(rows, cols)};
    in.seekg(s.at("offset").get<std::streamoff>());
    const auto count = static_cast<std::streamsize>(rows * cols * sizeof(float));
    in.read(reinterpret_cast<char*>(snap.keys.data()), count);
    in.read(reinterpret_cast<char*>(snap.values.data()), count);
    if (!in) throw std::runtime_error(bin_path.string() + ": truncated snapshot data");
    trace.snapshots.push_back(std::move(snap));
  }
  if (!meta.at("layer").is_null()) trace.snapshot_layer = meta.at("layer").get<int>();
}

std::string report_json(const RunReport& r) {
  json j = {{"variant", r.variant},
            {"seq_len", r.seq_len},
            {"gen_len", r.gen_len},
            {"steps", r.steps},
            {"cache_ratio", r.cache_ratio},
            {"tokens_per_second", optional_number(r.tokens_per_second)},
            {"elapsed_seconds", optional_number(r.elapsed_seconds)},
            {"total_query_rows", r.total_query_rows},
            {"total_macs", r.total_macs},
            {"max_step_rows", r.max_step_rows},
            {"baseline_query_rows", r.baseline_query_rows},
            {"baseline_macs", r.baseline_macs},
            {"row_reduction", r.row_reduction},
            {"mac_reduction", r.mac_reduction}};
  return j.dump(2);
}

void write_report_json(const std::filesystem::path& path, const RunReport& report) {
  auto out = open_out(path);
  out << report_json(report) << '\n';
}

namespace {

void write_matrix_csv(const std::filesystem::path& path, const Eigen::MatrixXd& m) {
  auto out = open_out(path);
  out.precision(17);
  out << "step";
  for (Eigen::Index j = 0; j < m.cols(); ++j) out << ',' << j;
  out << '\n';
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    out << i;
    for (Eigen::Index j = 0; j < m.cols(); ++j) out << ',' << m(i, j);
    out << '\n';
  }
}

std::string steps_field(const std::vector<int>& steps) {
  std::string s;
  for (std::size_t i = 0; i < steps.size(); ++i) s += (i ? ";" : "") + std::to_string(steps[i]);
  return s;
}

}  // namespace

void write_dynamics_csv(const std::filesystem::path& dir, const DynamicsResult& d) {
  std::filesystem::create_directories(dir);
  write_matrix_csv(dir / "dynamics_key_euclidean.csv", d.key_euclidean);
  write_matrix_csv(dir / "dynamics_key_cosine.csv", d.key_cosine);
  write_matrix_csv(dir / "dynamics_value_euclidean.csv", d.value_euclidean);
  write_matrix_csv(dir / "dynamics_value_cosine.csv", d.value_cosine);

  auto out = open_out(dir / "dynamics_tokens.csv");
  out.precision(17);
  out << "token_position,decode_step,pre_mean,post_mean,max_change_step,reveal_change,"
         "median_change,largest_steps,smallest_steps\n";
  for (const TokenDynamics& t : d.tokens) {
    out << t.position << ',' << t.decode_step << ',' << t.pre_mean << ',' << t.post_mean << ','
        << t.max_change_step << ',';
    if (t.reveal_change) out << *t.reveal_change;
    out << ',' << t.median_change << ',' << steps_field(t.largest_steps) << ','
        << steps_field(t.smallest_steps) << '\n';
  }
}

}  // namespace dkv
