#include "dkv/config_io.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace dkv {

using nlohmann::json;

namespace {

/// Field reader for one JSON object that rejects unknown keys.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_, "expected an object");
  }

  std::string name(std::string_view key) const {
    return path_.empty() ? std::string(key) : path_ + "." + std::string(key);
  }

  const json* find(std::string_view key) {
    seen_.insert(std::string(key));
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  template <typename T>
  void get(std::string_view key, T& out) {
    const json* v = find(key);
    if (!v) return;
    try {
      out = v->get<T>();
    } catch (const json::exception&) {
      throw ConfigError(name(key), "wrong type (" + std::string(v->type_name()) + ")");
    }
  }

  void get_int(std::string_view key, int& out) {
    const json* v = find(key);
    if (!v) return;
    if (!v->is_number_integer()) throw ConfigError(name(key), "expected an integer");
    out = v->get<int>();
  }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(name(key), "unknown field");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

std::vector<TokenId> random_prompt(int length, std::uint64_t seed, const ModelConfig& model) {
  Rng rng(Rng::derive(seed, 3));
  std::vector<TokenId> out;
  for (int i = 0; i < length; ++i) {
    auto t = static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(model.vocab_size - 1)));
    if (t >= model.mask_token_id) ++t;
    out.push_back(t);
  }
  return out;
}

}  // namespace

std::vector<TokenId> parse_token_list(std::string_view text) {
  std::vector<TokenId> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i == text.size()) break;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    TokenId v = 0;
    const auto [ptr, ec] = std::from_chars(text.data() + i, text.data() + j, v);
    if (ec != std::errc{} || ptr != text.data() + j) {
      throw ConfigError("prompt", "bad token id '" + std::string(text.substr(i, j - i)) + "'");
    }
    out.push_back(v);
    i = j;
  }
  return out;
}

RunConfig parse_run_config(std::string_view json_text, const std::filesystem::path& base_dir) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError("", std::string("malformed JSON: ") + e.what());
  }

  RunConfig rc;
  Fields top(root, "");

  if (const json* m = top.find("model")) {
    Fields f(*m, "model");
    ModelConfig& c = rc.model;
    f.get_int("n_layers", c.n_layers);
    f.get_int("n_heads", c.n_heads);
    f.get_int("d_model", c.d_model);
    f.get_int("d_head", c.d_head);
    f.get_int("d_ff", c.d_ff);
    f.get_int("vocab_size", c.vocab_size);
    f.get_int("mask_token_id", c.mask_token_id);
    f.get_int("max_positions", c.max_positions);
    f.get("rope_base", c.rope_base);
    f.get("weight_seed", c.weight_seed);
    f.get("shifted_output", c.shifted_output);
    if (const json* w = f.find("weights")) {
      if (!w->is_string()) throw ConfigError("model.weights", "expected a path");
      rc.weights_path = resolve(base_dir, w->get<std::string>());
    }
    f.finish();
  }
  try {
    rc.model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("model", e.what());
  }

  SamplerConfig& s = rc.sampler;
  if (const json* j = top.find("sampler")) {
    Fields f(*j, "sampler");
    f.get_int("gen_len", s.gen_len);
    f.get_int("steps", s.steps);
    f.get_int("block_size", s.block_size);
    f.get("temperature", s.temperature);
    f.get("seed", s.sample_seed);
    if (const json* r = f.find("remasking")) {
      try {
        s.remasking = parse_remasking(r->get<std::string>());
      } catch (const std::exception& e) {
        throw ConfigError("sampler.remasking", e.what());
      }
    }
    if (const json* l = f.find("snapshot_layer"); l && !l->is_null()) {
      if (!l->is_number_integer()) throw ConfigError("sampler.snapshot_layer", "expected an integer");
      s.snapshot_layer = l->get<int>();
    }
    f.finish();
  }

  if (const json* j = top.find("cache")) {
    Fields f(*j, "cache");
    auto parse_with = [&](std::string_view key, auto parser, auto& out) {
      if (const json* v = f.find(key)) {
        try {
          out = parser(v->get<std::string>());
        } catch (const std::exception& e) {
          throw ConfigError(f.name(key), e.what());
        }
      }
    };
    parse_with("variant", parse_cache_variant, s.cache);
    parse_with("shift", parse_shift_mode, s.shift);
    parse_with("path", parse_execution_path, s.path);
    f.finish();
  }

  if (const json* p = top.find("prompt")) {
    if (p->is_array()) {
      try {
        rc.prompt = p->get<std::vector<TokenId>>();
      } catch (const json::exception&) {
        throw ConfigError("prompt", "expected a list of token ids");
      }
    } else {
      Fields f(*p, "prompt");
      const json* file = f.find("file");
      const json* random = f.find("random");
      f.finish();
      if (file && random) throw ConfigError("prompt", "give either file or random, not both");
      if (file) {
        const auto path = resolve(base_dir, file->get<std::string>());
        std::ifstream in(path);
        if (!in) throw ConfigError("prompt.file", "cannot read " + path.string());
        std::stringstream ss;
        ss << in.rdbuf();
        rc.prompt = parse_token_list(ss.str());
      } else if (random) {
        Fields r(*random, "prompt.random");
        int length = 0;
        std::uint64_t seed = 0;
        r.get_int("length", length);
        r.get("seed", seed);
        r.finish();
        if (length < 0) throw ConfigError("prompt.random.length", "must be >= 0");
        rc.prompt = random_prompt(length, seed, rc.model);
      }
    }
  }
  for (TokenId t : rc.prompt) {
    if (t < 0 || t >= rc.model.vocab_size || t == rc.model.mask_token_id) {
      throw ConfigError("prompt", "token id " + std::to_string(t) + " is out of range or the mask id");
    }
  }

  if (const json* o = top.find("output_dir")) {
    if (!o->is_string()) throw ConfigError("output_dir", "expected a path");
    rc.output_dir = resolve(base_dir, o->get<std::string>());
  } else {
    rc.output_dir = base_dir / "out";
  }
  top.get("deterministic", rc.deterministic);
  top.finish();

  try {
    validate_sampler_config(s, rc.model, static_cast<int>(rc.prompt.size()));
  } catch (const std::invalid_argument& e) {
    throw ConfigError("sampler", e.what());
  }
  return rc;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.parent_path().empty() ? "." : path.parent_path());
}

std::string run_config_json(const RunConfig& rc) {
  const ModelConfig& m = rc.model;
  const SamplerConfig& s = rc.sampler;
  json model = {{"n_layers", m.n_layers},       {"n_heads", m.n_heads},
                {"d_model", m.d_model},         {"d_head", m.d_head},
                {"d_ff", m.d_ff},               {"vocab_size", m.vocab_size},
                {"mask_token_id", m.mask_token_id}, {"max_positions", m.max_positions},
                {"rope_base", m.rope_base},     {"weight_seed", m.weight_seed},
                {"shifted_output", m.shifted_output}};
  if (rc.weights_path) model["weights"] = rc.weights_path->string();
  json sampler = {{"gen_len", s.gen_len},         {"steps", s.steps},
                  {"block_size", s.block_size},   {"remasking", to_string(s.remasking)},
                  {"temperature", s.temperature}, {"seed", s.sample_seed},
                  {"snapshot_layer", s.snapshot_layer ? json(*s.snapshot_layer) : json(nullptr)}};
  json cache = {{"variant", to_string(s.cache)},
                {"shift", to_string(s.shift)},
                {"path", to_string(s.path)}};
  json root = {{"model", model},
               {"sampler", sampler},
               {"cache", cache},
               {"prompt", rc.prompt},
               {"output_dir", rc.output_dir.string()},
               {"deterministic", rc.deterministic}};
  return root.dump(2);
}

}  // namespace dkv
