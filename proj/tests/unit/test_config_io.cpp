#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "dkv/config_io.hpp"

using namespace dkv;
namespace fs = std::filesystem;

namespace {

const char* kSmall = R"j({
  "model": {"n_layers": 2, "d_model": 64, "d_head": 16, "d_ff": 128, "vocab_size": 128,
            "mask_token_id": 127},
  "sampler": {"gen_len": 16, "steps": 8, "block_size": 8, "remasking": "random", "seed": 3},
  "cache": {"variant": "decode(4)"},
  "prompt": [1, 2, 3],
  "deterministic": true
})j";

std::string field_of(const std::string& text) {
  try {
    parse_run_config(text);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "<no error>";
}

}  // namespace

TEST_CASE("valid config parses") {
  const RunConfig rc = parse_run_config(kSmall, "/base");
  CHECK(rc.model.n_layers == 2);
  CHECK(rc.model.n_heads == 4);
  CHECK(rc.sampler.gen_len == 16);
  CHECK(rc.sampler.sample_seed == 3);
  CHECK(rc.sampler.remasking == Remasking::Random);
  CHECK(to_string(rc.sampler.cache) == "decode(4)");
  CHECK(rc.prompt == std::vector<TokenId>{1, 2, 3});
  CHECK(rc.deterministic);
  CHECK(rc.output_dir == fs::path("/base/out"));
}

TEST_CASE("errors name the offending field") {
  CHECK(field_of(R"({"sampler": {"stepz": 4}})") == "sampler.stepz");
  CHECK(field_of(R"({"extra": 1})") == "extra");
  CHECK(field_of(R"({"model": {"n_layers": "two"}})") == "model.n_layers");
  CHECK(field_of(R"({"cache": {"variant": "sometimes"}})") == "cache.variant");
  CHECK(field_of(R"({"prompt": {"random": {"length": 4, "sed": 1}}})") == "prompt.random.sed");
  CHECK(field_of(R"({"prompt": [511]})") == "prompt");
  CHECK(field_of(R"({"sampler": {"gen_len": 10, "steps": 3, "block_size": 3}})") == "sampler");
  CHECK(field_of("{not json") == "");
  CHECK_THROWS_AS(load_run_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("prompt sources") {
  const fs::path dir = fs::temp_directory_path() / "dkv_config_io";
  fs::create_directories(dir);
  std::ofstream(dir / "prompt.txt") << "4 5\n6\t7 \n";
  std::ofstream(dir / "run.json") << R"({"prompt": {"file": "prompt.txt"}, "output_dir": "o"})";
  const RunConfig rc = load_run_config(dir / "run.json");
  CHECK(rc.prompt == std::vector<TokenId>{4, 5, 6, 7});
  CHECK(rc.output_dir == dir / "o");

  const RunConfig a = parse_run_config(R"({"prompt": {"random": {"length": 20, "seed": 9}}})");
  const RunConfig b = parse_run_config(R"({"prompt": {"random": {"length": 20, "seed": 9}}})");
  const RunConfig c = parse_run_config(R"({"prompt": {"random": {"length": 20, "seed": 10}}})");
  CHECK(a.prompt.size() == 20);
  CHECK(a.prompt == b.prompt);
  CHECK(a.prompt != c.prompt);
  for (TokenId t : a.prompt) CHECK((t >= 0 && t < a.model.vocab_size && t != a.model.mask_token_id));

  CHECK_THROWS_AS(parse_token_list("1 2 x"), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("canonical JSON round-trips") {
  RunConfig rc = parse_run_config(kSmall, "/base");
  rc.sampler.snapshot_layer = 1;
  const std::string text = run_config_json(rc);
  const RunConfig back = parse_run_config(text, "/elsewhere");
  CHECK(back.model == rc.model);
  CHECK(back.prompt == rc.prompt);
  CHECK(back.output_dir == rc.output_dir);
  CHECK(back.sampler.snapshot_layer == 1);
  CHECK(to_string(back.sampler.cache) == to_string(rc.sampler.cache));
  CHECK(run_config_json(back) == text);
}
