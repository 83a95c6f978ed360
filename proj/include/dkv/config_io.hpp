#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dkv/model.hpp"
#include "dkv/sampler.hpp"

namespace dkv {

/// Malformed or inconsistent run configuration. `field()` is the dotted path
/// of the offending entry when one can be named.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::runtime_error(field.empty() ? message : field + ": " + message),
        field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct RunConfig {
  ModelConfig model;
  std::optional<std::filesystem::path> weights_path;
  SamplerConfig sampler;
  std::vector<TokenId> prompt;
  std::filesystem::path output_dir = "out";
  bool deterministic = false;
};

/// Parses whitespace-separated token ids. Throws ConfigError.
std::vector<TokenId> parse_token_list(std::string_view text);

/// Reads a JSON run configuration. Unknown fields are errors. Relative
/// paths are resolved against the config file's directory.
RunConfig load_run_config(const std::filesystem::path& path);
RunConfig parse_run_config(std::string_view json_text,
                           const std::filesystem::path& base_dir = std::filesystem::path("."));

/// Canonical JSON for a configuration (round-trips through parse_run_config).
std::string run_config_json(const RunConfig& config);

}  // namespace dkv
