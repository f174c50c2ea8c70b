#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "cornerdet/decode.hpp"
#include "cornerdet/eval.hpp"
#include "cornerdet/model.hpp"
#include "cornerdet/train.hpp"

namespace cornerdet {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Everything a run needs; defaults are the documented hyper-parameters.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DecodeConfig decode;
  EvalConfig eval;
  int log_interval = 100;
  int checkpoint_interval = 1000;
};

/// Parses flat `key = value` lines on top of the defaults. `#` starts a comment.
/// Unknown keys, duplicate keys and bad values throw ConfigError naming the key.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// Every key with its resolved value, in a form parse_config reads back.
std::string dump_config(const RunConfig& cfg);

/// Keys accepted by parse_config.
std::vector<std::string> config_keys();

}  // namespace cornerdet
