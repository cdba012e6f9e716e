#pragma once

#include <filesystem>
#include <string>

#include "stsn/eval.hpp"
#include "stsn/model.hpp"
#include "stsn/train.hpp"

namespace stsn {

// `key = value` lines under the model.*, train.*, eval.* and data.* prefixes;
// '#' starts a comment. Unknown keys are rejected and every section is
// validated before the config is returned.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  std::string data_dir;  // optional default for --data
};

RunConfig parse_runconfig(const std::filesystem::path& path);

}  // namespace stsn
