#pragma once

#include <filesystem>
#include <string>

#include "par/inference.hpp"
#include "par/model.hpp"
#include "par/training.hpp"

namespace par {

// Declarative run configuration with sections model / train / task /
// sampler. Unknown keys and missing required keys raise ConfigError naming
// the field.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  TaskConfig task;
  SamplerConfig sampler;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

// for_training additionally requires the train and task sections.
RunConfig parse_run_config(const std::string& yaml_text, bool for_training = false);
RunConfig load_run_config(const std::filesystem::path& path, bool for_training = false);
std::string emit_run_config(const RunConfig& cfg);

std::string emit_model_config(const ModelConfig& cfg);
ModelConfig parse_model_config(const std::string& yaml_text);

}  // namespace par
