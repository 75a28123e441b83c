#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "threemt/data.hpp"
#include "threemt/model.hpp"
#include "threemt/training.hpp"

namespace threemt {

// Environment variable that, when set, replaces the configured output_dir.
inline constexpr const char* kOutputDirEnv = "THREEMT_OUTPUT_DIR";

struct DataSource {
  enum class Kind { Synthetic, Csv };
  Kind kind = Kind::Synthetic;
  SyntheticTaskConfig synthetic;
  std::filesystem::path csv;
  // CSV schema in cascade order (image entry included when present).
  std::vector<ModalitySpec> schema;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataSource data;
  SplitSpec split;
  double p_mdrop = 0.5;                   // default for every modality
  std::map<std::string, double> p_mdrop_overrides;
  std::filesystem::path output_dir = "out";
  std::uint64_t seed = 0;
};

// Named starting points: "separable" (every modality informative on its own)
// and "informative" (the missing-modality robustness task).
RunConfig preset_config(std::string_view name);
std::vector<std::string> preset_names();

// `key = value` lines, '#' comments, comma-separated lists. A `preset` line is
// applied before all other keys. Unknown keys throw ConfigError naming the
// accepted keys. Relative data paths resolve against base_dir.
RunConfig parse_run_config_text(std::string_view text, const std::filesystem::path& base_dir = ".");
// Reads the file and applies the output directory environment override.
RunConfig parse_run_config(const std::filesystem::path& path);

// Dataset schema with p_mdrop applied. Throws ConfigError if an override names
// a modality that is not in the schema.
std::vector<ModalitySpec> resolve_specs(const RunConfig& config);

// Generates or loads the configured dataset; its schema equals resolve_specs.
Dataset load_run_dataset(const RunConfig& config);

std::vector<std::string> accepted_config_keys();

}  // namespace threemt
