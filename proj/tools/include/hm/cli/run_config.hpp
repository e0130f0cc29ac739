#pragma once

// Flat key=value configuration shared by every hm command.
// Sources are merged left to right: defaults, config file, HM_* environment
// variables, command-line flags.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "hm/dataio.hpp"
#include "hm/features.hpp"
#include "hm/model.hpp"
#include "hm/training.hpp"

namespace hm::cli {

struct RunConfig {
  std::uint64_t seed = 7;
  std::size_t threads = 0;  // 0 = hardware concurrency

  dataio::SynthConfig synth;
  features::FeatureConfig features;
  model::ModelConfig model;
  training::TrainConfig train;

  std::size_t mc_passes = 30;
  std::size_t mc_batch = 32;
  Split split = Split::Test;
  bool refit_patient = false;

  std::string manifest;
  std::string cache_dir;
  std::string out;
  std::string checkpoint;
  std::string predictions;
  std::string calibration;

  std::size_t worker_threads() const;
  /// Copies `seed` into the per-module configs and checks cross-module constraints.
  void finalize();
};

struct KeySpec {
  std::string name;
  std::string alias;  // optional short flag, e.g. "patients"
  std::string help;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

const std::vector<KeySpec>& keys();
const KeySpec* find_key(std::string_view name);

/// Throws on unknown keys and unparsable values.
void apply(RunConfig& cfg, std::string_view key, const std::string& value);

/// Parses `key = value` lines; `#` starts a comment.
std::vector<std::pair<std::string, std::string>> parse_config_text(std::string_view text, std::string_view origin);
std::vector<std::pair<std::string, std::string>> read_config_file(const std::filesystem::path& path);

/// HM_MODEL_LAYERS -> model.layers, ...
std::string env_name(std::string_view key);
/// Applies every HM_* variable that names a known key.
void apply_env(RunConfig& cfg, const std::function<const char*(const char*)>& getenv_fn);

/// One `key=value` line per key, in registry order.
std::string serialize(const RunConfig& cfg);
std::map<std::string, std::string> to_map(const RunConfig& cfg);

}  // namespace hm::cli
