#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>

#include "chmffn/model.hpp"

namespace chmffn {

struct TrainConfig {
  double lr = 5e-3;
  std::size_t epochs = 100;
  std::size_t batch = 32;
  double ratio = 0.3;
  // Patch side; overrides model.patch when training.
  std::size_t patch = 9;
  std::uint64_t seed = 0;
  // Per-band min-max rescale of both cubes before patch extraction.
  bool normalize = true;
  // Write a checkpoint every k epochs (0 = only at the end).
  std::size_t checkpoint_every = 0;
  // Worker threads for evaluation (results are independent of the count).
  std::size_t eval_threads = 1;
  ModelConfig model;

  // Throws ConfigError.
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// JSON text mirroring the struct fields. Parsing accepts any subset of the
// fields; missing ones keep their defaults, unknown ones are a ConfigError.
std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);
std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);
TrainConfig load_train_config(const std::filesystem::path& path);

}  // namespace chmffn
