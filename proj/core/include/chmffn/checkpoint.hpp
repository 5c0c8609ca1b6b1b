#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "chmffn/config.hpp"
#include "chmffn/model.hpp"

namespace chmffn {

// Layout: "CHMFFNCK", u32 version, u64 manifest length, JSON manifest
// (configs plus name/shape/offset of every tensor), then all tensor values
// as little-endian float64 in manifest order. Equal models serialize to
// equal bytes.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const ChmffnModel& model, const TrainConfig& train);

struct LoadedCheckpoint {
  ChmffnModel model;
  TrainConfig train;
};

// Throws DataError on a corrupt or mismatched file.
LoadedCheckpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const ChmffnModel& model, const TrainConfig& train,
                     const std::filesystem::path& path);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace chmffn
