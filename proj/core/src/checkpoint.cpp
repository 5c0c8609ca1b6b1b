#include "chmffn/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <string_view>

#include "chmffn/error.hpp"
#include "json.hpp"

namespace chmffn {

using nlohmann::json;

namespace {

constexpr std::string_view kMagic = "CHMFFNCK";

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T get(const std::vector<std::uint8_t>& in, std::size_t& pos) {
  if (in.size() - pos < sizeof(T)) throw DataError("checkpoint truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const ChmffnModel& model, const TrainConfig& train) {
  const nn::ParamList tensors = model.named_tensors();
  json manifest;
  manifest["model"] = json::parse(model_config_to_json(model.config()));
  manifest["train"] = json::parse(train_config_to_json(train));
  json entries = json::array();
  std::size_t offset = 0;
  for (const auto& t : tensors) {
    entries.push_back({{"name", t.name},
                       {"shape", t.tensor.shape()},
                       {"offset", offset},
                       {"trainable", t.trainable}});
    offset += t.tensor.numel();
  }
  manifest["tensors"] = std::move(entries);
  manifest["values"] = offset;
  const std::string text = manifest.dump();

  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset * sizeof(double));
  for (const auto& t : tensors) {
    for (double v : t.tensor.data()) put<double>(out, v);
  }
  return out;
}

namespace {

void restore_tensors(ChmffnModel& model, const json& manifest,
                     const std::vector<std::uint8_t>& bytes, std::size_t pos) {
  nn::ParamList tensors = model.named_tensors();
  const json& entries = manifest.at("tensors");
  if (entries.size() != tensors.size()) {
    throw DataError("checkpoint holds " + std::to_string(entries.size()) + " tensors, model has " +
                    std::to_string(tensors.size()));
  }
  const std::size_t base = pos;
  const std::size_t n_values = manifest.at("values").get<std::size_t>();
  if ((bytes.size() - base) != n_values * sizeof(double)) {
    throw DataError("checkpoint value block has the wrong length");
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const json& e = entries[i];
    auto& t = tensors[i];
    if (e.at("name").get<std::string>() != t.name) {
      throw DataError("checkpoint tensor '" + e.at("name").get<std::string>() +
                      "' where the model expects '" + t.name + "'");
    }
    if (e.at("shape").get<Shape>() != t.tensor.shape()) {
      throw DataError("checkpoint tensor '" + t.name + "' has the wrong shape");
    }
    const auto offset = e.at("offset").get<std::size_t>();
    if (offset + t.tensor.numel() > n_values) throw DataError("checkpoint offset out of range");
    std::memcpy(t.tensor.data().data(), bytes.data() + base + offset * sizeof(double),
                t.tensor.numel() * sizeof(double));
  }
}

}  // namespace

LoadedCheckpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kMagic.size() ||
      !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    throw DataError("not a checkpoint file");
  }
  std::size_t pos = kMagic.size();
  const auto version = get<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto len = get<std::uint64_t>(bytes, pos);
  if (bytes.size() - pos < len) throw DataError("checkpoint manifest truncated");
  json manifest;
  try {
    manifest = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                           bytes.begin() + static_cast<std::ptrdiff_t>(pos + len));
  } catch (const json::exception& e) {
    throw DataError(std::string("corrupt checkpoint manifest: ") + e.what());
  }
  pos += len;

  ModelConfig mcfg;
  TrainConfig tcfg;
  try {
    mcfg = model_config_from_json(manifest.at("model").dump());
    tcfg = train_config_from_json(manifest.at("train").dump());
  } catch (const json::exception& e) {
    throw DataError(std::string("corrupt checkpoint manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint config: ") + e.what());
  }

  std::optional<ChmffnModel> model;
  try {
    model.emplace(mcfg);
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint config: ") + e.what());
  }
  try {
    restore_tensors(*model, manifest, bytes, pos);
  } catch (const json::exception& e) {
    throw DataError(std::string("corrupt checkpoint manifest: ") + e.what());
  }
  return {std::move(*model), tcfg};
}

void save_checkpoint(const ChmffnModel& model, const TrainConfig& train,
                     const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(model, train);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), {});
  return deserialize_checkpoint(bytes);
}

}  // namespace chmffn
