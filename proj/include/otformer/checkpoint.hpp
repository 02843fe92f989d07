#pragma once

// Versioned little-endian checkpoint container:
//
//   "OTFCKPT\0"  u32 version  u8 precision
//   model config record
//   u32 echo length, echo bytes (free-form config text)
//   u32 parameter count, then per parameter:
//     u32 name length, name, u32 rank, i64 extents[rank], raw values
//
// Values are stored with the precision the model was trained in, so a
// save/load round trip is bitwise exact.

#include <filesystem>
#include <stdexcept>
#include <string>

#include "otformer/errors.hpp"
#include "otformer/model.hpp"

namespace otf {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointHeader {
  std::uint32_t version = kCheckpointVersion;
  Precision precision = Precision::F32;
  ModelConfig config;
  std::string config_echo;
};

template <typename T>
constexpr Precision precision_of() {
  return sizeof(T) == sizeof(double) ? Precision::F64 : Precision::F32;
}

std::string to_string(Precision p);
Precision parse_precision(const std::string& name);

template <typename T>
void save_checkpoint(const std::filesystem::path& path, Model<T>& model,
                     const std::string& config_echo);

// Reads only the header; used to pick the precision before loading.
CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);

// Throws FormatError on corrupt input or a precision mismatch.
template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path, std::string* config_echo = nullptr);

}  // namespace otf
