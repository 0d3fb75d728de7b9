#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dybnn/models.hpp"
#include "dybnn/train.hpp"

// Checkpoint container, little-endian throughout:
//   "BNNCKPT\0" | u32 version | config | metadata | u64 step
//   | params | buffers | adam first moments | adam second moments | u32 crc32
// Strings are u64 length + bytes; each tensor section is a u64 count of
// (u32 name length, name, u8 dtype, u32 rank, u64 dims, u64 byte count, raw
// values). The trailing CRC-32 covers every preceding byte.
namespace dybnn::io {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

struct Blob {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<std::uint8_t> bytes;  // little-endian values
};

template <typename T>
Blob to_blob(const std::string& name, const Tensor<T>& t);

// Values converted to T when the stored dtype differs.
template <typename T>
Tensor<T> from_blob(const Blob& b);

struct CheckpointState {
  std::string config_json;
  std::string metadata_json;
  std::uint64_t step = 0;
  std::vector<Blob> params;
  std::vector<Blob> buffers;
  std::vector<Blob> adam_m;
  std::vector<Blob> adam_v;
};

// Writes to a sibling temporary file and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const CheckpointState& state);

// IoError for unreadable paths, CorruptionError for bad magic, truncation or
// checksum mismatch, VersionError for an unknown format version.
CheckpointState load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> serialize(const CheckpointState& state);
CheckpointState deserialize(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>");

template <typename T>
CheckpointState capture(const models::Model<T>& model, const train::Adam<T>* adam, std::uint64_t step,
                        std::string config_json, std::string metadata_json);

// Copies parameters and buffers (and optimiser state when `adam` is given)
// into `model`. Missing names or shape mismatches raise DataError.
template <typename T>
void restore(const CheckpointState& state, models::Model<T>& model, train::Adam<T>* adam = nullptr);

}  // namespace dybnn::io
