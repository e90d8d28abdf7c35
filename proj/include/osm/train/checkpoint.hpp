#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "osm/autodiff/tensor.hpp"

namespace osm::train {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  std::string name;
  std::string dtype;  // "f32" or "f64"
  std::vector<std::size_t> shape;
  std::vector<unsigned char> bytes;

  template <typename T>
  static StoredTensor from(std::string name, const ad::Tensor<T>& t);
  template <typename T>
  ad::Tensor<T> to() const;
};

// "ORSM", u32 version, u64 header length, JSON header, little-endian payload.
struct Checkpoint {
  nlohmann::json meta;
  std::vector<StoredTensor> tensors;

  const StoredTensor& at(const std::string& name) const;
};

// Atomic: writes a temporary file and renames it over `path`.
void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
// Throws FormatError on bad magic, version or structure.
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace osm::train
