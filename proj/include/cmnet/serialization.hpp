#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "cmnet/tensor.hpp"

namespace cmnet {

enum class StorageType : std::uint8_t { float32 = 0, float64 = 1 };

// Named-tensor container: the on-disk format for pretrained weight tables and
// checkpoints.
//
// Layout (all integers little-endian):
//   "CMNTTBL1"                     8-byte magic
//   u32 version (= 1)
//   u64 metadata length, then that many bytes of UTF-8 text (JSON by convention)
//   u64 entry count
//   per entry, in lexicographic key order:
//     u32 key length, key bytes
//     u8 storage type (0 = float32, 1 = float64)
//     u8 rank, then rank x u64 dims
//     raw values, row-major
struct TensorTable {
  std::map<std::string, Tensor<double>> tensors;
  std::map<std::string, StorageType> storage;  // per key; float32 when absent
  std::string metadata;

  void set(const std::string& key, Tensor<double> value, StorageType type) {
    tensors[key] = std::move(value);
    storage[key] = type;
  }
  bool contains(const std::string& key) const { return tensors.count(key) != 0; }
};

void save_tensor_table(const std::filesystem::path& path, const TensorTable& table);
TensorTable load_tensor_table(const std::filesystem::path& path);

template <typename T>
constexpr StorageType storage_type_of() {
  return sizeof(T) == 4 ? StorageType::float32 : StorageType::float64;
}

}  // namespace cmnet
