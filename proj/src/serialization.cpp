#include "cmnet/serialization.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include "cmnet/errors.hpp"

namespace cmnet {

namespace {

constexpr char kMagic[8] = {'C', 'M', 'N', 'T', 'T', 'B', 'L', '1'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "container IO assumes a little-endian host");

template <typename U>
void write_pod(std::ostream& out, U value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(U));
}

template <typename U>
U read_pod(std::istream& in, const std::filesystem::path& path) {
  U value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(U));
  if (!in) throw IoError("truncated tensor container " + path.string());
  return value;
}

}  // namespace

void save_tensor_table(const std::filesystem::path& path, const TensorTable& table) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(kMagic, sizeof(kMagic));
  write_pod<std::uint32_t>(out, kVersion);
  write_pod<std::uint64_t>(out, table.metadata.size());
  out.write(table.metadata.data(), static_cast<std::streamsize>(table.metadata.size()));
  write_pod<std::uint64_t>(out, table.tensors.size());
  for (const auto& [key, tensor] : table.tensors) {
    const auto it = table.storage.find(key);
    const StorageType type = it == table.storage.end() ? StorageType::float32 : it->second;
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(key.size()));
    out.write(key.data(), static_cast<std::streamsize>(key.size()));
    write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(type));
    write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(tensor.rank()));
    for (std::size_t d : tensor.shape()) write_pod<std::uint64_t>(out, d);
    if (type == StorageType::float32) {
      std::vector<float> buf(tensor.storage().begin(), tensor.storage().end());
      out.write(reinterpret_cast<const char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
    } else {
      out.write(reinterpret_cast<const char*>(tensor.data()),
                static_cast<std::streamsize>(tensor.numel() * sizeof(double)));
    }
  }
  if (!out) throw IoError("failed writing " + path.string());
}

TensorTable load_tensor_table(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open tensor container " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IoError(path.string() + " is not a tensor container (bad magic)");
  }
  const auto version = read_pod<std::uint32_t>(in, path);
  if (version != kVersion) {
    throw IoError("unsupported tensor container version " + std::to_string(version));
  }
  TensorTable table;
  const auto meta_len = read_pod<std::uint64_t>(in, path);
  table.metadata.resize(meta_len);
  in.read(table.metadata.data(), static_cast<std::streamsize>(meta_len));
  const auto count = read_pod<std::uint64_t>(in, path);
  for (std::uint64_t e = 0; e < count; ++e) {
    const auto key_len = read_pod<std::uint32_t>(in, path);
    std::string key(key_len, '\0');
    in.read(key.data(), key_len);
    const auto type = static_cast<StorageType>(read_pod<std::uint8_t>(in, path));
    if (type != StorageType::float32 && type != StorageType::float64) {
      throw IoError("unknown storage type for key '" + key + "'");
    }
    const auto rank = read_pod<std::uint8_t>(in, path);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(read_pod<std::uint64_t>(in, path));
    Tensor<double> tensor(shape);
    if (type == StorageType::float32) {
      std::vector<float> buf(tensor.numel());
      in.read(reinterpret_cast<char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
      std::copy(buf.begin(), buf.end(), tensor.data());
    } else {
      in.read(reinterpret_cast<char*>(tensor.data()),
              static_cast<std::streamsize>(tensor.numel() * sizeof(double)));
    }
    if (!in) throw IoError("truncated tensor data for key '" + key + "' in " + path.string());
    table.set(key, std::move(tensor), type);
  }
  return table;
}

}  // namespace cmnet
