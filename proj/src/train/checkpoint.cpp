#include "osm/train/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "osm/errors.hpp"

namespace osm::train {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'O', 'R', 'S', 'M'};

template <typename T>
constexpr const char* dtype_of() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

}  // namespace

template <typename T>
StoredTensor StoredTensor::from(std::string name, const ad::Tensor<T>& t) {
  StoredTensor s{std::move(name), dtype_of<T>(), t.shape(), {}};
  s.bytes.resize(t.size() * sizeof(T));
  if (!s.bytes.empty()) std::memcpy(s.bytes.data(), t.data(), s.bytes.size());
  return s;
}

template <typename T>
ad::Tensor<T> StoredTensor::to() const {
  if (dtype != dtype_of<T>()) throw FormatError("tensor " + name + " stored as " + dtype);
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  if (n * sizeof(T) != bytes.size()) throw FormatError("tensor " + name + " has a bad byte count");
  std::vector<T> data(n);
  if (n) std::memcpy(data.data(), bytes.data(), bytes.size());
  return ad::Tensor<T>(shape, std::move(data));
}

template StoredTensor StoredTensor::from(std::string, const ad::Tensor<float>&);
template StoredTensor StoredTensor::from(std::string, const ad::Tensor<double>&);
template ad::Tensor<float> StoredTensor::to() const;
template ad::Tensor<double> StoredTensor::to() const;

const StoredTensor& Checkpoint::at(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw FormatError("checkpoint has no tensor '" + name + "'");
}

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  nlohmann::json header;
  header["meta"] = ckpt.meta;
  auto& list = header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    list.push_back({{"name", t.name}, {"dtype", t.dtype}, {"shape", t.shape}, {"offset", offset},
                    {"nbytes", t.bytes.size()}});
    offset += t.bytes.size();
  }
  const std::string text = header.dump();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write checkpoint " + tmp);
    os.write(kMagic, 4);
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t len = text.size();
    os.write(reinterpret_cast<const char*>(&version), sizeof version);
    os.write(reinterpret_cast<const char*>(&len), sizeof len);
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : ckpt.tensors)
      os.write(reinterpret_cast<const char*>(t.bytes.data()), static_cast<std::streamsize>(t.bytes.size()));
    if (!os) throw std::runtime_error("failed writing checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw FormatError(path.string() + " is not a checkpoint");
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&version), sizeof version);
  is.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!is) throw FormatError("checkpoint header truncated");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw FormatError("checkpoint header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  Checkpoint ckpt;
  ckpt.meta = header.value("meta", nlohmann::json::object());
  try {
    for (const auto& entry : header.at("tensors")) {
      StoredTensor t;
      t.name = entry.at("name").get<std::string>();
      t.dtype = entry.at("dtype").get<std::string>();
      t.shape = entry.at("shape").get<std::vector<std::size_t>>();
      t.bytes.resize(entry.at("nbytes").get<std::size_t>());
      is.read(reinterpret_cast<char*>(t.bytes.data()), static_cast<std::streamsize>(t.bytes.size()));
      if (!is) throw FormatError("checkpoint payload truncated at " + t.name);
      ckpt.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint header: ") + e.what());
  }
  return ckpt;
}

}  // namespace osm::train
