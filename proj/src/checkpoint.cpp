#include "mrir/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

namespace mrir::checkpoint {

namespace {

constexpr char kMagic[8] = {'M', 'R', 'I', 'R', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  explicit Writer(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw InputError("cannot write checkpoint " + path);
  }
  template <typename T>
  void put(T value) {
    out_.write(reinterpret_cast<const char*>(&value), sizeof(T));
  }
  void bytes(const void* data, std::size_t n) { out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n)); }
  void finish(const std::string& path) {
    out_.flush();
    if (!out_) throw InputError("failed writing checkpoint " + path);
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw InputError("cannot open checkpoint " + path);
  }
  template <typename T>
  T get() {
    T value{};
    bytes(&value, sizeof(T));
    return value;
  }
  void bytes(void* data, std::size_t n) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw InputError("truncated checkpoint " + path_);
  }
  std::string string(std::size_t n) {
    if (n > (1u << 28)) throw InputError("implausible string length in checkpoint " + path_);
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

 private:
  std::string path_;
  std::ifstream in_;
};

Config read_header(Reader& r, const std::string& path) {
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) throw InputError(path + " is not an mrir checkpoint");
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw InputError(path + ": unsupported checkpoint version " + std::to_string(version));
  const auto n = r.get<std::uint64_t>();
  try {
    return config_from_json(nlohmann::json::parse(r.string(n)));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path + ": bad config block: " + e.what());
  }
}

}  // namespace

void save(const std::string& path, const MrirModel& model) {
  Writer w(path);
  w.bytes(kMagic, 8);
  w.put<std::uint32_t>(kVersion);
  const std::string cfg = config_to_json(model.config()).dump();
  w.put<std::uint64_t>(cfg.size());
  w.bytes(cfg.data(), cfg.size());
  const auto& entries = model.params().entries();
  w.put<std::uint64_t>(entries.size());
  for (const auto& [name, var] : entries) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    const Tensor& t = var.value();
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    std::vector<float> data(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) data[i] = static_cast<float>(t[i]);
    w.bytes(data.data(), data.size() * sizeof(float));
  }
  w.finish(path);
}

Config load_config(const std::string& path) {
  Reader r(path);
  return read_header(r, path);
}

std::unique_ptr<MrirModel> load(const std::string& path) {
  Reader r(path);
  auto model = std::make_unique<MrirModel>(read_header(r, path));
  const auto& entries = model->params().entries();
  const auto count = r.get<std::uint64_t>();
  if (count != entries.size()) {
    throw InputError(path + ": " + std::to_string(count) + " entries, model has " + std::to_string(entries.size()));
  }
  for (std::uint64_t e = 0; e < count; ++e) {
    const std::string name = r.string(r.get<std::uint32_t>());
    auto it = entries.find(name);
    if (it == entries.end()) throw InputError(path + ": unknown parameter " + name);
    const auto rank = r.get<std::uint32_t>();
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<int>(r.get<std::uint32_t>()));
    ag::Var var = it->second;
    if (shape != var.shape()) {
      throw InputError(path + ": " + name + " has shape " + shape_str(shape) + ", model expects " +
                       shape_str(var.shape()));
    }
    std::vector<float> data(var.value().size());
    r.bytes(data.data(), data.size() * sizeof(float));
    Tensor& dst = var.mutable_value();
    for (std::size_t i = 0; i < data.size(); ++i) dst[i] = data[i];
  }
  return model;
}

}  // namespace mrir::checkpoint
