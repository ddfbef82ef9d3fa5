#include "cityloc/checkpoint.hpp"

#include "cityloc/rng.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace cityloc {

static_assert(std::endian::native == std::endian::little, "payload layout assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'C', 'I', 'T', 'Y', 'L', 'O', 'C', '\0'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw CheckpointError("checkpoint truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

const ng::Array* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, a] : arrays) {
    if (n == name) return &a;
  }
  return nullptr;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json header;
  header["format"] = kCheckpointFormat;
  header["meta"] = ckpt.meta;
  header["arrays"] = nlohmann::json::array();
  for (const auto& [name, a] : ckpt.arrays) {
    header["arrays"].push_back({{"name", name}, {"shape", a.shape()}});
  }
  const std::string text = header.dump();
  std::string out(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kCheckpointFormat);
  put<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& [name, a] : ckpt.arrays) {
    out.append(reinterpret_cast<const char*>(a.values().data()), a.size() * sizeof(double));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError("not a checkpoint (bad magic)");
  }
  std::size_t pos = sizeof kMagic;
  const auto format = take<std::uint32_t>(bytes, pos);
  if (format != kCheckpointFormat) {
    throw CheckpointError("unsupported checkpoint format " + std::to_string(format));
  }
  const auto header_len = take<std::uint64_t>(bytes, pos);
  if (pos + header_len > bytes.size()) throw CheckpointError("checkpoint truncated");
  const auto header = nlohmann::json::parse(bytes.substr(pos, header_len));
  pos += header_len;
  Checkpoint ckpt;
  ckpt.meta = header.at("meta");
  for (const auto& entry : header.at("arrays")) {
    ng::Array a(entry.at("shape").get<ng::Shape>());
    const std::size_t n = a.size() * sizeof(double);
    if (pos + n > bytes.size()) throw CheckpointError("checkpoint truncated");
    std::memcpy(a.values().data(), bytes.data() + pos, n);
    pos += n;
    ckpt.arrays.emplace_back(entry.at("name").get<std::string>(), std::move(a));
  }
  if (pos != bytes.size()) throw CheckpointError("trailing bytes after checkpoint payload");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot write checkpoint " + path.string());
  const std::string bytes = encode_checkpoint(ckpt);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  try {
    return decode_checkpoint(ss.str());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": malformed header: " + e.what());
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

std::string checkpoint_digest(const Checkpoint& ckpt) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(encode_checkpoint(ckpt))));
  return buf;
}

void export_store(Checkpoint& ckpt, const nn::ParamStore& store, const std::string& prefix) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    ckpt.arrays.emplace_back(prefix + "/" + store.name(i), store.value(i));
  }
}

void import_store(const Checkpoint& ckpt, nn::ParamStore& store, const std::string& prefix) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    const std::string name = prefix + "/" + store.name(i);
    const ng::Array* a = ckpt.find(name);
    if (a == nullptr) throw CheckpointError("checkpoint has no array '" + name + "'");
    if (a->shape() != store.value(i).shape()) {
      throw CheckpointError("checkpoint array '" + name + "' has shape " + ng::shape_str(a->shape()) +
                            ", expected " + ng::shape_str(store.value(i).shape()));
    }
    store.value(i) = *a;
  }
}

}  // namespace cityloc
