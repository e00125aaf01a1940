#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "sure/cli/config.hpp"
#include "sure/error.hpp"
#include "sure/model/model.hpp"

namespace sure::cli {

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");

inline constexpr char kMagic[6] = {'S', 'U', 'R', 'E', 'v', '1'};
inline constexpr std::uint16_t kFormatVersion = 1;

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

class VersionMismatch : public InvalidArgument {
 public:
  VersionMismatch(std::uint16_t found, std::uint16_t expected)
      : InvalidArgument("checkpoint format version " + std::to_string(found) +
                        " does not match this build's version " + std::to_string(expected)),
        found_version(found),
        expected_version(expected) {}
  std::uint16_t found_version;
  std::uint16_t expected_version;
};

struct TensorRecord {
  DType dtype = DType::f32;
  std::vector<std::uint64_t> shape;
  std::vector<std::uint8_t> bytes;  // little-endian scalars

  std::uint64_t count() const {
    std::uint64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
  friend bool operator==(const TensorRecord&, const TensorRecord&) = default;
};

/// Config snapshot plus a tensor table ordered by name.
struct Checkpoint {
  std::uint16_t version = kFormatVersion;
  std::string config_json;
  std::map<std::string, TensorRecord> tensors;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(::crc32(0L, Z_NULL, 0), bytes.data(), static_cast<uInt>(bytes.size())));
}

namespace detail {

template <class V>
void put(std::vector<std::uint8_t>& out, V v) {
  std::uint8_t buf[sizeof(V)];
  std::memcpy(buf, &v, sizeof(V));
  out.insert(out.end(), buf, buf + sizeof(V));
}

struct Reader {
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;
  std::size_t end = 0;

  template <class V>
  V get(const char* what) {
    need(sizeof(V), what);
    V v;
    std::memcpy(&v, buf.data() + pos, sizeof(V));
    pos += sizeof(V);
    return v;
  }
  void need(std::size_t n, const char* what) {
    if (end - pos < n) throw IoError(std::string("checkpoint truncated while reading ") + what);
  }
};

}  // namespace detail

/// magic | u16 version | payload | u32 CRC32(payload). The payload holds the
/// config JSON and the tensor table.
inline std::vector<std::uint8_t> serialize(const Checkpoint& ck) {
  std::vector<std::uint8_t> payload;
  detail::put<std::uint32_t>(payload, static_cast<std::uint32_t>(ck.config_json.size()));
  payload.insert(payload.end(), ck.config_json.begin(), ck.config_json.end());
  detail::put<std::uint32_t>(payload, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    if (t.bytes.size() != t.count() * dtype_size(t.dtype))
      throw InvalidArgument("tensor '" + name + "' byte count does not match its shape");
    detail::put<std::uint16_t>(payload, static_cast<std::uint16_t>(name.size()));
    payload.insert(payload.end(), name.begin(), name.end());
    detail::put<std::uint8_t>(payload, static_cast<std::uint8_t>(t.dtype));
    detail::put<std::uint8_t>(payload, static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) detail::put<std::uint64_t>(payload, d);
    payload.insert(payload.end(), t.bytes.begin(), t.bytes.end());
  }
  std::vector<std::uint8_t> out(kMagic, kMagic + sizeof kMagic);
  detail::put<std::uint16_t>(out, ck.version);
  out.insert(out.end(), payload.begin(), payload.end());
  detail::put<std::uint32_t>(out, crc32_of(payload));
  return out;
}

inline Checkpoint deserialize(const std::vector<std::uint8_t>& buf) {
  if (buf.size() < sizeof kMagic + 2 + 4 || std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0)
    throw IoError("not a SURE checkpoint (bad magic)");
  std::uint16_t version;
  std::memcpy(&version, buf.data() + sizeof kMagic, 2);
  if (version != kFormatVersion) throw VersionMismatch(version, kFormatVersion);
  const std::size_t begin = sizeof kMagic + 2, end = buf.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, buf.data() + end, 4);
  const std::vector<std::uint8_t> payload(buf.begin() + static_cast<std::ptrdiff_t>(begin),
                                          buf.begin() + static_cast<std::ptrdiff_t>(end));
  if (crc32_of(payload) != stored) throw IoError("checkpoint checksum mismatch");

  Checkpoint ck;
  ck.version = version;
  detail::Reader r{buf, begin, end};
  const auto cfg_len = r.get<std::uint32_t>("config length");
  r.need(cfg_len, "config");
  ck.config_json.assign(reinterpret_cast<const char*>(buf.data() + r.pos), cfg_len);
  r.pos += cfg_len;
  const auto n = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t k = 0; k < n; ++k) {
    const auto len = r.get<std::uint16_t>("tensor name length");
    r.need(len, "tensor name");
    std::string name(reinterpret_cast<const char*>(buf.data() + r.pos), len);
    r.pos += len;
    TensorRecord t;
    const auto tag = r.get<std::uint8_t>("dtype");
    if (tag != 1 && tag != 2) throw IoError("tensor '" + name + "' has unknown dtype tag");
    t.dtype = static_cast<DType>(tag);
    const auto rank = r.get<std::uint8_t>("rank");
    for (std::uint8_t d = 0; d < rank; ++d) t.shape.push_back(r.get<std::uint64_t>("shape"));
    const auto nbytes = t.count() * dtype_size(t.dtype);
    r.need(nbytes, "tensor data");
    t.bytes.assign(buf.begin() + static_cast<std::ptrdiff_t>(r.pos),
                   buf.begin() + static_cast<std::ptrdiff_t>(r.pos + nbytes));
    r.pos += nbytes;
    if (!ck.tensors.emplace(std::move(name), std::move(t)).second)
      throw IoError("checkpoint lists a tensor twice");
  }
  if (r.pos != end) throw IoError("checkpoint has trailing bytes after the tensor table");
  return ck;
}

/// Writes to `<path>.tmp` and renames over `path`.
inline void write_file_atomic(const std::filesystem::path& path,
                              const std::vector<std::uint8_t>& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    os.flush();
    if (!os) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot rename checkpoint into place at " + path.string());
  }
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_file_atomic(path, serialize(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize(read_file(path));
}

template <class T>
TensorRecord to_record(std::span<const T> data, const std::vector<std::size_t>& shape) {
  TensorRecord r;
  r.dtype = dtype_of<T>();
  r.shape.assign(shape.begin(), shape.end());
  r.bytes.resize(data.size() * sizeof(T));
  std::memcpy(r.bytes.data(), data.data(), r.bytes.size());
  return r;
}

template <class T>
void from_record(const TensorRecord& r, const std::string& name, std::span<T> out,
                 const std::vector<std::size_t>& shape) {
  if (r.dtype != dtype_of<T>()) throw InvalidArgument("tensor '" + name + "' has the wrong dtype");
  if (!std::equal(r.shape.begin(), r.shape.end(), shape.begin(), shape.end()))
    throw InvalidArgument("tensor '" + name + "' has a shape that does not fit the model");
  std::memcpy(out.data(), r.bytes.data(), r.bytes.size());
}

/// Model state saved beside the weights.
struct TrainedModel {
  RunConfig config;
  std::size_t epochs_done = 0;
};

/// Parameters, then running statistics under `<norm>.running_mean` and
/// `<norm>.running_var`, plus `<norm>.frozen` as a one-element tensor.
template <class T>
Checkpoint make_checkpoint(model::Model<T>& m, const TrainedModel& info) {
  Checkpoint ck;
  json meta;
  meta["config"] = to_json(info.config);
  meta["epochs_done"] = info.epochs_done;
  ck.config_json = meta.dump();
  m.visit([&](const std::string& name, diff::Tensor<T>& t) {
    ck.tensors[name] = to_record<T>(t.data(), t.shape());
  });
  m.visit_norms([&](const std::string& name, backbone::ChannelNorm<T>& n) {
    ck.tensors[name + ".running_mean"] =
        to_record<T>(std::span<const T>(n.running_mean), {n.running_mean.size()});
    ck.tensors[name + ".running_var"] =
        to_record<T>(std::span<const T>(n.running_var), {n.running_var.size()});
    const T frozen = n.frozen ? T(1) : T(0);
    ck.tensors[name + ".frozen"] = to_record<T>(std::span<const T>(&frozen, 1), {1});
  });
  return ck;
}

inline TrainedModel checkpoint_info(const Checkpoint& ck) {
  json meta;
  try {
    meta = json::parse(ck.config_json);
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  if (!meta.is_object() || !meta.contains("config") || !meta.contains("epochs_done"))
    throw IoError("checkpoint config lacks 'config' or 'epochs_done'");
  return {from_json(meta.at("config")), meta.at("epochs_done").get<std::size_t>()};
}

/// Rebuilds the model and overwrites every tensor; the table must name each
/// model tensor exactly once and nothing else.
template <class T>
model::Model<T> restore_model(const Checkpoint& ck, TrainedModel* info_out = nullptr) {
  const auto info = checkpoint_info(ck);
  auto m = model::Model<T>::init(info.config.model_config(), info.config.model_seed());
  std::size_t used = 0;
  auto find = [&](const std::string& name) -> const TensorRecord& {
    const auto it = ck.tensors.find(name);
    if (it == ck.tensors.end()) throw InvalidArgument("checkpoint lacks tensor '" + name + "'");
    ++used;
    return it->second;
  };
  m.visit([&](const std::string& name, diff::Tensor<T>& t) {
    from_record<T>(find(name), name, t.mutable_data(), t.shape());
  });
  m.visit_norms([&](const std::string& name, backbone::ChannelNorm<T>& n) {
    from_record<T>(find(name + ".running_mean"), name, std::span<T>(n.running_mean),
                   {n.running_mean.size()});
    from_record<T>(find(name + ".running_var"), name, std::span<T>(n.running_var),
                   {n.running_var.size()});
    T frozen{};
    from_record<T>(find(name + ".frozen"), name, std::span<T>(&frozen, 1), {1});
    n.frozen = frozen != T(0);
  });
  if (used != ck.tensors.size())
    throw InvalidArgument("checkpoint holds tensors the model does not use");
  if (info_out) *info_out = info;
  return m;
}

}  // namespace sure::cli
