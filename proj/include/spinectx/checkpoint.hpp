#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "spinectx/network.hpp"

namespace spinectx {

/// Serialized model: config + named parameter tensors + BN running statistics
/// + training metadata. File layout: magic "SCRU", u16 version, u32 JSON
/// length, JSON config header, u32 record count, then per record
/// (u32 name length, name, u8 dtype tag, 5x u64 shape, raw little-endian
/// payload), and a trailing CRC32 of everything preceding it.
struct CheckpointMeta {
  std::int64_t epoch = 0;
  double best_val_loss = 0.0;
  bool bn_stats_initialized = false;
};

namespace detail {

constexpr char kCkptMagic[4] = {'S', 'C', 'R', 'U'};
constexpr std::uint16_t kCkptVersion = 1;

template <typename T>
void put(std::vector<unsigned char>& buf, T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  buf.insert(buf.end(), b, b + sizeof(T));
}

struct Reader {
  const unsigned char* p;
  size_t remaining;
  std::string path;

  template <typename T>
  T get() {
    if (remaining < sizeof(T))
      throw std::runtime_error("checkpoint: " + path + " truncated");
    T v;
    std::memcpy(&v, p, sizeof(T));
    p += sizeof(T);
    remaining -= sizeof(T);
    return v;
  }
  void get_bytes(void* dst, size_t n) {
    if (remaining < n) throw std::runtime_error("checkpoint: " + path + " truncated");
    std::memcpy(dst, p, n);
    p += n;
    remaining -= n;
  }
};

template <typename S>
constexpr std::uint8_t dtype_tag() {
  return sizeof(S) == 4 ? 0 : 1;
}

}  // namespace detail

template <typename S>
void save_checkpoint(const std::string& path, const SpineContextResUNet<S>& net,
                     const CheckpointMeta& meta) {
  nlohmann::ordered_json hdr;
  hdr["format"] = "spinectx-checkpoint";
  nlohmann::ordered_json cfg;
  to_json(cfg, net.config());
  hdr["config"] = cfg;
  hdr["epoch"] = meta.epoch;
  hdr["best_val_loss"] = meta.best_val_loss;
  hdr["bn_stats_initialized"] = meta.bn_stats_initialized;
  hdr["bn_momentum"] = 0.1;
  hdr["bn_epsilon"] = 1e-5;
  const std::string js = hdr.dump();

  std::vector<unsigned char> buf;
  buf.insert(buf.end(), detail::kCkptMagic, detail::kCkptMagic + 4);
  detail::put<std::uint16_t>(buf, detail::kCkptVersion);
  detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(js.size()));
  buf.insert(buf.end(), js.begin(), js.end());

  const auto& store = net.store();
  detail::put<std::uint32_t>(
      buf, static_cast<std::uint32_t>(store.params().size() + store.buffers().size()));
  auto write_entry = [&buf](const std::string& name, const Tensor5<S>& t) {
    detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
    buf.insert(buf.end(), name.begin(), name.end());
    detail::put<std::uint8_t>(buf, detail::dtype_tag<S>());
    for (std::int64_t dim : {t.shape.n, t.shape.c, t.shape.d, t.shape.h, t.shape.w})
      detail::put<std::uint64_t>(buf, static_cast<std::uint64_t>(dim));
    const size_t nbytes = t.data.size() * sizeof(S);
    const size_t off = buf.size();
    buf.resize(off + nbytes);
    std::memcpy(buf.data() + off, t.data.data(), nbytes);
  };
  for (const auto& e : store.params()) write_entry(e.name, *e.tensor);
  for (const auto& e : store.buffers()) write_entry(e.name, *e.tensor);

  const std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0L, buf.data(), static_cast<uInt>(buf.size())));
  detail::put<std::uint32_t>(buf, crc);

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("checkpoint: short write to " + path);
}

/// Reads config + metadata only (cheap header peek).
inline std::pair<ModelConfig, CheckpointMeta> read_checkpoint_header(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, detail::kCkptMagic, 4) != 0)
    throw std::runtime_error("checkpoint: " + path + " has bad magic (expected \"SCRU\")");
  std::uint16_t version = 0;
  f.read(reinterpret_cast<char*>(&version), 2);
  if (!f || version != detail::kCkptVersion)
    throw std::runtime_error("checkpoint: unsupported format version " +
                             std::to_string(version));
  std::uint32_t jlen = 0;
  f.read(reinterpret_cast<char*>(&jlen), 4);
  std::string js(jlen, '\0');
  f.read(js.data(), jlen);
  if (!f) throw std::runtime_error("checkpoint: " + path + " truncated in header");
  nlohmann::json hdr = nlohmann::json::parse(js);
  CheckpointMeta meta;
  meta.epoch = hdr.value("epoch", std::int64_t{0});
  meta.best_val_loss = hdr.value("best_val_loss", 0.0);
  meta.bn_stats_initialized = hdr.value("bn_stats_initialized", false);
  return {model_config_from_json(hdr.at("config")), meta};
}

/// Full load: verifies magic, version, CRC, and every record before touching
/// the returned network, so a corrupt file never partial-loads.
template <typename S>
std::pair<std::unique_ptr<SpineContextResUNet<S>>, CheckpointMeta> load_checkpoint(
    const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 4 + 2 + 4 + 4 + 4)
    throw std::runtime_error("checkpoint: " + path + " truncated");

  const std::uint32_t stored_crc = [&] {
    std::uint32_t c;
    std::memcpy(&c, bytes.data() + bytes.size() - 4, 4);
    return c;
  }();
  const std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0L, bytes.data(), static_cast<uInt>(bytes.size() - 4)));
  if (crc != stored_crc)
    throw std::runtime_error("checkpoint: " + path + " CRC mismatch (corrupt or truncated)");

  detail::Reader r{bytes.data(), bytes.size() - 4, path};
  char magic[4];
  r.get_bytes(magic, 4);
  if (std::memcmp(magic, detail::kCkptMagic, 4) != 0)
    throw std::runtime_error("checkpoint: " + path + " has bad magic (expected \"SCRU\")");
  const auto version = r.get<std::uint16_t>();
  if (version != detail::kCkptVersion)
    throw std::runtime_error("checkpoint: unsupported format version " +
                             std::to_string(version));
  const auto jlen = r.get<std::uint32_t>();
  std::string js(jlen, '\0');
  r.get_bytes(js.data(), jlen);
  nlohmann::json hdr = nlohmann::json::parse(js);
  ModelConfig cfg = model_config_from_json(hdr.at("config"));
  CheckpointMeta meta;
  meta.epoch = hdr.value("epoch", std::int64_t{0});
  meta.best_val_loss = hdr.value("best_val_loss", 0.0);
  meta.bn_stats_initialized = hdr.value("bn_stats_initialized", false);

  auto net = std::make_unique<SpineContextResUNet<S>>(cfg);
  const auto count = r.get<std::uint32_t>();
  const auto expected =
      net->store().params().size() + net->store().buffers().size();
  if (count != expected)
    throw std::runtime_error("checkpoint: record count " + std::to_string(count) +
                             " does not match config (" + std::to_string(expected) + ")");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto nlen = r.get<std::uint32_t>();
    std::string name(nlen, '\0');
    r.get_bytes(name.data(), nlen);
    const auto tag = r.get<std::uint8_t>();
    if (tag != detail::dtype_tag<S>())
      throw std::runtime_error("checkpoint: record \"" + name + "\" dtype tag " +
                               std::to_string(tag) + " does not match this build");
    Shape5 shape;
    shape.n = static_cast<std::int64_t>(r.get<std::uint64_t>());
    shape.c = static_cast<std::int64_t>(r.get<std::uint64_t>());
    shape.d = static_cast<std::int64_t>(r.get<std::uint64_t>());
    shape.h = static_cast<std::int64_t>(r.get<std::uint64_t>());
    shape.w = static_cast<std::int64_t>(r.get<std::uint64_t>());
    auto t = net->store().find(name);
    if (!t) throw std::runtime_error("checkpoint: unknown record \"" + name + "\"");
    if (!(t->shape == shape))
      throw std::runtime_error("checkpoint: record \"" + name + "\" shape " + shape.str() +
                               " does not match model " + t->shape.str());
    r.get_bytes(t->data.data(), t->data.size() * sizeof(S));
  }
  if (r.remaining != 0)
    throw std::runtime_error("checkpoint: " + path + " has trailing bytes");

  net->for_each_bn([](BatchNorm3dLayer<S>& bn) { bn.sync_from_buffers(); });
  net->set_bn_stats_initialized(meta.bn_stats_initialized);
  return {std::move(net), meta};
}

}  // namespace spinectx
