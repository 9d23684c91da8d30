#pragma once

// Binary checkpoint container.
//
//   magic    "NFPOCKPT"                      8 bytes
//   version  u32                             currently 1
//   meta     u32 length + UTF-8 JSON         free-form metadata
//   count    u32
//   entries  count x { u32 name length, name bytes, u32 rank,
//                      rank x u64 dims, float32 row-major payload }
//
// All integers and floats are little-endian. Entries are written in
// lexicographic name order, and float payloads round-trip bit-exactly.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nfpo/error.hpp"
#include "nfpo/param_store.hpp"
#include "nfpo/tensor.hpp"

namespace nfpo {

inline constexpr char kCheckpointMagic[8] = {'N', 'F', 'P', 'O', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

struct CheckpointEntry {
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, CheckpointEntry> entries;

  template <typename T>
  void put(const std::string& name, const Shape& shape, std::span<const T> values) {
    entries[name] = {shape, std::vector<float>(values.begin(), values.end())};
  }

  template <typename T>
  void put_store(const ParamStore<T>& store, const std::string& prefix = "") {
    for (const auto& [name, t] : store) put<T>(prefix + name, t.shape(), t.data());
  }

  const CheckpointEntry& at(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end()) throw FormatError("checkpoint has no entry '" + name + "'");
    return it->second;
  }

  /// Copies entries into an existing store; names and shapes must match.
  template <typename T>
  void load_store(ParamStore<T>& store, const std::string& prefix = "") const {
    for (auto& [name, t] : store) {
      const auto& e = at(prefix + name);
      if (e.shape != t.shape()) {
        throw FormatError("checkpoint entry '" + prefix + name + "' has shape " +
                          shape_str(e.shape) + ", expected " + shape_str(t.shape()));
      }
      auto dst = t.mutable_data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(e.data[i]);
    }
  }
};

namespace ckpt_detail {

template <typename V>
void write_pod(std::ofstream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::ifstream& in) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw FormatError("checkpoint truncated");
  return v;
}

inline std::string read_bytes(std::ifstream& in, std::size_t n) {
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw FormatError("checkpoint truncated");
  return s;
}

}  // namespace ckpt_detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  using namespace ckpt_detail;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write checkpoint '" + path + "'");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  write_pod<std::uint32_t>(out, kCheckpointVersion);
  const auto meta = ckpt.meta.dump();
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& [name, e] : ckpt.entries) {
    if (e.data.size() != numel_of(e.shape)) {
      throw FormatError("checkpoint entry '" + name + "' payload does not match its shape");
    }
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) write_pod<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(e.data.data()),
              static_cast<std::streamsize>(e.data.size() * sizeof(float)));
  }
  if (!out) throw FormatError("error writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  using namespace ckpt_detail;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
  const auto magic = read_bytes(in, sizeof(kCheckpointMagic));
  if (std::memcmp(magic.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw FormatError("'" + path + "' is not a checkpoint (bad magic)");
  }
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const auto meta_len = read_pod<std::uint32_t>(in);
  try {
    ckpt.meta = nlohmann::json::parse(read_bytes(in, meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  const auto count = read_pod<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = read_bytes(in, read_pod<std::uint32_t>(in));
    const auto rank = read_pod<std::uint32_t>(in);
    Shape shape(rank);
    for (auto& d : shape) d = read_pod<std::uint64_t>(in);
    std::vector<float> data(numel_of(shape));
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!in) throw FormatError("checkpoint truncated in entry '" + name + "'");
    ckpt.entries[name] = {std::move(shape), std::move(data)};
  }
  return ckpt;
}

}  // namespace nfpo
