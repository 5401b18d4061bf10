#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hood/io.hpp"
#include "hood/model.hpp"

namespace hood {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout (all little-endian):
//   "HOOD" | u32 version | u32 tensor count |
//   per tensor: u32 name length | UTF-8 name | u32 rank | u32 dims[rank] | f32 data[]
inline std::vector<std::uint8_t> encode_checkpoint(const HoodModel<float>& model) {
  ByteWriter w;
  w.bytes("HOOD");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(model.params().size()));
  for (const auto& [name, t] : model.params()) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t.storage()) w.f32(v);
  }
  return w.buffer();
}

inline HoodModel<float> decode_checkpoint(ByteReader r) {
  r.expect_magic("HOOD");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint: unsupported version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  ParamSet<float> params;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string name = r.bytes(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank > 2) throw FormatError("checkpoint: tensor '" + name + "' has rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    Tensor<float> t(shape);
    for (float& v : t.storage()) v = r.f32();
    params.emplace(name, std::move(t));
  }
  if (!r.at_end()) throw FormatError("checkpoint: trailing bytes after last tensor");
  try {
    return HoodModel<float>::from_params(std::move(params));
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const std::string& path, const HoodModel<float>& model) {
  write_file(path, encode_checkpoint(model));
}

inline HoodModel<float> load_checkpoint(const std::string& path) {
  return decode_checkpoint(ByteReader::from_file(path));
}

}  // namespace hood
