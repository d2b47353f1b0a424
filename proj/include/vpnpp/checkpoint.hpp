#pragma once

// Checkpoint archive: "VPCK", u16 version, u32 metadata length + UTF-8 JSON
// metadata, u32 blob count, then per blob: u16 name length, name, u8 frozen,
// u8 rank, u32 dims, float32 payload. Little-endian throughout.

#include <string>
#include <vector>

#include <json.hpp>

#include "vpnpp/syndata.hpp"

namespace vpnpp {

inline constexpr std::array<char, 4> kCheckpointMagic{'V', 'P', 'C', 'K'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct ParamBlob {
  std::string name;
  Tensor<float> value;
  bool frozen = false;
};

struct Checkpoint {
  std::string recipe;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<ParamBlob> blobs;

  const ParamBlob* find(const std::string& name) const {
    for (const auto& b : blobs)
      if (b.name == name) return &b;
    return nullptr;
  }

  bool has_prefix(const std::string& prefix) const {
    for (const auto& b : blobs)
      if (b.name.rfind(prefix, 0) == 0) return true;
    return false;
  }

  /// FNV-1a over names and payload bytes of blobs under `prefix`.
  std::uint64_t hash(const std::string& prefix = "") const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& b : blobs) {
      if (b.name.rfind(prefix, 0) != 0) continue;
      h = fnv1a(b.name.data(), b.name.size(), h);
      h = fnv1a(b.value.data(), b.value.size() * sizeof(float), h);
    }
    return h;
  }
};

inline std::string encode_checkpoint(const Checkpoint& c) {
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_le<std::uint16_t>(out, kCheckpointVersion);
  nlohmann::json meta = c.meta;
  meta["recipe"] = c.recipe;
  const std::string m = meta.dump();
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.size()));
  out += m;
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.blobs.size()));
  for (const auto& b : c.blobs) {
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(b.name.size()));
    out += b.name;
    out.push_back(b.frozen ? 1 : 0);
    out.push_back(static_cast<char>(b.value.rank()));
    for (auto d : b.value.shape()) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (float v : b.value.vec()) detail::put_f32(out, v);
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  auto need = [&](std::size_t pos, std::size_t n) {
    if (pos + n > bytes.size()) throw MalformedHeader("checkpoint truncated");
  };
  need(0, 10);
  if (!std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin()))
    throw MalformedHeader("bad checkpoint magic");
  std::size_t pos = 4;
  if (detail::get_le<std::uint16_t>(bytes, pos) != kCheckpointVersion)
    throw MalformedHeader("unsupported checkpoint version");
  const auto mlen = detail::get_le<std::uint32_t>(bytes, pos);
  need(pos, mlen);
  Checkpoint c;
  try {
    c.meta = nlohmann::json::parse(bytes.substr(pos, mlen));
    c.recipe = c.meta.at("recipe").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw MalformedHeader(std::string("checkpoint metadata: ") + e.what());
  }
  pos += mlen;
  need(pos, 4);
  const auto count = detail::get_le<std::uint32_t>(bytes, pos);
  for (std::uint32_t i = 0; i < count; ++i) {
    need(pos, 2);
    const auto nlen = detail::get_le<std::uint16_t>(bytes, pos);
    need(pos, nlen + 2u);
    ParamBlob b;
    b.name = bytes.substr(pos, nlen);
    pos += nlen;
    b.frozen = bytes[pos++] != 0;
    const auto rank = static_cast<std::size_t>(static_cast<unsigned char>(bytes[pos++]));
    need(pos, 4 * rank);
    Shape s(rank);
    for (auto& d : s) d = detail::get_le<std::uint32_t>(bytes, pos);
    const std::size_t n = shape_numel(s);
    need(pos, 4 * n);
    std::vector<float> data(n);
    for (auto& v : data) v = detail::get_f32(bytes, pos);
    b.value = Tensor<float>(std::move(s), std::move(data));
    c.blobs.push_back(std::move(b));
  }
  if (pos != bytes.size()) throw MalformedHeader("trailing bytes after checkpoint blobs");
  return c;
}

inline void save_checkpoint(const fs::path& p, const Checkpoint& c) { detail::write_file(p, encode_checkpoint(c)); }

inline Checkpoint load_checkpoint(const fs::path& p) {
  if (!fs::exists(p)) throw MissingArtifact("checkpoint not found: " + p.string());
  return decode_checkpoint(detail::read_file(p));
}

}  // namespace vpnpp
