#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "mmkd/io.hpp"
#include "mmkd/tensor.hpp"

namespace mmkd {

// Parameter checkpoint: "MMKDCKPT" magic, u32 version, length-prefixed JSON
// manifest (tensor names, shapes, byte offsets into the payload, plus free-
// form metadata), then the raw float payloads. Round-trips bit-exactly.

inline constexpr char kCheckpointMagic[] = "MMKDCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, TensorF>> tensors;  // save order

  void add(std::string name, TensorF t) {
    tensors.emplace_back(std::move(name), std::move(t));
  }

  bool has(const std::string& name) const {
    for (const auto& [k, v] : tensors)
      if (k == name) return true;
    return false;
  }

  const TensorF& tensor(const std::string& name) const {
    for (const auto& [k, v] : tensors)
      if (k == name) return v;
    throw IoError("checkpoint has no tensor named '" + name + "'");
  }
};

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["meta"] = ckpt.meta;
  auto entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    entries.push_back({{"name", name},
                       {"shape", t.shape()},
                       {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.numel()) * 4;
  }
  manifest["tensors"] = std::move(entries);
  const std::string mjson = manifest.dump();

  std::vector<std::uint8_t> out;
  out.reserve(16 + mjson.size() + offset);
  io::put_bytes(out, kCheckpointMagic, 8);
  io::put_u32(out, kCheckpointVersion);
  io::put_u32(out, static_cast<std::uint32_t>(mjson.size()));
  io::put_bytes(out, mjson.data(), mjson.size());
  for (const auto& [name, t] : ckpt.tensors)
    io::put_f32s(out, t.data(), static_cast<std::size_t>(t.numel()));
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& buf) {
  io::Reader r(buf);
  if (r.bytes_as_string(8) != std::string(kCheckpointMagic, 8))
    throw IoError("not a checkpoint file (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t mlen = r.u32();
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(r.bytes_as_string(mlen));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint manifest is not valid JSON: ") +
                  e.what());
  }
  Checkpoint ckpt;
  ckpt.meta = manifest.value("meta", nlohmann::json::object());
  const std::size_t payload_start = r.pos();
  for (const auto& e : manifest.at("tensors")) {
    const std::string name = e.at("name").get<std::string>();
    const Shape shape = e.at("shape").get<Shape>();
    const auto offset = e.at("offset").get<std::uint64_t>();
    TensorF t(shape);
    io::Reader pr(buf.data() + payload_start, buf.size() - payload_start);
    pr.skip(offset);
    pr.f32s(t.data(), static_cast<std::size_t>(t.numel()));
    ckpt.add(name, std::move(t));
  }
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path,
                            const Checkpoint& ckpt) {
  io::write_file(path, encode_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path));
}

}  // namespace mmkd
