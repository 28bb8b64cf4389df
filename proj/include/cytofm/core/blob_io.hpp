#pragma once

// Shared on-disk plumbing: atomic file replacement, little-endian float32
// blobs, and the "<stem>.manifest.json" + "<stem>.f32" naming convention used
// by both the feature store and the weights container.

#include "cytofm/core/error.hpp"

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <unistd.h>
#include <vector>

namespace cytofm {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct StorePaths {
  fs::path manifest;
  fs::path blob;
};

// Accepts "dir/name", "dir/name.manifest.json" or "dir/name.f32".
inline StorePaths store_paths(const fs::path& p) {
  std::string s = p.string();
  for (const std::string suffix : {".manifest.json", ".f32"}) {
    if (s.size() > suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0) {
      s.resize(s.size() - suffix.size());
      break;
    }
  }
  return {fs::path(s + ".manifest.json"), fs::path(s + ".f32")};
}

// Writes to a sibling temp file and renames it over the target.
inline void atomic_write(const fs::path& target, std::span<const char> bytes) {
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  fs::path tmp = target;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeError("cannot open for writing: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw RuntimeError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp);
    throw RuntimeError("rename failed for " + target.string() + ": " + ec.message());
  }
}

inline void atomic_write_text(const fs::path& target, const std::string& text) {
  atomic_write(target, std::span<const char>(text.data(), text.size()));
}

inline void write_json(const fs::path& target, const json& j) {
  atomic_write_text(target, j.dump(2) + "\n");
}

// Enum from its JSON string; unknown names are rejected rather than mapped
// to the first enumerator.
template <class E>
E enum_from_json(const json& j, const std::string& what) {
  const E e = j.get<E>();
  if (json(e) != j) throw ValidationError("unknown " + what + " " + j.dump());
  return e;
}

template <class E>
E enum_value(const json& obj, const std::string& key, E fallback) {
  return obj.contains(key) ? enum_from_json<E>(obj.at(key), key) : fallback;
}

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline std::vector<char> encode_f32le(std::span<const float> values) {
  std::vector<char> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(values[i]);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    std::memcpy(bytes.data() + 4 * i, &bits, 4);
  }
  return bytes;
}

inline std::vector<float> decode_f32le(std::span<const char> bytes) {
  if (bytes.size() % 4 != 0) throw ValidationError("blob size is not a multiple of 4 bytes");
  std::vector<float> values(bytes.size() / 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, bytes.data() + 4 * i, 4);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    values[i] = std::bit_cast<float>(bits);
  }
  return values;
}

inline std::vector<char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<char> bytes(size);
  in.read(bytes.data(), static_cast<std::streamsize>(size));
  if (!in) throw RuntimeError("read failed: " + path.string());
  return bytes;
}

}  // namespace cytofm
