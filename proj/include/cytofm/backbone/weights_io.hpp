#pragma once

// Weights container: "<stem>.manifest.json" (parameter names, shapes, byte
// offsets, metadata) + "<stem>.f32" (little-endian float32, concatenated).

#include "cytofm/backbone/params.hpp"
#include "cytofm/core/blob_io.hpp"

#include <map>
#include <string>
#include <vector>

namespace cytofm {

inline constexpr int kWeightsContainerVersion = 1;

struct TensorContainer {
  std::string kind;
  json metadata = json::object();
  std::vector<std::pair<std::string, Matrix<float>>> tensors;

  const Matrix<float>& at(const std::string& name) const {
    for (const auto& [n, m] : tensors)
      if (n == name) return m;
    throw ValidationError("container has no tensor '" + name + "'");
  }
  bool contains(const std::string& name) const {
    for (const auto& [n, m] : tensors)
      if (n == name) return true;
    return false;
  }
};

inline void write_container(const fs::path& path, const TensorContainer& c) {
  std::vector<float> flat;
  json entries = json::array();
  std::size_t offset = 0;
  for (const auto& [name, m] : c.tensors) {
    entries.push_back({{"name", name},
                       {"shape", {m.rows(), m.cols()}},
                       {"offset_bytes", offset * 4},
                       {"count", m.size()}});
    flat.insert(flat.end(), m.data(), m.data() + m.size());
    offset += static_cast<std::size_t>(m.size());
  }
  const auto paths = store_paths(path);
  atomic_write(paths.blob, encode_f32le(flat));
  write_json(paths.manifest, json{{"format", "cytofm-weights"},
                                  {"version", kWeightsContainerVersion},
                                  {"kind", c.kind},
                                  {"metadata", c.metadata},
                                  {"blob", paths.blob.filename().string()},
                                  {"total_floats", offset},
                                  {"tensors", entries}});
}

inline TensorContainer read_container(const fs::path& path) {
  const auto paths = store_paths(path);
  const json m = read_json(paths.manifest);
  const int version = m.value("version", -1);
  CYTOFM_REQUIRE(version == kWeightsContainerVersion,
                 "unknown weights container version " + std::to_string(version));
  const auto bytes = read_bytes(paths.blob);
  const auto total = m.at("total_floats").get<std::size_t>();
  CYTOFM_REQUIRE(bytes.size() == total * 4, "weights blob holds " + std::to_string(bytes.size()) +
                                                " bytes, manifest expects " + std::to_string(total * 4));
  const auto values = decode_f32le(bytes);
  TensorContainer c;
  c.kind = m.value("kind", std::string());
  c.metadata = m.value("metadata", json::object());
  for (const auto& e : m.at("tensors")) {
    const auto shape = e.at("shape").get<std::vector<Eigen::Index>>();
    CYTOFM_REQUIRE(shape.size() == 2, "tensor shapes are stored as [rows, cols]");
    const auto offset = e.at("offset_bytes").get<std::size_t>() / 4;
    const auto count = static_cast<std::size_t>(shape[0] * shape[1]);
    CYTOFM_REQUIRE(offset + count <= values.size(), "tensor '" + e.at("name").get<std::string>() +
                                                        "' lies outside the blob");
    Matrix<float> t(shape[0], shape[1]);
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(offset), count, t.data());
    c.tensors.emplace_back(e.at("name").get<std::string>(), std::move(t));
  }
  return c;
}

template <class P>
void append_params(TensorContainer& c, const P& p, const std::string& prefix) {
  visit_params(p, prefix, [&](const std::string& name, const Matrix<float>& m) { c.tensors.emplace_back(name, m); });
}

// Fills every parameter of p (already shaped by init) from the container,
// checking shapes.
template <class P>
void load_params(const TensorContainer& c, P& p, const std::string& prefix) {
  visit_params(p, prefix, [&](const std::string& name, Matrix<float>& m) {
    const auto& src = c.at(name);
    CYTOFM_REQUIRE(src.rows() == m.rows() && src.cols() == m.cols(),
                   "shape mismatch for '" + name + "'");
    m = src;
  });
}

// A frozen encoder: backbone weights only, no projection heads.
struct FrozenEncoder {
  ViTConfig config;
  BackboneParams<float> weights;
  std::string id = "cytofm-encoder";
};

inline void save_encoder(const fs::path& path, const FrozenEncoder& e) {
  TensorContainer c;
  c.kind = "encoder";
  c.metadata = {{"vit", e.config}, {"encoder_id", e.id}};
  append_params(c, e.weights, "backbone");
  write_container(path, c);
}

inline FrozenEncoder load_encoder(const fs::path& path) {
  const auto c = read_container(path);
  CYTOFM_REQUIRE(c.metadata.contains("vit"), "weights container carries no ViT config");
  FrozenEncoder e;
  e.config = c.metadata["vit"].get<ViTConfig>();
  e.config.validate();
  e.id = c.metadata.value("encoder_id", std::string("cytofm-encoder"));
  e.weights = init_vit<float>(e.config, 0).backbone;
  load_params(c, e.weights, "backbone");
  return e;
}

}  // namespace cytofm
