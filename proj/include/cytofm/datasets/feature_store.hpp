#pragma once

// On-disk feature store: "<name>.manifest.json" describing the bags and
// "<name>.f32", a row-major [total_rows x dim] block of little-endian float32.

#include "cytofm/core/blob_io.hpp"
#include "cytofm/mil/feature_bag.hpp"

#include <string>
#include <vector>

namespace cytofm {

inline constexpr int kFeatureStoreVersion = 1;

struct FeatureStoreInfo {
  std::string encoder_id;
  int dim = 0;
  std::size_t total_rows = 0;
  std::size_t blob_bytes = 0;
};

inline FeatureStoreInfo write_feature_store(const std::vector<FeatureBag>& bags, const fs::path& path,
                                            const std::string& encoder_id = "unknown") {
  CYTOFM_REQUIRE(!bags.empty(), "feature store needs at least one bag");
  const auto dim = bags.front().dim();
  CYTOFM_REQUIRE(dim > 0, "feature dimension must be positive");
  std::vector<float> flat;
  json entries = json::array();
  std::size_t offset_rows = 0;
  for (const auto& b : bags) {
    CYTOFM_REQUIRE(b.dim() == dim, "bag '" + b.image_id + "' has dim " + std::to_string(b.dim()) +
                                       ", expected " + std::to_string(dim));
    CYTOFM_REQUIRE(b.size() >= 1, "bag '" + b.image_id + "' is empty");
    entries.push_back({{"image_id", b.image_id},
                       {"label", b.label},
                       {"rows", b.size()},
                       {"offset_bytes", offset_rows * static_cast<std::size_t>(dim) * 4}});
    flat.insert(flat.end(), b.features.data(), b.features.data() + b.features.size());
    offset_rows += static_cast<std::size_t>(b.size());
  }
  const auto paths = store_paths(path);
  const auto bytes = encode_f32le(flat);
  json manifest{{"format", "cytofm-feature-store"},
                {"version", kFeatureStoreVersion},
                {"encoder_id", encoder_id},
                {"dim", dim},
                {"total_rows", offset_rows},
                {"blob", paths.blob.filename().string()},
                {"bags", entries}};
  atomic_write(paths.blob, bytes);
  write_json(paths.manifest, manifest);
  return {encoder_id, static_cast<int>(dim), offset_rows, bytes.size()};
}

inline FeatureStoreInfo read_feature_store_info(const fs::path& path) {
  const json m = read_json(store_paths(path).manifest);
  FeatureStoreInfo info;
  info.encoder_id = m.value("encoder_id", std::string("unknown"));
  info.dim = m.at("dim").get<int>();
  info.total_rows = m.at("total_rows").get<std::size_t>();
  info.blob_bytes = info.total_rows * static_cast<std::size_t>(info.dim) * 4;
  return info;
}

inline std::vector<FeatureBag> read_feature_store(const fs::path& path) {
  const auto paths = store_paths(path);
  const json m = read_json(paths.manifest);
  const int version = m.value("version", -1);
  CYTOFM_REQUIRE(version == kFeatureStoreVersion,
                 "unknown feature store version " + std::to_string(version));
  const int dim = m.at("dim").get<int>();
  CYTOFM_REQUIRE(dim > 0, "feature store dim must be positive");
  const auto total_rows = m.at("total_rows").get<std::size_t>();
  std::size_t sum_rows = 0;
  for (const auto& e : m.at("bags")) sum_rows += e.at("rows").get<std::size_t>();
  CYTOFM_REQUIRE(sum_rows == total_rows, "manifest bag sizes sum to " + std::to_string(sum_rows) +
                                             " but total_rows is " + std::to_string(total_rows));
  const auto bytes = read_bytes(paths.blob);
  const std::size_t expected = total_rows * static_cast<std::size_t>(dim) * 4;
  CYTOFM_REQUIRE(bytes.size() == expected, "feature blob holds " + std::to_string(bytes.size()) +
                                               " bytes, manifest expects " + std::to_string(expected));
  const auto values = decode_f32le(bytes);
  std::vector<FeatureBag> bags;
  for (const auto& e : m.at("bags")) {
    FeatureBag b;
    b.image_id = e.at("image_id").get<std::string>();
    b.label = e.value("label", kUnlabeled);
    const auto rows = e.at("rows").get<std::size_t>();
    const auto offset = e.at("offset_bytes").get<std::size_t>();
    CYTOFM_REQUIRE(offset % 4 == 0 && offset + rows * dim * 4 <= bytes.size(),
                   "bag '" + b.image_id + "' lies outside the blob");
    b.features.resize(static_cast<Eigen::Index>(rows), dim);
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(offset / 4), rows * dim, b.features.data());
    bags.push_back(std::move(b));
  }
  return bags;
}

}  // namespace cytofm
