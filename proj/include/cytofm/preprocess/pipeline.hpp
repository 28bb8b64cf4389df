#pragma once

#include "cytofm/core/blob_io.hpp"
#include "cytofm/datasets/registry.hpp"
#include "cytofm/preprocess/magnification.hpp"
#include "cytofm/preprocess/relevance.hpp"
#include "cytofm/preprocess/tiling.hpp"

#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

namespace cytofm {

inline constexpr const char* kPatchManifestName = "patches.jsonl";

// One line of patches.jsonl.
struct PatchMeta {
  std::string image_id;
  int row = 0;
  int col = 0;
  double pad_fraction = 0;
  double effective_magnification = 40.0;
  int valid_height = kTileSize;
  int valid_width = kTileSize;
  double relevance = 1.0;
  std::string file;  // relative to the manifest directory
};

inline void to_json(json& j, const PatchMeta& m) {
  j = json{{"image_id", m.image_id},         {"row", m.row},
           {"col", m.col},                   {"pad_fraction", m.pad_fraction},
           {"effective_magnification", m.effective_magnification},
           {"valid_height", m.valid_height}, {"valid_width", m.valid_width},
           {"relevance", m.relevance},       {"file", m.file}};
}

inline void from_json(const json& j, PatchMeta& m) {
  m.image_id = j.at("image_id").get<std::string>();
  m.row = j.at("row").get<int>();
  m.col = j.at("col").get<int>();
  m.pad_fraction = j.value("pad_fraction", 0.0);
  m.effective_magnification = j.value("effective_magnification", 40.0);
  m.valid_height = j.value("valid_height", kTileSize);
  m.valid_width = j.value("valid_width", kTileSize);
  m.relevance = j.value("relevance", 1.0);
  m.file = j.at("file").get<std::string>();
}

inline std::string patch_file_name(const std::string& image_id, int row, int col) {
  return image_id + "_r" + std::to_string(row) + "_c" + std::to_string(col) + ".png";
}

inline std::vector<PatchMeta> read_patch_manifest(const fs::path& dir) {
  const fs::path path = dir / kPatchManifestName;
  std::ifstream in(path);
  CYTOFM_REQUIRE(static_cast<bool>(in), "missing patch manifest " + path.string());
  std::vector<PatchMeta> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line).get<PatchMeta>());
    } catch (const json::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

struct PreprocessOptions {
  int tile = kTileSize;
  int topk = 1500;
  double mpp_40x = kDefaultMpp40x;
  double reference_nucleus_um = kDefaultReferenceNucleusUm;
};

// Scale that brings a dataset to 40x, from its recorded magnification or from
// nucleus measurements. Datasets with neither are assumed to be at 40x.
inline double scale_to_40x(const DatasetRecord& record, const PreprocessOptions& opt) {
  if (record.magnification) {
    if (record.magnification->kind == Magnification::Kind::objective) return 40.0 / record.magnification->value;
    return record.magnification->value / opt.mpp_40x;
  }
  if (!record.nucleus_diameters_px.empty())
    return infer_magnification(record.nucleus_diameters_px, opt.reference_nucleus_um, opt.mpp_40x)
        .scale_factor_to_40x;
  return 1.0;
}

// rescale -> tile -> relevance top-k for one source image.
inline std::vector<ScoredPatch> preprocess_image(const RgbImage& image, const std::string& image_id,
                                                 double scale, const RelevanceScorer& scorer,
                                                 const PreprocessOptions& opt) {
  const RgbImage scaled = rescale_to_40x(image, scale);
  auto tiles = tile_image(scaled, image_id, opt.tile, 40.0);
  return relevance_topk(std::move(tiles), scorer, opt.topk);
}

struct PreprocessSummary {
  std::size_t images = 0;
  std::size_t patches = 0;
};

// Writes <out>/<image_id>_r<row>_c<col>.png for every kept patch and one
// patches.jsonl line per patch. Images are visited in sorted id order.
inline PreprocessSummary preprocess_dataset(const DatasetRecord& record, const fs::path& resolved_root,
                                            const fs::path& out_dir, const RelevanceScorer& scorer,
                                            const PreprocessOptions& opt) {
  fs::create_directories(out_dir);
  const double scale = scale_to_40x(record, opt);
  PreprocessSummary summary;
  std::ostringstream manifest;
  for (const auto& [id, path] : list_source_images(resolved_root)) {
    const RgbImage img = load_rgb(path);
    auto kept = preprocess_image(img, id, scale, scorer, opt);
    // Grid order on disk; the ranking only decides membership.
    std::sort(kept.begin(), kept.end(), [](const ScoredPatch& a, const ScoredPatch& b) {
      return std::tie(a.patch.grid_row, a.patch.grid_col) < std::tie(b.patch.grid_row, b.patch.grid_col);
    });
    for (const auto& sp : kept) {
      PatchMeta m;
      m.image_id = id;
      m.row = sp.patch.grid_row;
      m.col = sp.patch.grid_col;
      m.pad_fraction = sp.patch.pad_fraction;
      m.effective_magnification = sp.patch.effective_magnification;
      m.valid_height = sp.patch.valid_height;
      m.valid_width = sp.patch.valid_width;
      m.relevance = sp.score;
      m.file = patch_file_name(id, m.row, m.col);
      save_png(out_dir / m.file, sp.patch.pixels);
      manifest << json(m).dump() << "\n";
      ++summary.patches;
    }
    ++summary.images;
  }
  atomic_write_text(out_dir / kPatchManifestName, manifest.str());
  return summary;
}

}  // namespace cytofm
