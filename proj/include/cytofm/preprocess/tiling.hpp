#pragma once

#include "cytofm/preprocess/image.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace cytofm {

inline constexpr int kTileSize = 256;

// One tile cut from a 40x-equivalent source image. Tiles on the bottom/right
// border may be zero-padded; valid_height/valid_width give the unpadded
// extent anchored at the top-left corner.
struct PatchRecord {
  std::string source_image_id;
  int grid_row = 0;
  int grid_col = 0;
  RgbImage pixels;
  int valid_height = 0;
  int valid_width = 0;
  // Largest per-axis padded share of the tile, so it never exceeds 0.5.
  double pad_fraction = 0.0;
  double effective_magnification = 40.0;
};

// Number of tiles along an axis of length n: full tiles plus one partial tile
// when its padding need is at most half a tile.
inline int tiles_along_axis(int n, int tile = kTileSize) {
  const int full = n / tile;
  const int rem = n % tile;
  return full + ((rem > 0 && tile - rem <= tile / 2) ? 1 : 0);
}

inline std::vector<PatchRecord> tile_image(const RgbImage& image, const std::string& image_id,
                                           int tile = kTileSize,
                                           double effective_magnification = 40.0) {
  CYTOFM_REQUIRE(tile > 0, "tile size must be positive");
  CYTOFM_REQUIRE(!image.empty(), "cannot tile an empty image");
  const int rows = tiles_along_axis(image.height, tile);
  const int cols = tiles_along_axis(image.width, tile);
  std::vector<PatchRecord> out;
  out.reserve(static_cast<std::size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      PatchRecord p;
      p.source_image_id = image_id;
      p.grid_row = r;
      p.grid_col = c;
      p.effective_magnification = effective_magnification;
      p.pixels = RgbImage(tile, tile, 0);
      const int y0 = r * tile;
      const int x0 = c * tile;
      p.valid_height = std::min(tile, image.height - y0);
      p.valid_width = std::min(tile, image.width - x0);
      for (int y = 0; y < p.valid_height; ++y) {
        const auto* src = &image.pixels[(static_cast<std::size_t>(y0 + y) * image.width + x0) * 3];
        std::copy(src, src + static_cast<std::size_t>(p.valid_width) * 3,
                  &p.pixels.pixels[static_cast<std::size_t>(y) * tile * 3]);
      }
      const int pad = std::max(tile - p.valid_height, tile - p.valid_width);
      p.pad_fraction = static_cast<double>(pad) / tile;
      out.push_back(std::move(p));
    }
  }
  return out;
}

}  // namespace cytofm
