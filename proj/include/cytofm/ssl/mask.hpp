#pragma once

#include "cytofm/core/error.hpp"
#include "cytofm/core/random.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace cytofm {

struct BlockMaskConfig {
  double min_aspect = 0.3;
  int min_block_area = 2;
  int attempts_per_block = 10;
};

// Row-major G x G boolean mask with exactly round(ratio * G^2) positions set.
// Rectangular blocks (aspect ratio in [min_aspect, 1/min_aspect]) are placed
// until no new block fits the remaining budget; any shortfall is filled with
// single cells adjacent to the existing mask.
inline std::vector<bool> blockwise_mask(int grid_side, double ratio, std::uint64_t seed,
                                        const BlockMaskConfig& cfg = {}) {
  CYTOFM_REQUIRE(grid_side > 0, "grid side must be positive");
  CYTOFM_REQUIRE(ratio >= 0.0 && ratio <= 1.0, "mask ratio must lie in [0,1]");
  const int g = grid_side;
  const int total = g * g;
  const int target = static_cast<int>(std::lround(ratio * total));
  std::vector<bool> mask(static_cast<std::size_t>(total), false);
  if (target == 0) return mask;
  if (target == total) return std::vector<bool>(static_cast<std::size_t>(total), true);

  auto rng = make_rng(seed, {0xb10c});
  auto at = [&](int y, int x) { return mask[static_cast<std::size_t>(y * g + x)]; };
  int count = 0;
  const double log_lo = std::log(cfg.min_aspect);
  const double log_hi = std::log(1.0 / cfg.min_aspect);

  while (count < target) {
    const int budget = target - count;
    if (budget < cfg.min_block_area) break;
    int added = 0;
    for (int attempt = 0; attempt < cfg.attempts_per_block && added == 0; ++attempt) {
      const double area = uniform(rng, cfg.min_block_area, budget);
      const double aspect = std::exp(uniform(rng, log_lo, log_hi));
      const int h = static_cast<int>(std::lround(std::sqrt(area * aspect)));
      const int w = static_cast<int>(std::lround(std::sqrt(area / aspect)));
      if (h < 1 || w < 1 || h > g || w > g || h * w < cfg.min_block_area) continue;
      const int top = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(g - h + 1)));
      const int left = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(g - w + 1)));
      int fresh = 0;
      for (int y = top; y < top + h; ++y)
        for (int x = left; x < left + w; ++x) fresh += at(y, x) ? 0 : 1;
      if (fresh > 0 && fresh <= budget) {
        for (int y = top; y < top + h; ++y)
          for (int x = left; x < left + w; ++x) mask[static_cast<std::size_t>(y * g + x)] = true;
        added = fresh;
      }
    }
    if (added == 0) break;
    count += added;
  }

  // Residual fill, preferring cells 4-adjacent to the current mask.
  while (count < target) {
    std::vector<int> frontier, free_cells;
    for (int y = 0; y < g; ++y)
      for (int x = 0; x < g; ++x) {
        if (at(y, x)) continue;
        free_cells.push_back(y * g + x);
        const bool adj = (y > 0 && at(y - 1, x)) || (y + 1 < g && at(y + 1, x)) || (x > 0 && at(y, x - 1)) ||
                         (x + 1 < g && at(y, x + 1));
        if (adj) frontier.push_back(y * g + x);
      }
    const auto& pool = frontier.empty() ? free_cells : frontier;
    mask[static_cast<std::size_t>(pool[uniform_index(rng, pool.size())])] = true;
    ++count;
  }
  return mask;
}

}  // namespace cytofm
