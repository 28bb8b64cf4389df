#pragma once

#include "cytofm/preprocess/tiling.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

namespace cytofm {

// Probability that a patch contains diagnostically relevant content.
class RelevanceScorer {
 public:
  virtual ~RelevanceScorer() = default;
  virtual double score(const PatchRecord& patch) const = 0;
  virtual std::string name() const = 0;
};

// Fraction of unpadded pixels whose luminance falls below a background
// threshold. Stands in for a trained relevance classifier.
class ForegroundFractionScorer final : public RelevanceScorer {
 public:
  explicit ForegroundFractionScorer(double threshold = 220.0) : threshold_(threshold) {}

  double score(const PatchRecord& patch) const override {
    const auto& img = patch.pixels;
    const int h = patch.valid_height > 0 ? patch.valid_height : img.height;
    const int w = patch.valid_width > 0 ? patch.valid_width : img.width;
    if (h <= 0 || w <= 0) return 0.0;
    std::size_t fg = 0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double lum = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
        if (lum < threshold_) ++fg;
      }
    }
    return static_cast<double>(fg) / (static_cast<double>(h) * w);
  }

  std::string name() const override { return "foreground_fraction"; }

 private:
  double threshold_;
};

struct ScoredPatch {
  PatchRecord patch;
  double score = 0;
};

// Keeps the min(k, n) highest-scoring patches in descending score order; equal
// scores fall back to (grid_row, grid_col) order.
inline std::vector<ScoredPatch> relevance_topk(std::vector<PatchRecord> patches,
                                               const RelevanceScorer& scorer, int k = 1500) {
  CYTOFM_REQUIRE(k >= 1, "k must be at least 1");
  std::vector<ScoredPatch> scored;
  scored.reserve(patches.size());
  for (auto& p : patches) {
    const double s = scorer.score(p);
    if (!(s >= 0.0 && s <= 1.0))
      throw ValidationError("scorer '" + scorer.name() + "' returned " + std::to_string(s) +
                            " outside [0,1]");
    scored.push_back({std::move(p), s});
  }
  std::stable_sort(scored.begin(), scored.end(), [](const ScoredPatch& a, const ScoredPatch& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.patch.grid_row != b.patch.grid_row) return a.patch.grid_row < b.patch.grid_row;
    return a.patch.grid_col < b.patch.grid_col;
  });
  if (scored.size() > static_cast<std::size_t>(k)) scored.resize(static_cast<std::size_t>(k));
  return scored;
}

}  // namespace cytofm
