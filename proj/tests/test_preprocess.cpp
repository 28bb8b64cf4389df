#include "cytofm/preprocess/pipeline.hpp"
#include "cytofm/core/random.hpp"

#include <gtest/gtest.h>
#include <opencv2/imgproc.hpp>

#include <filesystem>

namespace cytofm {
namespace {

// Pixel-by-pixel oracle: walk candidate tile origins along one axis, count
// the source pixels each tile covers and keep it when the padding it needs is
// at most half a tile.
int tiles_by_enumeration(int n, int tile) {
  int kept = 0;
  for (int origin = 0; origin < n; origin += tile) {
    int covered = 0;
    for (int p = origin; p < origin + tile; ++p) covered += p < n ? 1 : 0;
    if (tile - covered <= tile / 2) ++kept;
  }
  return kept;
}

RgbImage random_image(int h, int w, std::uint64_t seed) {
  RgbImage img(h, w);
  auto rng = make_rng(seed);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(1 + uniform_index(rng, 255));
  return img;
}

TEST(Tiling, ClosedFormMatchesEnumeration) {
  for (int n = 1; n <= 1024; ++n) ASSERT_EQ(tiles_along_axis(n), tiles_by_enumeration(n, 256)) << n;
  for (int n = 1; n <= 300; ++n) ASSERT_EQ(tiles_along_axis(n, 37), tiles_by_enumeration(n, 37)) << n;
}

TEST(Tiling, WorkedExamples) {
  struct Case { int n; std::size_t count; };
  for (auto [n, count] : {Case{512, 4}, Case{600, 4}, Case{456, 4}, Case{300, 1}}) {
    const auto tiles = tile_image(random_image(n, n, n), "img");
    EXPECT_EQ(tiles.size(), count) << n;
  }
  for (const auto& t : tile_image(random_image(512, 512, 1), "img")) EXPECT_EQ(t.pad_fraction, 0.0);
  EXPECT_TRUE(tile_image(random_image(100, 100, 1), "img").empty());
  EXPECT_THROW(tile_image(RgbImage(), "img"), ValidationError);
  EXPECT_THROW(tile_image(random_image(8, 8, 1), "img", 0), ValidationError);
}

TEST(Tiling, PatchInvariantsOnRandomShapes) {
  auto rng = make_rng(11);
  for (int trial = 0; trial < 60; ++trial) {
    const int h = 1 + static_cast<int>(uniform_index(rng, 1024));
    const int w = 1 + static_cast<int>(uniform_index(rng, 1024));
    const auto img = random_image(h, w, trial);
    const auto tiles = tile_image(img, "x");
    ASSERT_EQ(tiles.size(), static_cast<std::size_t>(tiles_by_enumeration(h, 256) * tiles_by_enumeration(w, 256)));
    std::vector<int> cover(static_cast<std::size_t>(h) * w, 0);
    for (const auto& t : tiles) {
      ASSERT_EQ(t.pixels.height, 256);
      ASSERT_EQ(t.pixels.width, 256);
      ASSERT_LE(t.pad_fraction, 0.5);
      for (int y = 0; y < 256; ++y)
        for (int x = 0; x < 256; ++x) {
          const int sy = t.grid_row * 256 + y, sx = t.grid_col * 256 + x;
          const bool inside = sy < h && sx < w;
          for (int c = 0; c < 3; ++c) {
            if (inside) ASSERT_EQ(t.pixels.at(y, x, c), img.at(sy, sx, c));
            else ASSERT_EQ(t.pixels.at(y, x, c), 0);
          }
          if (inside) ++cover[static_cast<std::size_t>(sy) * w + sx];
        }
    }
    for (int v : cover) ASSERT_LE(v, 1);
  }
}

TEST(Magnification, WorkedExamples) {
  const std::vector<double> at40{32, 32};
  const auto a = infer_magnification(at40, 8.0, 0.25);
  EXPECT_DOUBLE_EQ(a.mpp, 0.25);
  EXPECT_DOUBLE_EQ(a.scale_factor_to_40x, 1.0);
  const std::vector<double> at20{16};
  const auto b = infer_magnification(at20, 8.0, 0.25);
  EXPECT_DOUBLE_EQ(b.mpp, 0.5);
  EXPECT_DOUBLE_EQ(b.scale_factor_to_40x, 2.0);
  EXPECT_THROW(infer_magnification(std::vector<double>{}), ValidationError);
  EXPECT_THROW(infer_magnification(std::vector<double>{10, -1}), ValidationError);
}

TEST(Rescale, IdentityShapeAndConstants) {
  const auto img = random_image(123, 77, 3);
  EXPECT_EQ(rescale_to_40x(img, 1.0), img);
  const auto up = rescale_to_40x(img, 2.0);
  EXPECT_EQ(up.height, 246);
  EXPECT_EQ(up.width, 154);
  const auto down = rescale_to_40x(img, 0.37);
  EXPECT_EQ(down.height, std::lround(123 * 0.37));
  EXPECT_EQ(down.width, std::lround(77 * 0.37));
  const RgbImage flat(50, 60, 137);
  for (auto p : rescale_to_40x(flat, 1.7).pixels) ASSERT_EQ(p, 137);
  EXPECT_THROW(rescale_to_40x(img, 0.001), ValidationError);
  EXPECT_THROW(rescale_to_40x(img, 0.0), ValidationError);
}

// Draws dark discs on a light background and measures them back by
// equal-area diameter of connected components.
RgbImage nuclei_image(int size, double diameter, std::uint64_t seed) {
  cv::Mat m(size, size, CV_8UC3, cv::Scalar(235, 225, 230));
  auto rng = make_rng(seed);
  const int step = static_cast<int>(diameter * 2.5);
  for (int y = step / 2; y + step / 2 < size; y += step)
    for (int x = step / 2; x + step / 2 < size; x += step) {
      const cv::Point2d c(x + uniform(rng, -2, 2), y + uniform(rng, -2, 2));
      cv::circle(m, cv::Point(static_cast<int>(c.x), static_cast<int>(c.y)), static_cast<int>(diameter / 2),
                 cv::Scalar(60, 30, 90), cv::FILLED, cv::LINE_AA);
    }
  return from_cv_rgb(m);
}

std::vector<double> measure_nuclei(const RgbImage& img) {
  cv::Mat gray, bin, labels, stats, centroids;
  cv::cvtColor(as_cv(img), gray, cv::COLOR_RGB2GRAY);
  cv::threshold(gray, bin, 150, 255, cv::THRESH_BINARY_INV);
  const int n = cv::connectedComponentsWithStats(bin, labels, stats, centroids);
  std::vector<double> d;
  for (int i = 1; i < n; ++i) d.push_back(2.0 * std::sqrt(stats.at<int>(i, cv::CC_STAT_AREA) / M_PI));
  return d;
}

TEST(Magnification, RescaleThenRemeasureIsIdempotent) {
  for (double diameter : {12.0, 16.0, 24.0, 48.0}) {
    const auto img = nuclei_image(512, diameter, 7);
    const auto est = infer_magnification(measure_nuclei(img));
    const auto rescaled = rescale_to_40x(img, est.scale_factor_to_40x);
    const auto again = infer_magnification(measure_nuclei(rescaled));
    EXPECT_NEAR(again.scale_factor_to_40x, 1.0, 0.05) << "diameter " << diameter;
  }
}

class FixedScorer final : public RelevanceScorer {
 public:
  explicit FixedScorer(std::function<double(const PatchRecord&)> f) : f_(std::move(f)) {}
  double score(const PatchRecord& p) const override { return f_(p); }
  std::string name() const override { return "fixed"; }

 private:
  std::function<double(const PatchRecord&)> f_;
};

std::vector<PatchRecord> grid_records(int rows, int cols) {
  std::vector<PatchRecord> out;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      PatchRecord p;
      p.grid_row = r;
      p.grid_col = c;
      out.push_back(std::move(p));
    }
  return out;
}

TEST(RelevanceTopK, CountsAndOrdering) {
  FixedScorer hashed([](const PatchRecord& p) { return static_cast<double>((p.grid_row * 7919 + p.grid_col * 104729) % 1000) / 999.0; });
  const auto top = relevance_topk(grid_records(40, 50), hashed, 1500);
  EXPECT_EQ(top.size(), 1500u);
  for (std::size_t i = 1; i < top.size(); ++i) ASSERT_GE(top[i - 1].score, top[i].score);
  EXPECT_EQ(relevance_topk(grid_records(2, 5), hashed, 1500).size(), 10u);
  EXPECT_THROW(relevance_topk(grid_records(2, 2), hashed, 0), ValidationError);
}

TEST(RelevanceTopK, TiesFollowGridOrder) {
  FixedScorer constant([](const PatchRecord&) { return 0.5; });
  auto records = grid_records(6, 7);
  auto rng = make_rng(3);
  shuffle(records, rng);
  const auto top = relevance_topk(records, constant, 10);
  // Sort oracle: grid order.
  auto expected = grid_records(6, 7);
  for (std::size_t i = 0; i < top.size(); ++i) {
    EXPECT_EQ(top[i].patch.grid_row, expected[i].grid_row);
    EXPECT_EQ(top[i].patch.grid_col, expected[i].grid_col);
  }
}

TEST(RelevanceTopK, RejectsOutOfRangeScores) {
  FixedScorer bad([](const PatchRecord&) { return 1.5; });
  EXPECT_THROW(relevance_topk(grid_records(1, 2), bad), ValidationError);
  FixedScorer nan([](const PatchRecord&) { return std::nan(""); });
  EXPECT_THROW(relevance_topk(grid_records(1, 2), nan), ValidationError);
}

TEST(ForegroundScorer, CountsOnlyUnpaddedPixels) {
  PatchRecord p;
  p.pixels = RgbImage(256, 256, 0);
  p.valid_height = 128;
  p.valid_width = 256;
  for (int y = 0; y < 128; ++y)
    for (int x = 0; x < 256; ++x)
      for (int c = 0; c < 3; ++c) p.pixels.at(y, x, c) = x < 64 ? 50 : 250;
  EXPECT_DOUBLE_EQ(ForegroundFractionScorer().score(p), 0.25);
}

TEST(Pipeline, WritesPatchesAndManifest) {
  const auto dir = std::filesystem::temp_directory_path() / "cytofm_pre_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir / "src");
  save_png(dir / "src" / "a.png", nuclei_image(512, 8, 1));
  save_png(dir / "src" / "b.png", nuclei_image(300, 8, 2));
  DatasetRecord rec;
  rec.name = "toy";
  rec.roles = {DatasetRole::pretrain};
  rec.magnification = Magnification{Magnification::Kind::objective, 20.0};
  PreprocessOptions opt;
  opt.topk = 3;
  const auto summary = preprocess_dataset(rec, dir / "src", dir / "out", ForegroundFractionScorer(), opt);
  // a: 1024x1024 after x2 -> 16 tiles, top 3 kept; b: 600x600 -> 4 tiles, 3 kept.
  EXPECT_EQ(summary.images, 2u);
  EXPECT_EQ(summary.patches, 6u);
  const auto metas = read_patch_manifest(dir / "out");
  ASSERT_EQ(metas.size(), 6u);
  for (const auto& m : metas) {
    const auto img = load_rgb(dir / "out" / m.file);
    EXPECT_EQ(img.height, 256);
    EXPECT_EQ(img.width, 256);
    EXPECT_EQ(m.effective_magnification, 40.0);
  }
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace cytofm
