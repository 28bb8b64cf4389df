#pragma once

#include "cytofm/core/error.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

namespace cytofm {

// 8-bit RGB raster, interleaved HWC.
struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage() = default;
  RgbImage(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

  bool empty() const { return height <= 0 || width <= 0; }

  std::uint8_t& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  std::uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

// Zero-copy view as a cv::Mat in RGB channel order.
inline cv::Mat as_cv(const RgbImage& img) {
  return cv::Mat(img.height, img.width, CV_8UC3, const_cast<std::uint8_t*>(img.pixels.data()));
}

inline RgbImage from_cv_rgb(const cv::Mat& m) {
  CYTOFM_REQUIRE(m.type() == CV_8UC3, "expected an 8-bit 3-channel image");
  RgbImage out(m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y)
    std::memcpy(&out.pixels[static_cast<std::size_t>(y) * m.cols * 3], m.ptr(y),
                static_cast<std::size_t>(m.cols) * 3);
  return out;
}

inline RgbImage load_rgb(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw ValidationError("unreadable image: " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return from_cv_rgb(rgb);
}

inline void save_png(const std::filesystem::path& path, const RgbImage& img) {
  cv::Mat bgr;
  cv::cvtColor(as_cv(img), bgr, cv::COLOR_RGB2BGR);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), bgr)) throw RuntimeError("failed to write " + path.string());
}

inline bool is_image_file(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".tif" || ext == ".tiff" ||
         ext == ".bmp";
}

}  // namespace cytofm
