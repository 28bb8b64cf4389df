#pragma once

#include "cytofm/preprocess/image.hpp"

#include <cmath>
#include <numeric>
#include <span>

namespace cytofm {

inline constexpr double kDefaultMpp40x = 0.25;
inline constexpr double kDefaultReferenceNucleusUm = 8.0;

struct MagnificationEstimate {
  double mean_nucleus_px = 0;
  double reference_nucleus_um = 0;
  double mpp = 0;
  double scale_factor_to_40x = 0;
};

// Resolution from the ratio between a known physical nucleus size and the
// measured mean nucleus size in pixels.
inline MagnificationEstimate infer_magnification(std::span<const double> nucleus_diameters_px,
                                                 double reference_nucleus_um = kDefaultReferenceNucleusUm,
                                                 double mpp_40x_reference = kDefaultMpp40x) {
  CYTOFM_REQUIRE(!nucleus_diameters_px.empty(), "at least one nucleus measurement is required");
  CYTOFM_REQUIRE(reference_nucleus_um > 0 && mpp_40x_reference > 0,
                 "reference nucleus size and 40x mpp must be positive");
  for (double d : nucleus_diameters_px)
    CYTOFM_REQUIRE(std::isfinite(d) && d > 0, "nucleus diameters must be positive");
  MagnificationEstimate est;
  est.mean_nucleus_px = std::accumulate(nucleus_diameters_px.begin(), nucleus_diameters_px.end(), 0.0) /
                        static_cast<double>(nucleus_diameters_px.size());
  est.reference_nucleus_um = reference_nucleus_um;
  est.mpp = reference_nucleus_um / est.mean_nucleus_px;
  est.scale_factor_to_40x = est.mpp / mpp_40x_reference;
  return est;
}

// Bilinear resize so that output dims are round(input dims * scale).
inline RgbImage rescale_to_40x(const RgbImage& image, double scale_factor) {
  CYTOFM_REQUIRE(std::isfinite(scale_factor) && scale_factor > 0, "scale factor must be positive");
  CYTOFM_REQUIRE(!image.empty(), "cannot rescale an empty image");
  const int h = static_cast<int>(std::lround(image.height * scale_factor));
  const int w = static_cast<int>(std::lround(image.width * scale_factor));
  CYTOFM_REQUIRE(h > 0 && w > 0, "rescaled image would have a zero dimension");
  if (h == image.height && w == image.width) return image;
  cv::Mat out;
  cv::resize(as_cv(image), out, cv::Size(w, h), 0, 0, cv::INTER_LINEAR);
  return from_cv_rgb(out);
}

}  // namespace cytofm
