#pragma once

// Synthetic inputs for smoke runs and the representation-learning check:
// Pap-like cytology fields with a benign/malignant label, and two stripe
// textures that differ only in orientation.

#include "cytofm/core/random.hpp"
#include "cytofm/preprocess/image.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace cytofm {

// Scattered cells on a pale background. Class 1 cells have larger, darker and
// more irregular nuclei than class 0 cells.
inline RgbImage synthetic_cytology_image(int size, int label, std::uint64_t seed) {
  CYTOFM_REQUIRE(size >= 32, "synthetic image size must be >= 32");
  CYTOFM_REQUIRE(label == 0 || label == 1, "synthetic cytology label must be 0 or 1");
  auto rng = make_rng(seed, {0x5c7, static_cast<std::uint64_t>(label)});
  cv::Mat img(size, size, CV_8UC3, cv::Scalar(232, 222, 228));
  const int cells = static_cast<int>(size * size / 4500) + static_cast<int>(uniform_index(rng, 6));
  for (int i = 0; i < cells; ++i) {
    const cv::Point centre(static_cast<int>(uniform(rng, 0, size)), static_cast<int>(uniform(rng, 0, size)));
    const double cyto = uniform(rng, 12, 20);
    const double angle = uniform(rng, 0, 180);
    const cv::Scalar cyto_colour = bernoulli(rng, 0.5) ? cv::Scalar(170 + uniform(rng, -15, 15), 200, 215)
                                                        : cv::Scalar(225, 170 + uniform(rng, -15, 15), 190);
    cv::ellipse(img, centre, cv::Size(static_cast<int>(cyto), static_cast<int>(cyto * uniform(rng, 0.7, 1.0))),
                angle, 0, 360, cyto_colour, cv::FILLED, cv::LINE_AA);
    const double nuc = label == 0 ? uniform(rng, 3, 5) : uniform(rng, 7, 11);
    const double dark = label == 0 ? uniform(rng, 90, 120) : uniform(rng, 40, 70);
    const double aspect = label == 0 ? uniform(rng, 0.85, 1.0) : uniform(rng, 0.55, 0.9);
    cv::ellipse(img, centre, cv::Size(static_cast<int>(nuc), static_cast<int>(nuc * aspect)),
                uniform(rng, 0, 180), 0, 360, cv::Scalar(dark + 20, dark * 0.6, dark + 50), cv::FILLED,
                cv::LINE_AA);
  }
  cv::Mat out;
  cv::GaussianBlur(img, out, cv::Size(3, 3), 0.8);
  return from_cv_rgb(out);
}

// Sinusoidal stripes in a fixed two-colour stain palette. Texture 0 runs
// near-horizontal and texture 1 near-vertical (angle jitter +-0.3 rad).
// Period, phase and pixel noise vary per patch; both classes share the same
// colour statistics, so only orientation separates them.
inline RgbImage synthetic_texture_patch(int texture, std::uint64_t seed, int size = 256) {
  CYTOFM_REQUIRE(texture == 0 || texture == 1, "texture id must be 0 or 1");
  auto rng = make_rng(seed, {0x7e47});
  const double light[3] = {200, 120, 190}, dark[3] = {80, 30, 110};
  const double period = uniform(rng, 12, 24);
  const double phase = uniform(rng, 0, 2 * std::numbers::pi);
  const double angle = (texture == 0 ? 0.0 : std::numbers::pi / 2) + uniform(rng, -0.3, 0.3);
  const double ca = std::cos(angle), sa = std::sin(angle);
  RgbImage img(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double t = std::sin((x * ca + y * sa) * 2 * std::numbers::pi / period + phase);
      const double w = 0.5 + 0.5 * t + normal(rng, 0, 0.05);
      for (int k = 0; k < 3; ++k)
        img.at(y, x, k) = static_cast<std::uint8_t>(std::clamp(light[k] * (1 - w) + dark[k] * w, 0.0, 255.0));
    }
  return img;
}

}  // namespace cytofm
