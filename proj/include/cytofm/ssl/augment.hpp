#pragma once

// Two-view augmentation for self-distillation: random resized crop,
// horizontal flip, color jitter and Gaussian blur. Every random draw is kept
// in an AugmentationRecord so a view can be replayed exactly.

#include "cytofm/core/blob_io.hpp"
#include "cytofm/core/random.hpp"
#include "cytofm/preprocess/image.hpp"

#include <algorithm>
#include <cmath>

namespace cytofm {

struct AugmentationRecord {
  int crop_x = 0, crop_y = 0, crop_w = 0, crop_h = 0;
  bool flip = false;
  bool jitter = false;
  double brightness = 1.0, contrast = 1.0, saturation = 1.0;
  double blur_sigma = 0.0;  // 0 = no blur
};

struct AugmentationConfig {
  double crop_scale_min = 0.32;
  double crop_scale_max = 1.0;
  double crop_ratio_min = 3.0 / 4.0;
  double crop_ratio_max = 4.0 / 3.0;
  double flip_prob = 0.5;
  double jitter_prob = 0.8;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.2;
  // Blur probability for the first and second view.
  double blur_prob_u = 1.0;
  double blur_prob_v = 0.1;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 2.0;
};

struct AugmentedViewPair {
  RgbImage u, v;
  AugmentationRecord u_record, v_record;
  std::uint64_t seed = 0;
};

inline AugmentationRecord sample_augmentation(int height, int width, double blur_prob,
                                              const AugmentationConfig& cfg, Rng& rng) {
  AugmentationRecord r;
  const double area = static_cast<double>(height) * width;
  bool found = false;
  for (int attempt = 0; attempt < 10 && !found; ++attempt) {
    const double target = area * uniform(rng, cfg.crop_scale_min, cfg.crop_scale_max);
    const double log_ratio = uniform(rng, std::log(cfg.crop_ratio_min), std::log(cfg.crop_ratio_max));
    const double ratio = std::exp(log_ratio);
    const int w = static_cast<int>(std::lround(std::sqrt(target * ratio)));
    const int h = static_cast<int>(std::lround(std::sqrt(target / ratio)));
    if (w > 0 && h > 0 && w <= width && h <= height) {
      r.crop_w = w;
      r.crop_h = h;
      r.crop_y = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(height - h + 1)));
      r.crop_x = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(width - w + 1)));
      found = true;
    }
  }
  if (!found) {
    r.crop_w = width;
    r.crop_h = height;
  }
  r.flip = bernoulli(rng, cfg.flip_prob);
  r.jitter = bernoulli(rng, cfg.jitter_prob);
  if (r.jitter) {
    r.brightness = uniform(rng, 1.0 - cfg.brightness, 1.0 + cfg.brightness);
    r.contrast = uniform(rng, 1.0 - cfg.contrast, 1.0 + cfg.contrast);
    r.saturation = uniform(rng, 1.0 - cfg.saturation, 1.0 + cfg.saturation);
  }
  if (bernoulli(rng, blur_prob)) r.blur_sigma = uniform(rng, cfg.blur_sigma_min, cfg.blur_sigma_max);
  return r;
}

inline RgbImage apply_augmentation(const RgbImage& src, const AugmentationRecord& r, int out_size) {
  CYTOFM_REQUIRE(r.crop_w > 0 && r.crop_h > 0, "degenerate crop (zero area)");
  CYTOFM_REQUIRE(r.crop_x >= 0 && r.crop_y >= 0 && r.crop_x + r.crop_w <= src.width &&
                     r.crop_y + r.crop_h <= src.height,
                 "crop box outside the source image");
  cv::Mat roi = as_cv(src)(cv::Rect(r.crop_x, r.crop_y, r.crop_w, r.crop_h));
  cv::Mat resized;
  cv::resize(roi, resized, cv::Size(out_size, out_size), 0, 0, cv::INTER_LINEAR);
  if (r.flip) cv::flip(resized, resized, 1);
  RgbImage out = from_cv_rgb(resized);
  if (r.jitter) {
    const std::size_t n = static_cast<std::size_t>(out.height) * out.width;
    std::vector<double> px(out.pixels.begin(), out.pixels.end());
    for (auto& x : px) x = std::clamp(x * r.brightness, 0.0, 255.0);
    double mean_gray = 0;
    for (std::size_t i = 0; i < n; ++i)
      mean_gray += 0.299 * px[3 * i] + 0.587 * px[3 * i + 1] + 0.114 * px[3 * i + 2];
    mean_gray /= static_cast<double>(n);
    for (auto& x : px) x = std::clamp((x - mean_gray) * r.contrast + mean_gray, 0.0, 255.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double gray = 0.299 * px[3 * i] + 0.587 * px[3 * i + 1] + 0.114 * px[3 * i + 2];
      for (int c = 0; c < 3; ++c)
        px[3 * i + c] = std::clamp(gray + r.saturation * (px[3 * i + c] - gray), 0.0, 255.0);
    }
    for (std::size_t i = 0; i < px.size(); ++i) out.pixels[i] = static_cast<std::uint8_t>(std::lround(px[i]));
  }
  if (r.blur_sigma > 0) {
    cv::Mat m = as_cv(out).clone();
    cv::GaussianBlur(m, m, cv::Size(0, 0), r.blur_sigma, r.blur_sigma, cv::BORDER_REFLECT_101);
    out = from_cv_rgb(m);
  }
  return out;
}

inline AugmentedViewPair augment_pair(const RgbImage& patch, std::uint64_t seed,
                                      const AugmentationConfig& cfg = {}, int out_size = 256) {
  CYTOFM_REQUIRE(!patch.empty(), "cannot augment an empty patch");
  auto rng = make_rng(seed, {0xa6});
  AugmentedViewPair pair;
  pair.seed = seed;
  pair.u_record = sample_augmentation(patch.height, patch.width, cfg.blur_prob_u, cfg, rng);
  pair.v_record = sample_augmentation(patch.height, patch.width, cfg.blur_prob_v, cfg, rng);
  pair.u = apply_augmentation(patch, pair.u_record, out_size);
  pair.v = apply_augmentation(patch, pair.v_record, out_size);
  return pair;
}

inline void to_json(json& j, const AugmentationRecord& r) {
  j = json{{"crop", {r.crop_x, r.crop_y, r.crop_w, r.crop_h}},
           {"flip", r.flip},
           {"jitter", r.jitter},
           {"brightness", r.brightness},
           {"contrast", r.contrast},
           {"saturation", r.saturation},
           {"blur_sigma", r.blur_sigma}};
}

}  // namespace cytofm
