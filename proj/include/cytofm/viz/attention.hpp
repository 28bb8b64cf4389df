#pragma once

#include "cytofm/backbone/vit.hpp"
#include "cytofm/backbone/weights_io.hpp"

#include <opencv2/imgproc.hpp>

namespace cytofm {

struct AttentionMap {
  std::string image_id;
  std::string head = "mean";  // or the head index
  Matrix<double> grid;        // G x G, min-max normalised
  bool constant = false;      // no spread to normalise; rendered mid-gray
};

// Final-layer CLS -> patch attention as G x G grids. head < 0 averages
// heads.
inline AttentionMap attention_from_probs(const std::vector<Matrix<float>>& probs, const ViTConfig& c, int head,
                                         const std::string& image_id = "") {
  CYTOFM_REQUIRE(!probs.empty(), "encoder output carries no attention (request it at inference)");
  CYTOFM_REQUIRE(head < static_cast<int>(probs.size()), "head index out of range");
  const int g = c.grid();
  const int n = c.num_patches();
  for (const auto& p : probs)
    CYTOFM_REQUIRE(p.rows() == c.tokens() && p.cols() == c.tokens(), "attention shape does not match the config");
  RowVector<double> row = RowVector<double>::Zero(n);
  if (head < 0) {
    for (const auto& p : probs) row += p.row(0).tail(n).cast<double>();
    row /= static_cast<double>(probs.size());
  } else {
    row = probs[static_cast<std::size_t>(head)].row(0).tail(n).cast<double>();
  }
  AttentionMap m;
  m.image_id = image_id;
  m.head = head < 0 ? "mean" : std::to_string(head);
  m.grid.resize(g, g);
  const double lo = row.minCoeff(), hi = row.maxCoeff();
  m.constant = !(hi - lo > 1e-12 * std::max(1.0, std::abs(hi)));
  for (int i = 0; i < n; ++i) m.grid(i / g, i % g) = m.constant ? 0.5 : (row(i) - lo) / (hi - lo);
  return m;
}

inline AttentionMap attention_map(const FrozenEncoder& enc, const RgbImage& patch, int head = -1,
                                  const std::string& image_id = "") {
  const auto out = encode(enc.weights, enc.config, patchify<float>(patch, enc.config));
  return attention_from_probs(out.last_layer_attention, enc.config, head, image_id);
}

// Heatmap at (height x width): nearest-grid upsampling through a colormap;
// a constant grid renders as uniform mid-gray.
inline RgbImage render_heatmap(const AttentionMap& m, int height, int width) {
  if (m.constant) return RgbImage(height, width, 128);
  cv::Mat g(static_cast<int>(m.grid.rows()), static_cast<int>(m.grid.cols()), CV_8UC1);
  for (int y = 0; y < g.rows; ++y)
    for (int x = 0; x < g.cols; ++x)
      g.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(std::lround(255.0 * m.grid(y, x)));
  cv::Mat up, colored, rgb;
  cv::resize(g, up, cv::Size(width, height), 0, 0, cv::INTER_NEAREST);
  cv::applyColorMap(up, colored, cv::COLORMAP_JET);
  cv::cvtColor(colored, rgb, cv::COLOR_BGR2RGB);
  return from_cv_rgb(rgb);
}

inline RgbImage render_overlay(const RgbImage& patch, const AttentionMap& m, double alpha = 0.5) {
  const RgbImage heat = render_heatmap(m, patch.height, patch.width);
  RgbImage out(patch.height, patch.width);
  for (std::size_t i = 0; i < out.pixels.size(); ++i)
    out.pixels[i] = static_cast<std::uint8_t>(
        std::lround((1.0 - alpha) * patch.pixels[i] + alpha * heat.pixels[i]));
  return out;
}

}  // namespace cytofm
