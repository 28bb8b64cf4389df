#pragma once

#include "cytofm/core/matrix.hpp"

#include <string>

namespace cytofm {

inline constexpr int kUnlabeled = -1;

// Patch embeddings of one image plus its image-level label.
struct FeatureBag {
  std::string image_id;
  Matrix<float> features;  // n x D
  int label = kUnlabeled;

  Eigen::Index size() const { return features.rows(); }
  Eigen::Index dim() const { return features.cols(); }
};

}  // namespace cytofm
