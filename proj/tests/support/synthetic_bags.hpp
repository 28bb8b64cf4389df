#pragma once

#include "cytofm/core/random.hpp"
#include "cytofm/mil/feature_bag.hpp"

#include <vector>

namespace cytofm::testing {

// Instances ~ N(0, I). Positive bags get one instance (at a random position)
// drawn from N(shift * 1, I) instead.
inline std::vector<FeatureBag> shifted_gaussian_bags(int n_bags, int bag_size, int dim, double shift,
                                                     std::uint64_t seed) {
  auto rng = make_rng(seed, {0xba95});
  std::vector<FeatureBag> out;
  for (int b = 0; b < n_bags; ++b) {
    FeatureBag bag;
    bag.image_id = "bag" + std::to_string(b);
    bag.label = b % 2;
    bag.features.resize(bag_size, dim);
    for (Eigen::Index i = 0; i < bag.features.size(); ++i)
      bag.features.data()[i] = static_cast<float>(normal(rng, 0, 1));
    if (bag.label == 1) {
      const auto row = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(bag_size)));
      for (int d = 0; d < dim; ++d) bag.features(row, d) += static_cast<float>(shift);
    }
    out.push_back(std::move(bag));
  }
  return out;
}

}  // namespace cytofm::testing
