#pragma once

#include "cytofm/core/random.hpp"
#include "cytofm/datasets/registry.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace cytofm {

struct DisjointSplit {
  std::vector<std::string> pretrain_ids;
  std::vector<std::string> held_out_ids;
};

// Partitions source image ids (never patches) into a pretraining part and a
// held-out evaluation part. Both outputs are sorted.
inline DisjointSplit split_ids_disjoint(std::vector<std::string> image_ids, int held_out_count,
                                        std::uint64_t seed) {
  std::sort(image_ids.begin(), image_ids.end());
  image_ids.erase(std::unique(image_ids.begin(), image_ids.end()), image_ids.end());
  CYTOFM_REQUIRE(image_ids.size() >= 2, "need at least 2 source images to split");
  CYTOFM_REQUIRE(held_out_count >= 1 && held_out_count < static_cast<int>(image_ids.size()),
                 "held-out count must leave both sides non-empty");
  auto rng = make_rng(seed, {0x5e1d});
  shuffle(image_ids, rng);
  DisjointSplit out;
  out.held_out_ids.assign(image_ids.begin(), image_ids.begin() + held_out_count);
  out.pretrain_ids.assign(image_ids.begin() + held_out_count, image_ids.end());
  std::sort(out.held_out_ids.begin(), out.held_out_ids.end());
  std::sort(out.pretrain_ids.begin(), out.pretrain_ids.end());
  return out;
}

inline int held_out_count_for_fraction(std::size_t n_images, double fraction) {
  CYTOFM_REQUIRE(fraction > 0.0 && fraction < 1.0, "held-out fraction must lie in (0,1)");
  CYTOFM_REQUIRE(n_images >= 2, "need at least 2 source images to split");
  const auto k = static_cast<long>(std::lround(fraction * static_cast<double>(n_images)));
  return static_cast<int>(std::clamp<long>(k, 1, static_cast<long>(n_images) - 1));
}

inline DisjointSplit split_dataset_disjoint(const DatasetRecord& record,
                                            const std::vector<std::string>& image_ids,
                                            double held_out_fraction, std::uint64_t seed) {
  CYTOFM_REQUIRE(record.has_role(DatasetRole::pretrain) && record.has_role(DatasetRole::evaluate),
                 "dataset '" + record.name + "' is not used for both pretraining and evaluation");
  const int k = held_out_count_for_fraction(image_ids.size(), held_out_fraction);
  return split_ids_disjoint(image_ids, k, seed);
}

// Applies the record's own hold-out spec to the images found under its root
// and stores the held-out ids on the record.
inline DisjointSplit apply_hold_out(DatasetRecord& record, const fs::path& resolved_root) {
  CYTOFM_REQUIRE(record.hold_out.has_value(), "dataset '" + record.name + "' has no hold_out spec");
  std::vector<std::string> ids;
  for (auto& [id, path] : list_source_images(resolved_root)) ids.push_back(id);
  DisjointSplit split;
  if (record.hold_out->count) {
    CYTOFM_REQUIRE(record.has_role(DatasetRole::pretrain) && record.has_role(DatasetRole::evaluate),
                   "dataset '" + record.name + "' is not used for both pretraining and evaluation");
    split = split_ids_disjoint(ids, *record.hold_out->count, record.hold_out->seed);
  } else {
    split = split_dataset_disjoint(record, ids, *record.hold_out->fraction, record.hold_out->seed);
  }
  record.held_out_ids = split.held_out_ids;
  return split;
}

}  // namespace cytofm
