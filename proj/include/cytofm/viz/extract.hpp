#pragma once

#include "cytofm/backbone/vit.hpp"
#include "cytofm/backbone/weights_io.hpp"
#include "cytofm/datasets/feature_store.hpp"
#include "cytofm/preprocess/pipeline.hpp"

#include <atomic>
#include <map>
#include <mutex>
#include <thread>

namespace cytofm {

// CLS embedding per patch, grouped into one bag per source image. Images are
// sorted by id and patches by grid position, so the output does not depend
// on manifest order or on the thread count.
inline std::vector<FeatureBag> extract_bags(const FrozenEncoder& enc, const fs::path& patches_dir, int threads = 1) {
  std::map<std::string, std::vector<PatchMeta>> by_image;
  for (auto& m : read_patch_manifest(patches_dir)) by_image[m.image_id].push_back(m);
  CYTOFM_REQUIRE(!by_image.empty(), "no patches listed in " + (patches_dir / kPatchManifestName).string());
  std::vector<FeatureBag> bags;
  for (auto& [id, metas] : by_image) {
    std::sort(metas.begin(), metas.end(),
              [](const PatchMeta& a, const PatchMeta& b) { return std::tie(a.row, a.col) < std::tie(b.row, b.col); });
    FeatureBag b;
    b.image_id = id;
    b.features.resize(static_cast<Eigen::Index>(metas.size()), enc.config.embed_dim);
    bags.push_back(std::move(b));
  }
  std::vector<const std::vector<PatchMeta>*> lists;
  for (const auto& [id, metas] : by_image) lists.push_back(&metas);

  auto work = [&](std::size_t i) {
    const auto& metas = *lists[i];
    for (std::size_t k = 0; k < metas.size(); ++k) {
      const RgbImage img = load_rgb(patches_dir / metas[k].file);
      CYTOFM_REQUIRE(img.height == enc.config.image_size && img.width == enc.config.image_size,
                     "patch " + metas[k].file + " does not match the encoder input size");
      bags[i].features.row(static_cast<Eigen::Index>(k)) = encode(enc.weights, enc.config, patchify<float>(img, enc.config)).cls;
    }
  };
  const std::size_t n = bags.size();
  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(n)));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) work(i);
    return bags;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  std::vector<std::thread> pool;
  for (int t = 0; t < workers; ++t)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          work(i);
        } catch (...) {
          std::lock_guard lock(failure_mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
  return bags;
}

inline std::vector<FeatureBag> extract_features(const FrozenEncoder& enc, const fs::path& patches_dir,
                                                const fs::path& out_store, int threads = 1) {
  auto bags = extract_bags(enc, patches_dir, threads);
  write_feature_store(bags, out_store, enc.id);
  return bags;
}

}  // namespace cytofm
