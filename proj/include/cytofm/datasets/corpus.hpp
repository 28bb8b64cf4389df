#pragma once

#include "cytofm/core/random.hpp"
#include "cytofm/datasets/registry.hpp"
#include "cytofm/preprocess/pipeline.hpp"

#include <map>
#include <set>
#include <string>
#include <vector>

namespace cytofm {

struct CorpusEntry {
  std::string dataset;
  std::string image_id;
  int row = 0;
  int col = 0;
  fs::path file;
};

struct CorpusIndex {
  std::vector<CorpusEntry> entries;
  std::map<std::string, std::size_t> per_dataset_counts;

  std::size_t size() const { return entries.size(); }
};

// Patches of one preprocessed dataset, minus any held-out source images.
inline std::vector<CorpusEntry> collect_patches(const std::string& dataset, const fs::path& patches_dir,
                                                const std::set<std::string>& excluded_ids) {
  std::vector<CorpusEntry> out;
  for (const auto& m : read_patch_manifest(patches_dir)) {
    if (excluded_ids.contains(m.image_id)) continue;
    out.push_back({dataset, m.image_id, m.row, m.col, patches_dir / m.file});
  }
  return out;
}

inline CorpusIndex finalize_corpus(std::vector<CorpusEntry> entries, std::uint64_t seed) {
  CYTOFM_REQUIRE(!entries.empty(), "pretraining corpus is empty");
  CorpusIndex idx;
  for (const auto& e : entries) ++idx.per_dataset_counts[e.dataset];
  auto rng = make_rng(seed, {0xc0});
  shuffle(entries, rng);
  idx.entries = std::move(entries);
  return idx;
}

// Flat shuffled index over every pretrain-flagged dataset in the registry.
inline CorpusIndex build_pretrain_corpus(const DatasetRegistry& registry, std::uint64_t seed = 0) {
  std::vector<CorpusEntry> all;
  for (const auto& r : registry.records()) {
    if (!r.has_role(DatasetRole::pretrain)) continue;
    CYTOFM_REQUIRE(!r.patches_dir.empty(),
                   "dataset '" + r.name + "' has not been preprocessed (no patches_dir)");
    std::set<std::string> excluded(r.held_out_ids.begin(), r.held_out_ids.end());
    auto part = collect_patches(r.name, registry.resolve(r.patches_dir), excluded);
    all.insert(all.end(), part.begin(), part.end());
  }
  return finalize_corpus(std::move(all), seed);
}

// Every patches.jsonl below a directory; the dataset name is the manifest's
// directory name relative to root ("." for the root itself).
inline CorpusIndex corpus_from_directory(const fs::path& root, std::uint64_t seed = 0,
                                         const std::set<std::string>& excluded_ids = {}) {
  CYTOFM_REQUIRE(fs::is_directory(root), "corpus directory not found: " + root.string());
  std::vector<fs::path> dirs;
  if (fs::exists(root / kPatchManifestName)) dirs.push_back(root);
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().filename() == kPatchManifestName && e.path().parent_path() != root)
      dirs.push_back(e.path().parent_path());
  std::sort(dirs.begin(), dirs.end());
  std::vector<CorpusEntry> all;
  for (const auto& d : dirs) {
    auto part = collect_patches(fs::relative(d, root).string(), d, excluded_ids);
    all.insert(all.end(), part.begin(), part.end());
  }
  return finalize_corpus(std::move(all), seed);
}

}  // namespace cytofm
