#pragma once

#include "cytofm/core/blob_io.hpp"
#include "cytofm/core/random.hpp"

#include <array>
#include <map>
#include <string>
#include <vector>

namespace cytofm {

struct SplitRatios {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
};

struct SplitSpec {
  int split_id = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> train, val, test;
};

inline void to_json(json& j, const SplitSpec& s) {
  j = json{{"split_id", s.split_id}, {"seed", s.seed}, {"train", s.train}, {"val", s.val}, {"test", s.test}};
}
inline void from_json(const json& j, SplitSpec& s) {
  s.split_id = j.value("split_id", 0);
  s.seed = j.value("seed", std::uint64_t{0});
  s.train = j.at("train").get<std::vector<std::string>>();
  s.val = j.at("val").get<std::vector<std::string>>();
  s.test = j.at("test").get<std::vector<std::string>>();
}

// Per-class allocation: round(val*n) to validation, round(test*n) to test,
// the rest to training. Every part is within one item of proportional.
inline std::array<int, 3> stratum_sizes(int n, const SplitRatios& r) {
  const int n_val = static_cast<int>(std::lround(r.val * n));
  const int n_test = static_cast<int>(std::lround(r.test * n));
  return {n - n_val - n_test, n_val, n_test};
}

// One stratified split; split k depends only on (seed, k).
inline SplitSpec stratified_split(const std::map<std::string, int>& labels, const SplitRatios& r, int split_id,
                                  std::uint64_t seed) {
  CYTOFM_REQUIRE(r.train > 0 && r.val > 0 && r.test > 0 && std::abs(r.train + r.val + r.test - 1.0) < 1e-9,
                 "split ratios must be positive and sum to 1");
  std::map<int, std::vector<std::string>> by_class;
  for (const auto& [id, y] : labels) by_class[y].push_back(id);  // map order: sorted ids
  CYTOFM_REQUIRE(by_class.size() >= 2, "stratified splits need at least 2 classes");
  for (const auto& [y, ids] : by_class) {
    CYTOFM_REQUIRE(ids.size() >= 5, "class " + std::to_string(y) + " has only " + std::to_string(ids.size()) +
                                        " items; at least 5 are needed to stratify");
    const auto sz = stratum_sizes(static_cast<int>(ids.size()), r);
    CYTOFM_REQUIRE(sz[0] >= 1 && sz[1] >= 1 && sz[2] >= 1,
                   "class " + std::to_string(y) + " is too small for the requested ratios");
  }
  SplitSpec s;
  s.split_id = split_id;
  s.seed = seed;
  auto rng = make_rng(seed, {0x5b17, static_cast<std::uint64_t>(split_id)});
  for (auto& [y, ids] : by_class) {
    auto shuffled = ids;
    shuffle(shuffled, rng);
    const auto sz = stratum_sizes(static_cast<int>(ids.size()), r);
    auto it = shuffled.begin();
    s.test.insert(s.test.end(), it, it + sz[2]);
    it += sz[2];
    s.val.insert(s.val.end(), it, it + sz[1]);
    it += sz[1];
    s.train.insert(s.train.end(), it, shuffled.end());
  }
  for (auto* part : {&s.train, &s.val, &s.test}) std::sort(part->begin(), part->end());
  return s;
}

inline std::vector<SplitSpec> stratified_splits(const std::map<std::string, int>& labels,
                                                const SplitRatios& r = {}, int n_repeats = 100,
                                                std::uint64_t seed = 0) {
  CYTOFM_REQUIRE(n_repeats >= 1, "n_repeats must be >= 1");
  std::vector<SplitSpec> out;
  for (int k = 0; k < n_repeats; ++k) out.push_back(stratified_split(labels, r, k, seed));
  return out;
}

// Two-sided paired sign-flip permutation test on per-split differences.
// p = (#{|flipped mean| >= |observed mean|} + 1) / (n_perm + 1).
inline double paired_significance(const std::vector<double>& a, const std::vector<double>& b, int n_perm = 10000,
                                  std::uint64_t seed = 0) {
  CYTOFM_REQUIRE(a.size() == b.size(), "paired vectors must have equal length");
  CYTOFM_REQUIRE(a.size() >= 2, "paired test needs at least 2 splits");
  CYTOFM_REQUIRE(n_perm >= 1, "n_perm must be >= 1");
  const std::size_t n = a.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  double obs = 0;
  for (double v : d) obs += v;
  obs = std::abs(obs) / static_cast<double>(n);
  const double tol = 1e-12 * (1.0 + obs);
  auto rng = make_rng(seed, {0x9e7});
  long hits = 0;
  for (int k = 0; k < n_perm; ++k) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += bernoulli(rng, 0.5) ? d[i] : -d[i];
    if (std::abs(s) / static_cast<double>(n) >= obs - tol) ++hits;
  }
  return static_cast<double>(hits + 1) / static_cast<double>(n_perm + 1);
}

}  // namespace cytofm
