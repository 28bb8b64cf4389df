#pragma once

#include "cytofm/core/error.hpp"
#include "cytofm/core/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

namespace cytofm {

// Binary: positive iff prob >= threshold. Multiclass: argmax (lowest index on
// ties) of each row.
inline double accuracy_at_threshold(const std::vector<double>& probs, const std::vector<int>& labels,
                                    double threshold = 0.5) {
  CYTOFM_REQUIRE(!probs.empty(), "accuracy needs at least one prediction");
  CYTOFM_REQUIRE(probs.size() == labels.size(), "probs/labels length mismatch");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const int pred = probs[i] >= threshold ? 1 : 0;
    correct += pred == labels[i] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(probs.size());
}

inline int argmax_row(const Matrix<double>& probs, Eigen::Index i) {
  Eigen::Index best = 0;
  for (Eigen::Index k = 1; k < probs.cols(); ++k)
    if (probs(i, k) > probs(i, best)) best = k;
  return static_cast<int>(best);
}

inline double accuracy_argmax(const Matrix<double>& probs, const std::vector<int>& labels) {
  CYTOFM_REQUIRE(probs.rows() > 0, "accuracy needs at least one prediction");
  CYTOFM_REQUIRE(static_cast<std::size_t>(probs.rows()) == labels.size(), "probs/labels length mismatch");
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) correct += argmax_row(probs, i) == labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

// Mann-Whitney statistic with midranks. Twice the positive rank sum is an
// integer, so the result is the exact ratio (2*wins + ties) / (2*P*N).
inline double auroc_binary(const std::vector<double>& scores, const std::vector<int>& labels) {
  CYTOFM_REQUIRE(scores.size() == labels.size(), "scores/labels length mismatch");
  std::int64_t pos = 0, neg = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    CYTOFM_REQUIRE(labels[i] == 0 || labels[i] == 1, "binary labels must be 0 or 1");
    CYTOFM_REQUIRE(!std::isnan(scores[i]), "AUROC scores must not be NaN");
    (labels[i] == 1 ? pos : neg) += 1;
  }
  CYTOFM_REQUIRE(pos > 0 && neg > 0, "AUROC needs both classes present");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::int64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    // Ranks i+1..j share the midrank (i+1+j)/2.
    const auto twice_mid = static_cast<std::int64_t>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) twice_rank_sum += twice_mid;
    i = j;
  }
  const std::int64_t numerator = twice_rank_sum - pos * (pos + 1);
  return static_cast<double>(numerator) / static_cast<double>(2 * pos * neg);
}

// One-vs-rest indicators and probabilities of all classes flattened into one
// binary problem.
inline double auroc_micro(const Matrix<double>& probs, const std::vector<int>& labels) {
  CYTOFM_REQUIRE(static_cast<std::size_t>(probs.rows()) == labels.size(), "probs/labels length mismatch");
  CYTOFM_REQUIRE(probs.cols() >= 2, "micro AUROC needs at least 2 classes");
  std::vector<bool> present(static_cast<std::size_t>(probs.cols()), false);
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    CYTOFM_REQUIRE(std::abs(probs.row(i).sum() - 1.0) <= 1e-4, "probability rows must sum to 1");
    CYTOFM_REQUIRE(labels[i] >= 0 && labels[i] < probs.cols(), "label out of range");
    present[static_cast<std::size_t>(labels[i])] = true;
  }
  CYTOFM_REQUIRE(std::count(present.begin(), present.end(), true) >= 2,
                 "micro AUROC needs at least 2 classes present");
  std::vector<double> s;
  std::vector<int> y;
  s.reserve(static_cast<std::size_t>(probs.size()));
  y.reserve(static_cast<std::size_t>(probs.size()));
  for (Eigen::Index i = 0; i < probs.rows(); ++i)
    for (Eigen::Index k = 0; k < probs.cols(); ++k) {
      s.push_back(probs(i, k));
      y.push_back(labels[i] == k ? 1 : 0);
    }
  return auroc_binary(s, y);
}

struct Aggregate {
  double mean = 0;
  double std = 0;  // population
  std::size_t n = 0;
};

inline Aggregate aggregate_runs(const std::vector<double>& values) {
  CYTOFM_REQUIRE(!values.empty(), "cannot aggregate an empty list of runs");
  Aggregate a;
  a.n = values.size();
  a.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(a.n);
  double ss = 0;
  for (double v : values) ss += (v - a.mean) * (v - a.mean);
  a.std = std::sqrt(ss / static_cast<double>(a.n));
  return a;
}

// "0.930 ± 0.05"; single runs render without the spread.
inline std::string format_aggregate(const Aggregate& a) {
  char buf[64];
  if (a.n <= 1) std::snprintf(buf, sizeof buf, "%.3f", a.mean);
  else std::snprintf(buf, sizeof buf, "%.3f ± %.2f", a.mean, a.std);
  return buf;
}

}  // namespace cytofm
