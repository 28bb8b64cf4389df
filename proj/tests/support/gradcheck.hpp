#pragma once

// Central finite-difference checker for parameter structs that support
// visit_params. Samples a few coordinates of every tensor.

#include "cytofm/backbone/params.hpp"
#include "cytofm/core/random.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace cytofm::testing {

struct GradCheckResult {
  double worst_rel_error = 0;
  std::string worst_tensor;
  std::size_t coords_checked = 0;
};

// rel error per tensor = ||analytic - numeric|| / max(||analytic||, ||numeric||)
// over the sampled coordinates; tensors whose sampled gradient is ~0 in both
// routes are compared absolutely against abs_floor.
template <class P>
GradCheckResult check_gradients(P& params, const P& analytic, const std::function<double()>& loss,
                                std::uint64_t seed, int coords_per_tensor = 4, double h = 1e-5,
                                double abs_floor = 1e-9) {
  std::vector<std::pair<std::string, Matrix<double>*>> ps;
  visit_params(params, "", [&](const std::string& n, Matrix<double>& m) { ps.emplace_back(n, &m); });
  std::vector<const Matrix<double>*> gs;
  visit_params(analytic, "", [&](const std::string&, const Matrix<double>& m) { gs.push_back(&m); });
  auto rng = make_rng(seed, {0x9c});
  GradCheckResult res;
  for (std::size_t t = 0; t < ps.size(); ++t) {
    auto& m = *ps[t].second;
    double diff2 = 0, a2 = 0, n2 = 0;
    const int k = std::min<int>(coords_per_tensor, static_cast<int>(m.size()));
    for (int s = 0; s < k; ++s) {
      const auto idx = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(m.size())));
      const double orig = m.data()[idx];
      m.data()[idx] = orig + h;
      const double lp = loss();
      m.data()[idx] = orig - h;
      const double lm = loss();
      m.data()[idx] = orig;
      const double num = (lp - lm) / (2 * h);
      const double ana = gs[t]->data()[idx];
      diff2 += (num - ana) * (num - ana);
      a2 += ana * ana;
      n2 += num * num;
      ++res.coords_checked;
    }
    const double denom = std::max(std::sqrt(a2), std::sqrt(n2));
    const double rel = denom < abs_floor ? std::sqrt(diff2) / abs_floor * 1e-3 : std::sqrt(diff2) / denom;
    if (rel > res.worst_rel_error) {
      res.worst_rel_error = rel;
      res.worst_tensor = ps[t].first;
    }
  }
  return res;
}

}  // namespace cytofm::testing
