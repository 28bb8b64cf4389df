#pragma once

#include "cytofm/backbone/params.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace cytofm {

// Cosine interpolation from start to end over [0, total) with an optional
// linear warmup from warmup_start.
inline double cosine_schedule(double start, double end, std::int64_t step, std::int64_t total,
                              std::int64_t warmup = 0, double warmup_start = 0.0) {
  if (warmup > 0 && step < warmup)
    return warmup_start + (start - warmup_start) * static_cast<double>(step) / static_cast<double>(warmup);
  const std::int64_t span = std::max<std::int64_t>(1, total - warmup);
  const double t = std::clamp(static_cast<double>(step - warmup) / static_cast<double>(span), 0.0, 1.0);
  return end + 0.5 * (start - end) * (1.0 + std::cos(std::numbers::pi * t));
}

inline double linear_warmup(double start, double end, std::int64_t step, std::int64_t warmup) {
  if (warmup <= 0 || step >= warmup) return end;
  return start + (end - start) * static_cast<double>(step) / static_cast<double>(warmup);
}

// Biases and normalization parameters are not weight-decayed.
inline bool is_decayed(const std::string& name) {
  const auto ends_with = [&](const char* s) {
    const std::string suf(s);
    return name.size() >= suf.size() && name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
  };
  if (ends_with(".b")) return false;
  if (name.find(".ln1.") != std::string::npos || name.find(".ln2.") != std::string::npos ||
      name.find(".norm.") != std::string::npos)
    return false;
  return true;
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Decoupled weight decay Adam. first/second moments share the parameter layout.
template <class P>
struct AdamW {
  P first;
  P second;
  std::int64_t t = 0;
  AdamWConfig cfg;

  AdamW() = default;
  explicit AdamW(const P& params) : first(zeros_like(params)), second(zeros_like(params)) {}

  void step(P& params, const P& grads, double lr, double weight_decay) {
    ++t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    auto ps = param_refs(params);
    auto gs = param_refs(const_cast<P&>(grads));
    auto ms = param_refs(first);
    auto vs = param_refs(second);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      auto& p = *ps[i].second;
      using S = typename std::remove_reference_t<decltype(p)>::Scalar;
      const auto& g = *gs[i].second;
      auto& m = *ms[i].second;
      auto& v = *vs[i].second;
      if (is_decayed(ps[i].first)) p *= static_cast<S>(1.0 - lr * weight_decay);
      m = static_cast<S>(cfg.beta1) * m + static_cast<S>(1.0 - cfg.beta1) * g;
      v = static_cast<S>(cfg.beta2) * v + static_cast<S>(1.0 - cfg.beta2) * g.cwiseProduct(g);
      const S step_size = static_cast<S>(lr / bc1);
      const S denom_scale = static_cast<S>(1.0 / std::sqrt(bc2));
      p.array() -= step_size * m.array() / (v.array().sqrt() * denom_scale + static_cast<S>(cfg.eps));
    }
  }

 private:
  template <class Q>
  static auto param_refs(Q& q) {
    using M = Matrix<typename std::remove_const_t<Q>::Scalar>;
    std::vector<std::pair<std::string, M*>> out;
    visit_params(q, "", [&](const std::string& n, M& m) { out.emplace_back(n, &m); });
    return out;
  }
};

// Scales grads in place so that their global L2 norm is at most max_norm;
// returns the norm before clipping. max_norm <= 0 disables clipping.
template <class P>
double clip_grad_norm(P& grads, double max_norm) {
  double sq = 0;
  visit_params(grads, "", [&](const std::string&, const auto& g) { sq += g.template cast<double>().squaredNorm(); });
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double scale = max_norm / (norm + 1e-6);
    visit_params(grads, "", [&](const std::string&, auto& g) {
      g *= static_cast<typename std::remove_reference_t<decltype(g)>::Scalar>(scale);
    });
  }
  return norm;
}

}  // namespace cytofm
