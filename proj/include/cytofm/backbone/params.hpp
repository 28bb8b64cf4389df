#pragma once

#include "cytofm/backbone/config.hpp"
#include "cytofm/backbone/layers.hpp"
#include "cytofm/core/random.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace cytofm {

template <class S>
struct BlockParams {
  LayerNormParams<S> ln1;
  LinearParams<S> qkv;
  LinearParams<S> proj;
  LayerNormParams<S> ln2;
  LinearParams<S> fc1;
  LinearParams<S> fc2;
};

template <class S>
struct HeadParams {
  LinearParams<S> fc1;
  LinearParams<S> fc2;
  LinearParams<S> fc3;
  Matrix<S> last_v;  // bottleneck x out, column-normalized at use
};

// Encoder weights: everything except the projection heads.
template <class S>
struct BackboneParams {
  using Scalar = S;
  LinearParams<S> patch;
  Matrix<S> cls_token;   // 1 x D
  Matrix<S> mask_token;  // 1 x D
  Matrix<S> pos_embed;   // T x D
  std::vector<BlockParams<S>> blocks;
  LayerNormParams<S> norm;
};

template <class S>
struct VitParams {
  using Scalar = S;
  BackboneParams<S> backbone;
  HeadParams<S> head;
  std::optional<HeadParams<S>> patch_head;  // only when heads are not shared
};

// Visitors: f(name, Matrix<S>&) in a fixed, documented order.
template <class S, class F>
void visit_params(LinearParams<S>& p, const std::string& prefix, F&& f) {
  f(prefix + ".w", p.w);
  f(prefix + ".b", p.b);
}
template <class S, class F>
void visit_params(LayerNormParams<S>& p, const std::string& prefix, F&& f) {
  f(prefix + ".g", p.g);
  f(prefix + ".b", p.b);
}
template <class S, class F>
void visit_params(BlockParams<S>& p, const std::string& prefix, F&& f) {
  visit_params(p.ln1, prefix + ".ln1", f);
  visit_params(p.qkv, prefix + ".qkv", f);
  visit_params(p.proj, prefix + ".proj", f);
  visit_params(p.ln2, prefix + ".ln2", f);
  visit_params(p.fc1, prefix + ".fc1", f);
  visit_params(p.fc2, prefix + ".fc2", f);
}
template <class S, class F>
void visit_params(HeadParams<S>& p, const std::string& prefix, F&& f) {
  visit_params(p.fc1, prefix + ".fc1", f);
  visit_params(p.fc2, prefix + ".fc2", f);
  visit_params(p.fc3, prefix + ".fc3", f);
  f(prefix + ".last_v", p.last_v);
}
template <class S, class F>
void visit_params(BackboneParams<S>& p, const std::string& prefix, F&& f) {
  visit_params(p.patch, prefix + ".patch", f);
  f(prefix + ".cls_token", p.cls_token);
  f(prefix + ".mask_token", p.mask_token);
  f(prefix + ".pos_embed", p.pos_embed);
  for (std::size_t i = 0; i < p.blocks.size(); ++i)
    visit_params(p.blocks[i], prefix + ".blocks." + std::to_string(i), f);
  visit_params(p.norm, prefix + ".norm", f);
}
template <class S, class F>
void visit_params(VitParams<S>& p, const std::string& prefix, F&& f) {
  visit_params(p.backbone, prefix.empty() ? "backbone" : prefix + ".backbone", f);
  visit_params(p.head, prefix.empty() ? "head" : prefix + ".head", f);
  if (p.patch_head) visit_params(*p.patch_head, prefix.empty() ? "patch_head" : prefix + ".patch_head", f);
}

template <class P, class F>
void visit_params(const P& p, const std::string& prefix, F&& f) {
  visit_params(const_cast<P&>(p), prefix, [&](const std::string& name, auto& m) {
    f(name, static_cast<const std::remove_reference_t<decltype(m)>&>(m));
  });
}

template <class S>
struct NamedParam {
  std::string name;
  Matrix<S>* value;
};

// Flattened view, used to walk two same-shaped parameter sets in lockstep.
template <class P>
auto param_list(P& p) {
  using S = typename std::remove_const_t<P>::Scalar;
  std::vector<NamedParam<S>> out;
  visit_params(p, "", [&](const std::string& name, Matrix<S>& m) { out.push_back({name, &m}); });
  return out;
}

template <class S>
std::vector<NamedParam<S>> backbone_param_list(BackboneParams<S>& p) {
  std::vector<NamedParam<S>> out;
  visit_params(p, "backbone", [&](const std::string& name, Matrix<S>& m) { out.push_back({name, &m}); });
  return out;
}

template <class P>
std::size_t count_params(const P& p) {
  std::size_t n = 0;
  visit_params(p, "", [&](const std::string&, const auto& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

template <class P>
P zeros_like(const P& p) {
  P out = p;
  visit_params(out, "", [](const std::string&, auto& m) { m.setZero(); });
  return out;
}

template <class P>
void set_zero(P& p) {
  visit_params(p, "", [](const std::string&, auto& m) { m.setZero(); });
}

// a += scale * b over two parameter sets of identical layout.
template <class P, class S>
void add_scaled(P& a, const P& b, S scale) {
  std::vector<const void*> src;
  visit_params(b, "", [&](const std::string&, const auto& m) { src.push_back(&m); });
  std::size_t i = 0;
  visit_params(a, "", [&](const std::string&, auto& m) {
    using M = std::remove_reference_t<decltype(m)>;
    m += scale * (*static_cast<const M*>(src[i++]));
  });
}

template <class P>
bool all_params_finite(const P& p) {
  bool ok = true;
  visit_params(p, "", [&](const std::string&, const auto& m) { ok = ok && all_finite(m); });
  return ok;
}

// Closed-form parameter counts, used as an oracle for the layouts above.
inline std::size_t expected_backbone_param_count(const ViTConfig& c) {
  const std::size_t d = c.embed_dim;
  const std::size_t hidden = d * c.mlp_ratio;
  const std::size_t per_block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * hidden + hidden) +
                                (hidden * d + d);
  return static_cast<std::size_t>(c.patch_dim()) * d + d  // patch embedding
         + d + d                                          // cls and mask tokens
         + static_cast<std::size_t>(c.tokens()) * d       // positional embedding
         + per_block * c.depth + 2 * d;                   // blocks + final norm
}

inline std::size_t expected_head_param_count(const ViTConfig& c) {
  const std::size_t d = c.embed_dim, h = c.head_hidden_dim, bn = c.head_bottleneck_dim, k = c.head_out_dim;
  return (d * h + h) + (h * h + h) + (h * bn + bn) + bn * k;
}

namespace detail {
template <class S>
Matrix<S> trunc_normal(Eigen::Index rows, Eigen::Index cols, double std, Rng& rng) {
  Matrix<S> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(truncated_normal(rng, std));
  return m;
}
template <class S>
LinearParams<S> init_linear(int in, int out, Rng& rng) {
  return {trunc_normal<S>(in, out, 0.02, rng), Matrix<S>::Zero(1, out)};
}
template <class S>
LayerNormParams<S> init_layernorm(int dim) {
  return {Matrix<S>::Ones(1, dim), Matrix<S>::Zero(1, dim)};
}
template <class S>
HeadParams<S> init_head(const ViTConfig& c, Rng& rng) {
  HeadParams<S> h;
  h.fc1 = init_linear<S>(c.embed_dim, c.head_hidden_dim, rng);
  h.fc2 = init_linear<S>(c.head_hidden_dim, c.head_hidden_dim, rng);
  h.fc3 = init_linear<S>(c.head_hidden_dim, c.head_bottleneck_dim, rng);
  h.last_v = trunc_normal<S>(c.head_bottleneck_dim, c.head_out_dim, 0.02, rng);
  return h;
}
}  // namespace detail

// Random initialization: truncated normal (std 0.02) for weights and tokens,
// zero biases, unit LayerNorm gains, zero mask token.
template <class S>
VitParams<S> init_vit(const ViTConfig& c, std::uint64_t seed) {
  c.validate();
  auto rng = make_rng(seed, {0x1417});
  VitParams<S> p;
  auto& b = p.backbone;
  const int d = c.embed_dim;
  b.patch = detail::init_linear<S>(c.patch_dim(), d, rng);
  b.cls_token = detail::trunc_normal<S>(1, d, 0.02, rng);
  b.mask_token = Matrix<S>::Zero(1, d);
  b.pos_embed = detail::trunc_normal<S>(c.tokens(), d, 0.02, rng);
  for (int i = 0; i < c.depth; ++i) {
    BlockParams<S> blk;
    blk.ln1 = detail::init_layernorm<S>(d);
    blk.qkv = detail::init_linear<S>(d, 3 * d, rng);
    blk.proj = detail::init_linear<S>(d, d, rng);
    blk.ln2 = detail::init_layernorm<S>(d);
    blk.fc1 = detail::init_linear<S>(d, d * c.mlp_ratio, rng);
    blk.fc2 = detail::init_linear<S>(d * c.mlp_ratio, d, rng);
    b.blocks.push_back(std::move(blk));
  }
  b.norm = detail::init_layernorm<S>(d);
  p.head = detail::init_head<S>(c, rng);
  if (!c.shared_head) p.patch_head = detail::init_head<S>(c, rng);
  return p;
}

template <class To, class From>
VitParams<To> cast_vit(const VitParams<From>& p) {
  VitParams<To> out;
  out.backbone.blocks.resize(p.backbone.blocks.size());
  if (p.patch_head) out.patch_head.emplace();
  std::vector<const Matrix<From>*> src;
  visit_params(p, "", [&](const std::string&, const Matrix<From>& m) { src.push_back(&m); });
  std::size_t i = 0;
  visit_params(out, "", [&](const std::string&, Matrix<To>& m) { m = src[i++]->template cast<To>(); });
  return out;
}

}  // namespace cytofm
