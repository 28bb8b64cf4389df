#pragma once

#include "cytofm/backbone/params.hpp"
#include "cytofm/preprocess/image.hpp"

#include <optional>
#include <vector>

namespace cytofm {

// Per-token outputs of one forward pass. Head logits are only filled when the
// heads were run.
template <class S>
struct TokenOutputs {
  RowVector<S> cls;                         // D
  Matrix<S> patch_tokens;                   // G^2 x D
  RowVector<S> cls_head_logits;             // K
  Matrix<S> patch_head_logits;              // G^2 x K
  std::vector<Matrix<S>> last_layer_attention;  // heads x (T x T)
};

// Splits an RGB image into G^2 flattened patches (row-major grid; inside a
// patch: y, x, channel) and applies per-channel normalization.
template <class S>
Matrix<S> patchify(const RgbImage& img, const ViTConfig& c) {
  CYTOFM_REQUIRE(img.height == c.image_size && img.width == c.image_size,
                 "input is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                     ", model expects " + std::to_string(c.image_size) + "x" + std::to_string(c.image_size));
  const int g = c.grid();
  const int ps = c.patch_size;
  Matrix<S> out(g * g, c.patch_dim());
  std::array<S, 3> scale{}, shift{};
  for (int ch = 0; ch < 3; ++ch) {
    scale[ch] = static_cast<S>(1.0 / (255.0 * c.pixel_std[ch]));
    shift[ch] = static_cast<S>(c.pixel_mean[ch] / c.pixel_std[ch]);
  }
  for (int gy = 0; gy < g; ++gy)
    for (int gx = 0; gx < g; ++gx) {
      const int row = gy * g + gx;
      int col = 0;
      for (int y = 0; y < ps; ++y)
        for (int x = 0; x < ps; ++x)
          for (int ch = 0; ch < 3; ++ch)
            out(row, col++) = static_cast<S>(img.at(gy * ps + y, gx * ps + x, ch)) * scale[ch] - shift[ch];
    }
  return out;
}

template <class S>
struct BlockCache {
  LayerNormCache<S> ln1;
  AttentionCache<S> attn;
  LayerNormCache<S> ln2;
  Matrix<S> ln2_out;
  Matrix<S> fc1_pre;
  Matrix<S> fc1_act;
};

template <class S>
struct HeadCache {
  Matrix<S> input;
  Matrix<S> h1_pre, h1, h2_pre, h2;
  Matrix<S> z;
  Eigen::Matrix<S, Eigen::Dynamic, 1> z_norm;
  Matrix<S> zn;
  Matrix<S> w;               // column-normalized last layer
  RowVector<S> col_norm;
};

template <class S>
struct ForwardCache {
  Matrix<S> pixels;
  std::vector<bool> mask;
  std::vector<BlockCache<S>> blocks;
  LayerNormCache<S> final_ln;
  HeadCache<S> head;
  HeadCache<S> patch_head;
};

inline constexpr double kHeadNormEps = 1e-12;

template <class S>
Matrix<S> head_forward(const HeadParams<S>& p, const Matrix<S>& x, HeadCache<S>& c) {
  c.input = x;
  c.h1_pre = linear_forward(x, p.fc1);
  c.h1 = gelu(c.h1_pre);
  c.h2_pre = linear_forward(c.h1, p.fc2);
  c.h2 = gelu(c.h2_pre);
  c.z = linear_forward(c.h2, p.fc3);
  c.z_norm = c.z.rowwise().norm().cwiseMax(static_cast<S>(kHeadNormEps));
  c.zn = c.z.array().colwise() / c.z_norm.array();
  c.col_norm = p.last_v.colwise().norm();
  c.w = p.last_v.array().rowwise() / c.col_norm.array();
  Matrix<S> logits(x.rows(), p.last_v.cols());
  logits.noalias() = c.zn * c.w;
  return logits;
}

template <class S>
Matrix<S> head_backward(const HeadParams<S>& p, const HeadCache<S>& c, const Matrix<S>& dlogits,
                        HeadParams<S>& g) {
  Matrix<S> dw(c.w.rows(), c.w.cols());
  dw.noalias() = c.zn.transpose() * dlogits;
  const RowVector<S> proj = c.w.cwiseProduct(dw).colwise().sum();
  g.last_v.array() += (dw - c.w.cwiseProduct(proj.replicate(c.w.rows(), 1))).array().rowwise() /
                      c.col_norm.array();
  Matrix<S> dzn(dlogits.rows(), c.w.rows());
  dzn.noalias() = dlogits * c.w.transpose();
  const Eigen::Matrix<S, Eigen::Dynamic, 1> along = c.zn.cwiseProduct(dzn).rowwise().sum();
  Matrix<S> dz = (dzn - c.zn.cwiseProduct(along.replicate(1, c.zn.cols()))).array().colwise() /
                 c.z_norm.array();
  Matrix<S> dh2 = linear_backward(c.h2, p.fc3, dz, g.fc3);
  Matrix<S> dh2_pre = gelu_backward(c.h2_pre, dh2);
  Matrix<S> dh1 = linear_backward(c.h1, p.fc2, dh2_pre, g.fc2);
  Matrix<S> dh1_pre = gelu_backward(c.h1_pre, dh1);
  return linear_backward(c.input, p.fc1, dh1_pre, g.fc1);
}

// Patch embedding, CLS token, positional embedding. Patches flagged in mask
// are replaced by the learned mask token before positions are added.
template <class S>
Matrix<S> embed_tokens(const BackboneParams<S>& b, const ViTConfig& c, const Matrix<S>& pixels,
                       const std::vector<bool>* mask) {
  CYTOFM_REQUIRE(pixels.rows() == c.num_patches() && pixels.cols() == c.patch_dim(),
                 "patch matrix shape does not match the model config");
  if (mask)
    CYTOFM_REQUIRE(static_cast<int>(mask->size()) == c.num_patches(),
                   "mask length " + std::to_string(mask->size()) + " != " + std::to_string(c.num_patches()));
  Matrix<S> tokens(c.tokens(), c.embed_dim);
  tokens.row(0) = b.cls_token.row(0);
  tokens.bottomRows(c.num_patches()) = linear_forward(pixels, b.patch);
  if (mask)
    for (int i = 0; i < c.num_patches(); ++i)
      if ((*mask)[i]) tokens.row(i + 1) = b.mask_token.row(0);
  tokens += b.pos_embed;
  return tokens;
}

// Token sequence [G^2 + 1 x D] for an RGB patch.
template <class S>
Matrix<S> patchify_embed(const RgbImage& img, const ViTConfig& c, const BackboneParams<S>& b) {
  return embed_tokens(b, c, patchify<S>(img, c), nullptr);
}

template <class S>
Matrix<S> run_blocks(const BackboneParams<S>& b, const ViTConfig& c, Matrix<S> x,
                     std::vector<BlockCache<S>>& caches) {
  caches.resize(b.blocks.size());
  for (std::size_t i = 0; i < b.blocks.size(); ++i) {
    const auto& p = b.blocks[i];
    auto& bc = caches[i];
    const Matrix<S> h = layernorm_forward(x, p.ln1, bc.ln1);
    x += attention_forward(h, p.qkv, p.proj, c.heads, bc.attn);
    bc.ln2_out = layernorm_forward(x, p.ln2, bc.ln2);
    bc.fc1_pre = linear_forward(bc.ln2_out, p.fc1);
    bc.fc1_act = gelu(bc.fc1_pre);
    x += linear_forward(bc.fc1_act, p.fc2);
  }
  return x;
}

// Encoder plus (optionally) projection heads. With a cache the pass can be
// differentiated by vit_backward.
template <class S>
TokenOutputs<S> vit_forward(const VitParams<S>& p, const ViTConfig& c, const Matrix<S>& pixels,
                            const std::vector<bool>* mask = nullptr, ForwardCache<S>* cache = nullptr,
                            bool run_heads = true) {
  ForwardCache<S> local;
  ForwardCache<S>& fc = cache ? *cache : local;
  fc.pixels = pixels;
  fc.mask = mask ? *mask : std::vector<bool>(static_cast<std::size_t>(c.num_patches()), false);
  Matrix<S> x = run_blocks(p.backbone, c, embed_tokens(p.backbone, c, pixels, mask), fc.blocks);
  const Matrix<S> out = layernorm_forward(x, p.backbone.norm, fc.final_ln);
  TokenOutputs<S> r;
  r.cls = out.row(0);
  r.patch_tokens = out.bottomRows(c.num_patches());
  r.last_layer_attention = fc.blocks.back().attn.probs;
  if (run_heads) {
    if (c.shared_head) {
      const Matrix<S> logits = head_forward(p.head, out, fc.head);
      r.cls_head_logits = logits.row(0);
      r.patch_head_logits = logits.bottomRows(c.num_patches());
    } else {
      CYTOFM_REQUIRE(p.patch_head.has_value(), "config asks for separate heads but weights have one");
      r.cls_head_logits = head_forward(p.head, Matrix<S>(out.topRows(1)), fc.head).row(0);
      r.patch_head_logits = head_forward(*p.patch_head, Matrix<S>(out.bottomRows(c.num_patches())), fc.patch_head);
    }
  }
  return r;
}

// Encoder-only pass (no heads), used for frozen feature extraction.
template <class S>
TokenOutputs<S> encode(const BackboneParams<S>& b, const ViTConfig& c, const Matrix<S>& pixels) {
  std::vector<BlockCache<S>> caches;
  Matrix<S> x = run_blocks(b, c, embed_tokens(b, c, pixels, nullptr), caches);
  LayerNormCache<S> ln;
  const Matrix<S> out = layernorm_forward(x, b.norm, ln);
  TokenOutputs<S> r;
  r.cls = out.row(0);
  r.patch_tokens = out.bottomRows(c.num_patches());
  r.last_layer_attention = caches.back().attn.probs;
  return r;
}

// Backpropagates gradients of a scalar loss given w.r.t. the head logits
// (d_cls_logits: 1 x K, d_patch_logits: G^2 x K) and, optionally, w.r.t. the
// normalized encoder output tokens. Accumulates into grads.
template <class S>
void vit_backward(const VitParams<S>& p, const ViTConfig& c, const ForwardCache<S>& fc,
                  const Matrix<S>& d_cls_logits, const Matrix<S>& d_patch_logits, VitParams<S>& grads,
                  const Matrix<S>* d_tokens = nullptr) {
  const int n = c.num_patches();
  Matrix<S> dout = Matrix<S>::Zero(c.tokens(), c.embed_dim);
  if (c.shared_head) {
    Matrix<S> dlogits(c.tokens(), c.head_out_dim);
    dlogits.topRows(1) = d_cls_logits;
    dlogits.bottomRows(n) = d_patch_logits;
    dout += head_backward(p.head, fc.head, dlogits, grads.head);
  } else {
    dout.topRows(1) += head_backward(p.head, fc.head, d_cls_logits, grads.head);
    dout.bottomRows(n) += head_backward(*p.patch_head, fc.patch_head, d_patch_logits, *grads.patch_head);
  }
  if (d_tokens) dout += *d_tokens;
  auto& bg = grads.backbone;
  const auto& bp = p.backbone;
  Matrix<S> dx = layernorm_backward(fc.final_ln, bp.norm, dout, bg.norm);
  for (std::size_t i = bp.blocks.size(); i-- > 0;) {
    const auto& blk = bp.blocks[i];
    auto& g = bg.blocks[i];
    const auto& bc = fc.blocks[i];
    // MLP branch
    Matrix<S> dact = linear_backward(bc.fc1_act, blk.fc2, dx, g.fc2);
    Matrix<S> dpre = gelu_backward(bc.fc1_pre, dact);
    Matrix<S> dln2 = linear_backward(bc.ln2_out, blk.fc1, dpre, g.fc1);
    dx += layernorm_backward(bc.ln2, blk.ln2, dln2, g.ln2);
    // attention branch
    Matrix<S> dh = attention_backward(bc.attn, blk.qkv, blk.proj, c.heads, dx, g.qkv, g.proj);
    dx += layernorm_backward(bc.ln1, blk.ln1, dh, g.ln1);
  }
  // embedding
  bg.pos_embed += dx;
  bg.cls_token.row(0) += dx.row(0);
  Matrix<S> dembed = dx.bottomRows(n);
  for (int i = 0; i < n; ++i)
    if (fc.mask[static_cast<std::size_t>(i)]) {
      bg.mask_token.row(0) += dembed.row(i);
      dembed.row(i).setZero();
    }
  bg.patch.w.noalias() += fc.pixels.transpose() * dembed;
  bg.patch.b.row(0) += dembed.colwise().sum();
}

}  // namespace cytofm
