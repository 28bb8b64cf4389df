#include "cytofm/backbone/vit.hpp"
#include "cytofm/backbone/weights_io.hpp"
#include "support/gradcheck.hpp"

#include <gtest/gtest.h>

#include <filesystem>

namespace cytofm {
namespace {

ViTConfig small_config() {
  ViTConfig c = ViTConfig::preset_config(VitPreset::vit_tiny_desk);
  c.depth = 2;
  c.embed_dim = 32;
  c.heads = 4;
  c.patch_size = 32;
  c.head_hidden_dim = 48;
  c.head_bottleneck_dim = 16;
  c.head_out_dim = 24;
  return c;
}

RgbImage random_image(int size, std::uint64_t seed) {
  RgbImage img(size, size);
  auto rng = make_rng(seed);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(uniform_index(rng, 256));
  return img;
}

TEST(Patchify, TokenCounts) {
  for (int ps : {16, 32}) {
    ViTConfig c = small_config();
    c.patch_size = ps;
    const auto p = init_vit<float>(c, 1);
    const auto tokens = patchify_embed(random_image(256, 2), c, p.backbone);
    EXPECT_EQ(tokens.rows(), (256 / ps) * (256 / ps) + 1);
    EXPECT_EQ(tokens.cols(), c.embed_dim);
  }
}

TEST(Patchify, RejectsWrongSize) {
  const ViTConfig c = small_config();
  EXPECT_THROW(patchify<float>(random_image(224, 3), c), ValidationError);
}

TEST(Forward, AllFalseMaskIsNoOp) {
  const ViTConfig c = small_config();
  auto p = init_vit<float>(c, 4);
  p.backbone.mask_token.setConstant(0.3f);
  const auto px = patchify<float>(random_image(256, 5), c);
  const std::vector<bool> mask(static_cast<std::size_t>(c.num_patches()), false);
  const auto a = vit_forward(p, c, px);
  const auto b = vit_forward(p, c, px, &mask);
  EXPECT_EQ(a.cls, b.cls);
  EXPECT_EQ(a.patch_head_logits, b.patch_head_logits);
}

TEST(Forward, DeterministicAndNormalizedAttention) {
  const ViTConfig c = small_config();
  const auto p = init_vit<float>(c, 6);
  const auto px = patchify<float>(random_image(256, 7), c);
  const auto a = vit_forward(p, c, px);
  const auto b = vit_forward(p, c, px);
  EXPECT_EQ(a.cls, b.cls);
  EXPECT_EQ(a.cls_head_logits, b.cls_head_logits);
  ASSERT_EQ(static_cast<int>(a.last_layer_attention.size()), c.heads);
  for (const auto& att : a.last_layer_attention) {
    ASSERT_EQ(att.rows(), c.tokens());
    for (Eigen::Index r = 0; r < att.rows(); ++r) EXPECT_NEAR(att.row(r).sum(), 1.0f, 1e-5f);
  }
  EXPECT_TRUE(all_finite(a.patch_head_logits));
}

TEST(Forward, MaskedPositionsStillProduceLogits) {
  const ViTConfig c = small_config();
  const auto p = init_vit<float>(c, 8);
  std::vector<bool> mask(static_cast<std::size_t>(c.num_patches()), false);
  mask[0] = mask[5] = true;
  const auto out = vit_forward(p, c, patchify<float>(random_image(256, 9), c), &mask);
  EXPECT_EQ(out.patch_head_logits.rows(), c.num_patches());
  EXPECT_TRUE(all_finite(out.patch_head_logits));
}

// Permuting the patch tokens together with their positional embeddings leaves
// the CLS output unchanged: attention is permutation-equivariant.
TEST(Forward, PositionalEmbeddingConsistency) {
  const ViTConfig c = small_config();
  auto p = init_vit<double>(c, 10);
  const auto px = patchify<double>(random_image(256, 11), c);
  const auto base = vit_forward(p, c, px);
  const int n = c.num_patches();
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  auto rng = make_rng(12);
  shuffle(perm, rng);
  Matrix<double> px2(px.rows(), px.cols());
  Matrix<double> pos2 = p.backbone.pos_embed;
  for (int i = 0; i < n; ++i) {
    px2.row(i) = px.row(perm[i]);
    pos2.row(i + 1) = p.backbone.pos_embed.row(perm[i] + 1);
  }
  p.backbone.pos_embed = pos2;
  const auto moved = vit_forward(p, c, px2);
  EXPECT_LT((base.cls - moved.cls).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Params, CountsMatchClosedForm) {
  for (bool shared : {true, false}) {
    ViTConfig c = small_config();
    c.shared_head = shared;
    const auto p = init_vit<float>(c, 13);
    EXPECT_EQ(count_params(p.backbone), expected_backbone_param_count(c));
    EXPECT_EQ(count_params(p.head), expected_head_param_count(c));
    EXPECT_EQ(count_params(p), expected_backbone_param_count(c) + (shared ? 1 : 2) * expected_head_param_count(c));
  }
}

class BackboneGradient : public ::testing::TestWithParam<bool> {};

TEST_P(BackboneGradient, MatchesFiniteDifferences) {
  ViTConfig c = small_config();
  c.shared_head = GetParam();
  auto p = init_vit<double>(c, 14);
  // Larger weights than init so that nonlinearities are exercised.
  auto rng = make_rng(15);
  visit_params(p, "", [&](const std::string&, Matrix<double>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += normal(rng, 0.0, 0.1);
  });
  const auto px = patchify<double>(random_image(256, 16), c);
  std::vector<bool> mask(static_cast<std::size_t>(c.num_patches()), false);
  for (int i = 0; i < c.num_patches(); i += 3) mask[static_cast<std::size_t>(i)] = true;
  const Matrix<double> r_cls = Matrix<double>::Random(1, c.head_out_dim);
  const Matrix<double> r_patch = Matrix<double>::Random(c.num_patches(), c.head_out_dim);
  const Matrix<double> r_tok = Matrix<double>::Random(c.tokens(), c.embed_dim);
  auto loss = [&]() {
    const auto out = vit_forward(p, c, px, &mask);
    double l = (r_cls.array() * out.cls_head_logits.array()).sum() +
               (r_patch.array() * out.patch_head_logits.array()).sum();
    l += (r_tok.row(0).array() * out.cls.array()).sum() +
         (r_tok.bottomRows(c.num_patches()).array() * out.patch_tokens.array()).sum();
    return l;
  };
  ForwardCache<double> cache;
  vit_forward(p, c, px, &mask, &cache);
  auto grads = zeros_like(p);
  vit_backward(p, c, cache, r_cls, r_patch, grads, &r_tok);
  const auto res = testing::check_gradients(p, grads, loss, 17);
  EXPECT_LT(res.worst_rel_error, 1e-3) << "worst tensor " << res.worst_tensor;

  // Negative control: a corrupted analytic gradient must be caught.
  grads.backbone.blocks[1].fc1.w *= 1.01;
  EXPECT_GT(testing::check_gradients(p, grads, loss, 17).worst_rel_error, 1e-3);
}

INSTANTIATE_TEST_SUITE_P(HeadSharing, BackboneGradient, ::testing::Bool());

TEST(WeightsIo, EncoderRoundTripIsBitExact) {
  const ViTConfig c = small_config();
  FrozenEncoder e{c, init_vit<float>(c, 18).backbone, "probe"};
  const auto dir = std::filesystem::temp_directory_path() / "cytofm_test_weights";
  std::filesystem::create_directories(dir);
  save_encoder(dir / "enc", e);
  const auto back = load_encoder(dir / "enc.manifest.json");
  EXPECT_EQ(back.id, "probe");
  std::vector<const Matrix<float>*> a;
  visit_params(e.weights, "", [&](const std::string&, const Matrix<float>& m) { a.push_back(&m); });
  std::size_t i = 0;
  visit_params(back.weights, "", [&](const std::string& name, const Matrix<float>& m) {
    ASSERT_EQ(m.size(), a[i]->size()) << name;
    EXPECT_EQ(0, std::memcmp(m.data(), a[i]->data(), sizeof(float) * m.size())) << name;
    ++i;
  });
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace cytofm
