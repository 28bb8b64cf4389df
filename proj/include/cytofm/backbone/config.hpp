#pragma once

#include "cytofm/core/blob_io.hpp"
#include "cytofm/core/error.hpp"

#include <array>
#include <string>

namespace cytofm {

enum class VitPreset { vit_tiny_desk, vit_base };
NLOHMANN_JSON_SERIALIZE_ENUM(VitPreset, {{VitPreset::vit_tiny_desk, "vit_tiny_desk"},
                                         {VitPreset::vit_base, "vit_base"}})

struct ViTConfig {
  VitPreset preset = VitPreset::vit_tiny_desk;
  int image_size = 256;
  int patch_size = 32;
  int depth = 4;
  int embed_dim = 64;
  int heads = 4;
  int mlp_ratio = 4;
  // Projection head: 3-layer MLP -> L2-normalized bottleneck -> weight-normalized
  // linear layer with head_out_dim outputs.
  int head_hidden_dim = 256;
  int head_bottleneck_dim = 64;
  int head_out_dim = 1024;
  bool shared_head = true;
  // Per-channel input normalization (RGB, on the [0,1] scale).
  std::array<float, 3> pixel_mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> pixel_std{0.229f, 0.224f, 0.225f};

  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  int tokens() const { return num_patches() + 1; }
  int patch_dim() const { return patch_size * patch_size * 3; }

  void validate() const {
    CYTOFM_REQUIRE(image_size > 0 && patch_size > 0, "image and patch size must be positive");
    CYTOFM_REQUIRE(image_size % patch_size == 0, "patch_size must divide image_size");
    CYTOFM_REQUIRE(depth > 0 && embed_dim > 0 && heads > 0 && mlp_ratio > 0, "ViT dims must be positive");
    CYTOFM_REQUIRE(embed_dim % heads == 0, "heads must divide embed_dim");
    CYTOFM_REQUIRE(head_hidden_dim > 0 && head_bottleneck_dim > 0 && head_out_dim > 0,
                   "head dims must be positive");
    for (float s : pixel_std) CYTOFM_REQUIRE(s > 0, "pixel_std must be positive");
  }

  static ViTConfig preset_config(VitPreset p) {
    ViTConfig c;
    c.preset = p;
    if (p == VitPreset::vit_base) {
      c.patch_size = 16;
      c.depth = 12;
      c.embed_dim = 768;
      c.heads = 12;
      c.head_hidden_dim = 2048;
      c.head_bottleneck_dim = 256;
      c.head_out_dim = 8192;
    } else {
      c.depth = 4;
      c.embed_dim = 64;
      c.heads = 4;
    }
    return c;
  }
};

inline void to_json(json& j, const ViTConfig& c) {
  j = json{{"preset", c.preset},
           {"image_size", c.image_size},
           {"patch_size", c.patch_size},
           {"depth", c.depth},
           {"embed_dim", c.embed_dim},
           {"heads", c.heads},
           {"mlp_ratio", c.mlp_ratio},
           {"head_hidden_dim", c.head_hidden_dim},
           {"head_bottleneck_dim", c.head_bottleneck_dim},
           {"head_out_dim", c.head_out_dim},
           {"shared_head", c.shared_head},
           {"pixel_mean", c.pixel_mean},
           {"pixel_std", c.pixel_std}};
}

// Missing keys fall back to the preset named in "preset" (default vit_tiny_desk).
inline void from_json(const json& j, ViTConfig& c) {
  c = ViTConfig::preset_config(enum_value(j, "preset", VitPreset::vit_tiny_desk));
  c.image_size = j.value("image_size", c.image_size);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.depth = j.value("depth", c.depth);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.heads = j.value("heads", c.heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.head_hidden_dim = j.value("head_hidden_dim", c.head_hidden_dim);
  c.head_bottleneck_dim = j.value("head_bottleneck_dim", c.head_bottleneck_dim);
  c.head_out_dim = j.value("head_out_dim", c.head_out_dim);
  c.shared_head = j.value("shared_head", c.shared_head);
  c.pixel_mean = j.value("pixel_mean", c.pixel_mean);
  c.pixel_std = j.value("pixel_std", c.pixel_std);
}

}  // namespace cytofm
