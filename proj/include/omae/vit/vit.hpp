#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "omae/nn/layers.hpp"

namespace omae::vit {

enum class Pooling { ClassToken, Mean };

/// Encoder/decoder geometry. The decoder fields are only used by the
/// masked-autoencoder model.
struct ViTConfig {
  std::size_t image_size = 224;
  std::size_t patch_size = 16;
  std::size_t in_channels = 3;
  std::size_t enc_depth = 24;
  std::size_t enc_dim = 1024;
  std::size_t enc_heads = 16;
  std::size_t dec_depth = 8;
  std::size_t dec_dim = 512;
  std::size_t dec_heads = 16;
  std::size_t mlp_ratio = 4;
  Pooling pooling = Pooling::ClassToken;
  /// Transformer and embedding weights; class/mask tokens always use the
  /// truncated normal.
  nn::Init init = nn::Init::XavierUniform;

  /// ViT-Large encoder with an 8 x 512 decoder at 224 px, patch 16.
  static ViTConfig large();
  /// Small CPU-sized geometry: 64 px, patch 8, 4 x 64 encoder, 2 x 32 decoder.
  static ViTConfig desk();

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch_size * patch_size * in_channels; }
  void validate() const;
  bool operator==(const ViTConfig&) const = default;
};

void to_json(nlohmann::json& j, const ViTConfig& c);
void from_json(const nlohmann::json& j, ViTConfig& c);

/// Splits a C x H x W image into row-major p x p patches. Each patch row is
/// laid out (row in patch, column in patch, channel).
template <typename T>
std::vector<T> patchify(std::span<const T> image, std::size_t channels, std::size_t height,
                        std::size_t width, std::size_t patch);

/// Inverse of patchify for an image of the given geometry.
template <typename T>
std::vector<T> unpatchify(std::span<const T> tokens, std::size_t channels, std::size_t height,
                          std::size_t width, std::size_t patch);

/// [B x C x H x W] -> [B x L x p*p*C], no gradient.
template <typename T>
Tensor<T> patchify_batch(const Tensor<T>& images, std::size_t patch);

template <typename T>
struct EncoderOutput {
  Tensor<T> pooled;  // [B x D]
  Tensor<T> tokens;  // [B x L x D], patch tokens after the final norm
};

template <typename T>
struct VitEncoder {
  ViTConfig config;
  nn::Linear<T> patch_embed;
  Tensor<T> cls_token;  // [1 x 1 x D]
  Tensor<T> pos_embed;  // [L x D], fixed
  std::vector<nn::TransformerBlock<T>> blocks;
  nn::LayerNorm<T> norm;

  static VitEncoder create(const ViTConfig& config, Rng& rng);

  /// Patch embedding plus positional embedding: [B x L x P] -> [B x L x D].
  Tensor<T> embed(const Tensor<T>& patches) const;
  /// Prepends the class token and runs blocks + final norm.
  Tensor<T> run(const Tensor<T>& tokens) const;
  EncoderOutput<T> encode(const Tensor<T>& images) const;
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

}  // namespace omae::vit
