#include "omae/vit/vit.hpp"

#include <cstdint>
#include <stdexcept>

namespace omae::vit {

ViTConfig ViTConfig::large() { return ViTConfig{}; }

ViTConfig ViTConfig::desk() {
  ViTConfig c;
  c.image_size = 64;
  c.patch_size = 8;
  c.enc_depth = 4;
  c.enc_dim = 64;
  c.enc_heads = 4;
  c.dec_depth = 2;
  c.dec_dim = 32;
  c.dec_heads = 4;
  return c;
}

void ViTConfig::validate() const {
  auto bad = [](const std::string& m) { throw std::invalid_argument("ViTConfig: " + m); };
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
    bad("image_size must be a positive multiple of patch_size");
  if (in_channels == 0 || enc_depth == 0 || mlp_ratio == 0) bad("zero-sized dimension");
  if (enc_heads == 0 || enc_dim % enc_heads != 0) bad("enc_dim must be divisible by enc_heads");
  if (dec_heads == 0 || dec_dim % dec_heads != 0) bad("dec_dim must be divisible by dec_heads");
  if (enc_dim % 4 != 0 || dec_dim % 4 != 0) bad("embedding dims must be divisible by 4");
}

void to_json(nlohmann::json& j, const ViTConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size}, {"patch_size", c.patch_size},
                     {"in_channels", c.in_channels}, {"enc_depth", c.enc_depth},
                     {"enc_dim", c.enc_dim},       {"enc_heads", c.enc_heads},
                     {"dec_depth", c.dec_depth},   {"dec_dim", c.dec_dim},
                     {"dec_heads", c.dec_heads},   {"mlp_ratio", c.mlp_ratio},
                     {"pooling", c.pooling == Pooling::Mean ? "mean" : "cls"},
                     {"init", c.init == nn::Init::XavierUniform ? "xavier_uniform" : "trunc_normal"}};
}

void from_json(const nlohmann::json& j, ViTConfig& c) {
  c.image_size = j.at("image_size").get<std::size_t>();
  c.patch_size = j.at("patch_size").get<std::size_t>();
  c.in_channels = j.at("in_channels").get<std::size_t>();
  c.enc_depth = j.at("enc_depth").get<std::size_t>();
  c.enc_dim = j.at("enc_dim").get<std::size_t>();
  c.enc_heads = j.at("enc_heads").get<std::size_t>();
  c.dec_depth = j.at("dec_depth").get<std::size_t>();
  c.dec_dim = j.at("dec_dim").get<std::size_t>();
  c.dec_heads = j.at("dec_heads").get<std::size_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
  c.pooling = j.value("pooling", std::string("cls")) == "mean" ? Pooling::Mean : Pooling::ClassToken;
  c.init = j.value("init", std::string("xavier_uniform")) == "trunc_normal" ? nn::Init::TruncNormal
                                                                           : nn::Init::XavierUniform;
}

template <typename T>
std::vector<T> patchify(std::span<const T> image, std::size_t channels, std::size_t height,
                        std::size_t width, std::size_t patch) {
  if (patch == 0 || height % patch != 0 || width % patch != 0)
    throw std::invalid_argument("image " + std::to_string(height) + "x" + std::to_string(width) +
                                " not divisible into " + std::to_string(patch) + "px patches");
  if (image.size() != channels * height * width)
    throw std::invalid_argument("patchify: buffer size does not match geometry");
  const std::size_t gh = height / patch, gw = width / patch;
  const std::size_t pd = patch * patch * channels;
  std::vector<T> out(gh * gw * pd);
  for (std::size_t r = 0; r < gh; ++r)
    for (std::size_t c = 0; c < gw; ++c) {
      T* dst = out.data() + (r * gw + c) * pd;
      for (std::size_t py = 0; py < patch; ++py)
        for (std::size_t px = 0; px < patch; ++px)
          for (std::size_t ch = 0; ch < channels; ++ch)
            dst[(py * patch + px) * channels + ch] =
                image[(ch * height + r * patch + py) * width + c * patch + px];
    }
  return out;
}

template <typename T>
std::vector<T> unpatchify(std::span<const T> tokens, std::size_t channels, std::size_t height,
                          std::size_t width, std::size_t patch) {
  if (patch == 0 || height % patch != 0 || width % patch != 0)
    throw std::invalid_argument("unpatchify: geometry not divisible by patch size");
  const std::size_t gh = height / patch, gw = width / patch;
  const std::size_t pd = patch * patch * channels;
  if (tokens.size() != gh * gw * pd)
    throw std::invalid_argument("unpatchify: got " + std::to_string(tokens.size() / pd) +
                                " patches, geometry needs " + std::to_string(gh * gw));
  std::vector<T> out(channels * height * width);
  for (std::size_t r = 0; r < gh; ++r)
    for (std::size_t c = 0; c < gw; ++c) {
      const T* src = tokens.data() + (r * gw + c) * pd;
      for (std::size_t py = 0; py < patch; ++py)
        for (std::size_t px = 0; px < patch; ++px)
          for (std::size_t ch = 0; ch < channels; ++ch)
            out[(ch * height + r * patch + py) * width + c * patch + px] =
                src[(py * patch + px) * channels + ch];
    }
  return out;
}

template <typename T>
Tensor<T> patchify_batch(const Tensor<T>& images, std::size_t patch) {
  if (images.rank() != 4) throw ShapeError("expected images [B x C x H x W]");
  const std::size_t B = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
  const std::size_t per = C * H * W;
  std::vector<T> all;
  all.reserve(images.numel());
  std::size_t L = 0;
  for (std::size_t b = 0; b < B; ++b) {
    auto p = patchify<T>(std::span<const T>(images.values().data() + b * per, per), C, H, W, patch);
    L = p.size() / (patch * patch * C);
    all.insert(all.end(), p.begin(), p.end());
  }
  return Tensor<T>({B, L, patch * patch * C}, std::move(all));
}

template <typename T>
VitEncoder<T> VitEncoder<T>::create(const ViTConfig& config, Rng& rng) {
  config.validate();
  VitEncoder e;
  e.config = config;
  e.patch_embed = nn::Linear<T>::create(config.patch_dim(), config.enc_dim, rng, true, config.init);
  e.cls_token = Tensor<T>({1, 1, config.enc_dim});
  for (auto& v : e.cls_token.values()) v = static_cast<T>(rng.truncated_normal(nn::kInitStd));
  e.pos_embed = nn::sincos_pos_embed<T>(config.grid(), config.grid(), config.enc_dim);
  for (std::size_t i = 0; i < config.enc_depth; ++i)
    e.blocks.push_back(
        nn::TransformerBlock<T>::create(config.enc_dim, config.enc_heads, config.mlp_ratio, rng,
                                        config.init));
  e.norm = nn::LayerNorm<T>::create(config.enc_dim);
  return e;
}

template <typename T>
Tensor<T> VitEncoder<T>::embed(const Tensor<T>& patches) const {
  if (patches.rank() != 3 || patches.dim(1) != config.num_patches() ||
      patches.dim(2) != config.patch_dim())
    throw ShapeError("encoder expects patches [B x " + std::to_string(config.num_patches()) +
                     " x " + std::to_string(config.patch_dim()) + "], got " +
                     shape_str(patches.shape()));
  return add(patch_embed(patches), pos_embed);
}

template <typename T>
Tensor<T> VitEncoder<T>::run(const Tensor<T>& tokens) const {
  const std::size_t B = tokens.dim(0);
  auto cls = broadcast_to(cls_token, {B, 1, config.enc_dim});
  auto x = concat<T>({cls, tokens}, 1);
  for (const auto& blk : blocks) x = blk(x);
  return norm(x);
}

template <typename T>
EncoderOutput<T> VitEncoder<T>::encode(const Tensor<T>& images) const {
  if (images.rank() != 4 || images.dim(1) != config.in_channels ||
      images.dim(2) != config.image_size || images.dim(3) != config.image_size)
    throw ShapeError("encoder expects images [B x " + std::to_string(config.in_channels) + " x " +
                     std::to_string(config.image_size) + " x " +
                     std::to_string(config.image_size) + "], got " + shape_str(images.shape()));
  if (patch_embed.in_features() != config.patch_dim() ||
      patch_embed.out_features() != config.enc_dim || blocks.size() != config.enc_depth)
    throw ShapeError("encoder parameters do not match its configuration");
  const std::size_t B = images.dim(0), L = config.num_patches(), D = config.enc_dim;
  auto out = run(embed(patchify_batch(images, config.patch_size)));
  EncoderOutput<T> res;
  res.tokens = slice(out, 1, 1, L);
  if (config.pooling == Pooling::ClassToken) {
    res.pooled = reshape(slice(out, 1, 0, 1), {B, D});
  } else {
    Tensor<T> avg({B, 1, L}, static_cast<T>(1.0 / static_cast<double>(L)));
    res.pooled = reshape(bmm(avg, res.tokens), {B, D});
  }
  return res;
}

template <typename T>
void VitEncoder<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  patch_embed.collect(prefix + ".patch_embed", out);
  out.push_back({prefix + ".cls_token", cls_token});
  for (std::size_t i = 0; i < blocks.size(); ++i)
    blocks[i].collect(prefix + ".blocks." + std::to_string(i), out);
  norm.collect(prefix + ".norm", out);
}

#define OMAE_INSTANTIATE_VIT(T)                                                              \
  template std::vector<T> patchify(std::span<const T>, std::size_t, std::size_t, std::size_t, \
                                   std::size_t);                                             \
  template std::vector<T> unpatchify(std::span<const T>, std::size_t, std::size_t,            \
                                     std::size_t, std::size_t);                               \
  template Tensor<T> patchify_batch(const Tensor<T>&, std::size_t);                           \
  template struct VitEncoder<T>;

OMAE_INSTANTIATE_VIT(float)
OMAE_INSTANTIATE_VIT(double)
template std::vector<std::uint8_t> patchify(std::span<const std::uint8_t>, std::size_t,
                                            std::size_t, std::size_t, std::size_t);
template std::vector<std::uint8_t> unpatchify(std::span<const std::uint8_t>, std::size_t,
                                              std::size_t, std::size_t, std::size_t);

}  // namespace omae::vit
