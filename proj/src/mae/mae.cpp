#include "omae/mae/mae.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>

namespace omae::mae {

std::size_t keep_count(std::size_t num_patches, double mask_ratio) {
  const double keep = static_cast<double>(num_patches) * (1.0 - mask_ratio);
  return static_cast<std::size_t>(std::floor(keep + 1e-9));
}

MaskPlan plan_from_shuffle(std::vector<std::size_t> ids_shuffle, std::size_t len_keep) {
  const std::size_t L = ids_shuffle.size();
  if (L == 0) throw MaskError("mask plan over zero patches");
  if (len_keep == 0) throw MaskError("mask plan keeps no patches; the encoder input would be empty");
  if (len_keep > L) throw MaskError("len_keep exceeds the number of patches");
  MaskPlan plan;
  plan.len_keep = len_keep;
  plan.ids_restore.assign(L, L);
  plan.mask.assign(L, 1);
  for (std::size_t j = 0; j < L; ++j) {
    const std::size_t id = ids_shuffle[j];
    if (id >= L || plan.ids_restore[id] != L) throw MaskError("ids_shuffle is not a permutation");
    plan.ids_restore[id] = j;
    if (j < len_keep) plan.mask[id] = 0;
  }
  plan.ids_keep.assign(ids_shuffle.begin(), ids_shuffle.begin() + static_cast<std::ptrdiff_t>(len_keep));
  return plan;
}

MaskPlan random_mask(std::size_t num_patches, double mask_ratio, Rng& rng) {
  if (num_patches == 0) throw MaskError("random_mask: L must be at least 1");
  if (!(mask_ratio >= 0.0) || mask_ratio >= 1.0)
    throw MaskError("random_mask: mask ratio must lie in [0, 1), got " + std::to_string(mask_ratio));
  const std::size_t len_keep = keep_count(num_patches, mask_ratio);
  if (len_keep == 0)
    throw MaskError("random_mask: ratio " + std::to_string(mask_ratio) + " keeps no patch of " +
                    std::to_string(num_patches));
  std::vector<double> noise(num_patches);
  for (auto& v : noise) v = rng.uniform();
  std::vector<std::size_t> ids(num_patches);
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) { return noise[a] < noise[b]; });
  return plan_from_shuffle(std::move(ids), len_keep);
}

void PretrainSchedule::validate() const {
  if (total_epochs == 0 || batch_size == 0 || !(peak_lr > 0.0))
    throw std::invalid_argument("PretrainSchedule: epochs, batch size and peak lr must be positive");
  if (warmup_epochs >= total_epochs)
    throw std::invalid_argument("PretrainSchedule: warmup_epochs must be below total_epochs");
  if (!(mask_ratio >= 0.0) || mask_ratio >= 1.0)
    throw std::invalid_argument("PretrainSchedule: mask ratio must lie in [0, 1)");
}

LrSchedule PretrainSchedule::lr_schedule() const {
  return {LrSchedule::Kind::WarmupCosine, static_cast<double>(total_epochs),
          static_cast<double>(warmup_epochs), peak_lr, 0.0};
}

template <typename T>
MaeModel<T> MaeModel<T>::create(const vit::ViTConfig& config, Rng& rng) {
  config.validate();
  if (config.dec_depth == 0) throw std::invalid_argument("MAE decoder needs at least one block");
  MaeModel m;
  m.config = config;
  m.encoder = vit::VitEncoder<T>::create(config, rng);
  m.decoder_embed = nn::Linear<T>::create(config.enc_dim, config.dec_dim, rng, true, config.init);
  m.mask_token = Tensor<T>({1, 1, config.dec_dim});
  for (auto& v : m.mask_token.values()) v = static_cast<T>(rng.truncated_normal(nn::kInitStd));
  const std::size_t L = config.num_patches();
  m.decoder_pos = Tensor<T>({L + 1, config.dec_dim});
  auto grid = nn::sincos_pos_embed<T>(config.grid(), config.grid(), config.dec_dim);
  std::copy(grid.values().begin(), grid.values().end(),
            m.decoder_pos.values().begin() + static_cast<std::ptrdiff_t>(config.dec_dim));
  for (std::size_t i = 0; i < config.dec_depth; ++i)
    m.decoder_blocks.push_back(
        nn::TransformerBlock<T>::create(config.dec_dim, config.dec_heads, config.mlp_ratio, rng,
                                        config.init));
  m.decoder_norm = nn::LayerNorm<T>::create(config.dec_dim);
  m.decoder_pred = nn::Linear<T>::create(config.dec_dim, config.patch_dim(), rng, true, config.init);
  return m;
}

template <typename T>
Tensor<T> MaeModel<T>::forward(const Tensor<T>& patches, const std::vector<MaskPlan>& plans) const {
  const std::size_t L = config.num_patches(), Dd = config.dec_dim;
  if (patches.rank() != 3 || patches.dim(1) != L || patches.dim(2) != config.patch_dim())
    throw ShapeError("MAE expects patches [B x " + std::to_string(L) + " x " +
                     std::to_string(config.patch_dim()) + "], got " + shape_str(patches.shape()));
  const std::size_t B = patches.dim(0);
  if (plans.size() != B) throw MaskError("one mask plan per image is required");
  const std::size_t K = plans.front().len_keep;
  std::vector<std::size_t> keep, restore;
  keep.reserve(B * K);
  restore.reserve(B * L);
  for (const auto& p : plans) {
    if (p.num_patches() != L || p.ids_restore.size() != L)
      throw MaskError("mask plan covers " + std::to_string(p.num_patches()) + " patches, model has " +
                      std::to_string(L));
    if (p.len_keep != K || p.ids_keep.size() != K)
      throw MaskError("mask plans in one batch must keep the same number of patches");
    keep.insert(keep.end(), p.ids_keep.begin(), p.ids_keep.end());
    restore.insert(restore.end(), p.ids_restore.begin(), p.ids_restore.end());
  }

  auto visible = gather_rows<T>(encoder.embed(patches), keep);
  auto latent = decoder_embed(encoder.run(visible));  // [B x (1+K) x Dd]
  auto kept = slice(latent, 1, 1, K);
  if (K < L) kept = concat<T>({kept, broadcast_to(mask_token, {B, L - K, Dd})}, 1);
  auto x = concat<T>({slice(latent, 1, 0, 1), gather_rows<T>(kept, restore)}, 1);
  x = add(x, decoder_pos);
  for (const auto& blk : decoder_blocks) x = blk(x);
  return slice(decoder_pred(decoder_norm(x)), 1, 1, L);
}

template <typename T>
void MaeModel<T>::collect(ParamList<T>& out) const {
  encoder.collect("encoder", out);
  decoder_embed.collect("decoder_embed", out);
  out.push_back({"mask_token", mask_token});
  for (std::size_t i = 0; i < decoder_blocks.size(); ++i)
    decoder_blocks[i].collect("decoder_blocks." + std::to_string(i), out);
  decoder_norm.collect("decoder_norm", out);
  decoder_pred.collect("decoder_pred", out);
}

template <typename T>
std::vector<T> mask_values(const std::vector<MaskPlan>& plans) {
  std::vector<T> out;
  for (const auto& p : plans)
    for (auto m : p.mask) out.push_back(static_cast<T>(m));
  return out;
}

template <typename T>
Tensor<T> masked_recon_loss(const Tensor<T>& pred, std::span<const T> target, std::span<const T> mask) {
  return masked_mse(pred, target, mask);
}

std::vector<float> recon_target(std::span<const float> patches, std::size_t patch_dim, bool norm_pix) {
  std::vector<float> out(patches.begin(), patches.end());
  if (!norm_pix) return out;
  for (std::size_t off = 0; off < out.size(); off += patch_dim) {
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < patch_dim; ++i) mean += out[off + i];
    mean /= static_cast<double>(patch_dim);
    for (std::size_t i = 0; i < patch_dim; ++i) var += (out[off + i] - mean) * (out[off + i] - mean);
    var /= static_cast<double>(patch_dim);
    const double inv = 1.0 / std::sqrt(var + 1e-6);
    for (std::size_t i = 0; i < patch_dim; ++i) out[off + i] = static_cast<float>((out[off + i] - mean) * inv);
  }
  return out;
}

namespace {

struct Sample {
  std::vector<float> patches, target;
  MaskPlan plan;
};

std::string format_log_line(std::size_t epoch, std::size_t step, double loss, double lr) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "epoch %zu step %zu loss %.9g lr %.9g", epoch, step, loss, lr);
  return buf;
}

}  // namespace

std::vector<EpochStats> pretrain(MaeModel<float>& model, const std::vector<data::Image8>& images,
                                 const PretrainOptions& options, std::ostream* loss_log,
                                 const EpochCallback& on_epoch) {
  const auto& sched = options.schedule;
  sched.validate();
  if (images.empty()) throw PretrainError("pretrain: the dataset is empty");
  const auto& cfg = model.config;
  data::AugmentConfig aug = options.augment;
  aug.output_size = cfg.image_size;
  const std::size_t N = images.size(), L = cfg.num_patches(), P = cfg.patch_dim();
  const std::size_t steps_per_epoch = (N + sched.batch_size - 1) / sched.batch_size;
  const LrSchedule lr_sched = sched.lr_schedule();
  if (keep_count(L, sched.mask_ratio) == 0)
    throw PretrainError("pretrain: mask ratio " + std::to_string(sched.mask_ratio) + " keeps no patch of " +
                        std::to_string(L));

  ParamList<float> params;
  model.collect(params);
  AdamW opt(params, options.optimizer);

  std::vector<EpochStats> history;
  std::size_t global_step = 0;
  for (std::size_t epoch = 0; epoch < sched.total_epochs; ++epoch) {
    std::vector<std::size_t> order(N);
    std::iota(order.begin(), order.end(), 0);
    Rng order_rng(derive_seed(options.seed, 0x0de7, epoch));
    order_rng.shuffle(order.begin(), order.end());

    double loss_sum = 0.0, lr = 0.0;
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      const std::size_t begin = step * sched.batch_size;
      const std::size_t B = std::min(sched.batch_size, N - begin);
      std::vector<Sample> batch(B);
#pragma omp parallel for schedule(static)
      for (std::size_t b = 0; b < B; ++b) {
        const std::size_t idx = order[begin + b];
        Rng rng(derive_seed(options.seed, epoch + 1, idx));
        auto img = data::augment(images[idx], rng, aug);
        batch[b].patches = vit::patchify<float>(img.pixels, img.channels, img.height, img.width, cfg.patch_size);
        batch[b].target = recon_target(batch[b].patches, P, options.norm_pix_loss);
        batch[b].plan = random_mask(L, sched.mask_ratio, rng);
      }
      Tensor<float> patches({B, L, P});
      std::vector<float> target;
      std::vector<MaskPlan> plans;
      target.reserve(B * L * P);
      for (std::size_t b = 0; b < B; ++b) {
        std::copy(batch[b].patches.begin(), batch[b].patches.end(),
                  patches.values().begin() + static_cast<std::ptrdiff_t>(b * L * P));
        target.insert(target.end(), batch[b].target.begin(), batch[b].target.end());
        plans.push_back(std::move(batch[b].plan));
      }
      const auto mask = mask_values<float>(plans);

      lr = lr_sched.at(static_cast<double>(epoch) +
                       static_cast<double>(step) / static_cast<double>(steps_per_epoch));
      opt.zero_grad();
      auto loss = masked_recon_loss<float>(model.forward(patches, plans), target, mask);
      const double value = loss.item();
      ++global_step;
      if (!std::isfinite(value))
        throw PretrainError("pretrain: non-finite loss at epoch " + std::to_string(epoch + 1) +
                            " step " + std::to_string(global_step) + " (lr " + std::to_string(lr) + ")");
      backward(loss);
      opt.step(lr);
      loss_sum += value * static_cast<double>(B);
      if (loss_log) *loss_log << format_log_line(epoch + 1, global_step, value, lr) << '\n';
    }
    EpochStats stats{epoch + 1, loss_sum / static_cast<double>(N), lr};
    history.push_back(stats);
    if (on_epoch) on_epoch(stats, model, opt);
  }
  if (loss_log) loss_log->flush();
  return history;
}

data::Image8 reconstruct_visualize(const MaeModel<float>& model, const data::Image8& image,
                                   const MaskPlan& plan, bool norm_pix_loss,
                                   const data::Normalization& norm) {
  const auto& cfg = model.config;
  if (image.channels != cfg.in_channels || image.height != cfg.image_size || image.width != cfg.image_size)
    throw ShapeError("reconstruct_visualize: image must be " + std::to_string(cfg.in_channels) + " x " +
                     std::to_string(cfg.image_size) + " x " + std::to_string(cfg.image_size));
  const std::size_t L = cfg.num_patches(), P = cfg.patch_dim(), p = cfg.patch_size;
  auto normalized = data::normalize(image, norm);
  auto patches = vit::patchify<float>(normalized.pixels, image.channels, image.height, image.width, p);

  std::vector<float> pred;
  {
    NoGradGuard guard;
    Tensor<float> input({1, L, P}, patches);
    pred = model.forward(input, {plan}).values();
  }
  if (norm_pix_loss) {
    for (std::size_t off = 0; off < pred.size(); off += P) {
      double mean = 0.0, var = 0.0;
      for (std::size_t i = 0; i < P; ++i) mean += patches[off + i];
      mean /= static_cast<double>(P);
      for (std::size_t i = 0; i < P; ++i) var += (patches[off + i] - mean) * (patches[off + i] - mean);
      var /= static_cast<double>(P);
      const double sd = std::sqrt(var + 1e-6);
      for (std::size_t i = 0; i < P; ++i) pred[off + i] = static_cast<float>(pred[off + i] * sd + mean);
    }
  }
  data::FloatImage pred_img{image.channels, image.height, image.width,
                            vit::unpatchify<float>(pred, image.channels, image.height, image.width, p)};
  const auto pred8 = data::denormalize(pred_img, norm);

  auto orig_patches = vit::patchify<std::uint8_t>(image.pixels, image.channels, image.height, image.width, p);
  const auto pred_patches =
      vit::patchify<std::uint8_t>(pred8.pixels, image.channels, image.height, image.width, p);
  for (std::size_t l = 0; l < L; ++l)
    if (plan.mask[l])
      std::copy_n(pred_patches.begin() + static_cast<std::ptrdiff_t>(l * P), P,
                  orig_patches.begin() + static_cast<std::ptrdiff_t>(l * P));
  data::Image8 out(image.channels, image.height, image.width);
  out.pixels = vit::unpatchify<std::uint8_t>(orig_patches, image.channels, image.height, image.width, p);
  return out;
}

data::Image8 visualization_panel(const data::Image8& original, const MaskPlan& plan, std::size_t patch,
                                 const data::Image8& composite) {
  const std::size_t C = original.channels, H = original.height, W = original.width;
  if (!(composite.channels == C && composite.height == H && composite.width == W))
    throw ShapeError("visualization_panel: original and composite differ in size");
  const std::size_t gw = W / patch;
  data::Image8 panel(C, H, 3 * W);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const bool masked = plan.mask[(y / patch) * gw + x / patch] != 0;
        panel.at(c, y, x) = original.at(c, y, x);
        panel.at(c, y, W + x) = masked ? 127 : original.at(c, y, x);
        panel.at(c, y, 2 * W + x) = composite.at(c, y, x);
      }
  return panel;
}

template struct MaeModel<float>;
template struct MaeModel<double>;
template std::vector<float> mask_values<float>(const std::vector<MaskPlan>&);
template std::vector<double> mask_values<double>(const std::vector<MaskPlan>&);
template Tensor<float> masked_recon_loss(const Tensor<float>&, std::span<const float>, std::span<const float>);
template Tensor<double> masked_recon_loss(const Tensor<double>&, std::span<const double>,
                                          std::span<const double>);

}  // namespace omae::mae
