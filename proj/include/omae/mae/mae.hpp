#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "omae/core/optim.hpp"
#include "omae/data/image.hpp"
#include "omae/data/preprocess.hpp"
#include "omae/vit/vit.hpp"

namespace omae::mae {

class MaskError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct MaskPlan {
  std::size_t len_keep = 0;
  std::vector<std::size_t> ids_keep;     // visible patch indices, in shuffled order
  std::vector<std::size_t> ids_restore;  // position of patch i in [kept | masked] order
  std::vector<std::uint8_t> mask;        // 1 = masked

  std::size_t num_patches() const { return mask.size(); }
  bool operator==(const MaskPlan&) const = default;
};

/// floor(L * (1 - ratio)), robust to the representation error of ratio.
std::size_t keep_count(std::size_t num_patches, double mask_ratio);

MaskPlan random_mask(std::size_t num_patches, double mask_ratio, Rng& rng);

/// Plan from an explicit shuffle: the first len_keep entries are kept.
MaskPlan plan_from_shuffle(std::vector<std::size_t> ids_shuffle, std::size_t len_keep);

struct PretrainSchedule {
  std::size_t total_epochs = 50;
  std::size_t warmup_epochs = 15;
  double peak_lr = 1e-3;
  std::size_t batch_size = 64;
  double mask_ratio = 0.8;

  void validate() const;
  /// Warmup from 0 to peak, then cosine to 0.
  LrSchedule lr_schedule() const;
  double lr_at(double epoch) const { return lr_schedule().at(epoch); }
};

template <typename T>
struct MaeModel {
  vit::ViTConfig config;
  vit::VitEncoder<T> encoder;
  nn::Linear<T> decoder_embed;
  Tensor<T> mask_token;  // [1 x 1 x Dd]
  Tensor<T> decoder_pos;  // [(1 + L) x Dd], fixed, zero class row
  std::vector<nn::TransformerBlock<T>> decoder_blocks;
  nn::LayerNorm<T> decoder_norm;
  nn::Linear<T> decoder_pred;

  static MaeModel create(const vit::ViTConfig& config, Rng& rng);

  /// patches [B x L x P] with one plan per image (all with the same len_keep)
  /// -> per-patch predictions [B x L x P].
  Tensor<T> forward(const Tensor<T>& patches, const std::vector<MaskPlan>& plans) const;
  void collect(ParamList<T>& out) const;
};

/// Flattened [B x L] mask of a batch of plans.
template <typename T>
std::vector<T> mask_values(const std::vector<MaskPlan>& plans);

/// (sum over masked patches of |pred - target|^2 / P) / #masked.
template <typename T>
Tensor<T> masked_recon_loss(const Tensor<T>& pred, std::span<const T> target,
                            std::span<const T> mask);

/// Reconstruction target for one image's patches [L x P]. With norm_pix,
/// each patch is standardized by its own mean and variance.
std::vector<float> recon_target(std::span<const float> patches, std::size_t patch_dim,
                                bool norm_pix);

struct PretrainOptions {
  PretrainSchedule schedule;
  AdamWConfig optimizer;
  data::AugmentConfig augment;  // output_size is overridden by the model's image size
  bool norm_pix_loss = false;
  std::uint64_t seed = 0;
};

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double mean_loss = 0.0;
  double last_lr = 0.0;
};

class PretrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using EpochCallback =
    std::function<void(const EpochStats&, const MaeModel<float>&, const AdamW&)>;

/// Augment -> mask -> forward -> masked loss -> AdamW step, with the
/// learning rate updated every step at the fractional epoch position.
/// Per-sample randomness is derived from (seed, epoch, sample index).
std::vector<EpochStats> pretrain(MaeModel<float>& model, const std::vector<data::Image8>& images,
                                 const PretrainOptions& options, std::ostream* loss_log = nullptr,
                                 const EpochCallback& on_epoch = {});

/// Visible patches copied from the original, masked patches replaced by the
/// model's prediction mapped back to [0, 255]. The image must already have
/// the model's input size.
data::Image8 reconstruct_visualize(const MaeModel<float>& model, const data::Image8& image,
                                   const MaskPlan& plan, bool norm_pix_loss = false,
                                   const data::Normalization& norm = {});

/// Original, masked input (masked patches grey) and composite side by side.
data::Image8 visualization_panel(const data::Image8& original, const MaskPlan& plan,
                                 std::size_t patch, const data::Image8& composite);

}  // namespace omae::mae
