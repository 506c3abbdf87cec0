#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>

#include "omae/core/rng.hpp"
#include "omae/data/image.hpp"

namespace omae::data {

/// How a pixel is reduced to one value before thresholding.
enum class ThresholdMode { MaxChannel, Luminance };

/// Zeroes pixels whose reduced value is below threshold and crops to the
/// bounding box of the remaining pixels. Throws if nothing survives.
Image8 threshold_crop(const Image8& image, int threshold,
                      ThresholdMode mode = ThresholdMode::MaxChannel);

/// Catmull-Rom (a = -0.5) bicubic resize with edge clamping, pixel-centre
/// aligned, rounded and clamped to [0, 255]. Channels are independent.
Image8 resize_cubic(const Image8& image, std::size_t out_h, std::size_t out_w);
inline Image8 resize_cubic(const Image8& image, std::size_t size = 256) {
  return resize_cubic(image, size, size);
}

/// Cubic convolution weight for offset x.
double cubic_weight(double x);

Image8 hflip(const Image8& image);
Image8 crop(const Image8& image, std::size_t y, std::size_t x, std::size_t h, std::size_t w);

struct CropBox {
  std::size_t y = 0, x = 0, h = 0, w = 0;
  bool operator==(const CropBox&) const = default;
};

struct AugmentConfig {
  std::size_t output_size = 224;
  double min_area = 0.2;
  double max_area = 1.0;
  double min_aspect = 3.0 / 4.0;
  double max_aspect = 4.0 / 3.0;
  double flip_probability = 0.5;
  Normalization norm;
};

/// Random resized crop box: area fraction uniform in [min_area, max_area],
/// log-uniform aspect ratio; centre-crop fallback after 10 rejected draws.
CropBox sample_crop(std::size_t height, std::size_t width, const AugmentConfig& cfg, Rng& rng);

/// Crop, cubic resize to output_size, optional flip, then normalize.
FloatImage augment_with(const Image8& image, const CropBox& box, bool flip,
                        const AugmentConfig& cfg);
/// Random crop + flip drawn from rng.
FloatImage augment(const Image8& image, Rng& rng, const AugmentConfig& cfg = {});

/// Deterministic inference transform: resize to round(out * 256 / 224),
/// centre-crop out x out, normalize.
FloatImage eval_transform(const Image8& image, std::size_t out_size,
                          const Normalization& norm = {});

}  // namespace omae::data
