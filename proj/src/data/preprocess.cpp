#include "omae/data/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace omae::data {

Image8 threshold_crop(const Image8& image, int threshold, ThresholdMode mode) {
  if (threshold < 0 || threshold > 255)
    throw std::invalid_argument("threshold must be in [0, 255], got " + std::to_string(threshold));
  if (image.empty()) throw ImageError("threshold_crop on an empty image");
  const std::size_t H = image.height, W = image.width, C = image.channels;
  Image8 work = image;
  std::size_t y0 = H, y1 = 0, x0 = W, x1 = 0;
  bool any = false;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      double v = 0.0;
      if (mode == ThresholdMode::MaxChannel || C != 3) {
        for (std::size_t c = 0; c < C; ++c) v = std::max(v, static_cast<double>(image.at(c, y, x)));
      } else {
        v = 0.299 * image.at(0, y, x) + 0.587 * image.at(1, y, x) + 0.114 * image.at(2, y, x);
      }
      if (v < threshold) {
        for (std::size_t c = 0; c < C; ++c) work.at(c, y, x) = 0;
      } else {
        any = true;
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
      }
    }
  if (!any) throw ImageError("image is empty after threshold " + std::to_string(threshold));
  return crop(work, y0, x0, y1 - y0 + 1, x1 - x0 + 1);
}

Image8 crop(const Image8& image, std::size_t y, std::size_t x, std::size_t h, std::size_t w) {
  if (h == 0 || w == 0 || y + h > image.height || x + w > image.width)
    throw std::invalid_argument("crop box outside image");
  Image8 out(image.channels, h, w);
  for (std::size_t c = 0; c < image.channels; ++c)
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t col = 0; col < w; ++col) out.at(c, r, col) = image.at(c, y + r, x + col);
  return out;
}

double cubic_weight(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

namespace {

struct Taps {
  std::vector<std::size_t> index;  // 4 per output sample
  std::vector<double> weight;
};

Taps make_taps(std::size_t in, std::size_t out) {
  Taps t;
  t.index.resize(out * 4);
  t.weight.resize(out * 4);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  const long last = static_cast<long>(in) - 1;
  for (std::size_t o = 0; o < out; ++o) {
    const double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    const double base = std::floor(src);
    const double frac = src - base;
    for (int k = 0; k < 4; ++k) {
      const long idx = static_cast<long>(base) + k - 1;
      t.index[o * 4 + k] = static_cast<std::size_t>(std::clamp(idx, 0L, last));
      t.weight[o * 4 + k] = cubic_weight(frac - (k - 1));
    }
  }
  return t;
}

}  // namespace

Image8 resize_cubic(const Image8& image, std::size_t out_h, std::size_t out_w) {
  if (image.empty()) throw ImageError("resize of an empty image");
  if (out_h == 0 || out_w == 0) throw std::invalid_argument("resize target must be positive");
  if (out_h == image.height && out_w == image.width) return image;
  const std::size_t C = image.channels, H = image.height, W = image.width;
  const Taps tx = make_taps(W, out_w);
  const Taps ty = make_taps(H, out_h);
  Image8 out(C, out_h, out_w);
  std::vector<double> tmp(H * out_w);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < out_w; ++x) {
        double s = 0.0;
        for (int k = 0; k < 4; ++k) s += tx.weight[x * 4 + k] * image.at(c, y, tx.index[x * 4 + k]);
        tmp[y * out_w + x] = s;
      }
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t x = 0; x < out_w; ++x) {
        double s = 0.0;
        for (int k = 0; k < 4; ++k) s += ty.weight[y * 4 + k] * tmp[ty.index[y * 4 + k] * out_w + x];
        out.at(c, y, x) = static_cast<std::uint8_t>(std::clamp(std::lround(s), 0L, 255L));
      }
  }
  return out;
}

Image8 hflip(const Image8& image) {
  Image8 out = image;
  for (std::size_t c = 0; c < image.channels; ++c)
    for (std::size_t y = 0; y < image.height; ++y)
      for (std::size_t x = 0; x < image.width; ++x)
        out.at(c, y, x) = image.at(c, y, image.width - 1 - x);
  return out;
}

CropBox sample_crop(std::size_t height, std::size_t width, const AugmentConfig& cfg, Rng& rng) {
  const double area = static_cast<double>(height) * static_cast<double>(width);
  const double log_lo = std::log(cfg.min_aspect), log_hi = std::log(cfg.max_aspect);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(cfg.min_area, cfg.max_area);
    const double aspect = std::exp(rng.uniform(log_lo, log_hi));
    const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target * aspect)));
    const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target / aspect)));
    if (w > 0 && h > 0 && w <= width && h <= height) {
      const std::size_t y = rng.index(height - h + 1);
      const std::size_t x = rng.index(width - w + 1);
      return {y, x, h, w};
    }
  }
  // Fallback: largest centred crop with a clamped aspect ratio.
  const double in_ratio = static_cast<double>(width) / static_cast<double>(height);
  std::size_t w = width, h = height;
  if (in_ratio < cfg.min_aspect)
    h = std::max<std::size_t>(1, std::lround(static_cast<double>(w) / cfg.min_aspect));
  else if (in_ratio > cfg.max_aspect)
    w = std::max<std::size_t>(1, std::lround(static_cast<double>(h) * cfg.max_aspect));
  h = std::min(h, height);
  w = std::min(w, width);
  return {(height - h) / 2, (width - w) / 2, h, w};
}

FloatImage augment_with(const Image8& image, const CropBox& box, bool flip,
                        const AugmentConfig& cfg) {
  Image8 patch = crop(image, box.y, box.x, box.h, box.w);
  patch = resize_cubic(patch, cfg.output_size, cfg.output_size);
  if (flip) patch = hflip(patch);
  return normalize(to_rgb(patch), cfg.norm);
}

FloatImage augment(const Image8& image, Rng& rng, const AugmentConfig& cfg) {
  const CropBox box = sample_crop(image.height, image.width, cfg, rng);
  const bool flip = rng.bernoulli(cfg.flip_probability);
  return augment_with(image, box, flip, cfg);
}

FloatImage eval_transform(const Image8& image, std::size_t out_size, const Normalization& norm) {
  const auto resized_size =
      static_cast<std::size_t>(std::lround(static_cast<double>(out_size) * 256.0 / 224.0));
  Image8 r = resize_cubic(image, resized_size, resized_size);
  const std::size_t off = (resized_size - out_size) / 2;
  return normalize(to_rgb(crop(r, off, off, out_size, out_size)), norm);
}

}  // namespace omae::data
