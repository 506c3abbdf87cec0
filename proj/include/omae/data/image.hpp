#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace omae::data {

/// 8-bit planar (C x H x W) image.
struct Image8 {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;

  Image8() = default;
  Image8(std::size_t c, std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : channels(c), height(h), width(w), pixels(c * h * w, fill) {}

  std::uint8_t& at(std::size_t c, std::size_t y, std::size_t x) {
    return pixels[(c * height + y) * width + x];
  }
  std::uint8_t at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[(c * height + y) * width + x];
  }
  bool empty() const { return pixels.empty(); }
  bool operator==(const Image8&) const = default;
};

/// Normalized float image (C x H x W).
struct FloatImage {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;
};

struct Normalization {
  std::array<double, 3> mean{0.485, 0.456, 0.406};
  std::array<double, 3> std{0.229, 0.224, 0.225};
};

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Codecs. Decoders return the file's native channel count (1 or 3).
Image8 decode_png(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_png(const Image8& image);
Image8 decode_ppm(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_ppm(const Image8& image);

/// Reads a PNG or PPM/PGM file (sniffed by signature) and returns 3 channels;
/// single-channel images are replicated.
Image8 load_image(const std::filesystem::path& path);
/// Writes PNG unless the extension is .ppm/.pgm.
void save_image(const Image8& image, const std::filesystem::path& path);

Image8 to_rgb(const Image8& image);

FloatImage normalize(const Image8& image, const Normalization& norm = {});
/// Inverse of normalize, rounded and clamped to [0, 255].
Image8 denormalize(const FloatImage& image, const Normalization& norm = {});

}  // namespace omae::data
