#include "omae/data/image.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace omae::data {

namespace {

// Interleaved (HWC) <-> planar (CHW) conversion.
std::vector<std::uint8_t> to_interleaved(const Image8& img) {
  std::vector<std::uint8_t> out(img.pixels.size());
  const std::size_t hw = img.height * img.width;
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t i = 0; i < hw; ++i) out[i * img.channels + c] = img.pixels[c * hw + i];
  return out;
}

Image8 from_interleaved(const std::uint8_t* src, std::size_t c, std::size_t h, std::size_t w) {
  Image8 img(c, h, w);
  const std::size_t hw = h * w;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < hw; ++i) img.pixels[ch * hw + i] = src[i * c + ch];
  return img;
}

void check_codec_input(const Image8& image) {
  if (image.empty() || (image.channels != 1 && image.channels != 3))
    throw ImageError("only non-empty 1- or 3-channel images can be encoded");
}

}  // namespace

Image8 decode_png(std::span<const std::uint8_t> bytes) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
    throw ImageError(std::string("PNG decode failed: ") + img.message);
  const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
  img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  const std::size_t c = gray ? 1 : 3;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw ImageError("PNG decode failed: " + msg);
  }
  return from_interleaved(buf.data(), c, img.height, img.width);
}

std::vector<std::uint8_t> encode_png(const Image8& image) {
  check_codec_input(image);
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  auto raw = to_interleaved(image);
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, raw.data(), 0, nullptr))
    throw ImageError(std::string("PNG encode failed: ") + img.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, raw.data(), 0, nullptr))
    throw ImageError(std::string("PNG encode failed: ") + img.message);
  out.resize(size);
  return out;
}

Image8 decode_ppm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> std::size_t {
    skip_space();
    std::size_t v = 0;
    std::size_t digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      ++digits;
    }
    if (digits == 0) throw ImageError("PPM header: expected a number");
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '6' && bytes[1] != '5'))
    throw ImageError("not a binary PPM/PGM file");
  const std::size_t c = bytes[1] == '6' ? 3 : 1;
  pos = 2;
  const std::size_t w = read_int(), h = read_int(), maxval = read_int();
  if (maxval != 255) throw ImageError("only 8-bit PPM/PGM (maxval 255) is supported");
  if (w == 0 || h == 0) throw ImageError("PPM with zero dimension");
  ++pos;  // single whitespace before raster
  if (bytes.size() < pos + c * w * h) throw ImageError("PPM raster truncated");
  return from_interleaved(bytes.data() + pos, c, h, w);
}

std::vector<std::uint8_t> encode_ppm(const Image8& image) {
  check_codec_input(image);
  std::string header = (image.channels == 3 ? "P6\n" : "P5\n") + std::to_string(image.width) +
                       " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  auto raw = to_interleaved(image);
  out.insert(out.end(), raw.begin(), raw.end());
  return out;
}

Image8 to_rgb(const Image8& image) {
  if (image.channels == 3) return image;
  if (image.channels != 1) throw ImageError("cannot convert " + std::to_string(image.channels) +
                                            "-channel image to RGB");
  Image8 out(3, image.height, image.width);
  for (std::size_t c = 0; c < 3; ++c)
    std::copy(image.pixels.begin(), image.pixels.end(),
              out.pixels.begin() + static_cast<std::ptrdiff_t>(c * image.pixels.size()));
  return out;
}

Image8 load_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open image " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  static constexpr std::uint8_t kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  Image8 img;
  if (bytes.size() >= 8 && std::equal(kPngSig, kPngSig + 8, bytes.begin()))
    img = decode_png(bytes);
  else if (bytes.size() >= 2 && bytes[0] == 'P')
    img = decode_ppm(bytes);
  else
    throw ImageError("unsupported image format: " + path.string());
  return to_rgb(img);
}

void save_image(const Image8& image, const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  const auto bytes = (ext == ".ppm" || ext == ".pgm") ? encode_ppm(image) : encode_png(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageError("cannot write image " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

FloatImage normalize(const Image8& image, const Normalization& norm) {
  if (image.channels > 3) throw ImageError("normalize supports at most 3 channels");
  FloatImage out{image.channels, image.height, image.width,
                 std::vector<float>(image.pixels.size())};
  const std::size_t hw = image.height * image.width;
  for (std::size_t c = 0; c < image.channels; ++c)
    for (std::size_t i = 0; i < hw; ++i)
      out.pixels[c * hw + i] = static_cast<float>(
          (image.pixels[c * hw + i] / 255.0 - norm.mean[c]) / norm.std[c]);
  return out;
}

Image8 denormalize(const FloatImage& image, const Normalization& norm) {
  Image8 out(image.channels, image.height, image.width);
  const std::size_t hw = image.height * image.width;
  for (std::size_t c = 0; c < image.channels; ++c)
    for (std::size_t i = 0; i < hw; ++i) {
      const double v = (image.pixels[c * hw + i] * norm.std[c] + norm.mean[c]) * 255.0;
      out.pixels[c * hw + i] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  return out;
}

}  // namespace omae::data
