#include "omae/data/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>

namespace omae::data {

namespace {

constexpr double kBackground = 8.0;

Image8 render_disc(std::size_t size, const std::array<double, 3>& colour, Rng& rng) {
  const double s = static_cast<double>(size);
  const double cy = rng.uniform(0.375, 0.625) * s, cx = rng.uniform(0.375, 0.625) * s;
  const double r = rng.uniform(0.3125, 0.4375) * s;
  Image8 img(3, size, size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double d = std::hypot(static_cast<double>(y) - cy, static_cast<double>(x) - cx) / r;
      const double fall = std::exp(-d * d);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = kBackground + (colour[c] - kBackground) * fall;
        img.at(c, y, x) = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
      }
    }
  return img;
}

}  // namespace

Image8 synthetic_fundus(std::size_t size, Rng& rng) {
  std::array<double, 3> colour{};
  for (auto& c : colour) c = rng.uniform(60.0, 240.0);
  return render_disc(size, colour, rng);
}

std::vector<Image8> synthetic_fundus_set(std::size_t count, std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Image8> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(synthetic_fundus(size, rng));
  return out;
}

LabeledImages synthetic_two_class(std::size_t count, std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  LabeledImages out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t label = i % 2;
    std::array<double, 3> colour{};
    if (label == 0)
      colour = {rng.uniform(190, 240), rng.uniform(60, 110), rng.uniform(40, 90)};
    else
      colour = {rng.uniform(40, 90), rng.uniform(150, 200), rng.uniform(170, 220)};
    out.images.push_back(render_disc(size, colour, rng));
    out.labels.push_back(label);
  }
  return out;
}

Manifest write_synthetic_dataset(const std::filesystem::path& dir, std::size_t count, std::size_t size,
                                 std::uint64_t seed, const std::string& name) {
  std::filesystem::create_directories(dir / "images");
  const auto set = synthetic_two_class(count, size, seed);
  Manifest m;
  m.name = name;
  m.classes = {"red", "green"};
  for (std::size_t i = 0; i < count; ++i) {
    char file[32];
    std::snprintf(file, sizeof(file), "images/img_%04zu.png", i);
    save_image(set.images[i], dir / file);
    m.records.push_back({file, Modality::CFP, {set.labels[i]}, 0.1, Split::Unassigned});
  }
  write_manifest(m, dir / "manifest.jsonl");
  return m;
}

}  // namespace omae::data
