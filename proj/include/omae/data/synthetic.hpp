#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "omae/core/rng.hpp"
#include "omae/data/image.hpp"
#include "omae/data/manifest.hpp"

namespace omae::data {

/// Fundus-like test image: a soft Gaussian disc of random colour, centre and
/// radius on a dark background.
Image8 synthetic_fundus(std::size_t size, Rng& rng);

std::vector<Image8> synthetic_fundus_set(std::size_t count, std::size_t size, std::uint64_t seed);

struct LabeledImages {
  std::vector<Image8> images;
  std::vector<std::size_t> labels;
};

/// Two separable classes: red-dominant discs (0) and green-blue discs (1),
/// alternating labels.
LabeledImages synthetic_two_class(std::size_t count, std::size_t size, std::uint64_t seed);

/// Writes synthetic_two_class images as PNGs plus manifest.jsonl (CFP,
/// vessel ratio 0.1, classes "red" and "green") into dir. Splits are left
/// unassigned.
Manifest write_synthetic_dataset(const std::filesystem::path& dir, std::size_t count, std::size_t size,
                                 std::uint64_t seed, const std::string& name = "synthetic");

}  // namespace omae::data
