#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace omae::data {

enum class Modality {
  CFP,
  FFA,
  ICGA,
  FAF,
  RetCam,
  OcularUltrasound,
  OCT,
  SlitLamp,
  ExternalEye,
  SpecularMicroscope,
  CornealTopography,
};

inline constexpr std::size_t kModalityCount = 11;

std::string_view to_string(Modality m);
Modality parse_modality(std::string_view name);

enum class Split { Unassigned, Train, Val, Test };
std::string_view to_string(Split s);
Split parse_split(std::string_view name);

struct ImageRecord {
  std::string path;
  Modality modality = Modality::CFP;
  std::vector<std::size_t> labels;
  std::optional<double> vessel_ratio;
  Split split = Split::Unassigned;

  bool operator==(const ImageRecord&) const = default;
};

struct Manifest {
  std::string name;
  std::vector<std::string> classes;
  std::vector<ImageRecord> records;

  /// Checks unique paths, label range and vessel ratio range.
  void validate() const;
  std::vector<const ImageRecord*> in_split(Split s) const;
  bool operator==(const Manifest&) const = default;
};

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// JSON-lines manifest: an optional header {"name", "classes"} followed by
/// one {path, modality, labels, vessel_ratio?, split?} object per line.
/// Unknown keys are ignored.
Manifest read_manifest(std::istream& in);
Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const Manifest& m, std::ostream& out);
void write_manifest(const Manifest& m, const std::filesystem::path& path);

// Vessel-ratio quality gate.
inline constexpr double kCfpMinVesselRatio = 0.04;
inline constexpr double kAngiographyMinVesselRatio = 0.01;

enum class QualityDecision { Keep, Exclude };

/// CFP is excluded below 0.04, FFA/ICGA below 0.01 (strict); every other
/// modality is kept. Throws if a gated modality has no vessel ratio.
QualityDecision quality_filter(const ImageRecord& record);

/// Background-crop threshold for a modality, if one is defined.
std::optional<int> crop_threshold(Modality m);

// 55:15:30 train/val/test split.
inline constexpr double kTrainFraction = 0.55;
inline constexpr double kValFraction = 0.15;

struct SplitCounts {
  std::size_t train = 0, val = 0, test = 0;
};
SplitCounts split_counts(std::size_t n);

/// Seeded uniform shuffle, then floor(0.55 N) train, floor(0.15 N) val,
/// remainder test. All records must be unassigned; N >= 3.
Manifest split_dataset(const Manifest& manifest, std::uint64_t seed);

}  // namespace omae::data
