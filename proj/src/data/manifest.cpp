#include "omae/data/manifest.hpp"

#include <array>
#include <fstream>
#include <numeric>
#include <set>

#include "json.hpp"
#include "omae/core/rng.hpp"

namespace omae::data {

namespace {

constexpr std::array<std::string_view, kModalityCount> kModalityNames = {
    "CFP",         "FFA",      "ICGA",        "FAF",
    "RetCam",      "OcularUltrasound", "OCT", "SlitLamp",
    "ExternalEye", "SpecularMicroscope", "CornealTopography"};

}  // namespace

std::string_view to_string(Modality m) { return kModalityNames[static_cast<std::size_t>(m)]; }

Modality parse_modality(std::string_view name) {
  for (std::size_t i = 0; i < kModalityNames.size(); ++i)
    if (kModalityNames[i] == name) return static_cast<Modality>(i);
  throw ManifestError("unknown modality '" + std::string(name) + "'");
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    default: return "unassigned";
  }
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  if (name == "unassigned" || name.empty()) return Split::Unassigned;
  throw ManifestError("unknown split '" + std::string(name) + "'");
}

void Manifest::validate() const {
  std::set<std::string> paths;
  for (const auto& r : records) {
    if (!paths.insert(r.path).second) throw ManifestError("duplicate path " + r.path);
    for (auto l : r.labels)
      if (l >= classes.size())
        throw ManifestError("label " + std::to_string(l) + " of " + r.path + " exceeds " +
                            std::to_string(classes.size()) + " classes");
    if (r.vessel_ratio && (*r.vessel_ratio < 0.0 || *r.vessel_ratio > 1.0))
      throw ManifestError("vessel_ratio of " + r.path + " outside [0, 1]");
  }
}

std::vector<const ImageRecord*> Manifest::in_split(Split s) const {
  std::vector<const ImageRecord*> out;
  for (const auto& r : records)
    if (r.split == s) out.push_back(&r);
  return out;
}

Manifest read_manifest(std::istream& in) {
  Manifest m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ManifestError("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.is_object()) throw ManifestError("manifest line " + std::to_string(lineno) + " is not an object");
    if (j.contains("classes") && !j.contains("path")) {
      m.classes = j.at("classes").get<std::vector<std::string>>();
      m.name = j.value("name", std::string{});
      continue;
    }
    try {
      ImageRecord r;
      r.path = j.at("path").get<std::string>();
      r.modality = parse_modality(j.at("modality").get<std::string>());
      if (j.contains("labels")) r.labels = j.at("labels").get<std::vector<std::size_t>>();
      if (j.contains("vessel_ratio") && !j.at("vessel_ratio").is_null())
        r.vessel_ratio = j.at("vessel_ratio").get<double>();
      if (j.contains("split")) r.split = parse_split(j.at("split").get<std::string>());
      m.records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ManifestError("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  m.validate();
  return m;
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ManifestError("cannot open manifest " + path.string());
  return read_manifest(in);
}

void write_manifest(const Manifest& m, std::ostream& out) {
  nlohmann::json header = {{"name", m.name}, {"classes", m.classes}};
  out << header.dump() << "\n";
  for (const auto& r : m.records) {
    nlohmann::json j = {{"path", r.path},
                        {"modality", std::string(to_string(r.modality))},
                        {"labels", r.labels}};
    if (r.vessel_ratio) j["vessel_ratio"] = *r.vessel_ratio;
    if (r.split != Split::Unassigned) j["split"] = std::string(to_string(r.split));
    out << j.dump() << "\n";
  }
}

void write_manifest(const Manifest& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ManifestError("cannot write manifest " + path.string());
  write_manifest(m, out);
}

QualityDecision quality_filter(const ImageRecord& record) {
  double min_ratio = 0.0;
  switch (record.modality) {
    case Modality::CFP: min_ratio = kCfpMinVesselRatio; break;
    case Modality::FFA:
    case Modality::ICGA: min_ratio = kAngiographyMinVesselRatio; break;
    default: return QualityDecision::Keep;
  }
  if (!record.vessel_ratio)
    throw ManifestError("quality_filter: " + record.path + " (" +
                        std::string(to_string(record.modality)) + ") has no vessel_ratio");
  return *record.vessel_ratio < min_ratio ? QualityDecision::Exclude : QualityDecision::Keep;
}

std::optional<int> crop_threshold(Modality m) {
  switch (m) {
    case Modality::CFP: return 15;
    case Modality::OCT: return 30;
    default: return std::nullopt;
  }
}

SplitCounts split_counts(std::size_t n) {
  SplitCounts c;
  c.train = n * 55 / 100;
  c.val = n * 15 / 100;
  c.test = n - c.train - c.val;
  return c;
}

Manifest split_dataset(const Manifest& manifest, std::uint64_t seed) {
  const std::size_t n = manifest.records.size();
  if (n < 3) throw ManifestError("split_dataset needs at least 3 records, got " + std::to_string(n));
  for (const auto& r : manifest.records)
    if (r.split != Split::Unassigned)
      throw ManifestError("split_dataset: " + r.path + " already has a split");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0x5b117));
  rng.shuffle(order.begin(), order.end());
  const SplitCounts c = split_counts(n);
  Manifest out = manifest;
  for (std::size_t i = 0; i < n; ++i) {
    Split s = i < c.train ? Split::Train : (i < c.train + c.val ? Split::Val : Split::Test);
    out.records[order[i]].split = s;
  }
  return out;
}

}  // namespace omae::data
