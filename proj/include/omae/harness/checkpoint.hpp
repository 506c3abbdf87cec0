#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "omae/classify/classify.hpp"
#include "omae/core/optim.hpp"
#include "omae/mae/mae.hpp"
#include "omae/vqa/vqa.hpp"

namespace omae::harness {

inline constexpr char kCheckpointMagic[4] = {'O', 'M', 'A', 'E'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { Io, Truncated, BadMagic, BadVersion, Corrupt, ShapeMismatch, MissingTensor, Duplicate };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
  bool operator==(const CheckpointTensor&) const = default;
};

struct OptimizerState {
  std::int64_t step = 0;
  // Per tensor, in the order of Checkpoint::tensors restricted to trained ones.
  std::vector<std::string> names;
  std::vector<std::vector<float>> first, second;
  bool operator==(const OptimizerState&) const = default;
};

/// File layout, little-endian:
///   "OMAE" | u32 version | u64 header length | header JSON
///   | u32 tensor count | per tensor: u32 name length, name, u32 rank,
///     u64 dims[rank], u64 byte length, float32 data
///   | u8 has optimizer | [i64 step, u32 count, per entry: u32 name length,
///     name, u64 n, float32 m[n], float32 v[n]]
/// The header holds {"kind", "config", "metadata"}.
struct Checkpoint {
  std::string kind;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<CheckpointTensor> tensors;
  std::optional<OptimizerState> optimizer;

  const CheckpointTensor* find(std::string_view name) const;
  bool operator==(const Checkpoint&) const = default;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Writes to a temporary sibling and renames it into place.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Writes bytes atomically (temporary file + rename).
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

std::vector<CheckpointTensor> tensors_from(const ParamList<float>& params);
/// Copies every checkpoint tensor whose name starts with prefix into the
/// parameter of the same name. Throws ShapeMismatch naming the tensor, or
/// MissingTensor when a checkpoint tensor has no counterpart (or, with
/// require_all, when a parameter under prefix is absent from the checkpoint).
/// Returns the number of tensors copied.
std::size_t load_into(const Checkpoint& ckpt, ParamList<float>& params, const std::string& prefix = "",
                      bool require_all = true);

OptimizerState optimizer_state(const AdamW& opt);
void restore_optimizer(const OptimizerState& state, AdamW& opt);

// Model-specific wrappers.

Checkpoint mae_checkpoint(const mae::MaeModel<float>& model, const nlohmann::json& metadata,
                          const AdamW* opt = nullptr);
mae::MaeModel<float> load_mae(const Checkpoint& ckpt);

Checkpoint classifier_checkpoint(const classify::Classifier<float>& model, const std::vector<std::string>& classes,
                                 const nlohmann::json& metadata);
struct LoadedClassifier {
  classify::Classifier<float> model;
  std::vector<std::string> classes;
};
LoadedClassifier load_classifier(const Checkpoint& ckpt);
/// Encoder weights from an MAE or classifier checkpoint ("encoder.*").
void load_encoder(const Checkpoint& ckpt, vit::VitEncoder<float>& encoder);

Checkpoint vqa_checkpoint(const vqa::VqaModel<float>& model, const vqa::Tokenizer& tok, const nlohmann::json& metadata);
struct LoadedVqa {
  vqa::VqaModel<float> model;
  vqa::Tokenizer tokenizer;
};
LoadedVqa load_vqa(const Checkpoint& ckpt);

}  // namespace omae::harness
