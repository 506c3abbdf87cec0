#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "omae/core/optim.hpp"
#include "omae/data/image.hpp"
#include "omae/data/preprocess.hpp"
#include "omae/vit/vit.hpp"

namespace omae::classify {

class ClassifyError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Mode { SingleLabel, MultiLabel };

std::string_view to_string(Mode m);
Mode parse_mode(std::string_view name);

inline constexpr double kDefaultSmoothing = 0.1;

/// (1 - eps) * one_hot + eps / K. Throws unless exactly one entry is 1 and
/// the rest are 0, or if eps is outside [0, 1).
std::vector<double> label_smooth(std::span<const double> one_hot, double eps);

struct FinetuneRecipe {
  Mode mode = Mode::SingleLabel;
  std::size_t batch_size = 16;
  std::size_t epochs = 50;
  LrSchedule schedule;
  double smoothing = kDefaultSmoothing;
  AdamWConfig optimizer;
  std::size_t hidden_width = 0;  // 0 = single linear layer
  bool linear_probe = false;     // freeze the encoder

  /// Batch 16, 50 epochs, warmup 10 epochs to 5e-4, cosine to 1e-6.
  static FinetuneRecipe single_label();
  /// Batch 4, 30 epochs, constant 0.01, betas (0.9, 0.999).
  static FinetuneRecipe multi_label();
  static FinetuneRecipe preset(Mode mode) {
    return mode == Mode::SingleLabel ? single_label() : multi_label();
  }
  double lr_at(double epoch) const { return schedule.at(epoch); }
  void validate() const;
};

void to_json(nlohmann::json& j, const FinetuneRecipe& r);
void from_json(const nlohmann::json& j, FinetuneRecipe& r);

template <typename T>
struct ClassifierHead {
  nn::Linear<T> hidden;  // undefined weight when there is no hidden layer
  nn::Linear<T> out;

  static ClassifierHead create(std::size_t in, std::size_t num_classes, std::size_t hidden_width, Rng& rng);
  bool has_hidden() const { return hidden.weight.defined(); }
  std::size_t num_classes() const { return out.out_features(); }
  Tensor<T> operator()(const Tensor<T>& features) const;
  void collect(const std::string& prefix, ParamList<T>& params) const;
};

template <typename T>
struct Classifier {
  vit::ViTConfig config;
  Mode mode = Mode::SingleLabel;
  vit::VitEncoder<T> encoder;
  ClassifierHead<T> head;

  static Classifier create(const vit::ViTConfig& config, std::size_t num_classes, Mode mode,
                           std::size_t hidden_width, Rng& rng);
  std::size_t num_classes() const { return head.num_classes(); }
  /// images [B x C x H x W] -> logits [B x K].
  Tensor<T> forward(const Tensor<T>& images) const;
  void collect(ParamList<T>& params) const;
};

/// Images with one label list each; single-label sets hold exactly one label
/// per image.
struct LabeledSet {
  std::vector<std::string> paths;
  std::vector<data::Image8> images;
  std::vector<std::vector<std::size_t>> labels;

  std::size_t size() const { return images.size(); }
  void validate(std::size_t num_classes, Mode mode) const;
};

/// Index of the largest value, 1-based; ties go to the earliest.
std::size_t select_best_epoch(std::span<const double> val_auroc);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_auroc = 0.0;
  double val_aupr = 0.0;
  double lr = 0.0;
};
nlohmann::json to_json(const EpochRecord& r);

struct FinetuneResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  Classifier<float> best;  // deep copy of the weights at best_epoch
  std::vector<std::string> warnings;
};

/// Fine-tunes model in place and returns the per-epoch validation history
/// with a copy of the best model by validation macro AUROC. Writes one JSON
/// line per epoch to metrics_log.
FinetuneResult finetune(Classifier<float>& model, const LabeledSet& train, const LabeledSet& val,
                        const std::vector<std::string>& classes, const FinetuneRecipe& recipe,
                        std::uint64_t seed, std::ostream* metrics_log = nullptr);
FinetuneResult finetune_single_label(Classifier<float>& model, const LabeledSet& train, const LabeledSet& val,
                                     const std::vector<std::string>& classes, const FinetuneRecipe& recipe,
                                     std::uint64_t seed, std::ostream* metrics_log = nullptr);
FinetuneResult finetune_multi_label(Classifier<float>& model, const LabeledSet& train, const LabeledSet& val,
                                    const std::vector<std::string>& classes, const FinetuneRecipe& recipe,
                                    std::uint64_t seed, std::ostream* metrics_log = nullptr);

/// Softmax probabilities (single-label) or sigmoid scores (multi-label) per
/// image, through the deterministic centre-crop transform.
std::vector<std::vector<double>> predict(const Classifier<float>& model, const std::vector<data::Image8>& images,
                                         std::size_t batch_size = 16, const data::Normalization& norm = {});

/// Scores and labels in the shape the metrics code expects.
struct Evaluation {
  std::vector<std::vector<double>> scores;
  double auroc = 0.0;
  double aupr = 0.0;
  std::vector<std::string> skipped;
};
Evaluation evaluate(const Classifier<float>& model, const LabeledSet& set, const std::vector<std::string>& classes,
                    std::size_t batch_size = 16);

/// One JSON line per image: {path, scores, labels}.
void write_predictions(std::ostream& out, const LabeledSet& set, const std::vector<std::vector<double>>& scores);

/// Copies every tensor of src into dst; shapes and names must match.
void copy_weights(const Classifier<float>& src, Classifier<float>& dst);

}  // namespace omae::classify
