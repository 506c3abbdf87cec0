#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "omae/classify/classify.hpp"
#include "omae/data/manifest.hpp"
#include "omae/mae/mae.hpp"
#include "omae/metrics/metrics.hpp"
#include "omae/vqa/vqa.hpp"

namespace omae::harness {

namespace fs = std::filesystem;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flat "section.key" -> value map from an INI-style file: [section]
/// headers, key = value lines, '#' or ';' comments.
using IniMap = std::map<std::string, std::string>;
IniMap parse_ini(std::istream& in);
IniMap parse_ini(const fs::path& path);

/// Architecture from "preset" (desk | large) plus explicit overrides under
/// the given section.
vit::ViTConfig vit_config_from(const IniMap& ini, const std::string& section = "model");

inline const std::vector<std::uint64_t> kDefaultSeeds{0, 1, 2, 3, 4};

struct RunConfig {
  std::string name = "model";
  vit::ViTConfig vit = vit::ViTConfig::desk();
  classify::FinetuneRecipe recipe = classify::FinetuneRecipe::single_label();
  std::vector<std::uint64_t> seeds = kDefaultSeeds;
  fs::path manifest;
  fs::path image_root;  // empty: the manifest's directory
  fs::path checkpoint_dir = "checkpoints";
  fs::path report_dir = "reports";
  std::optional<fs::path> encoder_checkpoint;
  std::optional<fs::path> compare_report;
  bool paired = false;
  int threads = 0;  // 0 keeps the OpenMP default

  static RunConfig from_ini(const IniMap& ini);
  /// Seeds non-empty and distinct, input paths exist.
  void validate() const;
  fs::path resolved_root() const;
};

std::vector<std::uint64_t> parse_seed_list(const std::string& text);
void apply_threads(int threads);

// Data plumbing.

data::Image8 load_record_image(const data::ImageRecord& record, const fs::path& root);
classify::LabeledSet load_split(const data::Manifest& manifest, data::Split split, const fs::path& root);

struct PreprocessOptions {
  std::size_t size = 256;
  data::ThresholdMode mode = data::ThresholdMode::MaxChannel;
};
struct PreprocessSummary {
  std::size_t kept = 0;
  std::size_t excluded = 0;
};
/// Quality gate, background crop for modalities with a threshold, cubic
/// resize; writes PNGs and manifest.jsonl into out_dir and returns the new
/// manifest (relative paths).
data::Manifest preprocess_manifest(const data::Manifest& manifest, const fs::path& root, const fs::path& out_dir,
                                   const PreprocessOptions& options = {}, PreprocessSummary* summary = nullptr);

// Flows behind the CLI subcommands.

struct PretrainFlowResult {
  std::vector<mae::EpochStats> history;
  std::vector<fs::path> checkpoints;  // one per epoch
};
/// Pretrains on the train split (or every record if none is assigned) and
/// writes epoch_NNN.omae plus loss.log into out_dir.
PretrainFlowResult pretrain_flow(const data::Manifest& manifest, const fs::path& root, const vit::ViTConfig& config,
                                 const mae::PretrainOptions& options, const fs::path& out_dir);

struct SeedRun {
  std::uint64_t seed = 0;
  std::size_t best_epoch = 0;
  metrics::MacroResult test;
};

/// One seed: split (or reuse) the manifest, fine-tune, save
/// checkpoint_dir/seed_<s>/best.omae, write metrics.jsonl and
/// predictions.jsonl under report_dir/seed_<s>/ and score the test split.
SeedRun run_seed(const RunConfig& config, const data::Manifest& manifest, std::uint64_t seed,
                 std::ostream* progress = nullptr);

/// For each seed: split (or reuse the manifest's splits), fine-tune, predict
/// on test, score; then aggregate and optionally compare against another
/// report. Writes per-seed artifacts and report.json / report.txt. On a
/// seed failure, partial_report.json holds the finished seeds and the error
/// is rethrown.
metrics::EvalReport run_experiment(const RunConfig& config, std::ostream* progress = nullptr);

/// Recomputes metrics from a prediction dump of {path, scores, labels} lines.
metrics::MacroResult metrics_from_predictions(std::istream& in, const std::vector<std::string>& classes,
                                              bool single_label);

metrics::EvalReport read_report(const fs::path& path);
void write_report(const metrics::EvalReport& report, const fs::path& dir);

// VQA flows.

vqa::QaSet load_qa_set(const std::vector<vqa::QaPair>& pairs, const fs::path& root);

struct VqaTrainOptions {
  vit::ViTConfig vit = vit::ViTConfig::desk();
  vqa::VqaConfig lm;
  vqa::VqaRecipe recipe;
  std::optional<fs::path> encoder_checkpoint;
  std::uint64_t seed = 0;
};
/// Trains on a QA manifest and writes the final-epoch checkpoint.
std::vector<vqa::VqaEpoch> vqa_train_flow(const fs::path& qa_manifest, const fs::path& root,
                                          const VqaTrainOptions& options, const fs::path& checkpoint_out,
                                          std::ostream* loss_log = nullptr);

struct VqaScores {
  std::size_t count = 0;
  double exact_match = 0.0;
  double f1 = 0.0;
  std::vector<double> bleu;  // BLEU-1..4
};
nlohmann::json to_json(const VqaScores& s);
VqaScores score_vqa(const std::vector<vqa::VqaPrediction>& preds);
/// Greedy answers for a QA manifest; writes predictions.jsonl and
/// scores.json into out_dir.
VqaScores vqa_eval_flow(const fs::path& checkpoint, const fs::path& qa_manifest, const fs::path& root,
                        const fs::path& out_dir, std::size_t max_len = 16);

/// Original | masked | reconstruction panel for one image.
void visualize_flow(const fs::path& checkpoint, const fs::path& image, double mask_ratio, std::uint64_t seed,
                    const fs::path& out);

}  // namespace omae::harness
