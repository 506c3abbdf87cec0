#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "omae/core/optim.hpp"
#include "omae/data/image.hpp"
#include "omae/vit/vit.hpp"

namespace omae::vqa {

class VqaError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Special token ids.
inline constexpr std::size_t kPad = 0;
inline constexpr std::size_t kUnk = 1;
inline constexpr std::size_t kBos = 2;
inline constexpr std::size_t kEos = 3;
inline constexpr std::size_t kImg = 4;
inline constexpr std::size_t kNumSpecial = 5;

/// Word-level vocabulary over normalized text (lowercase, no punctuation).
class Tokenizer {
 public:
  Tokenizer();
  /// Specials first, then the sorted distinct words of the corpus.
  static Tokenizer build(const std::vector<std::string>& corpus);

  std::vector<std::size_t> encode(std::string_view text) const;
  /// Joins word tokens with single spaces; special tokens are dropped.
  std::string decode(const std::vector<std::size_t>& ids) const;
  std::size_t size() const { return words_.size(); }
  const std::string& word(std::size_t id) const { return words_.at(id); }

  nlohmann::json to_json() const;
  static Tokenizer from_json(const nlohmann::json& j);
  bool operator==(const Tokenizer& o) const { return words_ == o.words_; }

 private:
  std::vector<std::string> words_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

enum class ImageTokens { PooledAndPatches, PooledOnly };

struct VqaConfig {
  std::size_t lm_dim = 64;
  std::size_t lm_depth = 2;
  std::size_t lm_heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t max_positions = 128;
  std::size_t lora_rank = 8;
  double lora_alpha = 16.0;
  ImageTokens image_tokens = ImageTokens::PooledAndPatches;

  void validate() const;
  bool operator==(const VqaConfig&) const = default;
};

void to_json(nlohmann::json& j, const VqaConfig& c);
void from_json(const nlohmann::json& j, VqaConfig& c);

/// Decoder-only causal transformer with tied input/output embeddings and
/// fixed 1-D sine-cosine positions.
template <typename T>
struct TinyLm {
  Tensor<T> embed;  // [V x D]
  Tensor<T> pos;    // [max_positions x D], fixed
  std::vector<nn::TransformerBlock<T>> blocks;
  nn::LayerNorm<T> norm;

  static TinyLm create(std::size_t vocab, const VqaConfig& config, Rng& rng);
  std::size_t dim() const { return embed.dim(1); }
  std::size_t vocab() const { return embed.dim(0); }
  /// Input embeddings [B x T x D] -> logits [B x T x V].
  Tensor<T> run(const Tensor<T>& x) const;
  /// Base weights, excluding the adapters.
  void collect(const std::string& prefix, ParamList<T>& out) const;
  /// LoRA matrices on the query and value projections of every block.
  void collect_lora(const std::string& prefix, ParamList<T>& out) const;
  void attach_lora(std::size_t rank, double alpha, Rng& rng);
};

template <typename T>
struct VqaModel {
  vit::ViTConfig vit_config;
  VqaConfig config;
  vit::VitEncoder<T> encoder;
  nn::Linear<T> projection;  // enc_dim -> lm_dim
  TinyLm<T> lm;

  /// Fresh encoder, projection and language model with LoRA attached.
  static VqaModel create(const vit::ViTConfig& vit_config, const VqaConfig& config, std::size_t vocab, Rng& rng);

  std::size_t image_token_count() const;
  /// Encoder features for the prefix: [B x n_img x enc_dim], pooled first.
  Tensor<T> image_features(const Tensor<T>& images) const;
  /// Logits [B x (n_img + T) x V] for image features and token ids [B x T].
  Tensor<T> forward(const Tensor<T>& features, const std::vector<std::size_t>& ids, std::size_t batch) const;

  /// Projection plus LoRA matrices.
  void collect_trainable(ParamList<T>& out) const;
  void collect_all(ParamList<T>& out) const;
  /// Sum over adapters of r * (d_in + d_out), plus projection weights and bias.
  std::size_t trainable_count() const;
};

struct QaPair {
  std::string image_path;
  std::string question;
  std::string answer;
  bool operator==(const QaPair&) const = default;
};

/// JSON lines {image_path, question, answer}.
std::vector<QaPair> read_qa_manifest(std::istream& in);
std::vector<QaPair> read_qa_manifest(const std::filesystem::path& path);
void write_qa_manifest(const std::vector<QaPair>& pairs, std::ostream& out);

/// A QA corpus with decoded images; pairs[i] uses images[image_index[i]].
struct QaSet {
  std::vector<QaPair> pairs;
  std::vector<data::Image8> images;
  std::vector<std::size_t> image_index;

  std::size_t size() const { return pairs.size(); }
  void validate() const;
};

/// Token layout of one example: [BOS, question..., answer..., EOS] after the
/// image prefix. Loss applies to the predictions of ids[prompt_length..].
struct EncodedExample {
  std::vector<std::size_t> ids;
  std::size_t prompt_length = 0;  // BOS + question
};
EncodedExample encode_example(const Tokenizer& tok, std::string_view question, std::string_view answer);

struct VqaRecipe {
  std::size_t epochs = 3;
  std::size_t batch_size = 8;
  LrSchedule schedule{LrSchedule::Kind::WarmupCosine, 3.0, 0.0, 2e-5, 0.0};
  AdamWConfig optimizer;
  bool unfreeze_encoder = false;

  double lr_at(double epoch) const { return schedule.at(epoch); }
  void validate() const;
};

void to_json(nlohmann::json& j, const VqaRecipe& r);
void from_json(const nlohmann::json& j, VqaRecipe& r);

struct VqaEpoch {
  std::size_t epoch = 0;  // 1-based
  double mean_loss = 0.0;
  double last_lr = 0.0;
};

/// Teacher-forced cross-entropy on answer positions; trains the projection
/// and LoRA matrices (and the encoder when unfrozen). Returns the
/// final-epoch model in place.
std::vector<VqaEpoch> vqa_finetune(VqaModel<float>& model, const Tokenizer& tok, const QaSet& set,
                                   const VqaRecipe& recipe, std::uint64_t seed, std::ostream* loss_log = nullptr);

/// Argmax decoding from [image ‖ BOS ‖ question] until EOS or max_len tokens.
std::string greedy_decode(const VqaModel<float>& model, const Tokenizer& tok, const data::Image8& image,
                          std::string_view question, std::size_t max_len = 16);
/// Decoding from precomputed image features [1 x n_img x enc_dim].
std::vector<std::size_t> greedy_decode_ids(const VqaModel<float>& model, const Tensor<float>& features,
                                           const std::vector<std::size_t>& prompt, std::size_t max_len);

struct VqaPrediction {
  std::string image_path;
  std::string question;
  std::string reference;
  std::string prediction;
};
std::vector<VqaPrediction> vqa_predict(const VqaModel<float>& model, const Tokenizer& tok, const QaSet& set,
                                       std::size_t max_len = 16);
/// JSON lines {image_path, question, reference, prediction}.
void write_vqa_predictions(const std::vector<VqaPrediction>& preds, std::ostream& out);

}  // namespace omae::vqa
