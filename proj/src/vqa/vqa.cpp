#include "omae/vqa/vqa.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <set>

#include "omae/core/ops.hpp"
#include "omae/data/preprocess.hpp"
#include "omae/metrics/metrics.hpp"

namespace omae::vqa {

Tokenizer::Tokenizer() : words_{"<pad>", "<unk>", "<bos>", "<eos>", "<img>"} {
  for (std::size_t i = 0; i < words_.size(); ++i) index_.emplace(words_[i], i);
}

Tokenizer Tokenizer::build(const std::vector<std::string>& corpus) {
  std::set<std::string> distinct;
  for (const auto& text : corpus)
    for (auto& w : metrics::word_tokens(text)) distinct.insert(std::move(w));
  Tokenizer t;
  for (const auto& w : distinct) {
    t.index_.emplace(w, t.words_.size());
    t.words_.push_back(w);
  }
  return t;
}

std::vector<std::size_t> Tokenizer::encode(std::string_view text) const {
  std::vector<std::size_t> out;
  for (const auto& w : metrics::word_tokens(text)) {
    auto it = index_.find(w);
    out.push_back(it == index_.end() || it->second < kNumSpecial ? kUnk : it->second);
  }
  return out;
}

std::string Tokenizer::decode(const std::vector<std::size_t>& ids) const {
  std::string out;
  for (auto id : ids) {
    if (id < kNumSpecial) continue;
    if (id >= words_.size()) throw VqaError("token id " + std::to_string(id) + " is outside the vocabulary");
    if (!out.empty()) out.push_back(' ');
    out += words_[id];
  }
  return out;
}

nlohmann::json Tokenizer::to_json() const {
  return std::vector<std::string>(words_.begin() + kNumSpecial, words_.end());
}

Tokenizer Tokenizer::from_json(const nlohmann::json& j) {
  Tokenizer t;
  for (const auto& w : j.get<std::vector<std::string>>()) {
    if (!t.index_.emplace(w, t.words_.size()).second) throw VqaError("duplicate vocabulary word '" + w + "'");
    t.words_.push_back(w);
  }
  return t;
}

void VqaConfig::validate() const {
  if (lm_dim == 0 || lm_heads == 0 || lm_dim % lm_heads != 0)
    throw VqaError("lm_dim must be a positive multiple of lm_heads");
  if (lm_dim % 2 != 0) throw VqaError("lm_dim must be even for sine-cosine positions");
  if (lm_depth == 0) throw VqaError("lm_depth must be at least 1");
  if (lora_rank == 0 || lora_rank >= lm_dim) throw VqaError("LoRA rank must satisfy 0 < r < lm_dim");
  if (max_positions < 4) throw VqaError("max_positions is too small");
}

void to_json(nlohmann::json& j, const VqaConfig& c) {
  j = {{"lm_dim", c.lm_dim},
       {"lm_depth", c.lm_depth},
       {"lm_heads", c.lm_heads},
       {"mlp_ratio", c.mlp_ratio},
       {"max_positions", c.max_positions},
       {"lora_rank", c.lora_rank},
       {"lora_alpha", c.lora_alpha},
       {"image_tokens", c.image_tokens == ImageTokens::PooledOnly ? "pooled" : "pooled_and_patches"}};
}

void from_json(const nlohmann::json& j, VqaConfig& c) {
  c = VqaConfig{};
  c.lm_dim = j.value("lm_dim", c.lm_dim);
  c.lm_depth = j.value("lm_depth", c.lm_depth);
  c.lm_heads = j.value("lm_heads", c.lm_heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.max_positions = j.value("max_positions", c.max_positions);
  c.lora_rank = j.value("lora_rank", c.lora_rank);
  c.lora_alpha = j.value("lora_alpha", c.lora_alpha);
  c.image_tokens = j.value("image_tokens", std::string("pooled_and_patches")) == "pooled"
                       ? ImageTokens::PooledOnly
                       : ImageTokens::PooledAndPatches;
}

template <typename T>
TinyLm<T> TinyLm<T>::create(std::size_t vocab, const VqaConfig& config, Rng& rng) {
  config.validate();
  TinyLm lm;
  const std::size_t D = config.lm_dim;
  lm.embed = Tensor<T>({vocab, D});
  // Rows have unit expected norm so tied logits are not vanishingly small.
  const double sd = 1.0 / std::sqrt(static_cast<double>(D));
  for (auto& w : lm.embed.values()) w = static_cast<T>(rng.truncated_normal(sd));
  lm.pos = nn::sincos_pos_embed_1d<T>(config.max_positions, D);
  for (std::size_t i = 0; i < config.lm_depth; ++i)
    lm.blocks.push_back(
        nn::TransformerBlock<T>::create(D, config.lm_heads, config.mlp_ratio, rng, nn::Init::XavierUniform));
  lm.norm = nn::LayerNorm<T>::create(D);
  return lm;
}

template <typename T>
Tensor<T> TinyLm<T>::run(const Tensor<T>& x) const {
  const std::size_t n = x.dim(1);
  if (n > pos.dim(0))
    throw VqaError("sequence of " + std::to_string(n) + " positions exceeds max_positions " +
                   std::to_string(pos.dim(0)));
  auto h = add(x, slice(pos, 0, 0, n));
  for (const auto& b : blocks) h = b(h, true);
  return linear(norm(h), embed);
}

template <typename T>
void TinyLm<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  out.push_back({prefix + ".embed", embed});
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + ".blocks." + std::to_string(i), out);
  norm.collect(prefix + ".norm", out);
}

template <typename T>
void TinyLm<T>::collect_lora(const std::string& prefix, ParamList<T>& out) const {
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto p = prefix + ".blocks." + std::to_string(i) + ".attn";
    if (blocks[i].attn.lora_q) blocks[i].attn.lora_q->collect(p + ".lora_q", out);
    if (blocks[i].attn.lora_v) blocks[i].attn.lora_v->collect(p + ".lora_v", out);
  }
}

template <typename T>
void TinyLm<T>::attach_lora(std::size_t rank, double alpha, Rng& rng) {
  const std::size_t D = dim();
  for (auto& b : blocks) {
    b.attn.lora_q = nn::LoraAdapter<T>::create(D, D, rank, alpha, rng);
    b.attn.lora_v = nn::LoraAdapter<T>::create(D, D, rank, alpha, rng);
  }
}

template <typename T>
VqaModel<T> VqaModel<T>::create(const vit::ViTConfig& vit_config, const VqaConfig& config, std::size_t vocab,
                                Rng& rng) {
  config.validate();
  VqaModel m;
  m.vit_config = vit_config;
  m.config = config;
  m.encoder = vit::VitEncoder<T>::create(vit_config, rng);
  m.projection = nn::Linear<T>::create(vit_config.enc_dim, config.lm_dim, rng, true, nn::Init::XavierUniform);
  m.lm = TinyLm<T>::create(vocab, config, rng);
  m.lm.attach_lora(config.lora_rank, config.lora_alpha, rng);
  return m;
}

template <typename T>
std::size_t VqaModel<T>::image_token_count() const {
  return config.image_tokens == ImageTokens::PooledOnly ? 1 : 1 + vit_config.num_patches();
}

template <typename T>
Tensor<T> VqaModel<T>::image_features(const Tensor<T>& images) const {
  const auto enc = encoder.encode(images);
  const std::size_t B = images.dim(0), E = vit_config.enc_dim;
  auto pooled = reshape(enc.pooled, {B, 1, E});
  if (config.image_tokens == ImageTokens::PooledOnly) return pooled;
  return concat<T>({pooled, enc.tokens}, 1);
}

template <typename T>
Tensor<T> VqaModel<T>::forward(const Tensor<T>& features, const std::vector<std::size_t>& ids,
                               std::size_t batch) const {
  if (features.rank() != 3 || features.dim(0) != batch || features.dim(2) != vit_config.enc_dim)
    throw ShapeError("VQA features must be [" + std::to_string(batch) + " x n x " +
                     std::to_string(vit_config.enc_dim) + "], got " + shape_str(features.shape()));
  if (batch == 0 || ids.empty() || ids.size() % batch != 0) throw VqaError("token ids do not split into the batch");
  for (auto id : ids)
    if (id >= lm.vocab()) throw VqaError("token id " + std::to_string(id) + " is outside the vocabulary");
  const std::size_t T_len = ids.size() / batch;
  auto prefix = projection(features);
  auto tokens = embedding(lm.embed, ids, {batch, T_len});
  return lm.run(concat<T>({prefix, tokens}, 1));
}

template <typename T>
void VqaModel<T>::collect_trainable(ParamList<T>& out) const {
  projection.collect("projection", out);
  lm.collect_lora("lm", out);
}

template <typename T>
void VqaModel<T>::collect_all(ParamList<T>& out) const {
  encoder.collect("encoder", out);
  projection.collect("projection", out);
  lm.collect("lm", out);
  lm.collect_lora("lm", out);
}

template <typename T>
std::size_t VqaModel<T>::trainable_count() const {
  ParamList<T> ps;
  collect_trainable(ps);
  std::size_t n = 0;
  for (const auto& p : ps) n += p.tensor.numel();
  return n;
}

template struct TinyLm<float>;
template struct TinyLm<double>;
template struct VqaModel<float>;
template struct VqaModel<double>;

std::vector<QaPair> read_qa_manifest(std::istream& in) {
  std::vector<QaPair> out;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("image_path").get<std::string>(), j.at("question").get<std::string>(),
                     j.at("answer").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw VqaError("QA manifest line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::vector<QaPair> read_qa_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw VqaError("cannot open QA manifest " + path.string());
  return read_qa_manifest(in);
}

void write_qa_manifest(const std::vector<QaPair>& pairs, std::ostream& out) {
  for (const auto& p : pairs)
    out << nlohmann::json{{"image_path", p.image_path}, {"question", p.question}, {"answer", p.answer}}.dump()
        << '\n';
}

void QaSet::validate() const {
  if (pairs.empty()) throw VqaError("the QA set is empty");
  if (image_index.size() != pairs.size()) throw VqaError("QA set: image_index and pairs differ in length");
  for (auto i : image_index)
    if (i >= images.size()) throw VqaError("QA set: image index " + std::to_string(i) + " out of range");
}

EncodedExample encode_example(const Tokenizer& tok, std::string_view question, std::string_view answer) {
  const auto q = tok.encode(question);
  if (q.empty()) throw VqaError("empty question");
  EncodedExample ex;
  ex.ids.push_back(kBos);
  ex.ids.insert(ex.ids.end(), q.begin(), q.end());
  ex.prompt_length = ex.ids.size();
  const auto a = tok.encode(answer);
  ex.ids.insert(ex.ids.end(), a.begin(), a.end());
  ex.ids.push_back(kEos);
  return ex;
}

void VqaRecipe::validate() const {
  if (epochs == 0 || batch_size == 0) throw VqaError("VQA recipe needs epochs and batch_size >= 1");
  try {
    schedule.validate();
  } catch (const std::invalid_argument& e) {
    throw VqaError(std::string("VQA recipe: ") + e.what());
  }
}

void to_json(nlohmann::json& j, const VqaRecipe& r) {
  j = {{"epochs", r.epochs},
       {"batch_size", r.batch_size},
       {"peak_lr", r.schedule.peak_lr},
       {"floor_lr", r.schedule.floor_lr},
       {"warmup_epochs", r.schedule.warmup_epochs},
       {"unfreeze_encoder", r.unfreeze_encoder}};
}

void from_json(const nlohmann::json& j, VqaRecipe& r) {
  r = VqaRecipe{};
  r.epochs = j.value("epochs", r.epochs);
  r.batch_size = j.value("batch_size", r.batch_size);
  r.schedule.total_epochs = static_cast<double>(r.epochs);
  r.schedule.peak_lr = j.value("peak_lr", r.schedule.peak_lr);
  r.schedule.floor_lr = j.value("floor_lr", r.schedule.floor_lr);
  r.schedule.warmup_epochs = j.value("warmup_epochs", r.schedule.warmup_epochs);
  r.unfreeze_encoder = j.value("unfreeze_encoder", r.unfreeze_encoder);
}

namespace {

Tensor<float> image_batch(const VqaModel<float>& model, const std::vector<const data::Image8*>& images) {
  const std::size_t S = model.vit_config.image_size, C = model.vit_config.in_channels;
  Tensor<float> batch({images.size(), C, S, S});
#pragma omp parallel for schedule(static)
  for (std::size_t b = 0; b < images.size(); ++b) {
    const auto img = data::eval_transform(*images[b], S);
    std::copy(img.pixels.begin(), img.pixels.end(),
              batch.values().begin() + static_cast<std::ptrdiff_t>(b * C * S * S));
  }
  return batch;
}

// Frozen-encoder features for every distinct image, [1 x n_img x E] each.
std::vector<Tensor<float>> precompute_features(const VqaModel<float>& model, const std::vector<data::Image8>& images) {
  NoGradGuard guard;
  std::vector<Tensor<float>> out;
  for (const auto& img : images) out.push_back(model.image_features(image_batch(model, {&img})).detach());
  return out;
}

}  // namespace

std::vector<VqaEpoch> vqa_finetune(VqaModel<float>& model, const Tokenizer& tok, const QaSet& set,
                                   const VqaRecipe& recipe, std::uint64_t seed, std::ostream* loss_log) {
  recipe.validate();
  set.validate();
  if (tok.size() != model.lm.vocab())
    throw VqaError("tokenizer has " + std::to_string(tok.size()) + " words but the model vocabulary is " +
                   std::to_string(model.lm.vocab()));
  const std::size_t N = set.size(), V = model.lm.vocab(), n_img = model.image_token_count();

  std::vector<EncodedExample> examples;
  for (const auto& p : set.pairs) {
    examples.push_back(encode_example(tok, p.question, p.answer));
    if (n_img + examples.back().ids.size() > model.config.max_positions)
      throw VqaError("QA pair '" + p.question + "' does not fit in max_positions");
  }

  ParamList<float> params;
  model.collect_trainable(params);
  if (recipe.unfreeze_encoder) model.encoder.collect("encoder", params);
  AdamW opt(params, recipe.optimizer);

  std::vector<Tensor<float>> cached;
  if (!recipe.unfreeze_encoder) cached = precompute_features(model, set.images);

  const std::size_t steps_per_epoch = (N + recipe.batch_size - 1) / recipe.batch_size;
  std::vector<VqaEpoch> history;
  std::size_t global_step = 0;
  for (std::size_t epoch = 0; epoch < recipe.epochs; ++epoch) {
    std::vector<std::size_t> order(N);
    std::iota(order.begin(), order.end(), 0);
    Rng order_rng(derive_seed(seed, 0x0a9a, epoch));
    order_rng.shuffle(order.begin(), order.end());

    double loss_sum = 0.0, lr = 0.0;
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      const std::size_t begin = step * recipe.batch_size;
      const std::size_t B = std::min(recipe.batch_size, N - begin);
      std::size_t T_len = 0;
      for (std::size_t b = 0; b < B; ++b) T_len = std::max(T_len, examples[order[begin + b]].ids.size());
      const std::size_t n = n_img + T_len;

      std::vector<std::size_t> ids(B * T_len, kPad);
      std::vector<float> targets(B * n * V, 0.0f), weights(B * n, 0.0f);
      for (std::size_t b = 0; b < B; ++b) {
        const auto& ex = examples[order[begin + b]];
        std::copy(ex.ids.begin(), ex.ids.end(), ids.begin() + static_cast<std::ptrdiff_t>(b * T_len));
        // The logit row at token position p predicts ids[p + 1].
        for (std::size_t p = ex.prompt_length - 1; p + 1 < ex.ids.size(); ++p) {
          const std::size_t row = b * n + n_img + p;
          weights[row] = 1.0f;
          targets[row * V + ex.ids[p + 1]] = 1.0f;
        }
      }

      Tensor<float> features;
      if (recipe.unfreeze_encoder) {
        std::vector<const data::Image8*> imgs;
        for (std::size_t b = 0; b < B; ++b) imgs.push_back(&set.images[set.image_index[order[begin + b]]]);
        features = model.image_features(image_batch(model, imgs));
      } else {
        std::vector<Tensor<float>> parts;
        for (std::size_t b = 0; b < B; ++b) parts.push_back(cached[set.image_index[order[begin + b]]]);
        features = concat<float>(parts, 0);
      }

      lr = recipe.lr_at(static_cast<double>(epoch) +
                        static_cast<double>(step) / static_cast<double>(steps_per_epoch));
      opt.zero_grad();
      auto logits = reshape(model.forward(features, ids, B), {B * n, V});
      auto loss = softmax_cross_entropy<float>(logits, targets, weights);
      const double value = loss.item();
      ++global_step;
      if (!std::isfinite(value))
        throw VqaError("non-finite VQA loss at epoch " + std::to_string(epoch + 1) + " step " +
                       std::to_string(global_step));
      backward(loss);
      opt.step(lr);
      loss_sum += value * static_cast<double>(B);
      if (loss_log)
        *loss_log << nlohmann::json{{"epoch", epoch + 1}, {"step", global_step}, {"loss", value}, {"lr", lr}}.dump()
                  << '\n';
    }
    history.push_back({epoch + 1, loss_sum / static_cast<double>(N), lr});
  }
  if (loss_log) loss_log->flush();
  return history;
}

std::vector<std::size_t> greedy_decode_ids(const VqaModel<float>& model, const Tensor<float>& features,
                                           const std::vector<std::size_t>& prompt, std::size_t max_len) {
  if (max_len == 0) throw VqaError("max_len must be at least 1");
  NoGradGuard guard;
  const std::size_t V = model.lm.vocab();
  std::vector<std::size_t> seq = prompt, out;
  while (out.size() < max_len && model.image_token_count() + seq.size() < model.config.max_positions) {
    const auto logits = model.forward(features, seq, 1);
    const auto last = logits.data().subspan(logits.numel() - V, V);
    const auto next = static_cast<std::size_t>(std::max_element(last.begin(), last.end()) - last.begin());
    if (next == kEos) break;
    out.push_back(next);
    seq.push_back(next);
  }
  return out;
}

std::string greedy_decode(const VqaModel<float>& model, const Tokenizer& tok, const data::Image8& image,
                          std::string_view question, std::size_t max_len) {
  Tensor<float> features;
  {
    NoGradGuard guard;
    features = model.image_features(image_batch(model, {&image}));
  }
  const auto prompt = encode_example(tok, question, "").ids;
  std::vector<std::size_t> p(prompt.begin(), prompt.end() - 1);  // drop the EOS
  return tok.decode(greedy_decode_ids(model, features, p, max_len));
}

std::vector<VqaPrediction> vqa_predict(const VqaModel<float>& model, const Tokenizer& tok, const QaSet& set,
                                       std::size_t max_len) {
  set.validate();
  const auto feats = precompute_features(model, set.images);
  std::vector<VqaPrediction> out;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& p = set.pairs[i];
    auto prompt = encode_example(tok, p.question, "").ids;
    prompt.pop_back();
    out.push_back({p.image_path, p.question, p.answer,
                   tok.decode(greedy_decode_ids(model, feats[set.image_index[i]], prompt, max_len))});
  }
  return out;
}

void write_vqa_predictions(const std::vector<VqaPrediction>& preds, std::ostream& out) {
  for (const auto& p : preds)
    out << nlohmann::json{{"image_path", p.image_path},
                          {"question", p.question},
                          {"reference", p.reference},
                          {"prediction", p.prediction}}
               .dump()
        << '\n';
}

}  // namespace omae::vqa
