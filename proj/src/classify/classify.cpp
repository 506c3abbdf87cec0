#include "omae/classify/classify.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "omae/core/ops.hpp"
#include "omae/metrics/metrics.hpp"

namespace omae::classify {

std::string_view to_string(Mode m) { return m == Mode::SingleLabel ? "single_label" : "multi_label"; }

Mode parse_mode(std::string_view name) {
  if (name == "single_label" || name == "single") return Mode::SingleLabel;
  if (name == "multi_label" || name == "multi") return Mode::MultiLabel;
  throw ClassifyError("unknown classification mode '" + std::string(name) + "'");
}

std::vector<double> label_smooth(std::span<const double> one_hot, double eps) {
  if (!(eps >= 0.0 && eps < 1.0)) throw ClassifyError("label smoothing needs 0 <= eps < 1");
  if (one_hot.empty()) throw ClassifyError("label smoothing needs at least one class");
  std::size_t hot = 0;
  for (double v : one_hot) {
    if (v == 1.0)
      ++hot;
    else if (v != 0.0)
      throw ClassifyError("label smoothing expects a 0/1 vector");
  }
  if (hot != 1) throw ClassifyError("label smoothing expects exactly one hot entry, got " + std::to_string(hot));
  const double K = static_cast<double>(one_hot.size());
  std::vector<double> out(one_hot.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - eps) * one_hot[i] + eps / K;
  return out;
}

FinetuneRecipe FinetuneRecipe::single_label() {
  FinetuneRecipe r;
  r.mode = Mode::SingleLabel;
  r.batch_size = 16;
  r.epochs = 50;
  r.schedule = {LrSchedule::Kind::WarmupCosine, 50.0, 10.0, 5e-4, 1e-6};
  return r;
}

FinetuneRecipe FinetuneRecipe::multi_label() {
  FinetuneRecipe r;
  r.mode = Mode::MultiLabel;
  r.batch_size = 4;
  r.epochs = 30;
  r.schedule = LrSchedule::constant(0.01, 30.0);
  r.optimizer.beta2 = 0.999;
  return r;
}

void FinetuneRecipe::validate() const {
  if (batch_size == 0) throw ClassifyError("recipe needs batch_size >= 1");
  if (epochs == 0) throw ClassifyError("recipe needs epochs >= 1");
  if (!(smoothing >= 0.0 && smoothing < 1.0)) throw ClassifyError("recipe needs 0 <= smoothing < 1");
  try {
    schedule.validate();
  } catch (const std::invalid_argument& e) {
    throw ClassifyError(std::string("recipe: ") + e.what());
  }
}

void to_json(nlohmann::json& j, const FinetuneRecipe& r) {
  j = {{"mode", to_string(r.mode)},
       {"batch_size", r.batch_size},
       {"epochs", r.epochs},
       {"schedule",
        {{"kind", r.schedule.kind == LrSchedule::Kind::Constant ? "constant" : "warmup_cosine"},
         {"total_epochs", r.schedule.total_epochs},
         {"warmup_epochs", r.schedule.warmup_epochs},
         {"peak_lr", r.schedule.peak_lr},
         {"floor_lr", r.schedule.floor_lr}}},
       {"smoothing", r.smoothing},
       {"optimizer",
        {{"beta1", r.optimizer.beta1},
         {"beta2", r.optimizer.beta2},
         {"eps", r.optimizer.eps},
         {"weight_decay", r.optimizer.weight_decay}}},
       {"hidden_width", r.hidden_width},
       {"linear_probe", r.linear_probe}};
}

void from_json(const nlohmann::json& j, FinetuneRecipe& r) {
  r = FinetuneRecipe::preset(parse_mode(j.value("mode", std::string("single_label"))));
  r.batch_size = j.value("batch_size", r.batch_size);
  r.epochs = j.value("epochs", r.epochs);
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    r.schedule.kind = s.value("kind", std::string("warmup_cosine")) == "constant" ? LrSchedule::Kind::Constant
                                                                                   : LrSchedule::Kind::WarmupCosine;
    r.schedule.total_epochs = s.value("total_epochs", r.schedule.total_epochs);
    r.schedule.warmup_epochs = s.value("warmup_epochs", r.schedule.warmup_epochs);
    r.schedule.peak_lr = s.value("peak_lr", r.schedule.peak_lr);
    r.schedule.floor_lr = s.value("floor_lr", r.schedule.floor_lr);
  }
  r.smoothing = j.value("smoothing", r.smoothing);
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    r.optimizer.beta1 = o.value("beta1", r.optimizer.beta1);
    r.optimizer.beta2 = o.value("beta2", r.optimizer.beta2);
    r.optimizer.eps = o.value("eps", r.optimizer.eps);
    r.optimizer.weight_decay = o.value("weight_decay", r.optimizer.weight_decay);
  }
  r.hidden_width = j.value("hidden_width", r.hidden_width);
  r.linear_probe = j.value("linear_probe", r.linear_probe);
}

template <typename T>
ClassifierHead<T> ClassifierHead<T>::create(std::size_t in, std::size_t num_classes, std::size_t hidden_width,
                                            Rng& rng) {
  if (num_classes == 0) throw ClassifyError("classifier head needs at least one class");
  ClassifierHead h;
  if (hidden_width > 0) {
    h.hidden = nn::Linear<T>::create(in, hidden_width, rng);
    h.out = nn::Linear<T>::create(hidden_width, num_classes, rng);
  } else {
    h.out = nn::Linear<T>::create(in, num_classes, rng);
  }
  return h;
}

template <typename T>
Tensor<T> ClassifierHead<T>::operator()(const Tensor<T>& features) const {
  return has_hidden() ? out(gelu(hidden(features))) : out(features);
}

template <typename T>
void ClassifierHead<T>::collect(const std::string& prefix, ParamList<T>& params) const {
  if (has_hidden()) hidden.collect(prefix + ".hidden", params);
  out.collect(prefix + ".out", params);
}

template <typename T>
Classifier<T> Classifier<T>::create(const vit::ViTConfig& config, std::size_t num_classes, Mode mode,
                                    std::size_t hidden_width, Rng& rng) {
  if (mode == Mode::SingleLabel && num_classes < 2)
    throw ClassifyError("single-label classification needs at least 2 classes");
  if (num_classes < 1) throw ClassifyError("classification needs at least 1 class");
  Classifier c;
  c.config = config;
  c.mode = mode;
  c.encoder = vit::VitEncoder<T>::create(config, rng);
  c.head = ClassifierHead<T>::create(config.enc_dim, num_classes, hidden_width, rng);
  return c;
}

template <typename T>
Tensor<T> Classifier<T>::forward(const Tensor<T>& images) const {
  return head(encoder.encode(images).pooled);
}

template <typename T>
void Classifier<T>::collect(ParamList<T>& params) const {
  encoder.collect("encoder", params);
  head.collect("head", params);
}

template struct ClassifierHead<float>;
template struct ClassifierHead<double>;
template struct Classifier<float>;
template struct Classifier<double>;

void LabeledSet::validate(std::size_t num_classes, Mode mode) const {
  if (labels.size() != images.size() || (!paths.empty() && paths.size() != images.size()))
    throw ClassifyError("labeled set: images, labels and paths differ in length");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (mode == Mode::SingleLabel && labels[i].size() != 1)
      throw ClassifyError("single-label sample " + std::to_string(i) + " has " + std::to_string(labels[i].size()) +
                          " labels");
    for (auto l : labels[i])
      if (l >= num_classes)
        throw ClassifyError("sample " + std::to_string(i) + " has label " + std::to_string(l) + " but only " +
                            std::to_string(num_classes) + " classes");
  }
}

std::size_t select_best_epoch(std::span<const double> val_auroc) {
  if (val_auroc.empty()) throw ClassifyError("no epochs to select from");
  std::size_t best = 0;
  for (std::size_t i = 1; i < val_auroc.size(); ++i)
    if (val_auroc[i] > val_auroc[best]) best = i;
  return best + 1;
}

nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_auroc", r.val_auroc},
          {"val_aupr", r.val_aupr}, {"lr", r.lr}};
}

void copy_weights(const Classifier<float>& src, Classifier<float>& dst) {
  ParamList<float> a, b;
  src.collect(a);
  dst.collect(b);
  if (a.size() != b.size()) throw ClassifyError("copy_weights: parameter count differs");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].tensor.shape() != b[i].tensor.shape())
      throw ClassifyError("copy_weights: mismatch at " + a[i].name);
    b[i].tensor.values() = a[i].tensor.values();
  }
}

namespace {

Classifier<float> deep_copy(const Classifier<float>& model) {
  Rng rng(0);
  auto out = Classifier<float>::create(model.config, model.num_classes(), model.mode, 0, rng);
  if (model.head.has_hidden())
    out.head = ClassifierHead<float>::create(model.config.enc_dim, model.num_classes(),
                                             model.head.hidden.out_features(), rng);
  copy_weights(model, out);
  return out;
}

void fill_images(Tensor<float>& batch, std::size_t b, const data::FloatImage& img) {
  const std::size_t n = img.pixels.size();
  std::copy(img.pixels.begin(), img.pixels.end(), batch.values().begin() + static_cast<std::ptrdiff_t>(b * n));
}

std::vector<double> to_scores(std::span<const float> logits, Mode mode) {
  std::vector<double> out(logits.begin(), logits.end());
  if (mode == Mode::MultiLabel) {
    for (auto& v : out) v = 1.0 / (1.0 + std::exp(-v));
    return out;
  }
  const double mx = *std::max_element(out.begin(), out.end());
  double z = 0.0;
  for (auto& v : out) z += (v = std::exp(v - mx));
  for (auto& v : out) v /= z;
  return out;
}

std::vector<std::vector<std::uint8_t>> target_rows(const LabeledSet& set, std::size_t K) {
  std::vector<std::vector<std::uint8_t>> out;
  for (const auto& ls : set.labels) {
    std::vector<std::uint8_t> row(K, 0);
    for (auto l : ls) row[l] = 1;
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace

std::vector<std::vector<double>> predict(const Classifier<float>& model, const std::vector<data::Image8>& images,
                                         std::size_t batch_size, const data::Normalization& norm) {
  if (batch_size == 0) throw ClassifyError("predict needs batch_size >= 1");
  const auto& cfg = model.config;
  const std::size_t S = cfg.image_size, C = cfg.in_channels, K = model.num_classes();
  NoGradGuard guard;
  std::vector<std::vector<double>> out(images.size());
  for (std::size_t begin = 0; begin < images.size(); begin += batch_size) {
    const std::size_t B = std::min(batch_size, images.size() - begin);
    Tensor<float> batch({B, C, S, S});
#pragma omp parallel for schedule(static)
    for (std::size_t b = 0; b < B; ++b) fill_images(batch, b, data::eval_transform(images[begin + b], S, norm));
    const auto logits = model.forward(batch);
    for (std::size_t b = 0; b < B; ++b)
      out[begin + b] = to_scores(logits.data().subspan(b * K, K), model.mode);
  }
  return out;
}

Evaluation evaluate(const Classifier<float>& model, const LabeledSet& set, const std::vector<std::string>& classes,
                    std::size_t batch_size) {
  Evaluation ev;
  ev.scores = predict(model, set.images, batch_size);
  metrics::PredictionSet ps;
  ps.classes = classes;
  ps.scores = ev.scores;
  ps.targets = target_rows(set, classes.size());
  const auto r = metrics::evaluate_classification(ps, model.mode == Mode::SingleLabel);
  ev.auroc = r.auroc;
  ev.aupr = r.aupr;
  ev.skipped = r.skipped;
  return ev;
}

void write_predictions(std::ostream& out, const LabeledSet& set, const std::vector<std::vector<double>>& scores) {
  if (scores.size() != set.size()) throw ClassifyError("write_predictions: score rows differ from set size");
  for (std::size_t i = 0; i < scores.size(); ++i) {
    nlohmann::json j = {{"path", set.paths.empty() ? std::to_string(i) : set.paths[i]},
                        {"scores", scores[i]},
                        {"labels", set.labels[i]}};
    out << j.dump() << '\n';
  }
}

FinetuneResult finetune(Classifier<float>& model, const LabeledSet& train, const LabeledSet& val,
                        const std::vector<std::string>& classes, const FinetuneRecipe& recipe, std::uint64_t seed,
                        std::ostream* metrics_log) {
  recipe.validate();
  const std::size_t K = classes.size();
  if (recipe.mode != model.mode) throw ClassifyError("recipe mode does not match the model");
  if (model.num_classes() != K)
    throw ClassifyError("model has " + std::to_string(model.num_classes()) + " outputs but there are " +
                        std::to_string(K) + " classes");
  train.validate(K, recipe.mode);
  val.validate(K, recipe.mode);
  if (train.size() == 0) throw ClassifyError("the training split is empty");
  if (val.size() == 0) throw ClassifyError("the validation split is empty");

  FinetuneResult result;
  {
    std::vector<std::size_t> train_count(K, 0), val_count(K, 0);
    for (const auto& ls : train.labels)
      for (auto l : ls) ++train_count[l];
    for (const auto& ls : val.labels)
      for (auto l : ls) ++val_count[l];
    for (std::size_t k = 0; k < K; ++k) {
      if (train_count[k] == 0) result.warnings.push_back("class '" + classes[k] + "' is absent from the training split");
      if (val_count[k] == 0 || val_count[k] == val.size())
        result.warnings.push_back("class '" + classes[k] +
                                  "' lacks positive or negative validation samples and is excluded from the macro average");
    }
  }

  const auto& cfg = model.config;
  data::AugmentConfig aug;
  aug.output_size = cfg.image_size;
  const std::size_t N = train.size(), S = cfg.image_size, C = cfg.in_channels;
  const std::size_t steps_per_epoch = (N + recipe.batch_size - 1) / recipe.batch_size;

  ParamList<float> params;
  if (recipe.linear_probe)
    model.head.collect("head", params);
  else
    model.collect(params);
  AdamW opt(params, recipe.optimizer);

  // Per-sample soft targets are fixed for the whole run.
  std::vector<float> targets(N * K, 0.0f);
  for (std::size_t i = 0; i < N; ++i) {
    if (recipe.mode == Mode::SingleLabel) {
      std::vector<double> one_hot(K, 0.0);
      one_hot[train.labels[i][0]] = 1.0;
      const auto smooth = label_smooth(one_hot, recipe.smoothing);
      for (std::size_t k = 0; k < K; ++k) targets[i * K + k] = static_cast<float>(smooth[k]);
    } else {
      for (auto l : train.labels[i]) targets[i * K + l] = 1.0f;
    }
  }

  double best_auroc = -1.0;
  for (std::size_t epoch = 0; epoch < recipe.epochs; ++epoch) {
    std::vector<std::size_t> order(N);
    std::iota(order.begin(), order.end(), 0);
    Rng order_rng(derive_seed(seed, 0xc1a5, epoch));
    order_rng.shuffle(order.begin(), order.end());

    double loss_sum = 0.0, lr = 0.0;
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      const std::size_t begin = step * recipe.batch_size;
      const std::size_t B = std::min(recipe.batch_size, N - begin);
      Tensor<float> batch({B, C, S, S});
      std::vector<float> batch_targets(B * K);
#pragma omp parallel for schedule(static)
      for (std::size_t b = 0; b < B; ++b) {
        const std::size_t idx = order[begin + b];
        Rng rng(derive_seed(seed, epoch + 1, idx));
        fill_images(batch, b, data::augment(train.images[idx], rng, aug));
        std::copy_n(targets.begin() + static_cast<std::ptrdiff_t>(idx * K), K,
                    batch_targets.begin() + static_cast<std::ptrdiff_t>(b * K));
      }
      lr = recipe.lr_at(static_cast<double>(epoch) +
                        static_cast<double>(step) / static_cast<double>(steps_per_epoch));
      opt.zero_grad();
      Tensor<float> logits;
      if (recipe.linear_probe) {
        Tensor<float> features;
        {
          NoGradGuard guard;
          features = model.encoder.encode(batch).pooled;
        }
        logits = model.head(features.detach());
      } else {
        logits = model.forward(batch);
      }
      auto loss = recipe.mode == Mode::SingleLabel ? softmax_cross_entropy<float>(logits, batch_targets)
                                                   : bce_with_logits<float>(logits, batch_targets);
      const double value = loss.item();
      if (!std::isfinite(value))
        throw ClassifyError("non-finite training loss at epoch " + std::to_string(epoch + 1) + " step " +
                            std::to_string(step + 1));
      backward(loss);
      opt.step(lr);
      loss_sum += value * static_cast<double>(B);
    }

    const auto ev = evaluate(model, val, classes);
    EpochRecord rec{epoch + 1, loss_sum / static_cast<double>(N), ev.auroc, ev.aupr, lr};
    result.history.push_back(rec);
    if (metrics_log) *metrics_log << to_json(rec).dump() << '\n';
    if (ev.auroc > best_auroc) {
      best_auroc = ev.auroc;
      result.best_epoch = epoch + 1;
      result.best = deep_copy(model);
    }
  }
  if (metrics_log) metrics_log->flush();
  return result;
}

FinetuneResult finetune_single_label(Classifier<float>& model, const LabeledSet& train, const LabeledSet& val,
                                     const std::vector<std::string>& classes, const FinetuneRecipe& recipe,
                                     std::uint64_t seed, std::ostream* metrics_log) {
  if (recipe.mode != Mode::SingleLabel) throw ClassifyError("finetune_single_label needs a single-label recipe");
  return finetune(model, train, val, classes, recipe, seed, metrics_log);
}

FinetuneResult finetune_multi_label(Classifier<float>& model, const LabeledSet& train, const LabeledSet& val,
                                    const std::vector<std::string>& classes, const FinetuneRecipe& recipe,
                                    std::uint64_t seed, std::ostream* metrics_log) {
  if (recipe.mode != Mode::MultiLabel) throw ClassifyError("finetune_multi_label needs a multi-label recipe");
  return finetune(model, train, val, classes, recipe, seed, metrics_log);
}

}  // namespace omae::classify
