#include "omae/harness/experiment.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <omp.h>

#include "omae/data/preprocess.hpp"
#include "omae/harness/checkpoint.hpp"

namespace omae::harness {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::optional<std::string> lookup(const IniMap& ini, const std::string& key) {
  auto it = ini.find(key);
  if (it == ini.end()) return std::nullopt;
  return it->second;
}

template <typename U>
U number(const IniMap& ini, const std::string& key, U fallback) {
  const auto v = lookup(ini, key);
  if (!v) return fallback;
  try {
    std::size_t used = 0;
    U out;
    if constexpr (std::is_floating_point_v<U>)
      out = static_cast<U>(std::stod(*v, &used));
    else if constexpr (std::is_signed_v<U>)
      out = static_cast<U>(std::stoll(*v, &used));
    else {
      if (v->find('-') != std::string::npos) throw std::invalid_argument("negative");
      out = static_cast<U>(std::stoull(*v, &used));
    }
    if (used != v->size()) throw std::invalid_argument("trailing characters");
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": '" + *v + "' is not a valid number");
  }
}

bool boolean(const IniMap& ini, const std::string& key, bool fallback) {
  const auto v = lookup(ini, key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") return true;
  if (*v == "false" || *v == "0" || *v == "no" || *v == "off") return false;
  throw ConfigError("config key " + key + ": '" + *v + "' is not a boolean");
}

const std::set<std::string> kKnownKeys{
    "experiment.name",        "experiment.seeds",        "experiment.threads",       "experiment.manifest",
    "experiment.image_root",  "experiment.checkpoint_dir", "experiment.report_dir", "experiment.encoder_checkpoint",
    "experiment.compare_report", "experiment.paired",     "model.preset",             "model.image_size",
    "model.patch_size",       "model.in_channels",       "model.enc_depth",          "model.enc_dim",
    "model.enc_heads",        "model.dec_depth",         "model.dec_dim",            "model.dec_heads",
    "model.mlp_ratio",        "model.pooling",           "model.init",               "finetune.mode",
    "finetune.epochs",        "finetune.batch_size",     "finetune.warmup_epochs",   "finetune.peak_lr",
    "finetune.floor_lr",      "finetune.smoothing",      "finetune.hidden_width",    "finetune.linear_probe",
    "finetune.beta1",         "finetune.beta2",          "finetune.weight_decay"};

}  // namespace

IniMap parse_ini(std::istream& in) {
  IniMap out;
  std::string section, line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(lineno) + ": unterminated section");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    out[section.empty() ? key : section + "." + key] = trim(line.substr(eq + 1));
  }
  return out;
}

IniMap parse_ini(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  return parse_ini(in);
}

vit::ViTConfig vit_config_from(const IniMap& ini, const std::string& section) {
  const auto key = [&](const char* k) { return section + "." + k; };
  const auto preset = lookup(ini, key("preset")).value_or("desk");
  vit::ViTConfig c;
  if (preset == "desk")
    c = vit::ViTConfig::desk();
  else if (preset == "large")
    c = vit::ViTConfig::large();
  else
    throw ConfigError("unknown model preset '" + preset + "' (expected desk or large)");
  c.image_size = number(ini, key("image_size"), c.image_size);
  c.patch_size = number(ini, key("patch_size"), c.patch_size);
  c.in_channels = number(ini, key("in_channels"), c.in_channels);
  c.enc_depth = number(ini, key("enc_depth"), c.enc_depth);
  c.enc_dim = number(ini, key("enc_dim"), c.enc_dim);
  c.enc_heads = number(ini, key("enc_heads"), c.enc_heads);
  c.dec_depth = number(ini, key("dec_depth"), c.dec_depth);
  c.dec_dim = number(ini, key("dec_dim"), c.dec_dim);
  c.dec_heads = number(ini, key("dec_heads"), c.dec_heads);
  c.mlp_ratio = number(ini, key("mlp_ratio"), c.mlp_ratio);
  if (auto p = lookup(ini, key("pooling"))) {
    if (*p != "cls" && *p != "mean") throw ConfigError("model pooling must be cls or mean");
    c.pooling = *p == "mean" ? vit::Pooling::Mean : vit::Pooling::ClassToken;
  }
  if (auto p = lookup(ini, key("init"))) {
    if (*p != "xavier_uniform" && *p != "trunc_normal")
      throw ConfigError("model init must be xavier_uniform or trunc_normal");
    c.init = *p == "trunc_normal" ? nn::Init::TruncNormal : nn::Init::XavierUniform;
  }
  try {
    c.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return c;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (item.empty()) continue;
    IniMap one{{"seed", item}};
    out.push_back(number<std::uint64_t>(one, "seed", 0));
  }
  return out;
}

RunConfig RunConfig::from_ini(const IniMap& ini) {
  for (const auto& [k, v] : ini)
    if (!kKnownKeys.count(k)) throw ConfigError("unknown config key '" + k + "'");
  RunConfig c;
  c.name = lookup(ini, "experiment.name").value_or(c.name);
  if (auto s = lookup(ini, "experiment.seeds")) c.seeds = parse_seed_list(*s);
  c.threads = number(ini, "experiment.threads", c.threads);
  if (auto v = lookup(ini, "experiment.manifest")) c.manifest = *v;
  if (auto v = lookup(ini, "experiment.image_root")) c.image_root = *v;
  if (auto v = lookup(ini, "experiment.checkpoint_dir")) c.checkpoint_dir = *v;
  if (auto v = lookup(ini, "experiment.report_dir")) c.report_dir = *v;
  // An empty value clears the path, so a flag can undo a config entry.
  if (auto v = lookup(ini, "experiment.encoder_checkpoint"); v && !v->empty()) c.encoder_checkpoint = fs::path(*v);
  if (auto v = lookup(ini, "experiment.compare_report"); v && !v->empty()) c.compare_report = fs::path(*v);
  c.paired = boolean(ini, "experiment.paired", c.paired);
  c.vit = vit_config_from(ini, "model");

  const auto mode = classify::parse_mode(lookup(ini, "finetune.mode").value_or("single_label"));
  auto& r = c.recipe;
  r = classify::FinetuneRecipe::preset(mode);
  r.epochs = number(ini, "finetune.epochs", r.epochs);
  r.batch_size = number(ini, "finetune.batch_size", r.batch_size);
  r.schedule.total_epochs = static_cast<double>(r.epochs);
  r.schedule.warmup_epochs = number(ini, "finetune.warmup_epochs", r.schedule.warmup_epochs);
  r.schedule.peak_lr = number(ini, "finetune.peak_lr", r.schedule.peak_lr);
  r.schedule.floor_lr = number(ini, "finetune.floor_lr", r.schedule.kind == LrSchedule::Kind::Constant
                                                             ? r.schedule.peak_lr
                                                             : r.schedule.floor_lr);
  r.smoothing = number(ini, "finetune.smoothing", r.smoothing);
  r.hidden_width = number(ini, "finetune.hidden_width", r.hidden_width);
  r.linear_probe = boolean(ini, "finetune.linear_probe", r.linear_probe);
  r.optimizer.beta1 = number(ini, "finetune.beta1", r.optimizer.beta1);
  r.optimizer.beta2 = number(ini, "finetune.beta2", r.optimizer.beta2);
  r.optimizer.weight_decay = number(ini, "finetune.weight_decay", r.optimizer.weight_decay);
  return c;
}

void RunConfig::validate() const {
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
    throw ConfigError("seeds must be distinct");
  if (manifest.empty()) throw ConfigError("no manifest given");
  if (!fs::exists(manifest)) throw ConfigError("manifest " + manifest.string() + " does not exist");
  if (!image_root.empty() && !fs::is_directory(image_root))
    throw ConfigError("image root " + image_root.string() + " is not a directory");
  if (encoder_checkpoint && !fs::exists(*encoder_checkpoint))
    throw ConfigError("encoder checkpoint " + encoder_checkpoint->string() + " does not exist");
  if (compare_report && !fs::exists(*compare_report))
    throw ConfigError("comparison report " + compare_report->string() + " does not exist");
  if (threads < 0) throw ConfigError("threads must be >= 0");
  try {
    recipe.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

fs::path RunConfig::resolved_root() const {
  return image_root.empty() ? manifest.parent_path() : image_root;
}

void apply_threads(int threads) {
  if (threads > 0) omp_set_num_threads(threads);
}

data::Image8 load_record_image(const data::ImageRecord& record, const fs::path& root) {
  const fs::path p(record.path);
  return data::load_image(p.is_absolute() ? p : root / p);
}

classify::LabeledSet load_split(const data::Manifest& manifest, data::Split split, const fs::path& root) {
  const auto records = manifest.in_split(split);
  classify::LabeledSet set;
  set.images.resize(records.size());
  std::vector<std::string> errors(records.size());
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < records.size(); ++i) {
    try {
      set.images[i] = load_record_image(*records[i], root);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw data::ImageError(e);
  for (const auto* r : records) {
    set.paths.push_back(r->path);
    set.labels.push_back(r->labels);
  }
  return set;
}

data::Manifest preprocess_manifest(const data::Manifest& manifest, const fs::path& root, const fs::path& out_dir,
                                   const PreprocessOptions& options, PreprocessSummary* summary) {
  manifest.validate();
  fs::create_directories(out_dir);
  const std::size_t N = manifest.records.size();
  std::vector<std::uint8_t> keep(N, 0);
  std::vector<std::string> out_paths(N), errors(N);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < N; ++i) {
    const auto& rec = manifest.records[i];
    try {
      if (data::quality_filter(rec) == data::QualityDecision::Exclude) continue;
      auto img = load_record_image(rec, root);
      if (auto t = data::crop_threshold(rec.modality)) img = data::threshold_crop(img, *t, options.mode);
      img = data::resize_cubic(img, options.size, options.size);
      char prefix[16];
      std::snprintf(prefix, sizeof(prefix), "%06zu_", i);
      out_paths[i] = std::string(prefix) + fs::path(rec.path).stem().string() + ".png";
      data::save_image(img, out_dir / out_paths[i]);
      keep[i] = 1;
    } catch (const std::exception& e) {
      errors[i] = rec.path + ": " + e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw data::ImageError(e);
  data::Manifest out;
  out.name = manifest.name;
  out.classes = manifest.classes;
  PreprocessSummary s;
  for (std::size_t i = 0; i < N; ++i) {
    if (!keep[i]) {
      ++s.excluded;
      continue;
    }
    ++s.kept;
    auto rec = manifest.records[i];
    rec.path = out_paths[i];
    out.records.push_back(std::move(rec));
  }
  std::ostringstream text;
  data::write_manifest(out, text);
  write_file_atomic(out_dir / "manifest.jsonl", text.str());
  if (summary) *summary = s;
  return out;
}

PretrainFlowResult pretrain_flow(const data::Manifest& manifest, const fs::path& root, const vit::ViTConfig& config,
                                 const mae::PretrainOptions& options, const fs::path& out_dir) {
  std::vector<const data::ImageRecord*> records = manifest.in_split(data::Split::Train);
  if (records.empty())
    for (const auto& r : manifest.records) records.push_back(&r);
  std::vector<data::Image8> images(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) images[i] = load_record_image(*records[i], root);

  fs::create_directories(out_dir);
  Rng rng(derive_seed(options.seed, 0x1417));
  auto model = mae::MaeModel<float>::create(config, rng);
  PretrainFlowResult result;
  std::ostringstream log;
  result.history = mae::pretrain(model, images, options, &log,
                                 [&](const mae::EpochStats& s, const mae::MaeModel<float>& m, const AdamW& opt) {
                                   char name[32];
                                   std::snprintf(name, sizeof(name), "epoch_%03zu.omae", s.epoch);
                                   const nlohmann::json meta = {{"epoch", s.epoch},
                                                                {"seed", options.seed},
                                                                {"mean_loss", s.mean_loss},
                                                                {"lr", s.last_lr}};
                                   save_checkpoint(mae_checkpoint(m, meta, &opt), out_dir / name);
                                   result.checkpoints.push_back(out_dir / name);
                                 });
  write_file_atomic(out_dir / "loss.log", log.str());
  return result;
}

metrics::EvalReport read_report(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open report " + path.string());
  try {
    return metrics::report_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("report " + path.string() + " is not valid: " + e.what());
  }
}

void write_report(const metrics::EvalReport& report, const fs::path& dir) {
  write_file_atomic(dir / "report.json", metrics::to_json(report).dump(2) + "\n");
  write_file_atomic(dir / "report.txt", metrics::format_table({report}));
}

metrics::MacroResult metrics_from_predictions(std::istream& in, const std::vector<std::string>& classes,
                                              bool single_label) {
  metrics::PredictionSet set;
  set.classes = classes;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      set.scores.push_back(j.at("scores").get<std::vector<double>>());
      std::vector<std::uint8_t> row(classes.size(), 0);
      for (auto l : j.at("labels").get<std::vector<std::size_t>>()) {
        if (l >= classes.size()) throw metrics::MetricError("label out of range");
        row[l] = 1;
      }
      set.targets.push_back(std::move(row));
    } catch (const std::exception& e) {
      throw metrics::MetricError("predictions line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return metrics::evaluate_classification(set, single_label);
}

SeedRun run_seed(const RunConfig& config, const data::Manifest& base, std::uint64_t seed, std::ostream* progress) {
  if (base.classes.empty()) throw ConfigError("the manifest has no class list");
  const auto root = config.resolved_root();
  const bool single = config.recipe.mode == classify::Mode::SingleLabel;
  bool unassigned = true;
  for (const auto& r : base.records) unassigned = unassigned && r.split == data::Split::Unassigned;
  const auto manifest = unassigned ? data::split_dataset(base, seed) : base;
  const auto train = load_split(manifest, data::Split::Train, root);
  const auto val = load_split(manifest, data::Split::Val, root);
  const auto test = load_split(manifest, data::Split::Test, root);

  Rng rng(derive_seed(seed, 0x5eed));
  auto model = classify::Classifier<float>::create(config.vit, base.classes.size(), config.recipe.mode,
                                                   config.recipe.hidden_width, rng);
  if (config.encoder_checkpoint) load_encoder(load_checkpoint(*config.encoder_checkpoint), model.encoder);

  const auto seed_dir = "seed_" + std::to_string(seed);
  std::ostringstream log;
  auto res = classify::finetune(model, train, val, base.classes, config.recipe, seed, &log);
  if (progress)
    for (const auto& w : res.warnings) *progress << "warning (seed " << seed << "): " << w << '\n';
  write_file_atomic(config.report_dir / seed_dir / "metrics.jsonl", log.str());
  save_checkpoint(classifier_checkpoint(res.best, base.classes, {{"epoch", res.best_epoch}, {"seed", seed}}),
                  config.checkpoint_dir / seed_dir / "best.omae");

  const auto scores = classify::predict(res.best, test.images);
  std::ostringstream dump;
  classify::write_predictions(dump, test, scores);
  write_file_atomic(config.report_dir / seed_dir / "predictions.jsonl", dump.str());
  std::istringstream reread(dump.str());
  SeedRun out{seed, res.best_epoch, metrics_from_predictions(reread, base.classes, single)};
  if (progress)
    *progress << "seed " << seed << ": best epoch " << res.best_epoch << ", test AUROC " << out.test.auroc << '\n';
  return out;
}

metrics::EvalReport run_experiment(const RunConfig& config, std::ostream* progress) {
  config.validate();
  apply_threads(config.threads);
  const auto base = data::read_manifest(config.manifest);
  base.validate();
  if (base.classes.empty()) throw ConfigError("the manifest has no class list");
  std::optional<std::vector<double>> reference;
  std::string reference_name;
  if (config.compare_report) {
    const auto ref = read_report(*config.compare_report);
    reference.emplace();
    for (const auto& r : ref.runs) reference->push_back(r.result.auroc);
    reference_name = ref.name;
  }

  std::vector<metrics::RunMetrics> runs;
  try {
    for (const auto seed : config.seeds) runs.push_back({seed, run_seed(config, base, seed, progress).test});
  } catch (...) {
    nlohmann::json partial = {{"name", config.name}, {"completed_seeds", nlohmann::json::array()}};
    for (const auto& r : runs)
      partial["completed_seeds"].push_back({{"seed", r.seed}, {"auroc", r.result.auroc}, {"aupr", r.result.aupr}});
    write_file_atomic(config.report_dir / "partial_report.json", partial.dump(2) + "\n");
    throw;
  }
  auto report = metrics::build_report(config.name, base.classes, std::move(runs), reference, reference_name,
                                      config.paired);
  write_report(report, config.report_dir);
  return report;
}

vqa::QaSet load_qa_set(const std::vector<vqa::QaPair>& pairs, const fs::path& root) {
  vqa::QaSet set;
  set.pairs = pairs;
  std::map<std::string, std::size_t> seen;
  for (const auto& p : pairs) {
    auto [it, fresh] = seen.emplace(p.image_path, set.images.size());
    if (fresh) {
      const fs::path path(p.image_path);
      set.images.push_back(data::load_image(path.is_absolute() ? path : root / path));
    }
    set.image_index.push_back(it->second);
  }
  return set;
}

std::vector<vqa::VqaEpoch> vqa_train_flow(const fs::path& qa_manifest, const fs::path& root,
                                          const VqaTrainOptions& options, const fs::path& checkpoint_out,
                                          std::ostream* loss_log) {
  const auto pairs = vqa::read_qa_manifest(qa_manifest);
  if (pairs.empty()) throw vqa::VqaError("the QA manifest is empty");
  const auto set = load_qa_set(pairs, root);
  std::vector<std::string> corpus;
  for (const auto& p : pairs) {
    corpus.push_back(p.question);
    corpus.push_back(p.answer);
  }
  const auto tok = vqa::Tokenizer::build(corpus);
  Rng rng(derive_seed(options.seed, 0x09a));
  auto model = vqa::VqaModel<float>::create(options.vit, options.lm, tok.size(), rng);
  if (options.encoder_checkpoint) load_encoder(load_checkpoint(*options.encoder_checkpoint), model.encoder);
  auto hist = vqa::vqa_finetune(model, tok, set, options.recipe, options.seed, loss_log);
  save_checkpoint(vqa_checkpoint(model, tok, {{"epoch", options.recipe.epochs}, {"seed", options.seed}}),
                  checkpoint_out);
  return hist;
}

nlohmann::json to_json(const VqaScores& s) {
  return {{"count", s.count}, {"exact_match", s.exact_match}, {"f1", s.f1}, {"bleu", s.bleu}};
}

VqaScores score_vqa(const std::vector<vqa::VqaPrediction>& preds) {
  VqaScores s;
  s.count = preds.size();
  s.bleu.assign(4, 0.0);
  if (preds.empty()) return s;
  for (const auto& p : preds) {
    const auto t = metrics::vqa_text_metrics(p.prediction, p.reference);
    s.exact_match += t.exact_match;
    s.f1 += t.f1;
    const auto b = metrics::bleu(p.prediction, {p.reference});
    for (std::size_t n = 0; n < 4; ++n) s.bleu[n] += b[n];
  }
  const double n = static_cast<double>(preds.size());
  s.exact_match /= n;
  s.f1 /= n;
  for (auto& b : s.bleu) b /= n;
  return s;
}

VqaScores vqa_eval_flow(const fs::path& checkpoint, const fs::path& qa_manifest, const fs::path& root,
                        const fs::path& out_dir, std::size_t max_len) {
  const auto loaded = load_vqa(load_checkpoint(checkpoint));
  const auto set = load_qa_set(vqa::read_qa_manifest(qa_manifest), root);
  const auto preds = vqa::vqa_predict(loaded.model, loaded.tokenizer, set, max_len);
  std::ostringstream dump;
  vqa::write_vqa_predictions(preds, dump);
  write_file_atomic(out_dir / "predictions.jsonl", dump.str());
  const auto scores = score_vqa(preds);
  write_file_atomic(out_dir / "scores.json", to_json(scores).dump(2) + "\n");
  return scores;
}

void visualize_flow(const fs::path& checkpoint, const fs::path& image, double mask_ratio, std::uint64_t seed,
                    const fs::path& out) {
  const auto model = load_mae(load_checkpoint(checkpoint));
  const std::size_t S = model.config.image_size;
  const auto img = data::resize_cubic(data::load_image(image), S, S);
  Rng rng(seed);
  const auto plan = mae::random_mask(model.config.num_patches(), mask_ratio, rng);
  const auto recon = mae::reconstruct_visualize(model, img, plan);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  data::save_image(mae::visualization_panel(img, plan, model.config.patch_size, recon), out);
}

}  // namespace omae::harness
