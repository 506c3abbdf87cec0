#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "omae/data/manifest.hpp"
#include "omae/data/synthetic.hpp"
#include "omae/harness/checkpoint.hpp"
#include "omae/harness/experiment.hpp"

using namespace omae;
using namespace omae::harness;

namespace {

struct Overrides {
  std::map<std::string, std::string> values;

  void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    app->add_option_function<std::string>(flag, [this, key](const std::string& v) { values[key] = v; }, help);
  }
  void flag(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    app->add_flag_function(flag, [this, key](std::int64_t) { values[key] = "true"; }, help);
  }
  IniMap apply(IniMap ini) const {
    for (const auto& [k, v] : values) ini[k] = v;
    return ini;
  }
};

void model_flags(CLI::App* app, Overrides& o) {
  o.add(app, "--preset", "model.preset", "Architecture preset: desk or large");
  o.add(app, "--image-size", "model.image_size", "Input resolution");
  o.add(app, "--patch-size", "model.patch_size", "Patch size");
  o.add(app, "--enc-depth", "model.enc_depth", "Encoder blocks");
  o.add(app, "--enc-dim", "model.enc_dim", "Encoder width");
  o.add(app, "--enc-heads", "model.enc_heads", "Encoder heads");
  o.add(app, "--pooling", "model.pooling", "cls or mean");
}

void finetune_flags(CLI::App* app, Overrides& o) {
  o.add(app, "--mode", "finetune.mode", "single_label or multi_label");
  o.add(app, "--epochs", "finetune.epochs", "Fine-tuning epochs");
  o.add(app, "--batch-size", "finetune.batch_size", "Batch size");
  o.add(app, "--warmup-epochs", "finetune.warmup_epochs", "Warmup epochs");
  o.add(app, "--lr", "finetune.peak_lr", "Peak learning rate");
  o.add(app, "--min-lr", "finetune.floor_lr", "Final learning rate");
  o.add(app, "--smoothing", "finetune.smoothing", "Label smoothing");
  o.add(app, "--hidden-width", "finetune.hidden_width", "Hidden width of the head (0: linear)");
  o.flag(app, "--linear-probe", "finetune.linear_probe", "Train the head only");
  o.add(app, "--encoder", "experiment.encoder_checkpoint", "Encoder weights (MAE or classifier checkpoint)");
  o.add(app, "--root", "experiment.image_root", "Image root (default: manifest directory)");
  o.add(app, "--threads", "experiment.threads", "OpenMP threads (0: default)");
}

RunConfig load_run_config(const std::string& config_path, const Overrides& o) {
  IniMap ini = config_path.empty() ? IniMap{} : parse_ini(fs::path(config_path));
  return RunConfig::from_ini(o.apply(std::move(ini)));
}

fs::path manifest_root(const std::string& root, const fs::path& manifest) {
  return root.empty() ? manifest.parent_path() : fs::path(root);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

void print_json(const nlohmann::json& j, const std::string& out) {
  if (out.empty())
    std::cout << j.dump(2) << '\n';
  else
    write_file_atomic(out, j.dump(2) + "\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal ophthalmic masked-autoencoder toolkit"};
  app.require_subcommand(1);
  app.fallthrough(false);

  // preprocess
  auto* pre = app.add_subcommand("preprocess", "Quality gate, background crop and resize a manifest's images");
  std::string pre_manifest, pre_root, pre_out;
  std::size_t pre_size = 256;
  bool pre_lum = false;
  pre->add_option("--manifest", pre_manifest, "Input manifest")->required();
  pre->add_option("--root", pre_root, "Image root (default: manifest directory)");
  pre->add_option("--out", pre_out, "Output directory")->required();
  pre->add_option("--size", pre_size, "Output side length")->capture_default_str();
  pre->add_flag("--luminance", pre_lum, "Threshold on luminance instead of the channel maximum");

  // split
  auto* spl = app.add_subcommand("split", "Assign 55/15/30 train/val/test splits");
  std::string spl_manifest, spl_out;
  std::uint64_t spl_seed = 0;
  spl->add_option("--manifest", spl_manifest, "Input manifest (unassigned)")->required();
  spl->add_option("--seed", spl_seed, "Shuffle seed")->capture_default_str();
  spl->add_option("--out", spl_out, "Output manifest")->required();

  // pretrain
  auto* pt = app.add_subcommand("pretrain", "Masked-autoencoder pretraining");
  std::string pt_manifest, pt_root, pt_out, pt_config;
  mae::PretrainOptions pt_opts;
  bool pt_norm_pix = false;
  int pt_threads = 0;
  Overrides pt_over;
  pt->add_option("--manifest", pt_manifest, "Manifest (train split, or all records)")->required();
  pt->add_option("--root", pt_root, "Image root (default: manifest directory)");
  pt->add_option("--out", pt_out, "Checkpoint directory")->required();
  pt->add_option("--config", pt_config, "Config file ([model] section)");
  model_flags(pt, pt_over);
  pt->add_option("--epochs", pt_opts.schedule.total_epochs, "Epochs")->capture_default_str();
  pt->add_option("--warmup-epochs", pt_opts.schedule.warmup_epochs, "Warmup epochs")->capture_default_str();
  pt->add_option("--batch-size", pt_opts.schedule.batch_size, "Batch size")->capture_default_str();
  pt->add_option("--lr", pt_opts.schedule.peak_lr, "Peak learning rate")->capture_default_str();
  pt->add_option("--mask-ratio", pt_opts.schedule.mask_ratio, "Fraction of patches masked")->capture_default_str();
  pt->add_flag("--norm-pix-loss", pt_norm_pix, "Per-patch normalized targets");
  pt->add_option("--seed", pt_opts.seed, "Seed")->capture_default_str();
  pt->add_option("--threads", pt_threads, "OpenMP threads (0: default)");

  // finetune
  auto* ft = app.add_subcommand("finetune", "Fine-tune a classifier for one seed");
  std::string ft_manifest, ft_out, ft_config;
  std::uint64_t ft_seed = 0;
  Overrides ft_over;
  ft->add_option("--manifest", ft_manifest, "Labeled manifest")->required();
  ft->add_option("--out", ft_out, "Output directory")->required();
  ft->add_option("--config", ft_config, "Config file");
  ft->add_option("--seed", ft_seed, "Seed")->capture_default_str();
  model_flags(ft, ft_over);
  finetune_flags(ft, ft_over);

  // predict
  auto* pr = app.add_subcommand("predict", "Score images with a classifier checkpoint");
  std::string pr_ckpt, pr_manifest, pr_root, pr_split = "test", pr_out;
  pr->add_option("--checkpoint", pr_ckpt, "Classifier checkpoint")->required();
  pr->add_option("--manifest", pr_manifest, "Manifest")->required();
  pr->add_option("--root", pr_root, "Image root (default: manifest directory)");
  pr->add_option("--split", pr_split, "train, val, test or all")->capture_default_str();
  pr->add_option("--out", pr_out, "Predictions file (JSON lines)")->required();

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Metrics from a predictions file");
  std::string ev_preds, ev_manifest, ev_classes, ev_mode = "single_label", ev_out;
  ev->add_option("--predictions", ev_preds, "Predictions file")->required();
  auto* ev_m = ev->add_option("--manifest", ev_manifest, "Manifest providing the class list");
  ev->add_option("--classes", ev_classes, "Comma-separated class list")->excludes(ev_m);
  ev->add_option("--mode", ev_mode, "single_label or multi_label")->capture_default_str();
  ev->add_option("--out", ev_out, "Write metrics JSON here instead of stdout");

  // compare
  auto* cmp = app.add_subcommand("compare", "t-test of per-seed AUROC between two reports");
  std::string cmp_report, cmp_ref, cmp_out;
  bool cmp_paired = false;
  cmp->add_option("--report", cmp_report, "Report of the model under test")->required();
  cmp->add_option("--reference", cmp_ref, "Report of the reference model")->required();
  cmp->add_flag("--paired", cmp_paired, "Paired test (same seeds and splits)");
  cmp->add_option("--out", cmp_out, "Directory for the combined report");

  // vqa-train
  auto* vt = app.add_subcommand("vqa-train", "Fine-tune the visual question answering model");
  std::string vt_qa, vt_root, vt_out, vt_config;
  VqaTrainOptions vt_opts;
  Overrides vt_over;
  double vt_lr = vt_opts.recipe.schedule.peak_lr;
  std::string vt_log;
  vt->add_option("--qa", vt_qa, "QA manifest")->required();
  vt->add_option("--root", vt_root, "Image root (default: QA manifest directory)");
  vt->add_option("--out", vt_out, "Output checkpoint")->required();
  vt->add_option("--config", vt_config, "Config file ([model] section)");
  model_flags(vt, vt_over);
  vt->add_option("--encoder", vt_opts.encoder_checkpoint, "Encoder weights");
  vt->add_option("--epochs", vt_opts.recipe.epochs, "Epochs")->capture_default_str();
  vt->add_option("--batch-size", vt_opts.recipe.batch_size, "Batch size")->capture_default_str();
  vt->add_option("--lr", vt_lr, "Peak learning rate")->capture_default_str();
  vt->add_flag("--unfreeze-encoder", vt_opts.recipe.unfreeze_encoder, "Train the image encoder too");
  vt->add_option("--lm-dim", vt_opts.lm.lm_dim, "Language model width")->capture_default_str();
  vt->add_option("--lm-depth", vt_opts.lm.lm_depth, "Language model blocks")->capture_default_str();
  vt->add_option("--lora-rank", vt_opts.lm.lora_rank, "Adapter rank")->capture_default_str();
  vt->add_option("--seed", vt_opts.seed, "Seed")->capture_default_str();
  vt->add_option("--loss-log", vt_log, "Write per-step losses here");

  // vqa-eval
  auto* ve = app.add_subcommand("vqa-eval", "Greedy answers and text metrics");
  std::string ve_ckpt, ve_qa, ve_root, ve_out;
  std::size_t ve_max = 16;
  ve->add_option("--checkpoint", ve_ckpt, "VQA checkpoint")->required();
  ve->add_option("--qa", ve_qa, "QA manifest")->required();
  ve->add_option("--root", ve_root, "Image root (default: QA manifest directory)");
  ve->add_option("--out", ve_out, "Output directory")->required();
  ve->add_option("--max-len", ve_max, "Maximum answer tokens")->capture_default_str();

  // visualize
  auto* vis = app.add_subcommand("visualize", "Original | masked | reconstruction panel");
  std::string vis_ckpt, vis_image, vis_out;
  double vis_ratio = 0.8;
  std::uint64_t vis_seed = 0;
  vis->add_option("--checkpoint", vis_ckpt, "MAE checkpoint")->required();
  vis->add_option("--image", vis_image, "Input image (PNG or PPM)")->required();
  vis->add_option("--mask-ratio", vis_ratio, "Fraction of patches masked")->capture_default_str();
  vis->add_option("--seed", vis_seed, "Mask seed")->capture_default_str();
  vis->add_option("--out", vis_out, "Output PNG")->required();

  // synth
  auto* syn = app.add_subcommand("synth", "Write a synthetic two-class dataset and QA manifest");
  std::string syn_out;
  std::size_t syn_count = 40, syn_size = 64;
  std::uint64_t syn_seed = 0;
  syn->add_option("--out", syn_out, "Output directory")->required();
  syn->add_option("--count", syn_count, "Number of images")->capture_default_str();
  syn->add_option("--size", syn_size, "Side length")->capture_default_str();
  syn->add_option("--seed", syn_seed, "Seed")->capture_default_str();

  // experiment
  auto* ex = app.add_subcommand("experiment", "Multi-seed fine-tune, evaluate and compare");
  std::string ex_config;
  Overrides ex_over;
  ex->add_option("--config", ex_config, "Config file");
  ex_over.add(ex, "--name", "experiment.name", "Model name in the report");
  ex_over.add(ex, "--manifest", "experiment.manifest", "Labeled manifest");
  ex_over.add(ex, "--seeds", "experiment.seeds", "Comma-separated seeds");
  ex_over.add(ex, "--checkpoint-dir", "experiment.checkpoint_dir", "Checkpoint directory");
  ex_over.add(ex, "--report-dir", "experiment.report_dir", "Report directory");
  ex_over.add(ex, "--compare", "experiment.compare_report", "Reference report for the t-test");
  ex_over.flag(ex, "--paired", "experiment.paired", "Paired t-test");
  model_flags(ex, ex_over);
  finetune_flags(ex, ex_over);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    if (argc > 1 && argv[1][0] != '-' && !app.get_subcommand_no_throw(argv[1]))
      std::cerr << "error: unknown subcommand '" << argv[1] << "'\n";
    else
      std::cerr << "error: " << e.what() << '\n';
    const auto* failed = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    std::cerr << failed->help();
    return e.get_exit_code() == 0 ? 2 : e.get_exit_code();
  }

  try {
    if (*pre) {
      const fs::path m(pre_manifest);
      PreprocessSummary s;
      preprocess_manifest(data::read_manifest(m), manifest_root(pre_root, m), pre_out,
                          {pre_size, pre_lum ? data::ThresholdMode::Luminance : data::ThresholdMode::MaxChannel}, &s);
      std::cout << "kept " << s.kept << ", excluded " << s.excluded << '\n';
    } else if (*spl) {
      const auto m = data::split_dataset(data::read_manifest(fs::path(spl_manifest)), spl_seed);
      std::ostringstream text;
      data::write_manifest(m, text);
      write_file_atomic(spl_out, text.str());
      std::cout << "train " << m.in_split(data::Split::Train).size() << ", val "
                << m.in_split(data::Split::Val).size() << ", test " << m.in_split(data::Split::Test).size() << '\n';
    } else if (*pt) {
      apply_threads(pt_threads);
      IniMap ini = pt_config.empty() ? IniMap{} : parse_ini(fs::path(pt_config));
      const auto vit = vit_config_from(pt_over.apply(std::move(ini)));
      pt_opts.norm_pix_loss = pt_norm_pix;
      const fs::path m(pt_manifest);
      const auto res = pretrain_flow(data::read_manifest(m), manifest_root(pt_root, m), vit, pt_opts, pt_out);
      for (const auto& e : res.history)
        std::cout << "epoch " << e.epoch << " loss " << e.mean_loss << " lr " << e.last_lr << '\n';
    } else if (*ft) {
      auto cfg = load_run_config(ft_config, ft_over);
      cfg.manifest = ft_manifest;
      cfg.seeds = {ft_seed};
      cfg.checkpoint_dir = ft_out;
      cfg.report_dir = ft_out;
      cfg.validate();
      apply_threads(cfg.threads);
      const auto manifest = data::read_manifest(cfg.manifest);
      manifest.validate();
      const auto run = run_seed(cfg, manifest, ft_seed, &std::cout);
      std::cout << "test AUROC " << run.test.auroc << " AUPR " << run.test.aupr << '\n';
    } else if (*pr) {
      const auto loaded = load_classifier(load_checkpoint(pr_ckpt));
      const fs::path m(pr_manifest);
      auto manifest = data::read_manifest(m);
      if (pr_split == "all")
        for (auto& r : manifest.records) r.split = data::Split::Test;
      const auto set = load_split(manifest, pr_split == "all" ? data::Split::Test : data::parse_split(pr_split),
                                  manifest_root(pr_root, m));
      std::ostringstream dump;
      classify::write_predictions(dump, set, classify::predict(loaded.model, set.images));
      write_file_atomic(pr_out, dump.str());
      std::cout << "wrote " << set.images.size() << " predictions\n";
    } else if (*ev) {
      std::vector<std::string> classes;
      if (!ev_manifest.empty())
        classes = data::read_manifest(fs::path(ev_manifest)).classes;
      else
        classes = split_list(ev_classes);
      if (classes.empty()) throw ConfigError("pass --manifest or --classes");
      std::ifstream in(ev_preds);
      if (!in) throw ConfigError("cannot open " + ev_preds);
      const bool single = classify::parse_mode(ev_mode) == classify::Mode::SingleLabel;
      print_json(metrics::to_json(metrics_from_predictions(in, classes, single)), ev_out);
    } else if (*cmp) {
      const auto a = read_report(cmp_report), b = read_report(cmp_ref);
      std::vector<double> ref;
      for (const auto& r : b.runs) ref.push_back(r.result.auroc);
      const auto combined = metrics::build_report(a.name, a.classes, a.runs, ref, b.name, cmp_paired);
      std::cout << metrics::format_table({combined, b});
      if (!cmp_out.empty()) write_report(combined, cmp_out);
    } else if (*vt) {
      IniMap ini = vt_config.empty() ? IniMap{} : parse_ini(fs::path(vt_config));
      vt_opts.vit = vit_config_from(vt_over.apply(std::move(ini)));
      vt_opts.recipe.schedule.peak_lr = vt_lr;
      vt_opts.recipe.schedule.total_epochs = static_cast<double>(vt_opts.recipe.epochs);
      const fs::path q(vt_qa);
      std::ostringstream log;
      const auto hist = vqa_train_flow(q, manifest_root(vt_root, q), vt_opts, vt_out, &log);
      if (!vt_log.empty()) write_file_atomic(vt_log, log.str());
      for (const auto& e : hist) std::cout << "epoch " << e.epoch << " loss " << e.mean_loss << '\n';
    } else if (*ve) {
      const fs::path q(ve_qa);
      const auto s = vqa_eval_flow(ve_ckpt, q, manifest_root(ve_root, q), ve_out, ve_max);
      std::cout << to_json(s).dump(2) << '\n';
    } else if (*vis) {
      visualize_flow(vis_ckpt, vis_image, vis_ratio, vis_seed, vis_out);
      std::cout << "wrote " << vis_out << '\n';
    } else if (*syn) {
      const auto m = data::write_synthetic_dataset(syn_out, syn_count, syn_size, syn_seed);
      std::vector<vqa::QaPair> qa;
      for (const auto& r : m.records)
        qa.push_back({r.path, "which colour dominates the image", std::string(r.labels[0] == 0 ? "red" : "green and blue")});
      std::ostringstream text;
      vqa::write_qa_manifest(qa, text);
      write_file_atomic(fs::path(syn_out) / "qa.jsonl", text.str());
      std::cout << "wrote " << m.records.size() << " images\n";
    } else if (*ex) {
      const auto report = run_experiment(load_run_config(ex_config, ex_over), &std::cout);
      std::cout << metrics::format_table({report});
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
