// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Every subcommand takes --seed and the options of
// any subcommand may also come from a config file (--config, TOML/INI
// syntax, one [section] per subcommand).

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

#include "ssmamba/checks.hpp"
#include "ssmamba/gradcam.hpp"
#include "ssmamba/synth.hpp"
#include "ssmamba/trainer.hpp"

namespace fs = std::filesystem;
using namespace ssm;

namespace {

std::size_t preset_image_size(const std::string& preset) {
  if (preset == "full") return 224;
  if (preset == "tiny") return 16;
  return 32;
}

// Flags shared by the training subcommands; unset values keep the phase defaults.
struct TrainFlags {
  std::string preset = "desk";
  std::optional<std::size_t> image_size, epochs, batch_size, warmup_epochs;
  std::optional<double> lr, min_lr, weight_decay, mixup, clip;
  bool no_crop = false;
  std::uint64_t seed = 0;
  std::string out, log;

  void add(CLI::App* app, bool with_preset = true) {
    if (with_preset) {
      app->add_option("--preset", preset, "Model size: desk, tiny or full")
          ->check(CLI::IsMember({"desk", "tiny", "full"}))
          ->capture_default_str();
      app->add_option("--image-size", image_size, "Input side in pixels (default: preset size)");
    }
    app->add_option("--epochs", epochs, "Training epochs");
    app->add_option("--batch-size", batch_size, "Batch size");
    app->add_option("--warmup-epochs", warmup_epochs, "Linear warmup length in epochs");
    app->add_option("--lr", lr, "Base learning rate");
    app->add_option("--min-lr", min_lr, "Final learning rate (default lr/100)");
    app->add_option("--weight-decay", weight_decay, "AdamW weight decay");
    app->add_option("--clip", clip, "Global gradient-norm clip, 0 disables");
    app->add_flag("--no-crop", no_crop, "Disable RandomResizedCrop");
    app->add_option("--seed", seed, "Seed for splits, initialisation and every random stream")->capture_default_str();
    app->add_option("--out", out, "Checkpoint to write")->required();
    app->add_option("--log", log, "Metrics log (JSON lines, appended)");
  }

  void apply(TrainConfig& t) const {
    if (epochs) t.epochs = *epochs;
    if (batch_size) t.batch_size = *batch_size;
    if (warmup_epochs) t.warmup_epochs = *warmup_epochs;
    if (lr) t.base_lr = *lr;
    if (min_lr) t.min_lr = *min_lr;
    if (weight_decay) t.weight_decay = *weight_decay;
    if (mixup) t.mixup_alpha = *mixup;
    if (clip) t.clip_norm = *clip;
    if (no_crop) t.random_crop = false;
    t.seed = seed;
  }
};

RunConfig load_run_config(const Checkpoint& ck) { return parse_config(ck.config); }

Checkpoint load_phase(const std::string& path, CheckpointPhase want) {
  auto ck = load_checkpoint(path);
  if (ck.phase != want) {
    throw CheckpointError(path + ": expected a " + checkpoint_phase_name(want) + " checkpoint, found " +
                          checkpoint_phase_name(ck.phase));
  }
  return ck;
}

std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// --- pretrain ---------------------------------------------------------------

struct PretrainCmd {
  TrainFlags f;
  std::string data;
  std::optional<std::size_t> decoder_dim, decoder_depth;
  double mask_ratio = 0.75;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("pretrain", "Masked image modelling on unlabelled images");
    c->add_option("--data", data, "Directory of PNG/PPM images (searched recursively)")->required();
    c->add_option("--mask-ratio", mask_ratio, "Fraction of patches masked")->capture_default_str();
    c->add_option("--decoder-dim", decoder_dim, "Decoder width");
    c->add_option("--decoder-depth", decoder_depth, "Decoder blocks");
    f.add(c);
    c->callback([this] { run(); });
  }

  void run() const {
    RunConfig rc;
    rc.preset = f.preset;
    rc.encoder = presets::by_name(f.preset);
    rc.image_size = f.image_size.value_or(preset_image_size(f.preset));
    rc.mask_ratio = mask_ratio;
    rc.train = TrainConfig::for_phase(Phase::pretrain);
    f.apply(rc.train);
    if (decoder_dim) rc.decoder.dim = *decoder_dim;
    if (decoder_depth) rc.decoder.depth = *decoder_depth;

    std::vector<Image> images;
    for (const auto& p : list_images(data)) images.push_back(load_resized(p, rc.image_size));
    rc.stats = channel_stats(images);
    std::cout << "pretrain: " << images.size() << " images at " << rc.image_size << " px, preset " << rc.preset
              << "\n";

    ParamStore<float> st;
    Rng rng(rc.train.seed);
    MaskedModel<float> model(Init<float>(st, rng), rc.encoder, rc.decoder);
    auto opt = make_optimizer(st, rc.train);
    MetricsLog log(f.log);
    run_pretrain(model, st, opt, images, rc.stats, rc, &log, [](std::size_t epoch, double loss) {
      std::cout << "epoch " << epoch << " masked-patch mse " << fmt(loss) << std::endl;
    });
    save_checkpoint(f.out, make_checkpoint(CheckpointPhase::pretrain, rc, st, &opt));
    std::cout << "wrote " << f.out << "\n";
  }
};

// --- finetune / eval ----------------------------------------------------------

json metrics_record(const std::string& split, std::size_t n, const ClassificationMetrics& m) {
  json r{{"phase", "eval"}, {"split", split}, {"n", n}, {"acc", round2(m.acc)}, {"macro_f1", round2(m.macro_f1)}};
  r["auc"] = m.has_auc ? json(round2(m.auc)) : json(nullptr);
  return r;
}

void report_split(const Encoder<float>& enc, const LoadedDataset& d, Split s, const ChannelStats& stats,
                  MetricsLog& log) {
  const auto& set = d.split(s);
  if (set.size() == 0) {
    std::cout << split_name(s) << ": empty\n";
    return;
  }
  const auto m = evaluate(enc, set, stats);
  std::cout << split_name(s) << ": n=" << set.size() << " acc " << fixed2(m.acc) << " macro_f1 "
            << fixed2(m.macro_f1) << " auc " << (m.has_auc ? fixed2(m.auc) : std::string("n/a")) << "\n";
  log.write(metrics_record(split_name(s), set.size(), m));
}

struct FinetuneCmd {
  TrainFlags f;
  std::string data, init;
  std::size_t eval_every = 0, max_steps = 0;
  double target_acc = 0;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("finetune", "Supervised training on a directory-per-class dataset");
    c->add_option("--data", data, "Dataset root with one subdirectory per class")->required();
    c->add_option("--init", init, "Pretraining checkpoint to initialise the encoder from");
    c->add_option("--mixup", f.mixup, "Mixup Beta parameter, 0 disables");
    c->add_option("--eval-every", eval_every, "Validation interval in steps (0: once per epoch)");
    c->add_option("--max-steps", max_steps, "Stop after this many optimiser steps");
    c->add_option("--target-acc", target_acc, "Stop once validation accuracy (percent) reaches this");
    f.add(c);
    c->callback([this] { run(); });
  }

  void run() const {
    RunConfig rc;
    std::optional<Checkpoint> pre;
    if (!init.empty()) {
      pre = load_phase(init, CheckpointPhase::pretrain);
      const auto prc = load_run_config(*pre);
      rc.preset = prc.preset;
      rc.encoder = prc.encoder;
      rc.image_size = prc.image_size;
    } else {
      rc.preset = f.preset;
      rc.encoder = presets::by_name(f.preset);
      rc.image_size = f.image_size.value_or(preset_image_size(f.preset));
    }
    rc.train = TrainConfig::for_phase(Phase::finetune);
    f.apply(rc.train);

    const auto d = load_images(load_dataset(data, rc.train.seed), rc.image_size);
    rc.class_names = d.manifest.classes;
    rc.encoder.num_classes = rc.class_names.size();
    rc.stats = d.stats;
    std::cout << "finetune: " << rc.class_names.size() << " classes, train/val/test " << d.train.size() << "/"
              << d.val.size() << "/" << d.test.size() << "\n";

    ParamStore<float> st;
    Rng rng(rc.train.seed);
    Encoder<float> enc(Init<float>(st, rng), rc.encoder);
    if (pre) {
      const auto rep = load_pretrained_encoder(*pre, st);
      std::cout << "loaded " << rep.loaded << " pretrained tensors from " << init << "\n";
    }
    auto opt = make_optimizer(st, rc.train);
    MetricsLog log(f.log);
    FinetuneOptions fo;
    if (d.val.size() > 0) {
      fo.monitor = &d.val;
      fo.eval_every = eval_every ? eval_every : steps_per_epoch(d.train.size(), rc.train.batch_size);
    }
    fo.target_acc = target_acc;
    fo.stop_at_target = target_acc > 0;
    fo.max_steps = max_steps;
    const auto res = run_finetune(enc, st, opt, d.train, rc.stats, rc, &log, fo);
    for (std::size_t e = 0; e < res.epoch_loss.size(); ++e)
      std::cout << "epoch " << e + 1 << " loss " << fmt(res.epoch_loss[e]) << "\n";
    std::cout << "steps " << res.steps;
    if (res.steps_to_target) std::cout << ", target reached at step " << *res.steps_to_target;
    std::cout << "\n";
    report_split(enc, d, Split::val, rc.stats, log);
    report_split(enc, d, Split::test, rc.stats, log);
    save_checkpoint(f.out, make_checkpoint(CheckpointPhase::finetune, rc, st, &opt));
    std::cout << "wrote " << f.out << "\n";
  }
};

struct Classifier {
  RunConfig rc;
  ParamStore<float> store;
  std::optional<Encoder<float>> enc;

  explicit Classifier(const std::string& path) {
    const auto ck = load_phase(path, CheckpointPhase::finetune);
    rc = load_run_config(ck);
    Rng rng(0);
    enc.emplace(Init<float>(store, rng), rc.encoder);
    import_store<float>(ck, store);
  }
};

struct EvalCmd {
  std::string checkpoint, data, log, split = "all";
  std::optional<std::uint64_t> seed;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("eval", "Accuracy, macro F1 and AUC of a fine-tuned checkpoint");
    c->add_option("--checkpoint", checkpoint, "Fine-tuned checkpoint")->required();
    c->add_option("--data", data, "Dataset root with one subdirectory per class")->required();
    c->add_option("--split", split, "Which split to score")
        ->check(CLI::IsMember({"all", "train", "val", "test"}))
        ->capture_default_str();
    c->add_option("--seed", seed, "Split seed (default: the seed the checkpoint was trained with)");
    c->add_option("--log", log, "Metrics log; one record per split");
    c->callback([this] { run(); });
  }

  void run() const {
    Classifier m(checkpoint);
    const auto d = load_images(load_dataset(data, seed.value_or(m.rc.train.seed)), m.rc.image_size);
    if (d.manifest.classes != m.rc.class_names) throw std::runtime_error("dataset classes differ from the checkpoint's");
    MetricsLog out(log);
    for (Split s : {Split::train, Split::val, Split::test})
      if (split == "all" || split == split_name(s)) report_split(*m.enc, d, s, m.rc.stats, out);
  }
};

// --- MIL ----------------------------------------------------------------------

std::string task_header(const std::vector<TaskSpec>& tasks) {
  std::string s;
  for (const auto& t : tasks) s += task_column(t) + "\t";
  return s;
}

void print_mil(const std::vector<TaskMetrics>& ms, MetricsLog& log, const std::string& label) {
  for (const auto& m : ms) {
    json r{{"phase", "mil-eval"}, {"set", label}, {"task", m.task}, {"n", m.n}};
    std::cout << label << " " << m.task << ": n=" << m.n;
    if (m.kind == TaskKind::classification) {
      std::cout << " acc " << fixed2(m.cls.acc) << " macro_f1 " << fixed2(m.cls.macro_f1) << " auc "
                << (m.cls.has_auc ? fixed2(m.cls.auc) : std::string("n/a"));
      r["acc"] = round2(m.cls.acc);
      r["macro_f1"] = round2(m.cls.macro_f1);
      r["auc"] = m.cls.has_auc ? json(round2(m.cls.auc)) : json(nullptr);
    } else {
      std::cout << " mae " << fmt(m.mae);
      r["mae"] = m.mae;
    }
    std::cout << "\n";
    log.write(r);
  }
}

struct MilTrainCmd {
  TrainFlags f;
  std::string manifest, val_manifest;
  MILConfig mc;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("mil-train", "Train the slide-level aggregator on embedding bags");
    c->add_option("--manifest", manifest, "Training manifest (TSV)")->required();
    c->add_option("--val-manifest", val_manifest, "Manifest scored after every epoch");
    c->add_option("--dim", mc.dim, "Aggregator width")->capture_default_str();
    c->add_option("--depth", mc.depth, "Aggregator blocks")->capture_default_str();
    c->add_option("--state-dim", mc.state_dim, "SSM state size")->capture_default_str();
    c->add_option("--rounds", mc.rounds, "Resampling rounds at evaluation")->capture_default_str();
    c->add_option("--tiles-per-round", mc.tiles_per_round, "Tiles drawn per round, 0 = whole bag")
        ->capture_default_str();
    c->add_flag("--with-replacement", mc.with_replacement, "Draw tiles with replacement");
    f.add(c, false);
    c->callback([this] { run(); });
  }

  void run() {
    const auto m = read_manifest(manifest);
    const auto bags = load_bags(m);
    RunConfig rc;
    rc.mil = mc;
    rc.mil.tasks = m.tasks;
    rc.mil.embed_dim = bags.front().embed_dim;
    rc.train = TrainConfig::for_phase(Phase::finetune);
    rc.train.mixup_alpha = 0;
    rc.train.random_crop = false;
    rc.train.epochs = 20;
    rc.train.warmup_epochs = 1;
    f.apply(rc.train);
    rc.train.validate();
    std::optional<std::vector<Bag>> val;
    if (!val_manifest.empty()) {
      const auto vm = read_manifest(val_manifest);
      if (task_header(vm.tasks) != task_header(m.tasks)) throw std::runtime_error("validation manifest tasks differ");
      val = load_bags(vm);
    }
    std::cout << "mil-train: " << bags.size() << " bags, embed dim " << rc.mil.embed_dim << ", " << m.tasks.size()
              << " task(s)\n";

    ParamStore<float> st;
    Rng rng(rc.train.seed);
    MILModel<float> model(Init<float>(st, rng), rc.mil);
    auto opt = make_optimizer(st, rc.train);
    const auto sched = Schedule::from(rc.train, steps_per_epoch(bags.size(), rc.train.batch_size));
    MetricsLog log(f.log);
    for (std::size_t e = 0; e < rc.train.epochs; ++e) {
      const auto ep = mil_epoch(model, st, opt, bags, rc.train, sched, e);
      std::cout << "epoch " << e + 1 << " loss " << fmt(ep.loss) << "\n";
      log.write({{"phase", "mil-train"}, {"epoch", e + 1}, {"step", opt.steps()}, {"loss", ep.loss}});
      if (val) print_mil(evaluate_mil(model, *val, rc.train.seed), log, "val");
    }
    save_checkpoint(f.out, make_checkpoint(CheckpointPhase::mil, rc, st, &opt));
    std::cout << "wrote " << f.out << "\n";
  }
};

struct MilEvalCmd {
  std::string checkpoint, manifest, log;
  std::optional<std::size_t> rounds, tiles;
  std::optional<std::uint64_t> seed;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("mil-eval", "Score a MIL checkpoint with resampled predictions");
    c->add_option("--checkpoint", checkpoint, "MIL checkpoint")->required();
    c->add_option("--manifest", manifest, "Manifest to score")->required();
    c->add_option("--rounds", rounds, "Override the resampling rounds");
    c->add_option("--tiles-per-round", tiles, "Override tiles per round");
    c->add_option("--seed", seed, "Resampling seed (default: the training seed)");
    c->add_option("--log", log, "Metrics log; one record per task");
    c->callback([this] { run(); });
  }

  void run() const {
    const auto ck = load_phase(checkpoint, CheckpointPhase::mil);
    auto rc = load_run_config(ck);
    if (rounds) rc.mil.rounds = *rounds;
    if (tiles) rc.mil.tiles_per_round = *tiles;
    const auto m = read_manifest(manifest);
    if (task_header(m.tasks) != task_header(rc.mil.tasks)) throw std::runtime_error("manifest tasks differ from the checkpoint's");
    const auto bags = load_bags(m);
    ParamStore<float> st;
    Rng rng(0);
    MILModel<float> model(Init<float>(st, rng), rc.mil);
    import_store<float>(ck, st);
    MetricsLog out(log);
    print_mil(evaluate_mil(model, bags, seed.value_or(rc.train.seed)), out, "eval");
  }
};

// --- params / check -----------------------------------------------------------

struct ParamsCmd {
  std::string preset = "full";
  std::optional<std::size_t> classes;
  std::uint64_t seed = 0;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("params", "Per-module parameter counts of a preset encoder");
    c->add_option("--preset", preset, "desk, tiny or full")
        ->check(CLI::IsMember({"desk", "tiny", "full"}))
        ->capture_default_str();
    c->add_option("--classes", classes, "Classifier outputs (default: preset's)");
    c->add_option("--seed", seed, "Accepted for uniformity; counts do not depend on it");
    c->callback([this] { run(); });
  }

  void run() const {
    auto cfg = presets::by_name(preset);
    if (classes) cfg.num_classes = *classes;
    for (const auto& [name, n] : param_breakdown(cfg)) std::printf("%-16s %12zu\n", name.c_str(), n);
    const auto total = param_count_total(cfg);
    std::printf("%-16s %12zu  (%.2fM)\n", "total", total, double(total) / 1e6);
  }
};

struct CheckCmd {
  std::uint64_t seed = 0;
  bool failed = false;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("check", "Run the gradient, scan, masking, metrics and MIL self-checks");
    c->add_option("--seed", seed, "Accepted for uniformity; the suite uses fixed seeds");
    c->callback([this] { run(); });
  }

  void run() {
    for (const auto& [id, fn] : checks::invariant_suite()) {
      const auto g = checks::run(fn, id, "criterion " + std::to_string(id));
      std::printf("%s  [%d] %s  (%.2f s)\n", g.pass() ? "PASS" : "FAIL", g.id, g.title.c_str(), g.seconds);
      for (const auto& r : g.results)
        std::printf("        %s %s%s%s\n", r.pass ? "ok  " : "FAIL", r.name.c_str(), r.detail.empty() ? "" : ": ",
                    r.detail.c_str());
      failed = failed || !g.pass();
    }
    std::cout << (failed ? "some checks failed\n" : "all checks passed\n");
  }
};

// --- gradcam / reconstruct ------------------------------------------------------

std::string with_suffix(const std::string& prefix, const std::string& suffix) {
  fs::path p(prefix);
  if (p.has_extension()) p.replace_extension();
  return p.string() + suffix;
}

struct GradcamCmd {
  std::string checkpoint, image, out;
  std::optional<std::size_t> cls;
  std::size_t stage = 0;
  std::uint64_t seed = 0;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("gradcam", "Class activation heatmap and overlay for one image");
    c->add_option("--checkpoint", checkpoint, "Fine-tuned checkpoint")->required();
    c->add_option("--image", image, "PNG or PPM image")->required();
    c->add_option("--out", out, "Output prefix; writes <out>_heatmap.png and <out>_overlay.png")->required();
    c->add_option("--class", cls, "Class index (default: the predicted class)");
    c->add_option("--stage", stage, "Encoder stage 1-4, 0 picks the deepest map of at least 7x7")
        ->capture_default_str();
    c->add_option("--seed", seed, "Accepted for uniformity; Grad-CAM is deterministic");
    c->callback([this] { run(); });
  }

  void run() const {
    Classifier m(checkpoint);
    const Image raw = load_resized(image, m.rc.image_size);
    const auto x = stack_images<float>({normalize(raw, m.rc.stats)});
    std::size_t k = 0;
    if (cls) {
      k = *cls;
    } else {
      NoGradGuard<float> ng;
      k = argmax_rows(m.enc->classify(x, false)).at(0);
    }
    const auto cam = grad_cam(*m.enc, x, k, stage);
    const auto heat = with_suffix(out, "_heatmap.png"), over = with_suffix(out, "_overlay.png");
    write_png(heat, grey_to_rgb(cam.heatmap));
    write_png(over, cam_overlay(raw, cam.heatmap));
    std::cout << "class " << k;
    if (k < m.rc.class_names.size()) std::cout << " (" << m.rc.class_names[k] << ")";
    std::cout << ", stage " << cam.stage << ", logits";
    for (double v : cam.logits) std::cout << " " << fmt(v);
    std::cout << "\nwrote " << heat << " and " << over << "\n";
  }
};

Image upscale(const Image& im, std::size_t f) {
  Image out(im.height * f, im.width * f, im.channels);
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x)
      for (std::size_t c = 0; c < im.channels; ++c) out.at(y, x, c) = im.at(y / f, x / f, c);
  return out;
}

void clamp01(Image& im) {
  for (auto& v : im.pixels) v = std::clamp(v, 0.0f, 1.0f);
}

struct ReconstructCmd {
  std::string checkpoint, data, out;
  std::vector<std::string> images;
  std::size_t count = 4, scale = 4;
  std::optional<double> mask_ratio;
  std::uint64_t seed = 0;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("reconstruct", "Masked / reconstructed / original triptychs from a pretraining checkpoint");
    c->add_option("--checkpoint", checkpoint, "Pretraining checkpoint")->required();
    auto* img = c->add_option("--image", images, "Image(s) to reconstruct");
    auto* dat = c->add_option("--data", data, "Directory; the first --count images in sorted order are used");
    img->excludes(dat);
    c->add_option("--count", count, "Images taken from --data")->capture_default_str();
    c->add_option("--out", out, "Output PNG, one triptych per row")->required();
    c->add_option("--mask-ratio", mask_ratio, "Override the checkpoint's mask ratio");
    c->add_option("--scale", scale, "Nearest-neighbour upscaling factor")->capture_default_str();
    c->add_option("--seed", seed, "Mask seed")->capture_default_str();
    c->callback([this] { run(); });
  }

  void run() const {
    const auto ck = load_phase(checkpoint, CheckpointPhase::pretrain);
    const auto rc = load_run_config(ck);
    auto paths = images;
    if (!data.empty()) {
      const auto all = list_images(data);
      paths.assign(all.begin(), all.begin() + long(std::min(count, all.size())));
    }
    if (paths.empty()) throw CLI::ValidationError("reconstruct", "give --image or --data");
    ParamStore<float> st;
    Rng rng(0);
    MaskedModel<float> model(Init<float>(st, rng), rc.encoder, rc.decoder);
    import_store<float>(ck, st);

    std::vector<Image> raw, norm;
    for (const auto& p : paths) {
      raw.push_back(load_resized(p, rc.image_size));
      norm.push_back(normalize(raw.back(), rc.stats));
    }
    const auto x = stack_images<float>(norm);
    const auto [gh, gw] = model.grid(rc.image_size, rc.image_size);
    const auto masks = make_batch_masks(paths.size(), gh, gw, mask_ratio.value_or(rc.mask_ratio), seed);
    NoGradGuard<float> ng;
    const auto o = model.forward(x, masks, false);
    const auto pred = unpatchify(o.pred, rc.encoder.patch);
    std::cout << "masked-patch mse " << fmt(double(o.loss.item())) << " over " << paths.size() << " image(s)\n";

    const std::size_t S = rc.image_size, P = rc.encoder.patch, gap = 2;
    Image sheet(paths.size() * (S * scale + gap) - gap, 3 * S * scale + 2 * gap, 3, 1.0f);
    for (std::size_t b = 0; b < paths.size(); ++b) {
      Image masked = raw[b], recon = denormalize(unstack_image(pred, b), rc.stats);
      clamp01(recon);
      for (std::size_t y = 0; y < S; ++y)
        for (std::size_t xx = 0; xx < S; ++xx) {
          const bool hidden = masks[b].contains((y / P) * gw + xx / P);
          for (std::size_t c = 0; c < 3; ++c) {
            if (hidden) masked.at(y, xx, c) = 0.5f;
            else recon.at(y, xx, c) = raw[b].at(y, xx, c);  // visible patches are shown as given
          }
        }
      const Image row[3] = {upscale(masked, scale), upscale(recon, scale), upscale(raw[b], scale)};
      for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t y = 0; y < S * scale; ++y)
          for (std::size_t xx = 0; xx < S * scale; ++xx)
            for (std::size_t c = 0; c < 3; ++c)
              sheet.at(b * (S * scale + gap) + y, k * (S * scale + gap) + xx, c) = row[k].at(y, xx, c);
    }
    write_png(out, sheet);
    std::cout << "wrote " << out << " (columns: masked, reconstruction, original)\n";
  }
};

// --- synth --------------------------------------------------------------------

struct SynthCmd {
  std::string kind, out;
  std::size_t count = 64, size = 32, tiles = 16, embed_dim = 8;
  std::uint64_t seed = 0;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("synth", "Write a synthetic dataset");
    c->add_option("--kind", kind, "textures, blobs-stripes or mil")
        ->check(CLI::IsMember({"textures", "blobs-stripes", "mil"}))
        ->required();
    c->add_option("--out", out, "Output directory")->required();
    c->add_option("--count", count, "Images (textures), images per class (blobs-stripes) or bags (mil)")
        ->capture_default_str();
    c->add_option("--size", size, "Image side in pixels")->capture_default_str();
    c->add_option("--tiles", tiles, "Mean tiles per bag (mil)")->capture_default_str();
    c->add_option("--embed-dim", embed_dim, "Embedding width (mil)")->capture_default_str();
    c->add_option("--seed", seed, "Generator seed")->capture_default_str();
    c->callback([this] { run(); });
  }

  // Class 1 bags carry a shifted first channel; the regression target is
  // the bag mean of the second channel.
  void write_mil() const {
    BagManifest m;
    m.tasks = {{"label", TaskKind::classification, 2}, {"score", TaskKind::regression, 0}};
    fs::create_directories(fs::path(out) / "bags");
    for (std::size_t i = 0; i < count; ++i) {
      auto rng = Rng::stream(seed, i);
      Bag b;
      char id[32];
      std::snprintf(id, sizeof id, "slide_%04zu", i);
      b.slide_id = id;
      b.embed_dim = embed_dim;
      const std::size_t n = tiles / 2 + rng.below(tiles + 1);
      const std::size_t side = 2 * tiles;
      for (auto cell : rng.sample_without_replacement(side * side, std::max<std::size_t>(n, 1)))
        b.coords.push_back({std::int32_t(cell / side), std::int32_t(cell % side)});
      const bool pos = i % 2 == 1;
      double mean1 = 0;
      for (std::size_t t = 0; t < b.coords.size(); ++t)
        for (std::size_t e = 0; e < embed_dim; ++e) {
          float v = float(rng.normal());
          if (e == 0) v += pos ? 1.0f : -1.0f;
          if (e == 1) mean1 += v;
          b.embeddings.push_back(v);
        }
      const std::string rel = "bags/" + b.slide_id + ".bag";
      write_bag((fs::path(out) / rel).string(), b);
      std::vector<std::optional<double>> labels{pos ? 1.0 : 0.0, mean1 / double(b.coords.size())};
      if (i % 7 == 3) labels[1] = std::nullopt;  // some slides lack the regression label
      m.rows.push_back({b.slide_id, rel, labels});
    }
    write_manifest((fs::path(out) / "manifest.tsv").string(), m);
  }

  void run() const {
    fs::create_directories(out);
    if (kind == "textures") {
      const auto ims = synth::textures(count, size, seed);
      for (std::size_t i = 0; i < ims.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "texture_%04zu.png", i);
        write_png((fs::path(out) / name).string(), ims[i]);
      }
    } else if (kind == "blobs-stripes") {
      const auto s = synth::blobs_vs_stripes(count, size, seed);
      synth::write_class_dirs(out, {"blobs", "stripes"}, s.images, s.labels);
    } else {
      write_mil();
    }
    std::cout << "wrote " << kind << " to " << out << "\n";
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SSMamba: state-space vision backbone for pathology images"};
  app.set_config("--config", "", "Read options from a TOML/INI file; [section] per subcommand");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1, 1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  PretrainCmd pretrain;
  FinetuneCmd finetune;
  EvalCmd eval;
  MilTrainCmd mil_train;
  MilEvalCmd mil_eval;
  ParamsCmd params;
  CheckCmd check;
  GradcamCmd gradcam;
  ReconstructCmd reconstruct;
  SynthCmd synth;
  pretrain.add(app);
  finetune.add(app);
  eval.add(app);
  mil_train.add(app);
  mil_eval.add(app);
  params.add(app);
  check.add(app);
  gradcam.add(app);
  reconstruct.add(app);
  synth.add(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    // Parse problems print the message followed by the usage text.
    std::cerr << e.what() << "\n\n";
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    std::cerr << sub->help();
    return e.get_exit_code() ? e.get_exit_code() : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return check.failed ? 1 : 0;
}
