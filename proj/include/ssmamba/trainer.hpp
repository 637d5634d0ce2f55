// SPDX-License-Identifier: Apache-2.0
//
// Training loops for masked pretraining and supervised fine-tuning, batch
// assembly, evaluation and the JSON-lines metrics log. Every random choice
// comes from a stream keyed by (seed, purpose, index), so a run is a pure
// function of its inputs and seed.

#pragma once

#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ssmamba/checkpoint.hpp"
#include "ssmamba/config.hpp"
#include "ssmamba/dataset.hpp"
#include "ssmamba/mamim.hpp"
#include "ssmamba/metrics.hpp"
#include "ssmamba/training.hpp"

namespace ssm {

/// One JSON object per line; a default-constructed log discards records.
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(const std::string& path, bool append = true) {
    if (path.empty()) return;
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!out_) throw std::runtime_error("cannot open metrics log " + path);
  }
  void write(const json& record) {
    if (out_.is_open()) {
      out_ << record.dump() << '\n';
      out_.flush();
    }
  }

 private:
  std::ofstream out_;
};

namespace streams {
// Purposes for derived random streams.
inline constexpr std::uint64_t order = 1, crop = 2, mask = 3, mixup = 4;

inline Rng derive(std::uint64_t seed, std::uint64_t purpose, std::uint64_t index) {
  return Rng::stream(Rng::stream(seed, purpose).next_u64(), index);
}
}  // namespace streams

/// Normalised [B, S, S, 3] batch; with `crop`, each sample k gets a
/// RandomResizedCrop from stream (seed, crop, sample_ids[k]).
template <class T = float>
Tensor<T> make_batch(const std::vector<Image>& images, const std::vector<std::size_t>& idx,
                                const ChannelStats& stats, const TrainConfig* crop = nullptr,
                                const std::vector<std::uint64_t>& sample_ids = {}) {
  std::vector<Image> out;
  out.reserve(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const Image& src = images.at(idx[k]);
    if (crop && crop->random_crop) {
      auto rng = streams::derive(crop->seed, streams::crop, sample_ids.at(k));
      out.push_back(normalize(random_resized_crop(src, rng, src.height, {crop->crop_min_scale, 1.0}), stats));
    } else {
      out.push_back(normalize(src, stats));
    }
  }
  return stack_images<T>(out);
}

/// Batches of one epoch, in shuffled order; the last batch may be short.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, std::uint64_t seed,
                                                           std::size_t epoch) {
  auto rng = streams::derive(seed, streams::order, epoch);
  const auto perm = rng.permutation(n);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch)
    out.emplace_back(perm.begin() + long(i), perm.begin() + long(std::min(n, i + batch)));
  return out;
}

inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch) { return (n + batch - 1) / batch; }

/// Forward, backward, clip, AdamW step at the scheduled rate. Returns the loss.
template <class T>
double optimise_step(const ParamStore<T>& store, AdamW<T>& opt, const TrainConfig& cfg, const Schedule& sched,
                     const std::function<Tensor<T>()>& loss_fn, double* lr_out = nullptr) {
  store.zero_grad();
  double loss = 0;
  {
    Tape<T> tape;
    TapeGuard<T> guard(tape);
    auto l = loss_fn();
    loss = double(l.item());
    if (!std::isfinite(loss)) throw std::runtime_error("training diverged: loss is " + std::to_string(loss));
    tape.backward(l);
  }
  if (cfg.clip_norm > 0) clip_grad_norm(store, cfg.clip_norm);
  const double lr = lr_at(opt.steps(), sched);
  opt.step(lr);
  if (lr_out) *lr_out = lr;
  return loss;
}

template <class T>
AdamW<T> make_optimizer(const ParamStore<T>& store, const TrainConfig& cfg) {
  AdamWConfig a;
  a.weight_decay = cfg.weight_decay;
  return AdamW<T>(store, a);
}

// --- pretraining ------------------------------------------------------------

struct PretrainResult {
  std::vector<double> epoch_loss;  // mean masked-patch MSE per epoch
  std::size_t steps = 0;
};

/// images: raw [0, 1] at model resolution.
template <class T>
PretrainResult run_pretrain(const MaskedModel<T>& model, const ParamStore<T>& store, AdamW<T>& opt,
                            const std::vector<Image>& images, const ChannelStats& stats, const RunConfig& rc,
                            MetricsLog* log = nullptr,
                            const std::function<void(std::size_t, double)>& on_epoch = {}) {
  const auto& cfg = rc.train;
  cfg.validate();
  if (images.empty()) throw std::invalid_argument("pretrain: no images");
  const std::size_t spe = steps_per_epoch(images.size(), cfg.batch_size);
  const auto sched = Schedule::from(cfg, spe);
  const auto [gh, gw] = model.grid(images[0].height, images[0].width);
  PretrainResult res;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double sum = 0, lr = 0;
    std::size_t seen = 0;
    for (const auto& idx : epoch_batches(images.size(), cfg.batch_size, cfg.seed, epoch)) {
      std::vector<std::uint64_t> ids;
      for (auto i : idx) ids.push_back(epoch * images.size() + i);
      auto x = make_batch<T>(images, idx, stats, &cfg, ids);
      const std::uint64_t mask_seed = streams::derive(cfg.seed, streams::mask, opt.steps()).next_u64();
      auto masks = make_batch_masks(idx.size(), gh, gw, rc.mask_ratio, mask_seed);
      const double l = optimise_step<T>(store, opt, cfg, sched, [&] { return model.forward(x, masks, true).loss; }, &lr);
      sum += l * double(idx.size());
      seen += idx.size();
      ++res.steps;
    }
    res.epoch_loss.push_back(sum / double(seen));
    if (log) {
      log->write({{"phase", "pretrain"}, {"epoch", epoch + 1}, {"step", opt.steps()}, {"lr", lr},
                  {"loss", res.epoch_loss.back()}});
    }
    if (on_epoch) on_epoch(epoch + 1, res.epoch_loss.back());
  }
  return res;
}

// --- fine-tuning ------------------------------------------------------------

/// Class probabilities for every image, eval mode, no tape.
template <class T>
std::vector<double> predict_probs(const Encoder<T>& enc, const std::vector<Image>& images, const ChannelStats& stats,
                                  std::size_t batch = 64) {
  NoGradGuard<T> no_grad;
  std::vector<double> probs;
  for (std::size_t i = 0; i < images.size(); i += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t k = i; k < std::min(images.size(), i + batch); ++k) idx.push_back(k);
    auto p = softmax_rows(enc.classify(make_batch<T>(images, idx, stats), false));
    probs.insert(probs.end(), p.begin(), p.end());
  }
  return probs;
}

template <class T>
ClassificationMetrics evaluate(const Encoder<T>& enc, const ImageSet& set, const ChannelStats& stats) {
  return classification_metrics(set.labels, predict_probs(enc, set.images, stats), enc.config().num_classes);
}

struct FinetuneOptions {
  const ImageSet* monitor = nullptr;  // evaluated every `eval_every` steps
  std::size_t eval_every = 0;
  double target_acc = 0;        // percent; records the first step reaching it
  bool stop_at_target = false;
  std::size_t max_steps = 0;    // 0: epochs * steps_per_epoch
};

struct FinetuneResult {
  std::vector<double> epoch_loss;
  std::size_t steps = 0;
  std::optional<std::size_t> steps_to_target;
  double last_monitor_acc = 0;
};

template <class T>
FinetuneResult run_finetune(const Encoder<T>& enc, const ParamStore<T>& store, AdamW<T>& opt, const ImageSet& train,
                            const ChannelStats& stats, const RunConfig& rc, MetricsLog* log = nullptr,
                            const FinetuneOptions& fo = {}) {
  const auto& cfg = rc.train;
  cfg.validate();
  if (train.size() == 0) throw std::invalid_argument("finetune: empty training split");
  const std::size_t K = enc.config().num_classes;
  const std::size_t spe = steps_per_epoch(train.size(), cfg.batch_size);
  const auto sched = Schedule::from(cfg, spe);
  const std::size_t limit = fo.max_steps ? fo.max_steps : cfg.epochs * spe;
  FinetuneResult res;
  bool done = false;
  for (std::size_t epoch = 0; !done && res.steps < limit; ++epoch) {
    double sum = 0, lr = 0;
    std::size_t seen = 0, hits = 0;
    for (const auto& idx : epoch_batches(train.size(), cfg.batch_size, cfg.seed, epoch)) {
      if (res.steps >= limit) break;
      std::vector<std::uint64_t> ids;
      std::vector<std::size_t> labels;
      for (auto i : idx) {
        ids.push_back(epoch * train.size() + i);
        labels.push_back(train.labels[i]);
      }
      auto x = make_batch<T>(train.images, idx, stats, &cfg, ids);
      auto y = one_hot<T>(labels, K);
      if (cfg.mixup_alpha > 0) {
        auto rng = streams::derive(cfg.seed, streams::mixup, opt.steps());
        auto mb = mixup(x, y, cfg.mixup_alpha, rng);
        x = mb.x;
        y = mb.y;
      }
      Tensor<T> logits;
      const double l = optimise_step<T>(
          store, opt, cfg, sched,
          [&] {
            logits = enc.classify(x, true);
            return cross_entropy(logits, y);
          },
          &lr);
      const auto pred = argmax_rows(logits);
      for (std::size_t k = 0; k < idx.size(); ++k) hits += pred[k] == labels[k];
      sum += l * double(idx.size());
      seen += idx.size();
      ++res.steps;
      if (fo.monitor && fo.eval_every && res.steps % fo.eval_every == 0) {
        res.last_monitor_acc = evaluate(enc, *fo.monitor, stats).acc;
        if (!res.steps_to_target && fo.target_acc > 0 && res.last_monitor_acc >= fo.target_acc) {
          res.steps_to_target = res.steps;
          if (fo.stop_at_target) {
            done = true;
            break;
          }
        }
      }
    }
    res.epoch_loss.push_back(sum / double(seen));
    if (log) {
      json rec{{"phase", "finetune"}, {"epoch", epoch + 1}, {"step", opt.steps()}, {"lr", lr},
               {"loss", res.epoch_loss.back()}, {"train_acc", round2(100.0 * double(hits) / double(seen))}};
      if (fo.monitor && fo.eval_every) rec["monitor_acc"] = round2(res.last_monitor_acc);
      log->write(rec);
    }
  }
  return res;
}

// --- checkpoint helpers -----------------------------------------------------

template <class T>
Checkpoint make_checkpoint(CheckpointPhase phase, const RunConfig& rc, const ParamStore<T>& store,
                           const AdamW<T>* opt = nullptr) {
  Checkpoint ck;
  ck.phase = phase;
  ck.config = dump_config(rc);
  ck.tensors = export_store(store);
  if (opt) {
    ck.has_optimizer = true;
    ck.optimizer_step = opt->steps();
    for (const auto& [name, t] : opt->export_state()) ck.optimizer.push_back(to_stored(name, t));
  }
  return ck;
}

template <class T>
void restore_optimizer(const Checkpoint& ck, AdamW<T>& opt) {
  if (!ck.has_optimizer) throw CheckpointError("checkpoint carries no optimizer state");
  std::map<std::string, Tensor<double>> m;
  for (const auto& t : ck.optimizer) m.emplace(t.name, Tensor<double>(t.shape, t.values));
  opt.import_state(ck.optimizer_step, m);
}

}  // namespace ssm
