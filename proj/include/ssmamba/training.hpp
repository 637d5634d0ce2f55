// SPDX-License-Identifier: Apache-2.0
//
// Optimisation pieces: AdamW with decoupled decay, warmup + cosine schedule,
// gradient clipping, Mixup, RandomResizedCrop and the two supervised losses.

#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssmamba/image.hpp"
#include "ssmamba/ops.hpp"
#include "ssmamba/params.hpp"
#include "ssmamba/random.hpp"

namespace ssm {

enum class Phase { pretrain, finetune };

inline const char* phase_name(Phase p) { return p == Phase::pretrain ? "pretrain" : "finetune"; }

inline Phase parse_phase(const std::string& s) {
  if (s == "pretrain") return Phase::pretrain;
  if (s == "finetune") return Phase::finetune;
  throw std::invalid_argument("unknown phase '" + s + "' (pretrain | finetune)");
}

struct TrainConfig {
  Phase phase = Phase::finetune;
  double base_lr = 1e-3;
  double min_lr = 0.0;  // 0 selects base_lr / 100
  double weight_decay = 0.05;
  std::size_t batch_size = 8;
  std::size_t epochs = 100;
  std::size_t warmup_epochs = 10;
  double mixup_alpha = 0.2;  // 0 disables mixup
  double clip_norm = 5.0;    // 0 disables clipping
  bool random_crop = true;   // RandomResizedCrop on training images
  double crop_min_scale = 0.2;
  std::uint64_t seed = 0;

  static TrainConfig for_phase(Phase p) {
    TrainConfig c;
    c.phase = p;
    if (p == Phase::pretrain) {
      c.base_lr = 5e-5;
      c.batch_size = 64;
      c.mixup_alpha = 0.0;
    }
    return c;
  }

  double resolved_min_lr() const { return min_lr > 0 ? min_lr : base_lr / 100.0; }

  void validate() const {
    if (!(base_lr > 0)) throw std::invalid_argument("train config: base_lr must be positive");
    if (min_lr < 0 || resolved_min_lr() > base_lr) {
      throw std::invalid_argument("train config: min_lr must lie in (0, base_lr]");
    }
    if (weight_decay < 0) throw std::invalid_argument("train config: weight_decay must be >= 0");
    if (batch_size == 0) throw std::invalid_argument("train config: batch_size must be positive");
    if (epochs == 0) throw std::invalid_argument("train config: epochs must be positive");
    if (warmup_epochs >= epochs) {
      throw std::invalid_argument("train config: warmup_epochs (" + std::to_string(warmup_epochs) +
                                  ") must be below epochs (" + std::to_string(epochs) + ")");
    }
    if (mixup_alpha < 0) throw std::invalid_argument("train config: mixup_alpha must be >= 0");
    if (clip_norm < 0) throw std::invalid_argument("train config: clip_norm must be >= 0");
    if (!(crop_min_scale > 0 && crop_min_scale <= 1)) {
      throw std::invalid_argument("train config: crop_min_scale must lie in (0, 1]");
    }
  }
};

// --- learning-rate schedule -------------------------------------------------

struct Schedule {
  double base_lr = 1e-3;
  double min_lr = 1e-5;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;

  static Schedule from(const TrainConfig& c, std::size_t steps_per_epoch) {
    return {c.base_lr, c.resolved_min_lr(), c.warmup_epochs * steps_per_epoch, c.epochs * steps_per_epoch};
  }
};

/// Linear ramp from 0 at step 0 to base_lr at warmup_steps, then half-cosine
/// down to min_lr at total_steps; held at min_lr afterwards.
inline double lr_at(std::size_t step, const Schedule& s) {
  if (step < s.warmup_steps) return s.base_lr * double(step) / double(s.warmup_steps);
  if (step >= s.total_steps || s.total_steps <= s.warmup_steps) return s.min_lr;
  const double t = double(step - s.warmup_steps) / double(s.total_steps - s.warmup_steps);
  return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

// --- AdamW ------------------------------------------------------------------

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

template <class T>
class AdamW {
 public:
  struct Slot {
    std::string name;
    Tensor<T> param;
    bool decay;
    std::vector<double> m, v;
  };

  /// Optimises every trainable entry of `store` whose name starts with one
  /// of `prefixes` (all when empty).
  AdamW(const ParamStore<T>& store, AdamWConfig cfg, std::vector<std::string> prefixes = {})
      : cfg_(cfg) {
    for (const auto& e : store.entries()) {
      if (e.kind == ParamKind::buffer) continue;
      bool take = prefixes.empty();
      for (const auto& p : prefixes) take |= e.name.rfind(p, 0) == 0;
      if (!take) continue;
      slots_.push_back({e.name, e.tensor, e.kind == ParamKind::weight,
                        std::vector<double>(e.tensor.numel(), 0.0), std::vector<double>(e.tensor.numel(), 0.0)});
    }
  }

  /// One update. A parameter the backward pass never reached counts as a
  /// zero gradient (moments still decay, weight decay still applies).
  void step(double lr) {
    for (const auto& s : slots_) {
      if (!s.param.has_grad()) continue;
      for (T g : s.param.grad()) {
        if (!std::isfinite(static_cast<double>(g))) {
          throw std::runtime_error("adamw: non-finite gradient in '" + s.name + "' at step " +
                                   std::to_string(step_ + 1));
        }
      }
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
    for (auto& s : slots_) {
      auto p = s.param.mutable_data();
      const bool has = s.param.has_grad();
      const auto g = s.param.grad();
      const double wd = s.decay ? cfg_.weight_decay : 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = has ? static_cast<double>(g[i]) : 0.0;
        double pi = static_cast<double>(p[i]);
        pi -= lr * wd * pi;
        s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * gi;
        s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mhat = s.m[i] / bc1, vhat = s.v[i] / bc2;
        pi -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        p[i] = static_cast<T>(pi);
      }
    }
  }

  std::size_t steps() const { return step_; }
  const std::vector<Slot>& slots() const { return slots_; }
  const AdamWConfig& config() const { return cfg_; }

  /// Moments as named tensors ("m.<param>", "v.<param>") for checkpoints.
  std::vector<std::pair<std::string, Tensor<double>>> export_state() const {
    std::vector<std::pair<std::string, Tensor<double>>> out;
    for (const auto& s : slots_) {
      out.emplace_back("m." + s.name, Tensor<double>(s.param.shape(), s.m));
      out.emplace_back("v." + s.name, Tensor<double>(s.param.shape(), s.v));
    }
    return out;
  }

  void import_state(std::size_t step, const std::map<std::string, Tensor<double>>& moments) {
    for (auto& s : slots_) {
      for (auto* which : {&s.m, &s.v}) {
        const std::string key = (which == &s.m ? "m." : "v.") + s.name;
        auto it = moments.find(key);
        if (it == moments.end()) throw std::runtime_error("optimizer state lacks " + key);
        if (it->second.numel() != which->size()) throw ShapeError("optimizer state " + key + " has wrong size");
        *which = it->second.values();
      }
    }
    step_ = step;
  }

 private:
  AdamWConfig cfg_;
  std::vector<Slot> slots_;
  std::size_t step_ = 0;
};

/// Scales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <class T>
double clip_grad_norm(const ParamStore<T>& store, double max_norm) {
  double sq = 0;
  for (const auto& e : store.entries())
    if (e.tensor.has_grad())
      for (T g : e.tensor.grad()) sq += double(g) * double(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double f = max_norm / (norm + 1e-12);
    for (const auto& e : store.entries()) {
      if (!e.tensor.has_grad()) continue;
      T* g = detail::grad_ptr(e.tensor);
      for (std::size_t i = 0; i < e.tensor.numel(); ++i) g[i] = static_cast<T>(g[i] * f);
    }
  }
  return norm;
}

// --- Mixup ------------------------------------------------------------------

template <class T>
struct MixupBatch {
  Tensor<T> x;                 // mixed inputs
  Tensor<T> y;                 // mixed soft labels [B, K]
  std::vector<double> lambda;  // per-item weight on the item's own sample
  std::vector<std::size_t> perm;
};

template <class T>
Tensor<T> one_hot(const std::vector<std::size_t>& labels, std::size_t K) {
  if (labels.empty()) throw std::invalid_argument("one_hot: empty label list");
  std::vector<T> v(labels.size() * K, T(0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= K) throw std::out_of_range("one_hot: label " + std::to_string(labels[i]) + " >= " + std::to_string(K));
    v[i * K + labels[i]] = T(1);
  }
  return Tensor<T>({labels.size(), K}, std::move(v));
}

/// x' = lam x_i + (1 - lam) x_perm(i), labels mixed with the same lam.
template <class T>
MixupBatch<T> mixup_with(const Tensor<T>& x, const Tensor<T>& y, double lam, std::vector<std::size_t> perm) {
  const std::size_t B = x.dim(0);
  if (y.ndim() != 2 || y.dim(0) != B) detail::shape_fail("mixup", "labels " + shape_str(y.shape()) + " vs batch " + std::to_string(B));
  if (perm.size() != B) detail::shape_fail("mixup", "permutation length");
  const std::size_t per = x.numel() / B, K = y.dim(1);
  std::vector<T> xv(x.numel()), yv(y.numel());
  for (std::size_t i = 0; i < B; ++i) {
    const std::size_t j = perm[i];
    for (std::size_t e = 0; e < per; ++e)
      xv[i * per + e] = static_cast<T>(lam * x[i * per + e] + (1 - lam) * x[j * per + e]);
    for (std::size_t k = 0; k < K; ++k) yv[i * K + k] = static_cast<T>(lam * y[i * K + k] + (1 - lam) * y[j * K + k]);
  }
  return {Tensor<T>(x.shape(), std::move(xv)), Tensor<T>(y.shape(), std::move(yv)), std::vector<double>(B, lam),
          std::move(perm)};
}

/// lam ~ Beta(alpha, alpha), one draw per batch; pairs via a random permutation.
template <class T>
MixupBatch<T> mixup(const Tensor<T>& x, const Tensor<T>& y, double alpha, Rng& rng) {
  if (!(alpha > 0)) throw std::invalid_argument("mixup: alpha must be positive, got " + std::to_string(alpha));
  const double lam = rng.beta(alpha, alpha);
  return mixup_with(x, y, lam, rng.permutation(x.dim(0)));
}

// --- RandomResizedCrop ------------------------------------------------------

struct CropBox {
  std::size_t top = 0, left = 0, height = 0, width = 0;
};

/// Area fraction from `scale`, log-uniform aspect from `ratio`; ten tries,
/// then a centre crop clamped to the ratio range.
inline CropBox sample_crop_box(std::size_t H, std::size_t W, Rng& rng, std::pair<double, double> scale = {0.2, 1.0},
                               std::pair<double, double> ratio = {3.0 / 4.0, 4.0 / 3.0}) {
  const double area = double(H) * double(W);
  const double lr0 = std::log(ratio.first), lr1 = std::log(ratio.second);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(scale.first, scale.second);
    const double aspect = std::exp(rng.uniform(lr0, lr1));
    const auto w = static_cast<long long>(std::llround(std::sqrt(target * aspect)));
    const auto h = static_cast<long long>(std::llround(std::sqrt(target / aspect)));
    if (w > 0 && h > 0 && std::size_t(w) <= W && std::size_t(h) <= H) {
      const std::size_t top = rng.below(H - std::size_t(h) + 1);
      const std::size_t left = rng.below(W - std::size_t(w) + 1);
      return {top, left, std::size_t(h), std::size_t(w)};
    }
  }
  const double in_ratio = double(W) / double(H);
  std::size_t w = W, h = H;
  if (in_ratio < ratio.first) {
    h = std::max<std::size_t>(1, std::size_t(std::llround(double(W) / ratio.first)));
  } else if (in_ratio > ratio.second) {
    w = std::max<std::size_t>(1, std::size_t(std::llround(double(H) * ratio.second)));
  }
  h = std::min(h, H);
  w = std::min(w, W);
  return {(H - h) / 2, (W - w) / 2, h, w};
}

inline Image random_resized_crop(const Image& img, Rng& rng, std::size_t out = 224,
                                 std::pair<double, double> scale = {0.2, 1.0},
                                 std::pair<double, double> ratio = {3.0 / 4.0, 4.0 / 3.0}) {
  if (img.height == 0 || img.width == 0) throw ImageError("random_resized_crop: empty image");
  const auto box = sample_crop_box(img.height, img.width, rng, scale, ratio);
  return resize_bilinear(crop(img, box.top, box.left, box.height, box.width), out, out);
}

// --- losses -----------------------------------------------------------------

namespace detail {

inline std::vector<double> row_weights(const std::vector<double>& w, std::size_t B, const char* op) {
  if (w.empty()) return std::vector<double>(B, 1.0);
  if (w.size() != B) shape_fail(op, "row weights length " + std::to_string(w.size()) + " vs " + std::to_string(B));
  return w;
}

}  // namespace detail

/// Weighted mean over rows of -sum_k t_k log softmax(z)_k. Targets may be
/// soft. Rows with weight 0 (missing labels) drop out; if every weight is
/// zero the loss is 0 with zero gradient.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const Tensor<T>& targets, const std::vector<double>& weights = {}) {
  detail::require_ndim("cross_entropy", logits.shape(), 2, "logits");
  if (targets.shape() != logits.shape()) {
    detail::shape_fail("cross_entropy", "targets " + shape_str(targets.shape()) + " vs logits " + shape_str(logits.shape()));
  }
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  const auto w = detail::row_weights(weights, B, "cross_entropy");
  double wsum = 0;
  for (double v : w) wsum += v;
  std::vector<double> probs(B * K);
  double loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    double mx = -INFINITY;
    for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, double(logits[b * K + k]));
    double z = 0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(double(logits[b * K + k]) - mx);
    const double lse = mx + std::log(z);
    double row = 0;
    for (std::size_t k = 0; k < K; ++k) {
      const double lp = double(logits[b * K + k]) - lse;
      probs[b * K + k] = std::exp(lp);
      row -= double(targets[b * K + k]) * lp;
    }
    if (w[b] != 0) loss += w[b] * row;
  }
  Tensor<T> y = Tensor<T>::scalar(static_cast<T>(wsum > 0 ? loss / wsum : 0.0));
  if (wsum > 0 && detail::recording<T>({&logits})) {
    detail::record("cross_entropy", y, [logits, targets, y, w, wsum, probs = std::move(probs), B, K] {
      const double g = double(detail::out_grad(y)[0]);
      T* gx = detail::grad_ptr(logits);
      for (std::size_t b = 0; b < B; ++b) {
        if (w[b] == 0) continue;
        double tsum = 0;
        for (std::size_t k = 0; k < K; ++k) tsum += double(targets[b * K + k]);
        const double f = g * w[b] / wsum;
        for (std::size_t k = 0; k < K; ++k)
          gx[b * K + k] += static_cast<T>(f * (probs[b * K + k] * tsum - double(targets[b * K + k])));
      }
    });
  }
  return y;
}

/// Weighted mean absolute error; pred and target [B, J], mean over J within a row.
template <class T>
Tensor<T> mae(const Tensor<T>& pred, const Tensor<T>& target, const std::vector<double>& weights = {}) {
  if (pred.shape() != target.shape()) {
    detail::shape_fail("mae", "pred " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  }
  const std::size_t B = pred.dim(0), J = pred.numel() / B;
  const auto w = detail::row_weights(weights, B, "mae");
  double wsum = 0, loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    wsum += w[b];
    if (w[b] == 0) continue;
    double row = 0;
    for (std::size_t j = 0; j < J; ++j) row += std::abs(double(pred[b * J + j]) - double(target[b * J + j]));
    loss += w[b] * row / double(J);
  }
  Tensor<T> y = Tensor<T>::scalar(static_cast<T>(wsum > 0 ? loss / wsum : 0.0));
  if (wsum > 0 && detail::recording<T>({&pred})) {
    detail::record("mae", y, [pred, target, y, w, wsum, B, J] {
      const double g = double(detail::out_grad(y)[0]);
      T* gp = detail::grad_ptr(pred);
      for (std::size_t b = 0; b < B; ++b) {
        const double f = g * w[b] / (wsum * double(J));
        for (std::size_t j = 0; j < J; ++j) {
          const double d = double(pred[b * J + j]) - double(target[b * J + j]);
          gp[b * J + j] += static_cast<T>(f * double((d > 0) - (d < 0)));
        }
      }
    });
  }
  return y;
}

/// Row-wise argmax.
template <class T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& logits) {
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  std::vector<std::size_t> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (logits[b * K + k] > logits[b * K + best]) best = k;
    out[b] = best;
  }
  return out;
}

/// Row-wise softmax (values only).
template <class T>
std::vector<double> softmax_rows(const Tensor<T>& logits) {
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  std::vector<double> p(B * K);
  for (std::size_t b = 0; b < B; ++b) {
    double mx = -INFINITY, z = 0;
    for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, double(logits[b * K + k]));
    for (std::size_t k = 0; k < K; ++k) z += p[b * K + k] = std::exp(double(logits[b * K + k]) - mx);
    for (std::size_t k = 0; k < K; ++k) p[b * K + k] /= z;
  }
  return p;
}

}  // namespace ssm
