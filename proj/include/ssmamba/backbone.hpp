// SPDX-License-Identifier: Apache-2.0
//
// Four-stage hierarchical encoder and the ROI classification head.
//
//   tokens = LN(PatchConv_p(image))                     [B, H/p, W/p, d1]
//   stage k:  x = LPR_k(x)
//             seq = flatten(x)  (raster order)
//             seq = seq + DMS(LN(seq))   repeated depth_k times
//             F_k = unflatten(seq)
//             x = PatchConv_2(F_k)       (k < 4)
//   logits = Linear(GAP(F_4))

#pragma once

#include <array>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ssmamba/dms.hpp"
#include "ssmamba/lpr.hpp"
#include "ssmamba/ops.hpp"
#include "ssmamba/params.hpp"

namespace ssm {

enum class TokenOrder { raster, column };

struct EncoderConfig {
  std::size_t in_channels = 3;
  std::size_t patch = 4;
  std::array<std::size_t, 4> dims{96, 192, 384, 768};
  std::array<std::size_t, 4> depths{2, 2, 18, 6};
  std::size_t state_dim = 16;
  std::size_t kernel = 3;
  std::size_t num_classes = 9;
  TokenOrder order = TokenOrder::raster;
  bool lpr_ghost = false;
  bool zero_init_dms_out = false;
  bool zero_init_head = false;

  /// Smallest spatial extent divisor: patch size times the three 2x downsamplers.
  std::size_t stride() const { return patch * 8; }

  void validate() const {
    if (patch == 0) throw std::invalid_argument("encoder: patch size must be positive");
    for (std::size_t k = 0; k < 4; ++k) {
      if (dims[k] == 0 || dims[k] % 2 != 0) {
        throw std::invalid_argument("encoder: stage dims must be even and positive");
      }
    }
    if (num_classes == 0) throw std::invalid_argument("encoder: num_classes must be positive");
  }

  DMSConfig dms(std::size_t stage) const {
    DMSConfig c;
    c.channels = dims[stage];
    c.state_dim = state_dim;
    c.kernel = kernel;
    c.reg_kernel = kernel;
    c.zero_init_out = zero_init_dms_out;
    return c;
  }

  LPRConfig lpr(std::size_t stage) const {
    LPRConfig c;
    c.channels = dims[stage];
    c.kernel = kernel;
    c.ghost = lpr_ghost;
    return c;
  }
};

namespace presets {

/// 224x224 inputs, dims doubling from 96; depths from tune_full_depths().
inline EncoderConfig full() { return EncoderConfig{}; }

/// 32x32 inputs for laptop-scale experiments.
inline EncoderConfig desk() {
  EncoderConfig c;
  c.dims = {16, 32, 64, 128};
  c.depths = {1, 1, 2, 1};
  c.state_dim = 8;
  c.num_classes = 2;
  return c;
}

/// 16x16 inputs; patch 2 so all four stages stay at least 1x1.
inline EncoderConfig tiny() {
  EncoderConfig c;
  c.patch = 2;
  c.dims = {4, 8, 16, 32};
  c.depths = {1, 1, 1, 1};
  c.state_dim = 4;
  c.num_classes = 3;
  return c;
}

inline EncoderConfig by_name(const std::string& name) {
  if (name == "full") return full();
  if (name == "desk") return desk();
  if (name == "tiny") return tiny();
  throw std::invalid_argument("unknown preset '" + name + "' (expected full, desk or tiny)");
}

}  // namespace presets

template <class T>
struct StageFeatures {
  std::array<Tensor<T>, 4> maps;  // F_1..F_4, [B, h_k, w_k, d_k]
};

template <class T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(Init<T> init, const EncoderConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const std::size_t p = cfg.patch, d1 = cfg.dims[0];
    auto stem = init.scope("stem");
    stem_w_ = stem.uniform("weight", {d1, p, p, cfg.in_channels},
                           1.0 / std::sqrt(double(p * p * cfg.in_channels)));
    stem_b_ = stem.constant("bias", {d1}, T(0));
    stem_norm_ = LayerNorm<T>(stem.scope("norm"), d1);
    for (std::size_t k = 0; k < 4; ++k) {
      auto st = init.scope("stage" + std::to_string(k + 1));
      Stage s;
      s.lpr = LPRBlock<T>(st.scope("lpr"), cfg.lpr(k));
      for (std::size_t b = 0; b < cfg.depths[k]; ++b) {
        auto blk = st.scope("block" + std::to_string(b));
        s.norms.emplace_back(blk.scope("norm"), cfg.dims[k]);
        s.blocks.emplace_back(blk.scope("dms"), cfg.dms(k));
      }
      if (k < 3) {
        auto ds = st.scope("down");
        s.down_w = ds.uniform("weight", {cfg.dims[k + 1], 2, 2, cfg.dims[k]},
                              1.0 / std::sqrt(4.0 * double(cfg.dims[k])));
        s.down_b = ds.constant("bias", {cfg.dims[k + 1]}, T(0));
      }
      stages_.push_back(std::move(s));
    }
    head_ = Linear<T>(init.scope("head"), cfg.dims[3], cfg.num_classes, true, cfg.zero_init_head);
  }

  const EncoderConfig& config() const { return cfg_; }

  void check_image(const Tensor<T>& image) const {
    if (image.ndim() != 4 || image.dim(3) != cfg_.in_channels) {
      throw ShapeError("encoder: expected [B, H, W, " + std::to_string(cfg_.in_channels) +
                       "] image, got " + shape_str(image.shape()));
    }
    const std::size_t s = cfg_.stride();
    if (image.dim(1) % s != 0 || image.dim(2) % s != 0) {
      throw ShapeError("encoder: image " + std::to_string(image.dim(1)) + "x" +
                       std::to_string(image.dim(2)) + " not divisible by " + std::to_string(s) +
                       " (patch size x 8)");
    }
  }

  /// image [B, H, W, 3] -> tokens [B, H/p, W/p, d1]
  Tensor<T> patch_embed(const Tensor<T>& image) const {
    if (image.ndim() == 4 && (image.dim(1) % cfg_.patch != 0 || image.dim(2) % cfg_.patch != 0)) {
      throw ShapeError("patch_embed: image " + shape_str(image.shape()) + " not divisible by patch " +
                       std::to_string(cfg_.patch));
    }
    return stem_norm_(patch_conv2d(image, stem_w_, stem_b_));
  }

  /// Runs the four stages on an already-embedded token map.
  StageFeatures<T> encode_tokens(const Tensor<T>& tokens, bool training) const {
    StageFeatures<T> out;
    Tensor<T> x = tokens;
    for (std::size_t k = 0; k < 4; ++k) {
      const auto& s = stages_[k];
      x = s.lpr(x, training);
      auto seq = to_sequence(x);
      for (std::size_t b = 0; b < s.blocks.size(); ++b) {
        seq = add(seq, s.blocks[b](s.norms[b](seq)));
      }
      x = from_sequence(seq, x.shape());
      out.maps[k] = x;
      if (k < 3) x = patch_conv2d(x, s.down_w, s.down_b);
    }
    return out;
  }

  StageFeatures<T> encode(const Tensor<T>& image, bool training) const {
    check_image(image);
    return encode_tokens(patch_embed(image), training);
  }

  Tensor<T> head(const Tensor<T>& f4) const { return head_(global_avg_pool(f4)); }

  /// [B, H, W, 3] -> [B, num_classes] logits (no softmax).
  Tensor<T> classify(const Tensor<T>& image, bool training) const {
    return head(encode(image, training).maps[3]);
  }

  const Linear<T>& head_layer() const { return head_; }
  const LPRBlock<T>& lpr(std::size_t stage) const { return stages_.at(stage).lpr; }
  const DMSBlock<T>& dms(std::size_t stage, std::size_t block) const {
    return stages_.at(stage).blocks.at(block);
  }

  /// [B, h, w, C] -> [B, h*w, C] in the configured token order.
  Tensor<T> to_sequence(const Tensor<T>& x) const {
    const std::size_t B = x.dim(0), h = x.dim(1), w = x.dim(2), C = x.dim(3);
    if (cfg_.order == TokenOrder::raster) return reshape(x, {B, h * w, C});
    return reshape(permute(x, {0, 2, 1, 3}), {B, h * w, C});
  }

  Tensor<T> from_sequence(const Tensor<T>& seq, const Shape& map_shape) const {
    if (cfg_.order == TokenOrder::raster) return reshape(seq, map_shape);
    const Shape transposed{map_shape[0], map_shape[2], map_shape[1], map_shape[3]};
    return permute(reshape(seq, transposed), {0, 2, 1, 3});
  }

 private:
  struct Stage {
    LPRBlock<T> lpr;
    std::vector<LayerNorm<T>> norms;
    std::vector<DMSBlock<T>> blocks;
    Tensor<T> down_w, down_b;
  };

  EncoderConfig cfg_;
  Tensor<T> stem_w_, stem_b_;
  LayerNorm<T> stem_norm_;
  std::vector<Stage> stages_;
  Linear<T> head_;
};

/// Closed-form parameter counts per component, in build order.
inline std::vector<std::pair<std::string, std::size_t>> param_breakdown(const EncoderConfig& cfg) {
  cfg.validate();
  std::vector<std::pair<std::string, std::size_t>> parts;
  const std::size_t p = cfg.patch, d1 = cfg.dims[0];
  parts.emplace_back("stem", p * p * cfg.in_channels * d1 + d1 + LayerNorm<float>::count(d1));
  for (std::size_t k = 0; k < 4; ++k) {
    const std::string st = "stage" + std::to_string(k + 1);
    parts.emplace_back(st + ".lpr", param_count_lpr(cfg.lpr(k)));
    parts.emplace_back(st + ".dms", cfg.depths[k] * (param_count_dms(cfg.dms(k)) +
                                                     LayerNorm<float>::count(cfg.dims[k])));
    if (k < 3) parts.emplace_back(st + ".down", 4 * cfg.dims[k] * cfg.dims[k + 1] + cfg.dims[k + 1]);
  }
  parts.emplace_back("head", Linear<float>::count(cfg.dims[3], cfg.num_classes, true));
  return parts;
}

inline std::size_t param_count_total(const EncoderConfig& cfg) {
  std::size_t n = 0;
  for (const auto& [name, count] : param_breakdown(cfg)) n += count;
  return n;
}

inline constexpr std::size_t kTargetParams = 25'300'000;
inline constexpr std::size_t kTargetTolerance = 1'000'000;

/// Depth search for the full preset: starting from {2, 2, 6, 2}, grow
/// stages 3 and 4 by 3 and 1 blocks per round until the total lands within
/// kTargetTolerance of kTargetParams.
inline std::array<std::size_t, 4> tune_full_depths() {
  EncoderConfig cfg = presets::full();
  cfg.depths = {2, 2, 6, 2};
  for (int round = 0; round < 64; ++round) {
    const std::size_t total = param_count_total(cfg);
    if (total + kTargetTolerance >= kTargetParams) {
      if (total > kTargetParams + kTargetTolerance) break;
      return cfg.depths;
    }
    cfg.depths[2] += 3;
    cfg.depths[3] += 1;
  }
  throw std::runtime_error("tune_full_depths: no depth setting lands in the target band");
}

}  // namespace ssm
