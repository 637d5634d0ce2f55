// SPDX-License-Identifier: Apache-2.0
//
// Masked image modelling pretraining. A random subset of stem tokens is
// replaced by a learnable mask token, the full-length grid goes through the
// encoder, and a light decoder regresses the raw (normalised) pixels of each
// patch. Only masked patches contribute to the loss.
//
//   tokens  = PatchEmbed(x)                   [B, h1, w1, d1]
//   tokens' = apply_mask(tokens, M, m)
//   F4      = Encoder(tokens')                [B, h4, w4, d4]
//   z       = PW(Up_8(Linear_{d4->D}(F4))) + pos(h1, w1)
//   z       = z + DMS(LN(z))                  repeated depth times
//   pred    = Linear_{D->p*p*3}(LN(z))        [B, h1, w1, p*p*3]

#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssmamba/backbone.hpp"
#include "ssmamba/ops.hpp"
#include "ssmamba/params.hpp"
#include "ssmamba/random.hpp"

namespace ssm {

struct MaskSpec {
  double ratio = 0.75;
  std::uint64_t seed = 0;
  std::size_t grid_h = 0, grid_w = 0;
  std::vector<std::size_t> masked;  // sorted raster indices into the grid

  std::size_t tokens() const { return grid_h * grid_w; }
  std::size_t count() const { return masked.size(); }
  bool contains(std::size_t i) const { return std::binary_search(masked.begin(), masked.end(), i); }
};

inline std::size_t mask_count(std::size_t tokens, double ratio) {
  return static_cast<std::size_t>(std::llround(ratio * static_cast<double>(tokens)));
}

/// Uniform sample of round(ratio * h * w) grid cells without replacement.
inline MaskSpec make_mask(std::size_t grid_h, std::size_t grid_w, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio < 1.0)) {
    throw std::invalid_argument("make_mask: ratio must lie in [0, 1), got " + std::to_string(ratio));
  }
  if (grid_h == 0 || grid_w == 0) throw std::invalid_argument("make_mask: empty grid");
  MaskSpec m;
  m.ratio = ratio;
  m.seed = seed;
  m.grid_h = grid_h;
  m.grid_w = grid_w;
  Rng rng(seed);
  m.masked = rng.sample_without_replacement(m.tokens(), mask_count(m.tokens(), ratio));
  std::sort(m.masked.begin(), m.masked.end());
  return m;
}

/// One independent mask per batch item, item i drawing from stream (seed, i).
inline std::vector<MaskSpec> make_batch_masks(std::size_t batch, std::size_t grid_h, std::size_t grid_w,
                                              double ratio, std::uint64_t seed) {
  std::vector<MaskSpec> out;
  for (std::size_t b = 0; b < batch; ++b) {
    out.push_back(make_mask(grid_h, grid_w, ratio, Rng::stream(seed, b).next_u64()));
  }
  return out;
}

/// tokens [B, h, w, C]; masks has one entry per batch item (or one shared
/// entry); mask_token [C]. Masked cells take the mask token's value and
/// route their gradient to it.
template <class T>
Tensor<T> apply_mask(const Tensor<T>& tokens, const std::vector<MaskSpec>& masks,
                     const Tensor<T>& mask_token) {
  detail::require_ndim("apply_mask", tokens.shape(), 4, "tokens");
  const std::size_t B = tokens.dim(0), h = tokens.dim(1), w = tokens.dim(2), C = tokens.dim(3);
  if (mask_token.numel() != C) {
    detail::shape_fail("apply_mask", "mask token " + shape_str(mask_token.shape()) + " vs " +
                                         std::to_string(C) + " channels");
  }
  if (masks.size() != B && masks.size() != 1) {
    detail::shape_fail("apply_mask", std::to_string(masks.size()) + " masks for batch " + std::to_string(B));
  }
  std::vector<unsigned char> sel(B * h * w, 0);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& m = masks[masks.size() == 1 ? 0 : b];
    for (std::size_t i : m.masked) {
      if (i >= h * w) {
        throw std::out_of_range("apply_mask: index " + std::to_string(i) + " outside " +
                                std::to_string(h) + "x" + std::to_string(w) + " grid");
      }
      sel[b * h * w + i] = 1;
    }
  }
  std::vector<T> out(tokens.values());
  for (std::size_t r = 0; r < sel.size(); ++r)
    if (sel[r]) std::copy(mask_token.data().begin(), mask_token.data().end(), out.begin() + r * C);
  Tensor<T> y(tokens.shape(), std::move(out));
  if (detail::recording<T>({&tokens, &mask_token})) {
    detail::record("apply_mask", y, [=, sel = std::move(sel)] {
      const T* g = detail::out_grad(y);
      T* gt = tokens.requires_grad() ? detail::grad_ptr(tokens) : nullptr;
      T* gm = mask_token.requires_grad() ? detail::grad_ptr(mask_token) : nullptr;
      for (std::size_t r = 0; r < sel.size(); ++r)
        for (std::size_t c = 0; c < C; ++c) {
          if (sel[r]) {
            if (gm) gm[c] += g[r * C + c];
          } else if (gt) {
            gt[r * C + c] += g[r * C + c];
          }
        }
    });
  }
  return y;
}

/// [B, H, W, 3] -> [B, H/p, W/p, p*p*3], pixel order (dy, dx, channel).
template <class T>
Tensor<T> patchify(const Tensor<T>& images, std::size_t p) {
  detail::require_ndim("patchify", images.shape(), 4, "images");
  const std::size_t B = images.dim(0), H = images.dim(1), W = images.dim(2), C = images.dim(3);
  if (H % p || W % p) detail::shape_fail("patchify", shape_str(images.shape()) + " not divisible by " + std::to_string(p));
  const std::size_t h = H / p, w = W / p;
  std::vector<T> out(images.numel());
  std::size_t o = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            for (std::size_t c = 0; c < C; ++c)
              out[o++] = images[((b * H + i * p + dy) * W + j * p + dx) * C + c];
  return Tensor<T>({B, h, w, p * p * C}, std::move(out));
}

/// Inverse of patchify (values only).
template <class T>
Tensor<T> unpatchify(const Tensor<T>& patches, std::size_t p, std::size_t channels = 3) {
  const std::size_t B = patches.dim(0), h = patches.dim(1), w = patches.dim(2);
  const std::size_t H = h * p, W = w * p, C = channels;
  if (patches.dim(3) != p * p * C) detail::shape_fail("unpatchify", "patch width mismatch " + shape_str(patches.shape()));
  std::vector<T> out(patches.numel());
  std::size_t o = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            for (std::size_t c = 0; c < C; ++c) out[((b * H + i * p + dy) * W + j * p + dx) * C + c] = patches[o++];
  return Tensor<T>({B, H, W, C}, std::move(out));
}

/// Mean squared error over the masked patches only, averaged over masked
/// patch count and pixel values. pred, target: [B, h, w, P].
template <class T>
Tensor<T> mamim_loss(const Tensor<T>& pred, const Tensor<T>& target, const std::vector<MaskSpec>& masks) {
  if (pred.shape() != target.shape()) {
    detail::shape_fail("mamim_loss", "pred " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  }
  detail::require_ndim("mamim_loss", pred.shape(), 4, "pred");
  const std::size_t B = pred.dim(0), cells = pred.dim(1) * pred.dim(2), P = pred.dim(3);
  if (masks.size() != B && masks.size() != 1) detail::shape_fail("mamim_loss", "mask count does not match batch");
  std::vector<T> weight(B * cells, T(0));
  std::size_t n = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const auto& m = masks[masks.size() == 1 ? 0 : b];
    for (std::size_t i : m.masked) {
      if (i >= cells) throw std::out_of_range("mamim_loss: mask index outside grid");
      weight[b * cells + i] = T(1);
      ++n;
    }
  }
  if (n == 0) throw std::invalid_argument("mamim_loss: no masked patches, loss undefined");
  auto w = Tensor<T>({B, pred.dim(1), pred.dim(2), 1}, std::move(weight));
  return scale(sum(mul(square(sub(pred, target)), w)), T(1) / static_cast<T>(n * P));
}

struct DecoderConfig {
  std::size_t dim = 128;
  std::size_t depth = 2;
  std::size_t state_dim = 16;
  std::size_t kernel = 3;
  bool zero_init_head = false;
};

/// Fixed 2-D sine-cosine position code, [1, h, w, dim]; half the channels
/// encode the row, half the column.
template <class T>
Tensor<T> sincos_position(std::size_t h, std::size_t w, std::size_t dim) {
  if (dim % 4 != 0) throw std::invalid_argument("sincos_position: dim must be a multiple of 4");
  const std::size_t q = dim / 4;
  std::vector<T> v(h * w * dim);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      T* row = v.data() + (i * w + j) * dim;
      for (std::size_t k = 0; k < q; ++k) {
        const double freq = 1.0 / std::pow(10000.0, double(k) / double(q));
        row[k] = static_cast<T>(std::sin(i * freq));
        row[q + k] = static_cast<T>(std::cos(i * freq));
        row[2 * q + k] = static_cast<T>(std::sin(j * freq));
        row[3 * q + k] = static_cast<T>(std::cos(j * freq));
      }
    }
  return Tensor<T>({1, h, w, dim}, std::move(v));
}

template <class T>
class Decoder {
 public:
  Decoder() = default;
  Decoder(Init<T> init, const EncoderConfig& enc, const DecoderConfig& cfg)
      : cfg_(cfg), patch_(enc.patch) {
    const std::size_t D = cfg.dim;
    proj_ = Linear<T>(init.scope("proj"), enc.dims[3], D);
    pw_ = Linear<T>(init.scope("pw"), D, D);
    for (std::size_t b = 0; b < cfg.depth; ++b) {
      auto blk = init.scope("block" + std::to_string(b));
      norms_.emplace_back(blk.scope("norm"), D);
      DMSConfig dc;
      dc.channels = D;
      dc.state_dim = cfg.state_dim;
      dc.kernel = cfg.kernel;
      dc.reg_kernel = cfg.kernel;
      blocks_.emplace_back(blk.scope("dms"), dc);
    }
    norm_ = LayerNorm<T>(init.scope("norm"), D);
    head_ = Linear<T>(init.scope("head"), D, enc.patch * enc.patch * enc.in_channels, true,
                      cfg.zero_init_head);
  }

  /// F4 [B, h4, w4, d4] -> per-patch pixels [B, 8*h4, 8*w4, p*p*3].
  Tensor<T> operator()(const Tensor<T>& f4) const {
    auto z = pw_(upsample_nearest(proj_(f4), 8));
    const std::size_t B = z.dim(0), h = z.dim(1), w = z.dim(2), D = z.dim(3);
    z = add(z, broadcast_batch(sincos_position<T>(h, w, D), B));
    auto seq = reshape(z, {B, h * w, D});
    for (std::size_t b = 0; b < blocks_.size(); ++b) seq = add(seq, blocks_[b](norms_[b](seq)));
    return reshape(head_(norm_(seq)), {B, h, w, head_.weight.dim(0)});
  }

  const DecoderConfig& config() const { return cfg_; }
  const Linear<T>& head() const { return head_; }

 private:
  static Tensor<T> broadcast_batch(const Tensor<T>& x, std::size_t B) {
    if (B == 1) return x;
    std::vector<T> v;
    v.reserve(x.numel() * B);
    for (std::size_t b = 0; b < B; ++b) v.insert(v.end(), x.values().begin(), x.values().end());
    Shape s = x.shape();
    s[0] = B;
    return Tensor<T>(std::move(s), std::move(v));
  }

  DecoderConfig cfg_;
  std::size_t patch_ = 4;
  Linear<T> proj_, pw_;
  std::vector<LayerNorm<T>> norms_;
  std::vector<DMSBlock<T>> blocks_;
  LayerNorm<T> norm_;
  Linear<T> head_;
};

/// Encoder + mask token + decoder, registered as "encoder.*",
/// "mask_token" and "decoder.*".
template <class T>
class MaskedModel {
 public:
  MaskedModel(Init<T> init, const EncoderConfig& enc, const DecoderConfig& dec)
      : encoder_(init.scope("encoder"), enc), decoder_(init.scope("decoder"), enc, dec) {
    mask_token_ = init.normal("mask_token", {enc.dims[0]}, 0.02, ParamKind::no_decay);
  }

  struct Output {
    Tensor<T> pred;    // [B, h1, w1, p*p*3]
    Tensor<T> target;  // patchified images
    Tensor<T> loss;
  };

  Tensor<T> reconstruct(const Tensor<T>& images, const std::vector<MaskSpec>& masks, bool training) const {
    encoder_.check_image(images);
    auto tokens = apply_mask(encoder_.patch_embed(images), masks, mask_token_);
    return decoder_(encoder_.encode_tokens(tokens, training).maps[3]);
  }

  Output forward(const Tensor<T>& images, const std::vector<MaskSpec>& masks, bool training) const {
    Output o;
    o.pred = reconstruct(images, masks, training);
    o.target = patchify(images, encoder_.config().patch);
    o.loss = mamim_loss(o.pred, o.target, masks);
    return o;
  }

  /// Token grid the masks must be drawn over for a given image size.
  std::pair<std::size_t, std::size_t> grid(std::size_t H, std::size_t W) const {
    return {H / encoder_.config().patch, W / encoder_.config().patch};
  }

  const Encoder<T>& encoder() const { return encoder_; }
  const Decoder<T>& decoder() const { return decoder_; }
  const Tensor<T>& mask_token() const { return mask_token_; }

 private:
  Encoder<T> encoder_;
  Decoder<T> decoder_;
  Tensor<T> mask_token_;
};

}  // namespace ssm
