// SPDX-License-Identifier: Apache-2.0
//
// Gradient-weighted class activation maps over one encoder stage:
// alpha_c = spatial mean of d(logit)/dF_c, map = ReLU(sum_c alpha_c F_c),
// bilinearly resized to the input and min-max scaled to [0, 1].

#pragma once

#include <algorithm>
#include <array>
#include <stdexcept>

#include "ssmamba/backbone.hpp"
#include "ssmamba/image.hpp"

namespace ssm {

/// Stage index 1..4, or 0 for the deepest stage whose map is at least 7x7
/// (stage 4 at 224 px input; stage 1 at 32 px, where deeper maps are 2x2
/// or smaller and locate nothing). Falls back to stage 1.
inline std::size_t resolve_cam_stage(const EncoderConfig& cfg, std::size_t image_size, std::size_t stage) {
  if (stage > 4) throw std::invalid_argument("gradcam: stage must be 0 (auto) or 1..4, got " + std::to_string(stage));
  if (stage != 0) return stage;
  std::size_t side = image_size / cfg.patch;
  std::size_t best = 1;
  for (std::size_t k = 1; k <= 4; ++k) {
    if (side >= 7) best = k;
    side /= 2;
  }
  return best;
}

/// Min-max scaling; a constant map becomes all zeros.
inline Image normalize_minmax(Image im) {
  const auto [lo, hi] = std::minmax_element(im.pixels.begin(), im.pixels.end());
  const float a = *lo, b = *hi;
  for (auto& v : im.pixels) v = b > a ? (v - a) / (b - a) : 0.0f;
  return im;
}

struct GradCam {
  Image heatmap;  // [H, W, 1] in [0, 1]
  std::size_t stage = 4;
  std::size_t class_index = 0;
  std::vector<double> logits;
};

/// `image` is one normalised [1, H, W, 3] tensor.
template <class T>
GradCam grad_cam(const Encoder<T>& enc, const Tensor<T>& image, std::size_t class_index, std::size_t stage = 0) {
  const auto& cfg = enc.config();
  if (image.ndim() != 4 || image.dim(0) != 1) throw ShapeError("gradcam: expected one image [1, H, W, 3]");
  if (class_index >= cfg.num_classes) {
    throw std::out_of_range("gradcam: class " + std::to_string(class_index) + " out of range for " +
                            std::to_string(cfg.num_classes) + " classes");
  }
  GradCam out;
  out.stage = resolve_cam_stage(cfg, image.dim(1), stage);
  out.class_index = class_index;
  Tensor<T> fmap;
  {
    Tape<T> tape;
    TapeGuard<T> guard(tape);
    // A leaf input guarantees the stage maps are recorded even if every
    // parameter were frozen.
    auto x = image.clone();
    x.set_requires_grad(true);
    const auto feats = enc.encode(x, false);
    fmap = feats.maps[out.stage - 1];
    const auto logits = enc.head(feats.maps[3]);
    for (std::size_t k = 0; k < cfg.num_classes; ++k) out.logits.push_back(double(logits[k]));
    std::vector<T> sel(cfg.num_classes, T(0));
    sel[class_index] = T(1);
    tape.backward(sum(mul(logits, Tensor<T>({1, cfg.num_classes}, sel))));
  }
  const std::size_t h = fmap.dim(1), w = fmap.dim(2), C = fmap.dim(3);
  const auto grad = fmap.grad_tensor();
  std::vector<double> alpha(C, 0.0);
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t c = 0; c < C; ++c) alpha[c] += double(grad[i * C + c]);
  for (auto& a : alpha) a /= double(h * w);
  Image cam(h, w, 1);
  for (std::size_t i = 0; i < h * w; ++i) {
    double s = 0;
    for (std::size_t c = 0; c < C; ++c) s += alpha[c] * double(fmap[i * C + c]);
    cam.pixels[i] = float(std::max(0.0, s));
  }
  out.heatmap = normalize_minmax(resize_bilinear(cam, image.dim(1), image.dim(2)));
  return out;
}

/// Blue-to-red ramp.
inline std::array<float, 3> heat_colour(float t) {
  t = std::clamp(t, 0.0f, 1.0f);
  const float r = std::clamp(1.5f - std::abs(4 * t - 3), 0.0f, 1.0f);
  const float g = std::clamp(1.5f - std::abs(4 * t - 2), 0.0f, 1.0f);
  const float b = std::clamp(1.5f - std::abs(4 * t - 1), 0.0f, 1.0f);
  return {r, g, b};
}

/// Half-and-half blend of the image (values in [0, 1]) and the coloured map.
inline Image cam_overlay(const Image& rgb, const Image& heat, float alpha = 0.5f) {
  if (rgb.height != heat.height || rgb.width != heat.width) throw ShapeError("cam_overlay: size mismatch");
  Image out(rgb.height, rgb.width, 3);
  for (std::size_t i = 0; i < rgb.height * rgb.width; ++i) {
    const auto col = heat_colour(heat.pixels[i]);
    for (std::size_t c = 0; c < 3; ++c)
      out.pixels[i * 3 + c] = std::clamp((1 - alpha) * rgb.pixels[i * 3 + c] + alpha * col[c], 0.0f, 1.0f);
  }
  return out;
}

/// Grey image of a [H, W, 1] map.
inline Image grey_to_rgb(const Image& m) {
  Image out(m.height, m.width, 3);
  for (std::size_t i = 0; i < m.height * m.width; ++i)
    for (std::size_t c = 0; c < 3; ++c) out.pixels[i * 3 + c] = m.pixels[i];
  return out;
}

}  // namespace ssm
