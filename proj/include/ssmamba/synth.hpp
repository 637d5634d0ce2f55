// SPDX-License-Identifier: Apache-2.0
//
// Procedural images for desk-scale runs: oriented gratings in random
// colours for self-supervised pretraining, and a two-class blobs-vs-stripes
// set in a fixed stain-like palette.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "ssmamba/image.hpp"
#include "ssmamba/random.hpp"

namespace ssm::synth {

inline std::array<float, 3> random_colour(Rng& rng) {
  return {float(rng.uniform(0.05, 0.95)), float(rng.uniform(0.05, 0.95)), float(rng.uniform(0.05, 0.95))};
}

// Two-tone stain-like palette for the labelled set: a pale pink ground and a
// dark purple foreground, each jittered per image, so the two classes differ
// in shape rather than in colour.
inline constexpr std::array<float, 3> kLightTone{0.92f, 0.78f, 0.85f};
inline constexpr std::array<float, 3> kDarkTone{0.40f, 0.24f, 0.56f};

inline std::array<float, 3> jittered(const std::array<float, 3>& base, Rng& rng, double amount = 0.08) {
  std::array<float, 3> c{};
  for (std::size_t k = 0; k < 3; ++k) c[k] = float(std::clamp(base[k] + rng.uniform(-amount, amount), 0.0, 1.0));
  return c;
}

/// Sinusoidal grating between two colours: random orientation, frequency
/// (1.5 to 4 cycles across the image) and phase.
inline Image texture(std::size_t size, Rng& rng) {
  const double theta = rng.uniform(0, std::numbers::pi);
  const double freq = rng.uniform(1.5, 4.0) / double(size);
  const double phase = rng.uniform(0, 2 * std::numbers::pi);
  const auto a = random_colour(rng), b = random_colour(rng);
  Image im(size, size, 3);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double u = x * std::cos(theta) + y * std::sin(theta);
      const float t = float(0.5 + 0.5 * std::sin(2 * std::numbers::pi * freq * u + phase));
      for (std::size_t c = 0; c < 3; ++c) im.at(y, x, c) = a[c] + (b[c] - a[c]) * t;
    }
  return im;
}

/// One to three soft dark discs on a light ground.
inline Image blobs(std::size_t size, Rng& rng) {
  const auto bg = jittered(kLightTone, rng);
  Image im(size, size, 3);
  for (std::size_t i = 0; i < im.pixels.size(); ++i) im.pixels[i] = bg[i % 3];
  const std::size_t n = 1 + rng.below(3);
  for (std::size_t k = 0; k < n; ++k) {
    const auto col = jittered(kDarkTone, rng);
    const double cy = rng.uniform(0.2, 0.8) * size, cx = rng.uniform(0.2, 0.8) * size;
    const double r = rng.uniform(0.12, 0.25) * size;
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double d2 = (y + 0.5 - cy) * (y + 0.5 - cy) + (x + 0.5 - cx) * (x + 0.5 - cx);
        const float w = float(std::exp(-d2 / (2 * r * r)));
        for (std::size_t c = 0; c < 3; ++c) im.at(y, x, c) = im.at(y, x, c) * (1 - w) + col[c] * w;
      }
  }
  return im;
}

/// Square-wave light/dark stripes, random orientation and period.
inline Image stripes(std::size_t size, Rng& rng) {
  const double theta = rng.uniform(0, std::numbers::pi);
  const double period = rng.uniform(0.15, 0.35) * size;
  const double offset = rng.uniform(0, period);
  const auto a = jittered(kLightTone, rng), b = jittered(kDarkTone, rng);
  Image im(size, size, 3);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double u = x * std::cos(theta) + y * std::sin(theta) + offset;
      const bool on = std::fmod(std::fmod(u, period) + period, period) < period / 2;
      for (std::size_t c = 0; c < 3; ++c) im.at(y, x, c) = on ? a[c] : b[c];
    }
  return im;
}

/// Image i of a generated set comes from stream (seed, i), so any subset
/// can be regenerated independently.
inline std::vector<Image> textures(std::size_t n, std::size_t size, std::uint64_t seed) {
  std::vector<Image> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto rng = Rng::stream(seed, i);
    out.push_back(texture(size, rng));
  }
  return out;
}

struct LabelledImages {
  std::vector<Image> images;
  std::vector<std::size_t> labels;  // 0 blobs, 1 stripes
};

inline LabelledImages blobs_vs_stripes(std::size_t per_class, std::size_t size, std::uint64_t seed) {
  LabelledImages out;
  for (std::size_t i = 0; i < per_class; ++i) {
    auto rb = Rng::stream(seed, 2 * i);
    out.images.push_back(blobs(size, rb));
    out.labels.push_back(0);
    auto rs = Rng::stream(seed, 2 * i + 1);
    out.images.push_back(stripes(size, rs));
    out.labels.push_back(1);
  }
  return out;
}

/// Writes root/<class>/<class>_NNNN.png.
inline void write_class_dirs(const std::string& root, const std::vector<std::string>& class_names,
                             const std::vector<Image>& images, const std::vector<std::size_t>& labels) {
  namespace fs = std::filesystem;
  std::vector<std::size_t> counter(class_names.size(), 0);
  for (const auto& c : class_names) fs::create_directories(fs::path(root) / c);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& c = class_names.at(labels[i]);
    char name[32];
    std::snprintf(name, sizeof name, "_%04zu.png", counter[labels[i]]++);
    write_png((fs::path(root) / c / (c + name)).string(), images[i]);
  }
}

}  // namespace ssm::synth
