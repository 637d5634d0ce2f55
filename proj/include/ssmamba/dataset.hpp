// SPDX-License-Identifier: Apache-2.0
//
// Directory-per-class image datasets, the per-class 7:1:2 split and
// train-split channel normalisation.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssmamba/image.hpp"
#include "ssmamba/random.hpp"

namespace ssm {

enum class Split { train = 0, val = 1, test = 2 };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

struct SplitCounts {
  std::size_t train = 0, val = 0, test = 0;
};

/// floor(7n/10), floor(n/10), floor(2n/10); leftovers handed out one at a
/// time to train, val, test, train, ...
inline SplitCounts split_counts(std::size_t n) {
  SplitCounts c{n * 7 / 10, n / 10, n * 2 / 10};
  std::size_t left = n - c.train - c.val - c.test;
  for (std::size_t k = 0; left > 0; ++k, --left) {
    if (k % 3 == 0) ++c.train;
    else if (k % 3 == 1) ++c.val;
    else ++c.test;
  }
  return c;
}

struct ImageRecord {
  std::string path;
  std::size_t label = 0;
  Split split = Split::train;
};

struct DatasetManifest {
  std::string root;
  std::uint64_t seed = 0;
  std::vector<std::string> classes;
  std::vector<ImageRecord> records;  // grouped by class, sorted path order within a split

  std::vector<ImageRecord> of(Split s) const {
    std::vector<ImageRecord> out;
    for (const auto& r : records)
      if (r.split == s) out.push_back(r);
    return out;
  }
};

/// Assigns splits to one class's sorted file list.
inline std::vector<Split> assign_splits(std::size_t n, std::uint64_t seed, std::size_t class_index) {
  auto rng = Rng::stream(seed, class_index);
  const auto perm = rng.permutation(n);
  const auto c = split_counts(n);
  std::vector<Split> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    out[perm[k]] = k < c.train ? Split::train : k < c.train + c.val ? Split::val : Split::test;
  }
  return out;
}

inline DatasetManifest load_dataset(const std::string& root, std::uint64_t seed) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw std::runtime_error("dataset root is not a directory: " + root);
  DatasetManifest m;
  m.root = root;
  m.seed = seed;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) m.classes.push_back(e.path().filename().string());
  std::sort(m.classes.begin(), m.classes.end());
  if (m.classes.size() < 2) {
    throw std::runtime_error("dataset root " + root + " needs at least 2 class subdirectories, found " +
                             std::to_string(m.classes.size()));
  }
  for (std::size_t c = 0; c < m.classes.size(); ++c) {
    const fs::path dir = fs::path(root) / m.classes[c];
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && is_image_file(e.path().string())) files.push_back(e.path().filename().string());
    if (files.empty()) throw std::runtime_error("class directory has no PNG/PPM images: " + dir.string());
    std::sort(files.begin(), files.end());
    const auto splits = assign_splits(files.size(), seed, c);
    for (std::size_t i = 0; i < files.size(); ++i) m.records.push_back({(dir / files[i]).string(), c, splits[i]});
  }
  return m;
}

/// Every PNG/PPM below `root`, recursively, in sorted path order.
inline std::vector<std::string> list_images(const std::string& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw std::runtime_error("not a directory: " + root);
  std::vector<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && is_image_file(e.path().string())) out.push_back(e.path().string());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw std::runtime_error("no PNG/PPM images under " + root);
  return out;
}

// --- normalisation ----------------------------------------------------------

struct ChannelStats {
  std::array<double, 3> mean{0, 0, 0};
  std::array<double, 3> std{1, 1, 1};
};

/// Per-channel mean and population standard deviation over all pixels.
inline ChannelStats channel_stats(const std::vector<Image>& images) {
  if (images.empty()) throw std::invalid_argument("channel_stats: no images");
  std::array<double, 3> sum{0, 0, 0}, sq{0, 0, 0};
  double count = 0;
  for (const auto& im : images) {
    if (im.channels != 3) throw ImageError("channel_stats: expected RGB");
    for (std::size_t i = 0; i < im.pixels.size(); i += 3)
      for (std::size_t c = 0; c < 3; ++c) sum[c] += im.pixels[i + c];
    count += double(im.height * im.width);
  }
  ChannelStats s;
  for (std::size_t c = 0; c < 3; ++c) s.mean[c] = sum[c] / count;
  for (const auto& im : images)
    for (std::size_t i = 0; i < im.pixels.size(); i += 3)
      for (std::size_t c = 0; c < 3; ++c) sq[c] += (im.pixels[i + c] - s.mean[c]) * (im.pixels[i + c] - s.mean[c]);
  for (std::size_t c = 0; c < 3; ++c) {
    s.std[c] = std::sqrt(sq[c] / count);
    if (s.std[c] < 1e-8) s.std[c] = 1.0;  // constant channel: centre only
  }
  return s;
}

inline Image normalize(const Image& im, const ChannelStats& s) {
  Image out = im;
  for (std::size_t i = 0; i < out.pixels.size(); i += 3)
    for (std::size_t c = 0; c < 3; ++c)
      out.pixels[i + c] = static_cast<float>((im.pixels[i + c] - s.mean[c]) / s.std[c]);
  return out;
}

inline Image denormalize(const Image& im, const ChannelStats& s) {
  Image out = im;
  for (std::size_t i = 0; i < out.pixels.size(); i += 3)
    for (std::size_t c = 0; c < 3; ++c) out.pixels[i + c] = static_cast<float>(im.pixels[i + c] * s.std[c] + s.mean[c]);
  return out;
}

/// Decoded, resized to size x size, values in [0, 1] (not yet normalised).
inline Image load_resized(const std::string& path, std::size_t size) {
  return resize_bilinear(read_image(path), size, size);
}

/// Resize then normalise with the given statistics.
inline Image preprocess(const Image& im, std::size_t size, const ChannelStats& s) {
  return normalize(resize_bilinear(im, size, size), s);
}

/// Labelled in-memory split; images already resized to the model size.
struct ImageSet {
  std::vector<Image> images;
  std::vector<std::size_t> labels;
  std::size_t size() const { return images.size(); }
};

struct LoadedDataset {
  DatasetManifest manifest;
  ChannelStats stats;
  ImageSet train, val, test;  // raw [0, 1] pixels at model resolution

  const ImageSet& split(Split s) const { return s == Split::train ? train : s == Split::val ? val : test; }
};

/// Reads and resizes every image; statistics come from the train split.
inline LoadedDataset load_images(const DatasetManifest& m, std::size_t size) {
  LoadedDataset d;
  d.manifest = m;
  for (const auto& r : m.records) {
    auto& set = r.split == Split::train ? d.train : r.split == Split::val ? d.val : d.test;
    set.images.push_back(load_resized(r.path, size));
    set.labels.push_back(r.label);
  }
  if (d.train.images.empty()) throw std::runtime_error("dataset has an empty train split");
  d.stats = channel_stats(d.train.images);
  return d;
}

}  // namespace ssm
