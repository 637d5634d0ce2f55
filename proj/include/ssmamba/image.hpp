// SPDX-License-Identifier: Apache-2.0
//
// 8-bit RGB image files (PNG via libpng, binary PPM) and the float image
// type the pipeline works in. Pixel values are kept in [0, 1] until the
// dataset normalisation step.

#pragma once

#include <png.h>

#include <algorithm>
#include <cctype>
#include <csetjmp>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssmamba/tensor.hpp"

namespace ssm {

/// Height x width x channels, row-major, channels interleaved.
struct Image {
  std::size_t height = 0, width = 0, channels = 3;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c = 3, float fill = 0.f)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
};

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.f, 1.f) * 255.f));
}

}  // namespace detail

inline Image read_png(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw ImageError("cannot open " + path);
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8)) {
    throw ImageError("not a PNG file: " + path);
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw ImageError("libpng initialisation failed for " + path);
  }
  Image img;
  std::vector<png_bytep> rows;
  std::vector<png_byte> buf;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError("corrupt PNG: " + path);
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
    if (png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    png_set_gray_to_rgb(png);
  }
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const std::size_t w = png_get_image_width(png, info), h = png_get_image_height(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  if (rowbytes != w * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError("unsupported PNG layout: " + path);
  }
  buf.resize(rowbytes * h);
  rows.resize(h);
  for (std::size_t y = 0; y < h; ++y) rows[y] = buf.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  img = Image(h, w, 3);
  for (std::size_t i = 0; i < buf.size(); ++i) img.pixels[i] = buf[i] / 255.f;
  return img;
}

inline void write_png(const std::string& path, const Image& img) {
  if (img.channels != 3 && img.channels != 1) throw ImageError("write_png: need 1 or 3 channels");
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw ImageError("cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw ImageError("libpng initialisation failed for " + path);
  }
  std::vector<png_byte> buf(img.pixels.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = detail::to_byte(img.pixels[i]);
  std::vector<png_bytep> rows(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = buf.data() + y * img.width * img.channels;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageError("failed writing " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Binary (P6) or ASCII (P3) PPM, maxval up to 255.
inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open " + path);
  auto token = [&]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (!std::isspace(static_cast<unsigned char>(c))) {
        t.push_back(c);
        break;
      }
    }
    while (in.get(c) && !std::isspace(static_cast<unsigned char>(c))) t.push_back(c);
    return t;
  };
  const std::string magic = token();
  if (magic != "P6" && magic != "P3") throw ImageError("not a PPM file: " + path);
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw ImageError("corrupt PPM header: " + path);
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) throw ImageError("unsupported PPM: " + path);
  Image img(h, w, 3);
  if (magic == "P6") {
    std::vector<unsigned char> buf(w * h * 3);
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
      throw ImageError("truncated PPM: " + path);
    }
    for (std::size_t i = 0; i < buf.size(); ++i) img.pixels[i] = float(buf[i]) / float(maxval);
  } else {
    for (auto& p : img.pixels) {
      const std::string t = token();
      if (t.empty()) throw ImageError("truncated PPM: " + path);
      p = float(std::stoul(t)) / float(maxval);
    }
  }
  return img;
}

inline void write_ppm(const std::string& path, const Image& img) {
  if (img.channels != 3) throw ImageError("write_ppm: need 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageError("cannot write " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  for (float v : img.pixels) out.put(static_cast<char>(detail::to_byte(v)));
}

inline bool has_suffix(const std::string& s, const std::string& suffix) {
  if (s.size() < suffix.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), s.rbegin(),
                    [](char a, char b) { return std::tolower(a) == std::tolower(b); });
}

inline bool is_image_file(const std::string& path) {
  return has_suffix(path, ".png") || has_suffix(path, ".ppm");
}

inline Image read_image(const std::string& path) {
  if (has_suffix(path, ".png")) return read_png(path);
  if (has_suffix(path, ".ppm")) return read_ppm(path);
  throw ImageError("unsupported image format (PNG or PPM only): " + path);
}

inline void write_image(const std::string& path, const Image& img) {
  if (has_suffix(path, ".ppm")) return write_ppm(path, img);
  write_png(path, img);
}

/// Bilinear resampling with half-pixel centres (edges clamped).
inline Image resize_bilinear(const Image& src, std::size_t out_h, std::size_t out_w) {
  if (src.height == out_h && src.width == out_w) return src;
  Image dst(out_h, out_w, src.channels);
  const double sy = double(src.height) / double(out_h), sx = double(src.width) / double(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::max(0.0, (y + 0.5) * sy - 0.5);
    const std::size_t y0 = std::min<std::size_t>(static_cast<std::size_t>(fy), src.height - 1);
    const std::size_t y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - double(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::max(0.0, (x + 0.5) * sx - 0.5);
      const std::size_t x0 = std::min<std::size_t>(static_cast<std::size_t>(fx), src.width - 1);
      const std::size_t x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - double(x0);
      for (std::size_t c = 0; c < src.channels; ++c) {
        const double top = src.at(y0, x0, c) * (1 - wx) + src.at(y0, x1, c) * wx;
        const double bot = src.at(y1, x0, c) * (1 - wx) + src.at(y1, x1, c) * wx;
        dst.at(y, x, c) = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return dst;
}

inline Image crop(const Image& src, std::size_t top, std::size_t left, std::size_t h, std::size_t w) {
  if (top + h > src.height || left + w > src.width) throw ImageError("crop outside image");
  Image dst(h, w, src.channels);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < src.channels; ++c) dst.at(y, x, c) = src.at(top + y, left + x, c);
  return dst;
}

/// Packs equally sized images into a [B, H, W, C] tensor.
template <class T = float>
Tensor<T> stack_images(const std::vector<Image>& images) {
  if (images.empty()) throw ShapeError("stack_images: empty batch");
  const auto& f = images.front();
  std::vector<T> data;
  data.reserve(images.size() * f.pixels.size());
  for (const auto& im : images) {
    if (im.height != f.height || im.width != f.width || im.channels != f.channels) {
      throw ShapeError("stack_images: images differ in size");
    }
    data.insert(data.end(), im.pixels.begin(), im.pixels.end());
  }
  return Tensor<T>({images.size(), f.height, f.width, f.channels}, std::move(data));
}

/// Inverse of stack_images for one batch item.
template <class T>
Image unstack_image(const Tensor<T>& batch, std::size_t b) {
  Image im(batch.dim(1), batch.dim(2), batch.dim(3));
  const std::size_t n = im.pixels.size();
  for (std::size_t i = 0; i < n; ++i) im.pixels[i] = static_cast<float>(batch[b * n + i]);
  return im;
}

}  // namespace ssm
