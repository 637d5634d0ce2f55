// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Layout is channels-last throughout:
//   sequences  [B, L, C]
//   feature maps [B, H, W, C]
// Depthwise kernels are stored tap-major ([k, C] and [k, k, C]) so the
// innermost loop runs over contiguous channels.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ssmamba/tensor.hpp"

namespace ssm {

namespace detail {

template <class T>
bool recording(std::initializer_list<const Tensor<T>*> inputs) {
  if (!::ssm::active_tape<T>()) return false;
  for (const auto* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <class T, class Fn>
void record(const char* op, Tensor<T>& out, Fn&& fn) {
  out.set_requires_grad(true);
  ::ssm::active_tape<T>()->record(op, out.impl(), std::forward<Fn>(fn));
}

template <class T>
T* grad_ptr(const Tensor<T>& t) {
  return t.impl()->grad_buffer().data();
}

template <class T>
const T* out_grad(const Tensor<T>& t) {
  return t.impl()->grad.data();
}

[[noreturn]] inline void shape_fail(const std::string& op, const std::string& what) {
  throw ShapeError(op + ": " + what);
}

inline void require_ndim(const std::string& op, const Shape& s, std::size_t n, const char* name) {
  if (s.size() != n) {
    shape_fail(op, std::string(name) + " must have " + std::to_string(n) + " dims, got " +
                       shape_str(s));
  }
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

namespace detail {

// y = f(x); dy/dx = df(x, y).
template <class T, class F, class DF>
Tensor<T> unary(const char* op, const Tensor<T>& x, F f, DF df) {
  std::vector<T> out(x.numel());
  const T* xp = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xp[i]);
  Tensor<T> y(x.shape(), std::move(out));
  if (recording<T>({&x})) {
    record(op, y, [x, y, df] {
      const T* g = out_grad(y);
      T* gx = grad_ptr(x);
      const T* xv = x.data().data();
      const T* yv = y.data().data();
      for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
    });
  }
  return y;
}

// Broadcast rule: b has the same rank as a, matches a on a leading prefix
// and is 1 on every remaining (trailing) axis.
inline std::size_t broadcast_inner(const std::string& op, const Shape& a, const Shape& b) {
  if (a.size() != b.size()) {
    shape_fail(op, "rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
  std::size_t k = 0;
  while (k < a.size() && a[k] == b[k]) ++k;
  std::size_t inner = 1;
  for (std::size_t i = k; i < a.size(); ++i) {
    if (b[i] != 1) {
      shape_fail(op, "cannot broadcast " + shape_str(b) + " onto " + shape_str(a) +
                         " (only trailing singleton dims broadcast)");
    }
    inner *= a[i];
  }
  return inner;
}

enum class BinaryKind { add, sub, mul };

template <class T>
Tensor<T> binary(const char* op, BinaryKind kind, const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t inner = broadcast_inner(op, a.shape(), b.shape());
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T bv = bp[i / inner];
    switch (kind) {
      case BinaryKind::add: out[i] = ap[i] + bv; break;
      case BinaryKind::sub: out[i] = ap[i] - bv; break;
      case BinaryKind::mul: out[i] = ap[i] * bv; break;
    }
  }
  Tensor<T> y(a.shape(), std::move(out));
  if (recording<T>({&a, &b})) {
    record(op, y, [a, b, y, kind, inner] {
      const T* g = out_grad(y);
      const T* av = a.data().data();
      const T* bv = b.data().data();
      if (a.requires_grad()) {
        T* ga = grad_ptr(a);
        for (std::size_t i = 0; i < a.numel(); ++i) {
          ga[i] += kind == BinaryKind::mul ? g[i] * bv[i / inner] : g[i];
        }
      }
      if (b.requires_grad()) {
        T* gb = grad_ptr(b);
        for (std::size_t i = 0; i < a.numel(); ++i) {
          T contrib = g[i];
          if (kind == BinaryKind::sub) contrib = -contrib;
          if (kind == BinaryKind::mul) contrib *= av[i];
          gb[i / inner] += contrib;
        }
      }
    });
  }
  return y;
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary("add", detail::BinaryKind::add, a, b);
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary("sub", detail::BinaryKind::sub, a, b);
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary("mul", detail::BinaryKind::mul, a, b);
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary("scale", x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary("exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  return detail::unary(
      "silu", x, [](T v) { return static_cast<T>(v * detail::sigmoid(v)); },
      [](T v, T) {
        const double s = detail::sigmoid(v);
        return static_cast<T>(s * (1.0 + v * (1.0 - s)));
      });
}

/// Exact (erf) GeLU. Only used by the vanilla Mamba reference block.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  return detail::unary(
      "gelu", x,
      [](T v) { return static_cast<T>(0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)))); },
      [](T v, T) {
        const double cdf = 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
        const double pdf = std::exp(-0.5 * double(v) * v) / std::sqrt(2.0 * M_PI);
        return static_cast<T>(cdf + v * pdf);
      });
}

template <class T>
T softplus_scalar(T v) {
  if (v > T(20)) return v;
  return static_cast<T>(std::log1p(std::exp(double(v))));
}

template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::unary(
      "softplus", x, [](T v) { return softplus_scalar(v); },
      [](T v, T) { return static_cast<T>(detail::sigmoid(v)); });
}

template <class T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary(
      "abs", x, [](T v) { return v < T(0) ? -v : v; },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary("square", x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

/// x[..., c] * s[c]
template <class T>
Tensor<T> mul_channels(const Tensor<T>& x, const Tensor<T>& s) {
  const std::size_t C = x.shape().back();
  if (s.numel() != C) detail::shape_fail("mul_channels", "scale has " + std::to_string(s.numel()) + " entries, input " + shape_str(x.shape()));
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s[i % C];
  Tensor<T> y(x.shape(), std::move(out));
  if (detail::recording<T>({&x, &s})) {
    detail::record("mul_channels", y, [x, s, y, C] {
      const T* g = detail::out_grad(y);
      T* gx = x.requires_grad() ? detail::grad_ptr(x) : nullptr;
      T* gs = s.requires_grad() ? detail::grad_ptr(s) : nullptr;
      for (std::size_t i = 0; i < x.numel(); ++i) {
        if (gx) gx[i] += g[i] * s[i % C];
        if (gs) gs[i % C] += g[i] * x[i];
      }
    });
  }
  return y;
}

/// x[..., c] + s[c]
template <class T>
Tensor<T> add_channels(const Tensor<T>& x, const Tensor<T>& s) {
  const std::size_t C = x.shape().back();
  if (s.numel() != C) detail::shape_fail("add_channels", "shift has " + std::to_string(s.numel()) + " entries, input " + shape_str(x.shape()));
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + s[i % C];
  Tensor<T> y(x.shape(), std::move(out));
  if (detail::recording<T>({&x, &s})) {
    detail::record("add_channels", y, [x, s, y, C] {
      const T* g = detail::out_grad(y);
      T* gx = x.requires_grad() ? detail::grad_ptr(x) : nullptr;
      T* gs = s.requires_grad() ? detail::grad_ptr(s) : nullptr;
      for (std::size_t i = 0; i < x.numel(); ++i) {
        if (gx) gx[i] += g[i];
        if (gs) gs[i % C] += g[i];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  Tensor<T> y(Shape{1}, {acc});
  if (detail::recording<T>({&x})) {
    detail::record("sum", y, [x, y] {
      const T g = detail::out_grad(y)[0];
      T* gx = detail::grad_ptr(x);
      for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g;
    });
  }
  return y;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// [B, d1, ..., dk, C] -> [B, C], averaging over every axis between batch and
/// channels.
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.ndim() < 3) detail::shape_fail("global_avg_pool", "need rank >= 3, got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.shape().back();
  const std::size_t R = x.numel() / (B * C);
  std::vector<T> out(B * C, T(0));
  const T* xp = x.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    T* o = out.data() + b * C;
    for (std::size_t r = 0; r < R; ++r) {
      const T* row = xp + (b * R + r) * C;
      for (std::size_t c = 0; c < C; ++c) o[c] += row[c];
    }
    for (std::size_t c = 0; c < C; ++c) o[c] /= static_cast<T>(R);
  }
  Tensor<T> y(Shape{B, C}, std::move(out));
  if (detail::recording<T>({&x})) {
    detail::record("global_avg_pool", y, [x, y, B, C, R] {
      const T* g = detail::out_grad(y);
      T* gx = detail::grad_ptr(x);
      const T inv = T(1) / static_cast<T>(R);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < C; ++c) gx[(b * R + r) * C + c] += g[b * C + c] * inv;
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    detail::shape_fail("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor<T> y(std::move(shape), x.values());
  if (detail::recording<T>({&x})) {
    detail::record("reshape", y, [x, y] {
      const T* g = detail::out_grad(y);
      T* gx = detail::grad_ptr(x);
      for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g[i];
    });
  }
  return y;
}

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const auto& in = x.shape();
  const std::size_t n = in.size();
  if (perm.size() != n) detail::shape_fail("permute", "perm size does not match rank " + shape_str(in));
  std::vector<bool> seen(n, false);
  Shape out_shape(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (perm[i] >= n || seen[perm[i]]) detail::shape_fail("permute", "invalid permutation");
    seen[perm[i]] = true;
    out_shape[i] = in[perm[i]];
  }
  std::vector<std::size_t> in_stride(n, 1);
  for (std::size_t i = n - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * in[i + 1];
  // For each output element, the matching input offset.
  std::vector<std::size_t> src(x.numel());
  std::vector<std::size_t> idx(n, 0);
  for (std::size_t o = 0; o < src.size(); ++o) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < n; ++i) off += idx[i] * in_stride[perm[i]];
    src[o] = off;
    for (std::size_t i = n; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = x.data()[src[o]];
  Tensor<T> y(std::move(out_shape), std::move(out));
  if (detail::recording<T>({&x})) {
    detail::record("permute", y, [x, y, src = std::move(src)] {
      const T* g = detail::out_grad(y);
      T* gx = detail::grad_ptr(x);
      for (std::size_t o = 0; o < src.size(); ++o) gx[src[o]] += g[o];
    });
  }
  return y;
}

/// Reverses the order of elements along `axis`.
template <class T>
Tensor<T> reverse_axis(const Tensor<T>& x, std::size_t axis) {
  const auto& s = x.shape();
  if (axis >= s.size()) detail::shape_fail("reverse_axis", "axis out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  auto flip = [=](const T* in, T* out, bool accumulate) {
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t t = 0; t < len; ++t) {
        const T* src = in + (o * len + (len - 1 - t)) * inner;
        T* dst = out + (o * len + t) * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] = accumulate ? dst[i] + src[i] : src[i];
      }
  };
  std::vector<T> out(x.numel());
  flip(x.data().data(), out.data(), false);
  Tensor<T> y(s, std::move(out));
  if (detail::recording<T>({&x})) {
    detail::record("reverse_axis", y, [x, y, flip] { flip(detail::out_grad(y), detail::grad_ptr(x), true); });
  }
  return y;
}

/// Concatenates along the last axis; all leading dims must agree.
template <class T>
Tensor<T> concat_last(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) detail::shape_fail("concat", "no inputs");
  Shape lead = parts[0].shape();
  lead.pop_back();
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape l = p.shape();
    l.pop_back();
    if (l != lead) {
      detail::shape_fail("concat", "leading dims differ: " + shape_str(parts[0].shape()) + " vs " +
                                       shape_str(p.shape()));
    }
    total += p.shape().back();
  }
  const std::size_t rows = numel_of(lead);
  std::vector<T> out(rows * total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape().back();
    const T* src = p.data().data();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(src + r * w, w, out.data() + r * total + off);
    off += w;
  }
  Shape shape = lead;
  shape.push_back(total);
  Tensor<T> y(std::move(shape), std::move(out));
  bool any = false;
  for (const auto& p : parts) any = any || detail::recording<T>({&p});
  if (any) {
    detail::record("concat", y, [parts, y, rows, total] {
      const T* g = detail::out_grad(y);
      std::size_t off = 0;
      for (const auto& p : parts) {
        const std::size_t w = p.shape().back();
        if (p.requires_grad()) {
          T* gp = detail::grad_ptr(p);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < w; ++c) gp[r * w + c] += g[r * total + off + c];
        }
        off += w;
      }
    });
  }
  return y;
}

/// Splits the last axis into consecutive pieces of the given widths.
template <class T>
std::vector<Tensor<T>> split_last(const Tensor<T>& x, const std::vector<std::size_t>& widths) {
  const std::size_t C = x.shape().back();
  std::size_t total = 0;
  for (auto w : widths) total += w;
  if (total != C) {
    detail::shape_fail("split", "widths sum to " + std::to_string(total) + " but last dim is " +
                                    std::to_string(C));
  }
  const std::size_t rows = x.numel() / C;
  std::vector<Tensor<T>> out;
  std::size_t off = 0;
  for (auto w : widths) {
    std::vector<T> v(rows * w);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(x.data().data() + r * C + off, w, v.data() + r * w);
    Shape s = x.shape();
    s.back() = w;
    Tensor<T> y(std::move(s), std::move(v));
    if (detail::recording<T>({&x})) {
      detail::record("split", y, [x, y, rows, C, off, w] {
        const T* g = detail::out_grad(y);
        T* gx = detail::grad_ptr(x);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < w; ++c) gx[r * C + off + c] += g[r * w + c];
      });
    }
    out.push_back(std::move(y));
    off += w;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dense layers
// ---------------------------------------------------------------------------

/// y[..., o] = sum_i x[..., i] * W[o, i] + b[o]. Also serves as the
/// pointwise (1x1) convolution on channels-last maps. `bias` may be undefined.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  if (weight.ndim() != 2 || x.shape().back() != weight.dim(1)) {
    detail::shape_fail("linear", "input " + shape_str(x.shape()) + " incompatible with weight " +
                                     shape_str(weight.shape()));
  }
  const std::size_t in = weight.dim(1), out_f = weight.dim(0);
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != out_f)) {
    detail::shape_fail("linear", "bias " + shape_str(bias.shape()) + " does not match " +
                                     std::to_string(out_f) + " outputs");
  }
  const std::size_t rows = x.numel() / in;
  std::vector<T> out(rows * out_f);
  const T* xp = x.data().data();
  const T* wp = weight.data().data();
  const T* bp = bias.defined() ? bias.data().data() : nullptr;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xp + r * in;
    T* yr = out.data() + r * out_f;
    for (std::size_t o = 0; o < out_f; ++o) {
      const T* wr = wp + o * in;
      T acc = bp ? bp[o] : T(0);
      for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
      yr[o] = acc;
    }
  }
  Shape shape = x.shape();
  shape.back() = out_f;
  Tensor<T> y(std::move(shape), std::move(out));
  if (detail::recording<T>({&x, &weight, &bias})) {
    detail::record("linear", y, [x, weight, bias, y, rows, in, out_f] {
      const T* g = detail::out_grad(y);
      const T* xp = x.data().data();
      const T* wp = weight.data().data();
      if (x.requires_grad()) {
        T* gx = detail::grad_ptr(x);
        for (std::size_t r = 0; r < rows; ++r) {
          T* gxr = gx + r * in;
          for (std::size_t o = 0; o < out_f; ++o) {
            const T go = g[r * out_f + o];
            if (go == T(0)) continue;
            const T* wr = wp + o * in;
            for (std::size_t i = 0; i < in; ++i) gxr[i] += go * wr[i];
          }
        }
      }
      if (weight.requires_grad()) {
        T* gw = detail::grad_ptr(weight);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* xr = xp + r * in;
          for (std::size_t o = 0; o < out_f; ++o) {
            const T go = g[r * out_f + o];
            if (go == T(0)) continue;
            T* gwr = gw + o * in;
            for (std::size_t i = 0; i < in; ++i) gwr[i] += go * xr[i];
          }
        }
      }
      if (bias.defined() && bias.requires_grad()) {
        T* gb = detail::grad_ptr(bias);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t o = 0; o < out_f; ++o) gb[o] += g[r * out_f + o];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

enum class Padding { centered, causal };

/// Depthwise 1-D convolution over [B, L, C] with kernel [k, C].
///   centered: y[t] = sum_j w[j] x[t + j - k/2]   (k odd, zero padding k/2 per side)
///   causal:   y[t] = sum_j w[j] x[t - j]         (k - 1 zeros on the left)
template <class T>
Tensor<T> depthwise_conv1d(const Tensor<T>& x, const Tensor<T>& w, Padding pad) {
  const char* op = pad == Padding::centered ? "depthwise_conv1d" : "causal_conv1d";
  detail::require_ndim(op, x.shape(), 3, "input");
  detail::require_ndim(op, w.shape(), 2, "kernel");
  const std::size_t B = x.dim(0), L = x.dim(1), C = x.dim(2), k = w.dim(0);
  if (w.dim(1) != C) {
    detail::shape_fail(op, "kernel " + shape_str(w.shape()) + " does not match " +
                               std::to_string(C) + " channels");
  }
  if (pad == Padding::centered && k % 2 == 0) {
    detail::shape_fail(op, "centered padding needs an odd kernel, got k=" + std::to_string(k));
  }
  const long half = static_cast<long>(k / 2);
  auto offset = [=](std::size_t j) {
    return pad == Padding::centered ? static_cast<long>(j) - half : -static_cast<long>(j);
  };
  std::vector<T> out(x.numel(), T(0));
  const T* xp = x.data().data();
  const T* wp = w.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < L; ++t) {
      T* yr = out.data() + (b * L + t) * C;
      for (std::size_t j = 0; j < k; ++j) {
        const long s = static_cast<long>(t) + offset(j);
        if (s < 0 || s >= static_cast<long>(L)) continue;
        const T* xr = xp + (b * L + static_cast<std::size_t>(s)) * C;
        const T* wr = wp + j * C;
        for (std::size_t c = 0; c < C; ++c) yr[c] += wr[c] * xr[c];
      }
    }
  Tensor<T> y(x.shape(), std::move(out));
  if (detail::recording<T>({&x, &w})) {
    detail::record(op, y, [x, w, y, B, L, C, k, offset] {
      const T* g = detail::out_grad(y);
      const T* xp = x.data().data();
      const T* wp = w.data().data();
      T* gx = x.requires_grad() ? detail::grad_ptr(x) : nullptr;
      T* gw = w.requires_grad() ? detail::grad_ptr(w) : nullptr;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < L; ++t) {
          const T* gr = g + (b * L + t) * C;
          for (std::size_t j = 0; j < k; ++j) {
            const long s = static_cast<long>(t) + offset(j);
            if (s < 0 || s >= static_cast<long>(L)) continue;
            const std::size_t row = (b * L + static_cast<std::size_t>(s)) * C;
            if (gx)
              for (std::size_t c = 0; c < C; ++c) gx[row + c] += gr[c] * wp[j * C + c];
            if (gw)
              for (std::size_t c = 0; c < C; ++c) gw[j * C + c] += gr[c] * xp[row + c];
          }
        }
    });
  }
  return y;
}

/// Regular (channel-mixing) centered 1-D convolution, [B, L, Cin] with kernel
/// [Cout, k, Cin] -> [B, L, Cout]. Zero padding k/2 on each side.
template <class T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = {}) {
  detail::require_ndim("conv1d", x.shape(), 3, "input");
  detail::require_ndim("conv1d", w.shape(), 3, "kernel");
  const std::size_t B = x.dim(0), L = x.dim(1), Cin = x.dim(2);
  const std::size_t Cout = w.dim(0), k = w.dim(1);
  if (w.dim(2) != Cin) {
    detail::shape_fail("conv1d", "kernel " + shape_str(w.shape()) + " expects " +
                                     std::to_string(w.dim(2)) + " input channels, got " +
                                     std::to_string(Cin));
  }
  if (k % 2 == 0) detail::shape_fail("conv1d", "kernel size must be odd, got " + std::to_string(k));
  if (bias.defined() && bias.numel() != Cout) detail::shape_fail("conv1d", "bias size mismatch");
  const long half = static_cast<long>(k / 2);
  std::vector<T> out(B * L * Cout);
  const T* xp = x.data().data();
  const T* wp = w.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < L; ++t) {
      T* yr = out.data() + (b * L + t) * Cout;
      for (std::size_t o = 0; o < Cout; ++o) yr[o] = bias.defined() ? bias[o] : T(0);
      for (std::size_t j = 0; j < k; ++j) {
        const long s = static_cast<long>(t + j) - half;
        if (s < 0 || s >= static_cast<long>(L)) continue;
        const T* xr = xp + (b * L + static_cast<std::size_t>(s)) * Cin;
        for (std::size_t o = 0; o < Cout; ++o) {
          const T* wr = wp + (o * k + j) * Cin;
          T acc = 0;
          for (std::size_t i = 0; i < Cin; ++i) acc += wr[i] * xr[i];
          yr[o] += acc;
        }
      }
    }
  Tensor<T> y(Shape{B, L, Cout}, std::move(out));
  if (detail::recording<T>({&x, &w, &bias})) {
    detail::record("conv1d", y, [x, w, bias, y, B, L, Cin, Cout, k, half] {
      const T* g = detail::out_grad(y);
      const T* xp = x.data().data();
      const T* wp = w.data().data();
      T* gx = x.requires_grad() ? detail::grad_ptr(x) : nullptr;
      T* gw = w.requires_grad() ? detail::grad_ptr(w) : nullptr;
      T* gb = bias.defined() && bias.requires_grad() ? detail::grad_ptr(bias) : nullptr;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < L; ++t) {
          const T* gr = g + (b * L + t) * Cout;
          if (gb)
            for (std::size_t o = 0; o < Cout; ++o) gb[o] += gr[o];
          for (std::size_t j = 0; j < k; ++j) {
            const long s = static_cast<long>(t + j) - half;
            if (s < 0 || s >= static_cast<long>(L)) continue;
            const std::size_t row = (b * L + static_cast<std::size_t>(s)) * Cin;
            for (std::size_t o = 0; o < Cout; ++o) {
              const T go = gr[o];
              const std::size_t wrow = (o * k + j) * Cin;
              if (gx)
                for (std::size_t i = 0; i < Cin; ++i) gx[row + i] += go * wp[wrow + i];
              if (gw)
                for (std::size_t i = 0; i < Cin; ++i) gw[wrow + i] += go * xp[row + i];
            }
          }
        }
    });
  }
  return y;
}

/// Depthwise 2-D convolution over [B, H, W, C] with kernel [k, k, C], zero
/// padding k/2 on every side (k odd).
template <class T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w) {
  detail::require_ndim("depthwise_conv2d", x.shape(), 4, "input");
  detail::require_ndim("depthwise_conv2d", w.shape(), 3, "kernel");
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3), k = w.dim(0);
  if (w.dim(1) != k || w.dim(2) != C) {
    detail::shape_fail("depthwise_conv2d", "kernel " + shape_str(w.shape()) + " incompatible with input " +
                                               shape_str(x.shape()));
  }
  if (k % 2 == 0) detail::shape_fail("depthwise_conv2d", "kernel size must be odd, got " + std::to_string(k));
  const long half = static_cast<long>(k / 2);
  const long Hl = static_cast<long>(H), Wl = static_cast<long>(W);
  // Visits every (output pixel, tap, input pixel) triple inside the image.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t b = 0; b < B; ++b)
      for (long i = 0; i < Hl; ++i)
        for (long j = 0; j < Wl; ++j) {
          const std::size_t opix = (b * H + static_cast<std::size_t>(i)) * W + static_cast<std::size_t>(j);
          for (long u = 0; u < static_cast<long>(k); ++u) {
            const long si = i + u - half;
            if (si < 0 || si >= Hl) continue;
            for (long v = 0; v < static_cast<long>(k); ++v) {
              const long sj = j + v - half;
              if (sj < 0 || sj >= Wl) continue;
              const std::size_t ipix =
                  (b * H + static_cast<std::size_t>(si)) * W + static_cast<std::size_t>(sj);
              fn(opix * C, ipix * C, static_cast<std::size_t>(u * static_cast<long>(k) + v) * C);
            }
          }
        }
  };
  std::vector<T> out(x.numel(), T(0));
  const T* xp = x.data().data();
  const T* wp = w.data().data();
  for_each_tap([&](std::size_t o, std::size_t in, std::size_t tap) {
    for (std::size_t c = 0; c < C; ++c) out[o + c] += wp[tap + c] * xp[in + c];
  });
  Tensor<T> y(x.shape(), std::move(out));
  if (detail::recording<T>({&x, &w})) {
    detail::record("depthwise_conv2d", y, [x, w, y, C, for_each_tap] {
      const T* g = detail::out_grad(y);
      const T* xp = x.data().data();
      const T* wp = w.data().data();
      T* gx = x.requires_grad() ? detail::grad_ptr(x) : nullptr;
      T* gw = w.requires_grad() ? detail::grad_ptr(w) : nullptr;
      for_each_tap([&](std::size_t o, std::size_t in, std::size_t tap) {
        if (gx)
          for (std::size_t c = 0; c < C; ++c) gx[in + c] += g[o + c] * wp[tap + c];
        if (gw)
          for (std::size_t c = 0; c < C; ++c) gw[tap + c] += g[o + c] * xp[in + c];
      });
    });
  }
  return y;
}

/// Non-overlapping strided convolution (kernel == stride == s): patchify then
/// project. [B, H, W, Cin] with kernel [Cout, s, s, Cin] -> [B, H/s, W/s, Cout].
template <class T>
Tensor<T> patch_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = {}) {
  detail::require_ndim("patch_conv2d", x.shape(), 4, "input");
  detail::require_ndim("patch_conv2d", w.shape(), 4, "kernel");
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), Cin = x.dim(3);
  const std::size_t Cout = w.dim(0), s = w.dim(1);
  if (w.dim(2) != s || w.dim(3) != Cin) {
    detail::shape_fail("patch_conv2d", "kernel " + shape_str(w.shape()) + " incompatible with input " +
                                           shape_str(x.shape()));
  }
  if (H % s != 0 || W % s != 0) {
    detail::shape_fail("patch_conv2d", "spatial dims " + std::to_string(H) + "x" + std::to_string(W) +
                                           " not divisible by stride " + std::to_string(s));
  }
  if (bias.defined() && bias.numel() != Cout) detail::shape_fail("patch_conv2d", "bias size mismatch");
  const std::size_t Ho = H / s, Wo = W / s, K = s * s * Cin;
  // Gather every patch into a contiguous row, then it is a plain GEMM.
  auto gather = [=](const T* src, std::size_t b, std::size_t i, std::size_t j, T* dst) {
    for (std::size_t u = 0; u < s; ++u)
      std::copy_n(src + ((b * H + i * s + u) * W + j * s) * Cin, s * Cin, dst + u * s * Cin);
  };
  std::vector<T> out(B * Ho * Wo * Cout);
  std::vector<T> patch(K);
  const T* xp = x.data().data();
  const T* wp = w.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        gather(xp, b, i, j, patch.data());
        T* yr = out.data() + ((b * Ho + i) * Wo + j) * Cout;
        for (std::size_t o = 0; o < Cout; ++o) {
          T acc = bias.defined() ? bias[o] : T(0);
          const T* wr = wp + o * K;
          for (std::size_t q = 0; q < K; ++q) acc += wr[q] * patch[q];
          yr[o] = acc;
        }
      }
  Tensor<T> y(Shape{B, Ho, Wo, Cout}, std::move(out));
  if (detail::recording<T>({&x, &w, &bias})) {
    detail::record("patch_conv2d", y, [=] {
      const T* g = detail::out_grad(y);
      const T* xp = x.data().data();
      const T* wp = w.data().data();
      T* gx = x.requires_grad() ? detail::grad_ptr(x) : nullptr;
      T* gw = w.requires_grad() ? detail::grad_ptr(w) : nullptr;
      T* gb = bias.defined() && bias.requires_grad() ? detail::grad_ptr(bias) : nullptr;
      std::vector<T> patch(K), gpatch(K);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < Ho; ++i)
          for (std::size_t j = 0; j < Wo; ++j) {
            const T* gr = g + ((b * Ho + i) * Wo + j) * Cout;
            if (gw) gather(xp, b, i, j, patch.data());
            std::fill(gpatch.begin(), gpatch.end(), T(0));
            for (std::size_t o = 0; o < Cout; ++o) {
              const T go = gr[o];
              if (gb) gb[o] += go;
              if (gw)
                for (std::size_t q = 0; q < K; ++q) gw[o * K + q] += go * patch[q];
              if (gx)
                for (std::size_t q = 0; q < K; ++q) gpatch[q] += go * wp[o * K + q];
            }
            if (gx)
              for (std::size_t u = 0; u < s; ++u) {
                T* dst = gx + ((b * H + i * s + u) * W + j * s) * Cin;
                for (std::size_t q = 0; q < s * Cin; ++q) dst[q] += gpatch[u * s * Cin + q];
              }
          }
    });
  }
  return y;
}

/// Nearest-neighbour upsampling of [B, h, w, C] by an integer factor.
template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t factor) {
  detail::require_ndim("upsample_nearest", x.shape(), 4, "input");
  const std::size_t B = x.dim(0), h = x.dim(1), w = x.dim(2), C = x.dim(3);
  const std::size_t H = h * factor, W = w * factor;
  std::vector<T> out(B * H * W * C);
  const T* xp = x.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j)
        std::copy_n(xp + ((b * h + i / factor) * w + j / factor) * C, C, out.data() + ((b * H + i) * W + j) * C);
  Tensor<T> y(Shape{B, H, W, C}, std::move(out));
  if (detail::recording<T>({&x})) {
    detail::record("upsample_nearest", y, [=] {
      const T* g = detail::out_grad(y);
      T* gx = detail::grad_ptr(x);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < H; ++i)
          for (std::size_t j = 0; j < W; ++j) {
            T* dst = gx + ((b * h + i / factor) * w + j / factor) * C;
            const T* src = g + ((b * H + i) * W + j) * C;
            for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
          }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Normalisation
// ---------------------------------------------------------------------------

/// Running statistics for batch norm. Mutated only in training mode.
template <class T>
struct BatchNormStats {
  Tensor<T> mean;
  Tensor<T> var;
};

/// Batch norm over every row of [..., C]. Training mode normalises with the
/// batch statistics and folds them into `stats` with `momentum`; evaluation
/// mode uses `stats` directly.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormStats<T>& stats, bool training, double momentum = 0.1,
                     double eps = 1e-5) {
  const std::size_t C = x.shape().back();
  if (gamma.numel() != C || beta.numel() != C || stats.mean.numel() != C || stats.var.numel() != C) {
    detail::shape_fail("batch_norm", "parameters do not match " + std::to_string(C) + " channels");
  }
  const std::size_t rows = x.numel() / C;
  const T* xp = x.data().data();
  std::vector<T> mu(C, T(0)), inv_std(C);
  if (training) {
    std::vector<double> s(C, 0.0), ss(C, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < C; ++c) s[c] += xp[r * C + c];
    for (std::size_t c = 0; c < C; ++c) s[c] /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < C; ++c) {
        const double d = xp[r * C + c] - s[c];
        ss[c] += d * d;
      }
    auto rm = stats.mean.mutable_data();
    auto rv = stats.var.mutable_data();
    for (std::size_t c = 0; c < C; ++c) {
      const double var = ss[c] / static_cast<double>(rows);
      const double unbiased = rows > 1 ? ss[c] / static_cast<double>(rows - 1) : var;
      mu[c] = static_cast<T>(s[c]);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + eps));
      rm[c] = static_cast<T>((1.0 - momentum) * rm[c] + momentum * s[c]);
      rv[c] = static_cast<T>((1.0 - momentum) * rv[c] + momentum * unbiased);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = stats.mean[c];
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(double(stats.var[c]) + eps));
    }
  }
  std::vector<T> xhat(x.numel()), out(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t i = r * C + c;
      xhat[i] = (xp[i] - mu[c]) * inv_std[c];
      out[i] = xhat[i] * gamma[c] + beta[c];
    }
  Tensor<T> y(x.shape(), std::move(out));
  if (detail::recording<T>({&x, &gamma, &beta})) {
    detail::record("batch_norm", y, [=, xhat = std::move(xhat)] {
      const T* g = detail::out_grad(y);
      std::vector<T> sg(C, T(0)), sgx(C, T(0));
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < C; ++c) {
          sg[c] += g[r * C + c];
          sgx[c] += g[r * C + c] * xhat[r * C + c];
        }
      if (gamma.requires_grad()) {
        T* gg = detail::grad_ptr(gamma);
        for (std::size_t c = 0; c < C; ++c) gg[c] += sgx[c];
      }
      if (beta.requires_grad()) {
        T* gb = detail::grad_ptr(beta);
        for (std::size_t c = 0; c < C; ++c) gb[c] += sg[c];
      }
      if (x.requires_grad()) {
        T* gx = detail::grad_ptr(x);
        const T n = static_cast<T>(rows);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t i = r * C + c;
            const T scale = gamma[c] * inv_std[c];
            gx[i] += training ? scale * (g[i] - sg[c] / n - xhat[i] * sgx[c] / n) : scale * g[i];
          }
      }
    });
  }
  return y;
}

/// Layer norm over the last axis.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = 1e-5) {
  const std::size_t C = x.shape().back();
  if (gamma.numel() != C || beta.numel() != C) {
    detail::shape_fail("layer_norm", "parameters do not match " + std::to_string(C) + " features");
  }
  const std::size_t rows = x.numel() / C;
  const T* xp = x.data().data();
  std::vector<T> xhat(x.numel()), out(x.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xp + r * C;
    double m = 0, v = 0;
    for (std::size_t c = 0; c < C; ++c) m += xr[c];
    m /= static_cast<double>(C);
    for (std::size_t c = 0; c < C; ++c) v += (xr[c] - m) * (xr[c] - m);
    v /= static_cast<double>(C);
    inv_std[r] = static_cast<T>(1.0 / std::sqrt(v + eps));
    for (std::size_t c = 0; c < C; ++c) {
      xhat[r * C + c] = static_cast<T>((xr[c] - m) * inv_std[r]);
      out[r * C + c] = xhat[r * C + c] * gamma[c] + beta[c];
    }
  }
  Tensor<T> y(x.shape(), std::move(out));
  if (detail::recording<T>({&x, &gamma, &beta})) {
    detail::record("layer_norm", y, [=, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
      const T* g = detail::out_grad(y);
      T* gg = gamma.requires_grad() ? detail::grad_ptr(gamma) : nullptr;
      T* gb = beta.requires_grad() ? detail::grad_ptr(beta) : nullptr;
      T* gx = x.requires_grad() ? detail::grad_ptr(x) : nullptr;
      std::vector<T> gh(C);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* gr = g + r * C;
        const T* hr = xhat.data() + r * C;
        T s1 = 0, s2 = 0;
        for (std::size_t c = 0; c < C; ++c) {
          if (gg) gg[c] += gr[c] * hr[c];
          if (gb) gb[c] += gr[c];
          gh[c] = gr[c] * gamma[c];
          s1 += gh[c];
          s2 += gh[c] * hr[c];
        }
        if (gx) {
          const T n = static_cast<T>(C);
          for (std::size_t c = 0; c < C; ++c) gx[r * C + c] += inv_std[r] * (gh[c] - s1 / n - hr[c] * s2 / n);
        }
      }
    });
  }
  return y;
}

}  // namespace ssm
