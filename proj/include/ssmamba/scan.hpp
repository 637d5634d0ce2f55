// SPDX-License-Identifier: Apache-2.0
//
// Selective state-space scan with zero-order-hold discretisation:
//
//   Abar_t = exp(-delta_t * A)      Bbar_t = delta_t * B_t
//   h_t    = Abar_t * h_{t-1} + Bbar_t * x_t,   h_0 = 0
//   y_t    = <C_t, h_t>
//
// A is diagonal, stored as a length-N vector shared by all channels (or as a
// [D, N] table for per-channel dynamics). Every channel carries its own N-dim
// state, so the state of a [L, D] sequence is D x N per step. delta is per
// token and per channel; B_t and C_t are per token and shared across channels.

#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include "ssmamba/ops.hpp"
#include "ssmamba/params.hpp"

namespace ssm {

/// Zero-order-hold discretisation of one step for one channel.
/// Returns (Abar, Bbar), both length N.
template <class T>
std::pair<std::vector<T>, std::vector<T>> discretize(std::span<const T> A, std::span<const T> B_t,
                                                     T delta_t) {
  if (!(delta_t > T(0))) {
    throw std::domain_error("discretize: step size must be positive, got " + std::to_string(delta_t));
  }
  if (A.size() != B_t.size()) throw ShapeError("discretize: A and B_t lengths differ");
  std::vector<T> abar(A.size()), bbar(A.size());
  for (std::size_t n = 0; n < A.size(); ++n) {
    if (A[n] < T(0)) throw std::domain_error("discretize: A must be non-negative");
    abar[n] = std::exp(-delta_t * A[n]);
    bbar[n] = delta_t * B_t[n];
  }
  return {std::move(abar), std::move(bbar)};
}

/// Fused scan primitive.
///   x, delta: [B, L, D]   A: [N] or [D, N]   Bm, Cm: [B, L, N]   ->  y: [B, L, D]
/// All five inputs are differentiable. The forward pass keeps every state
/// h_t for the reverse sweep.
template <class T>
Tensor<T> selective_scan(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& A,
                         const Tensor<T>& Bm, const Tensor<T>& Cm) {
  detail::require_ndim("selective_scan", x.shape(), 3, "x");
  detail::require_ndim("selective_scan", Bm.shape(), 3, "B");
  const std::size_t Bsz = x.dim(0), L = x.dim(1), D = x.dim(2), N = Bm.dim(2);
  if (A.numel() != N && A.numel() != D * N) {
    detail::shape_fail("selective_scan", "A " + shape_str(A.shape()) + " must hold N=" +
                                             std::to_string(N) + " or D*N entries");
  }
  const std::size_t a_row = A.numel() == N ? 0 : N;  // per-channel stride into A
  if (delta.shape() != x.shape()) {
    detail::shape_fail("selective_scan", "delta " + shape_str(delta.shape()) + " must match x " +
                                             shape_str(x.shape()));
  }
  const Shape bc{Bsz, L, N};
  if (Bm.shape() != bc || Cm.shape() != bc) {
    detail::shape_fail("selective_scan", "B/C must be " + shape_str(bc) + ", got " +
                                             shape_str(Bm.shape()) + " / " + shape_str(Cm.shape()));
  }
  const T* xp = x.data().data();
  const T* dp = delta.data().data();
  const T* ap = A.data().data();
  const T* bp = Bm.data().data();
  const T* cp = Cm.data().data();
  for (std::size_t i = 0; i < delta.numel(); ++i) {
    if (!(dp[i] > T(0))) throw std::domain_error("selective_scan: non-positive step size");
  }

  std::vector<T> hist(Bsz * L * D * N);
  std::vector<T> out(Bsz * L * D);
  for (std::size_t b = 0; b < Bsz; ++b) {
    for (std::size_t t = 0; t < L; ++t) {
      const std::size_t row = b * L + t;
      const T* Bt = bp + row * N;
      const T* Ct = cp + row * N;
      T* h = hist.data() + row * D * N;
      const T* hprev = t ? h - D * N : nullptr;
      for (std::size_t c = 0; c < D; ++c) {
        const T dt = dp[row * D + c];
        const T dx = dt * xp[row * D + c];
        T acc = 0;
        for (std::size_t n = 0; n < N; ++n) {
          const T prev = hprev ? hprev[c * N + n] : T(0);
          const T hv = std::exp(-dt * ap[c * a_row + n]) * prev + dx * Bt[n];
          h[c * N + n] = hv;
          acc += Ct[n] * hv;
        }
        out[row * D + c] = acc;
      }
    }
  }
  Tensor<T> y(x.shape(), std::move(out));
  if (detail::recording<T>({&x, &delta, &A, &Bm, &Cm})) {
    detail::record("selective_scan", y, [=, hist = std::move(hist)] {
      const T* g = detail::out_grad(y);
      const T* xp = x.data().data();
      const T* dp = delta.data().data();
      const T* ap = A.data().data();
      const T* bp = Bm.data().data();
      const T* cp = Cm.data().data();
      T* gx = x.requires_grad() ? detail::grad_ptr(x) : nullptr;
      T* gd = delta.requires_grad() ? detail::grad_ptr(delta) : nullptr;
      T* gA = A.requires_grad() ? detail::grad_ptr(A) : nullptr;
      T* gB = Bm.requires_grad() ? detail::grad_ptr(Bm) : nullptr;
      T* gC = Cm.requires_grad() ? detail::grad_ptr(Cm) : nullptr;
      // carry[c, n] holds Abar_{t+1} * dL/dh_{t+1} while sweeping backwards.
      std::vector<T> carry(D * N);
      for (std::size_t b = 0; b < Bsz; ++b) {
        std::fill(carry.begin(), carry.end(), T(0));
        for (std::size_t t = L; t-- > 0;) {
          const std::size_t row = b * L + t;
          const T* Bt = bp + row * N;
          const T* Ct = cp + row * N;
          const T* h = hist.data() + row * D * N;
          const T* hprev = t ? h - D * N : nullptr;
          for (std::size_t c = 0; c < D; ++c) {
            const T gy = g[row * D + c];
            const T dt = dp[row * D + c];
            const T xv = xp[row * D + c];
            T gdt = 0, gxv = 0;
            for (std::size_t n = 0; n < N; ++n) {
              const T gh = carry[c * N + n] + gy * Ct[n];
              const T an = ap[c * a_row + n];
              const T a = std::exp(-dt * an);
              const T prev = hprev ? hprev[c * N + n] : T(0);
              const T ga = gh * prev;
              if (gC) gC[row * N + n] += gy * h[c * N + n];
              if (gA) gA[c * a_row + n] -= ga * a * dt;
              if (gB) gB[row * N + n] += gh * dt * xv;
              gdt += -ga * a * an + gh * Bt[n] * xv;
              gxv += gh * dt * Bt[n];
              carry[c * N + n] = gh * a;
            }
            if (gd) gd[row * D + c] += gdt;
            if (gx) gx[row * D + c] += gxv;
          }
        }
      }
    });
  }
  return y;
}

/// Learnable parameters of one scan direction over a d-channel sequence.
template <class T>
struct SSMParams {
  Tensor<T> log_A;     // [N]; A = exp(log_A) > 0
  Linear<T> proj_delta;  // d -> d, pre-softplus step size
  Linear<T> proj_B;      // d -> N
  Linear<T> proj_C;      // d -> N

  SSMParams() = default;
  SSMParams(Init<T> init, std::size_t d, std::size_t N, bool bias = true) {
    std::vector<T> la(N);
    for (std::size_t n = 0; n < N; ++n) la[n] = static_cast<T>(std::log(double(n + 1)));
    log_A = init.values("log_A", {N}, std::move(la), ParamKind::no_decay);
    proj_delta = Linear<T>(init.scope("proj_delta"), d, d, bias);
    proj_B = Linear<T>(init.scope("proj_B"), d, N, bias);
    proj_C = Linear<T>(init.scope("proj_C"), d, N, bias);
    if (bias) {
      // Initial step sizes log-uniform in [1e-3, 1e-1], stored pre-softplus.
      auto b = proj_delta.bias.mutable_data();
      for (auto& v : b) {
        const double dt = std::exp(init.rng().uniform(std::log(1e-3), std::log(1e-1)));
        v = static_cast<T>(dt + std::log(-std::expm1(-dt)));
      }
    }
  }

  Tensor<T> A() const { return exp(log_A); }

  static std::size_t count(std::size_t d, std::size_t N, bool bias) {
    return N + Linear<T>::count(d, d, bias) + 2 * Linear<T>::count(d, N, bias);
  }
};

/// One causal direction: projections are computed from x itself.
template <class T>
Tensor<T> scan_sequential(const SSMParams<T>& p, const Tensor<T>& x) {
  auto delta = softplus(p.proj_delta(x));
  return selective_scan(x, delta, p.A(), p.proj_B(x), p.proj_C(x));
}

/// Forward scan plus a scan over the reversed sequence, reversed back and
/// summed. Each direction has its own parameters.
template <class T>
Tensor<T> scan_bidirectional(const SSMParams<T>& fwd, const SSMParams<T>& bwd, const Tensor<T>& x) {
  auto forward = scan_sequential(fwd, x);
  auto backward = reverse_axis(scan_sequential(bwd, reverse_axis(x, 1)), 1);
  return add(forward, backward);
}

}  // namespace ssm
