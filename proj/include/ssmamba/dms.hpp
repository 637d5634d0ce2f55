// SPDX-License-Identifier: Apache-2.0
//
// Directional multi-scale (DMS) token mixer.
//
//   P1 = Linear_{C->C/2}(x)                      P2 = Linear_{C->C/2}(x)
//   X1 = BiScan(SiLU(SepConv1d(P1)))             X2 = SiLU(RegConv1d(P2))
//   out = Linear_{C->C}(X1 ++ X2)
//
// Both projections read the full input. The scan's step size and B/C
// projections are computed from the activated separable-conv output.

#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "ssmamba/ops.hpp"
#include "ssmamba/params.hpp"
#include "ssmamba/scan.hpp"

namespace ssm {

struct DMSConfig {
  std::size_t channels = 96;
  std::size_t state_dim = 16;
  std::size_t kernel = 3;      // depthwise kernel of the separable conv
  std::size_t reg_kernel = 3;  // regular conv of the parallel branch
  bool bias = true;            // biases on linear layers (never on conv kernels)
  bool zero_init_out = false;

  std::size_t half() const { return channels / 2; }

  void validate() const {
    if (channels < 2 || channels % 2 != 0) {
      throw std::invalid_argument("DMS: channels must be even, got " + std::to_string(channels));
    }
    if (kernel % 2 == 0 || reg_kernel % 2 == 0) {
      throw std::invalid_argument("DMS: kernel sizes must be odd (got " + std::to_string(kernel) +
                                  ", " + std::to_string(reg_kernel) + ")");
    }
    if (state_dim == 0) throw std::invalid_argument("DMS: state_dim must be positive");
  }
};

/// Depthwise (per-channel, centered) filtering followed by pointwise mixing.
/// x: [B, L, C'], w_dw: [k, C'], w_pw: [C', C'].
template <class T>
Tensor<T> sep_conv1d(const Tensor<T>& x, const Tensor<T>& w_dw, const Tensor<T>& w_pw) {
  if (w_dw.ndim() != 2 || w_dw.dim(0) % 2 == 0) {
    throw std::invalid_argument("sep_conv1d: depthwise kernel size must be odd, got " +
                                shape_str(w_dw.shape()));
  }
  return linear(depthwise_conv1d(x, w_dw, Padding::centered), w_pw);
}

/// Weights in a bias-free separable conv and in the standard conv it replaces.
struct ConvParamCounts {
  std::size_t separable;
  std::size_t standard;
};

inline ConvParamCounts sep_conv_param_counts(std::size_t channels, std::size_t k) {
  return {channels * k + channels * channels, channels * channels * k};
}

template <class T>
class DMSBlock {
 public:
  DMSBlock() = default;
  DMSBlock(Init<T> init, const DMSConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const std::size_t C = cfg.channels, H = cfg.half();
    proj_scan_ = Linear<T>(init.scope("proj_scan"), C, H, cfg.bias);
    proj_conv_ = Linear<T>(init.scope("proj_conv"), C, H, cfg.bias);
    sep_dw_ = init.uniform("sep_dw", {cfg.kernel, H}, 1.0 / std::sqrt(double(cfg.kernel)));
    sep_pw_ = init.uniform("sep_pw", {H, H}, 1.0 / std::sqrt(double(H)));
    ssm_fwd_ = SSMParams<T>(init.scope("ssm_fwd"), H, cfg.state_dim, cfg.bias);
    ssm_bwd_ = SSMParams<T>(init.scope("ssm_bwd"), H, cfg.state_dim, cfg.bias);
    reg_conv_ = init.uniform("reg_conv", {H, cfg.reg_kernel, H},
                             1.0 / std::sqrt(double(H * cfg.reg_kernel)));
    out_ = Linear<T>(init.scope("out"), C, C, cfg.bias, cfg.zero_init_out);
  }

  const DMSConfig& config() const { return cfg_; }

  struct Branches {
    Tensor<T> scan;  // X1: [B, L, C/2]
    Tensor<T> conv;  // X2: [B, L, C/2]
  };

  Branches branches(const Tensor<T>& x) const {
    check_input(x);
    auto p1 = proj_scan_(x);
    auto u = silu(sep_conv1d(p1, sep_dw_, sep_pw_));
    auto x1 = scan_bidirectional(ssm_fwd_, ssm_bwd_, u);
    auto x2 = silu(conv1d(proj_conv_(x), reg_conv_));
    return {x1, x2};
  }

  /// [B, L, C] -> [B, L, C]
  Tensor<T> operator()(const Tensor<T>& x) const {
    auto br = branches(x);
    return out_(concat_last<T>({br.scan, br.conv}));
  }

  const Linear<T>& proj_scan() const { return proj_scan_; }
  const Linear<T>& proj_conv() const { return proj_conv_; }
  const Tensor<T>& sep_dw() const { return sep_dw_; }
  const Tensor<T>& sep_pw() const { return sep_pw_; }
  const SSMParams<T>& ssm_fwd() const { return ssm_fwd_; }
  const SSMParams<T>& ssm_bwd() const { return ssm_bwd_; }
  const Tensor<T>& reg_conv() const { return reg_conv_; }
  const Linear<T>& out() const { return out_; }

 private:
  void check_input(const Tensor<T>& x) const {
    if (x.ndim() != 3 || x.dim(2) != cfg_.channels) {
      throw ShapeError("dms: expected [B, L, " + std::to_string(cfg_.channels) + "], got " +
                       shape_str(x.shape()));
    }
  }

  DMSConfig cfg_;
  Linear<T> proj_scan_, proj_conv_;
  Tensor<T> sep_dw_, sep_pw_;
  SSMParams<T> ssm_fwd_, ssm_bwd_;
  Tensor<T> reg_conv_;
  Linear<T> out_;
};

/// Closed-form parameter count of a DMS block.
inline std::size_t param_count_dms(const DMSConfig& cfg) {
  cfg.validate();
  const std::size_t C = cfg.channels, H = cfg.half();
  const std::size_t in_proj = 2 * Linear<float>::count(C, H, cfg.bias);
  const std::size_t sep = sep_conv_param_counts(H, cfg.kernel).separable;
  const std::size_t reg = H * H * cfg.reg_kernel;
  const std::size_t ssm = 2 * SSMParams<float>::count(H, cfg.state_dim, cfg.bias);
  const std::size_t out = Linear<float>::count(C, C, cfg.bias);
  return in_proj + sep + reg + ssm + out;
}

// ---------------------------------------------------------------------------
// Vanilla (unidirectional) Mamba block, the reference design DMS replaces:
// in-projection to an expanded inner width plus gate, causal depthwise conv,
// one forward scan with per-channel A and skip D, gated output projection.
// Hyperparameters follow the reference Mamba defaults.
// ---------------------------------------------------------------------------

struct MambaConfig {
  std::size_t channels = 96;
  std::size_t state_dim = 16;
  std::size_t expand = 2;
  std::size_t conv_kernel = 4;

  std::size_t inner() const { return expand * channels; }
  std::size_t dt_rank() const { return (channels + 15) / 16; }
};

template <class T>
class MambaBlock {
 public:
  MambaBlock() = default;
  MambaBlock(Init<T> init, const MambaConfig& cfg) : cfg_(cfg) {
    const std::size_t C = cfg.channels, E = cfg.inner(), N = cfg.state_dim, R = cfg.dt_rank();
    in_proj_ = Linear<T>(init.scope("in_proj"), C, 2 * E, false);
    conv_w_ = init.uniform("conv_w", {cfg.conv_kernel, E}, 1.0 / std::sqrt(double(cfg.conv_kernel)));
    conv_b_ = init.constant("conv_b", {E}, T(0));
    x_proj_ = Linear<T>(init.scope("x_proj"), E, R + 2 * N, false);
    dt_proj_ = Linear<T>(init.scope("dt_proj"), R, E, true);
    std::vector<T> la(E * N);
    for (std::size_t c = 0; c < E; ++c)
      for (std::size_t n = 0; n < N; ++n) la[c * N + n] = static_cast<T>(std::log(double(n + 1)));
    log_A_ = init.values("log_A", {E, N}, std::move(la), ParamKind::no_decay);
    D_ = init.constant("D", {E}, T(1));
    out_proj_ = Linear<T>(init.scope("out_proj"), E, C, false);
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    const std::size_t E = cfg_.inner(), N = cfg_.state_dim, R = cfg_.dt_rank();
    auto xz = split_last(in_proj_(x), {E, E});
    auto u = gelu(add_channels(depthwise_conv1d(xz[0], conv_w_, Padding::causal), conv_b_));
    auto parts = split_last(x_proj_(u), {R, N, N});
    auto delta = softplus(dt_proj_(parts[0]));
    auto y = selective_scan(u, delta, exp(log_A_), parts[1], parts[2]);
    y = add(y, mul_channels(u, D_));
    return out_proj_(mul(y, gelu(xz[1])));
  }

  static std::size_t count(const MambaConfig& cfg) {
    const std::size_t C = cfg.channels, E = cfg.inner(), N = cfg.state_dim, R = cfg.dt_rank();
    return C * 2 * E + cfg.conv_kernel * E + E + E * (R + 2 * N) + R * E + E + E * N + E + E * C;
  }

 private:
  MambaConfig cfg_;
  Linear<T> in_proj_;
  Tensor<T> conv_w_, conv_b_;
  Linear<T> x_proj_, dt_proj_;
  Tensor<T> log_A_, D_;
  Linear<T> out_proj_;
};

}  // namespace ssm
