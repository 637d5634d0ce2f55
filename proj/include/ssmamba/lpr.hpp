// SPDX-License-Identifier: Apache-2.0
//
// Local perception residual (LPR) embedding on [B, H, W, C] maps:
//
//   X_L   = ReLU(BN(PW_{C->C/2}(x)))
//   X_DW  = BN(DW_{kxk}(X_L))
//   out   = PW_{C/2->C}(ReLU(X_DW)) + x
//
// The expanding pointwise conv starts at zero, so a fresh block is the
// identity. The ghost variant (primary + depthwise "ghost" features,
// concatenated, no residual) is available behind LPRConfig::ghost.

#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "ssmamba/ops.hpp"
#include "ssmamba/params.hpp"

namespace ssm {

struct LPRConfig {
  std::size_t channels = 96;
  std::size_t kernel = 3;
  bool ghost = false;

  std::size_t bottleneck() const { return channels / 2; }

  void validate() const {
    if (channels < 2 || channels % 2 != 0) {
      throw std::invalid_argument("LPR: channels must be even, got " + std::to_string(channels));
    }
    if (kernel % 2 == 0) {
      throw std::invalid_argument("LPR: kernel must be odd, got " + std::to_string(kernel));
    }
  }
};

template <class T>
class LPRBlock {
 public:
  LPRBlock() = default;
  LPRBlock(Init<T> init, const LPRConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const std::size_t C = cfg.channels, H = cfg.bottleneck(), k = cfg.kernel;
    compress_ = init.uniform("compress", {H, C}, 1.0 / std::sqrt(double(C)));
    bn_compress_ = BatchNorm<T>(init.scope("bn_compress"), H);
    dw_ = init.uniform("dw", {k, k, H}, 1.0 / double(k));
    bn_dw_ = BatchNorm<T>(init.scope("bn_dw"), H);
    if (!cfg.ghost) expand_ = init.constant("expand", {C, H}, T(0), ParamKind::weight);
  }

  const LPRConfig& config() const { return cfg_; }

  /// X_L: [B, H, W, C] -> [B, H, W, C/2]
  Tensor<T> compress(const Tensor<T>& x, bool training) const {
    check_input(x);
    return relu(bn_compress_(linear(x, compress_), training));
  }

  /// X_DW: depthwise perception of X_L, batch-normalised, before activation.
  Tensor<T> perceive(const Tensor<T>& xl, bool training) const {
    return bn_dw_(depthwise_conv2d(xl, dw_), training);
  }

  /// The non-residual path PW(ReLU(X_DW)).
  Tensor<T> branch(const Tensor<T>& x, bool training) const {
    if (cfg_.ghost) throw std::logic_error("LPR: ghost variant has no residual branch");
    return linear(relu(perceive(compress(x, training), training)), expand_);
  }

  Tensor<T> operator()(const Tensor<T>& x, bool training) const {
    if (cfg_.ghost) {
      auto primary = compress(x, training);
      return concat_last<T>({primary, relu(perceive(primary, training))});
    }
    return add(branch(x, training), x);
  }

  const Tensor<T>& expand_weight() const { return expand_; }
  const Tensor<T>& dw_weight() const { return dw_; }
  const BatchNorm<T>& bn_dw() const { return bn_dw_; }

 private:
  void check_input(const Tensor<T>& x) const {
    if (x.ndim() != 4 || x.dim(3) != cfg_.channels) {
      throw ShapeError("lpr: expected [B, H, W, " + std::to_string(cfg_.channels) + "], got " +
                       shape_str(x.shape()));
    }
  }

  LPRConfig cfg_;
  Tensor<T> compress_;
  BatchNorm<T> bn_compress_;
  Tensor<T> dw_;
  BatchNorm<T> bn_dw_;
  Tensor<T> expand_;
};

inline std::size_t param_count_lpr(const LPRConfig& cfg) {
  cfg.validate();
  const std::size_t C = cfg.channels, H = cfg.bottleneck();
  const std::size_t depthwise = cfg.kernel * cfg.kernel * H;
  const std::size_t expand = cfg.ghost ? 0 : H * C;
  return C * H + BatchNorm<float>::count(H) + depthwise + BatchNorm<float>::count(H) + expand;
}

}  // namespace ssm
