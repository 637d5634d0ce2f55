// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "ssmamba/gradcheck.hpp"
#include "ssmamba/lpr.hpp"

namespace ssm {
namespace {

template <class T>
Tensor<T> rand_t(Shape s, Rng& rng, double lo = -1, double hi = 1, bool grad = false) {
  std::vector<T> v(numel_of(s));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>(std::move(s), std::move(v), grad);
}

template <class T>
void randomize(const ParamStore<T>& st, Rng& rng) {
  for (const auto& e : st.entries()) {
    auto t = e.tensor;
    const bool var = e.name.find("running_var") != std::string::npos;
    for (auto& v : t.mutable_data()) v = static_cast<T>(var ? rng.uniform(0.5, 1.5) : rng.uniform(-0.5, 0.5));
  }
}

LPRConfig cfg_of(std::size_t C, bool ghost = false) {
  LPRConfig c;
  c.channels = C;
  c.ghost = ghost;
  return c;
}

TEST(LPRBlock, FreshBlockIsIdentity) {
  ParamStore<float> st;
  Rng rng(1);
  LPRBlock<float> blk(Init<float>(st, rng), cfg_of(8));
  auto x = rand_t<float>({2, 5, 6, 8}, rng);
  EXPECT_EQ(blk(x, false).values(), x.values());
  EXPECT_EQ(blk(x, true).values(), x.values());
}

TEST(LPRBlock, PreservesShape) {
  ParamStore<float> st;
  Rng rng(2);
  LPRBlock<float> blk(Init<float>(st, rng), cfg_of(96));
  auto x = rand_t<float>({1, 56, 56, 96}, rng);
  EXPECT_EQ(blk(x, false).shape(), (Shape{1, 56, 56, 96}));
  EXPECT_THROW(blk(rand_t<float>({1, 4, 4, 48}, rng), false), ShapeError);
}

TEST(LPRConfig, OddChannelsOrEvenKernelRejected) {
  EXPECT_THROW(cfg_of(7).validate(), std::invalid_argument);
  auto c = cfg_of(8);
  c.kernel = 4;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

Tensor<double> roll(const Tensor<double>& x, std::size_t dy, std::size_t dx) {
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  std::vector<double> out(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j)
        for (std::size_t c = 0; c < C; ++c)
          out[((b * H + (i + dy) % H) * W + (j + dx) % W) * C + c] = x[((b * H + i) * W + j) * C + c];
  return Tensor<double>(x.shape(), std::move(out));
}

TEST(LPRBlock, BranchIsShiftEquivariantInInterior) {
  ParamStore<double> st;
  Rng rng(3);
  const std::size_t C = 8, H = 12, W = 13, dy = 2, dx = 3, h = 1;
  LPRBlock<double> blk(Init<double>(st, rng), cfg_of(C));
  randomize(st, rng);
  auto x = rand_t<double>({1, H, W, C}, rng);
  auto base = blk.branch(x, false);
  auto moved = blk.branch(roll(x, dy, dx), false);
  double worst = 0;
  std::size_t compared = 0;
  for (std::size_t i = h + dy; i + h < H; ++i)
    for (std::size_t j = h + dx; j + h < W; ++j)
      for (std::size_t c = 0; c < C; ++c) {
        const double a = moved[(i * W + j) * C + c];
        const double b = base[((i - dy) * W + (j - dx)) * C + c];
        worst = std::max(worst, std::abs(a - b));
        ++compared;
      }
  EXPECT_GT(compared, 0u);
  EXPECT_LT(worst, 1e-6);
}

TEST(LPRParamCount, SmallConfigByEnumeration) {
  const auto cfg = cfg_of(8);
  ParamStore<float> st;
  Rng rng(4);
  LPRBlock<float> blk(Init<float>(st, rng), cfg);
  std::size_t total = 0, depthwise = 0;
  for (const auto& e : st.entries()) {
    if (e.kind == ParamKind::buffer) continue;
    total += e.tensor.numel();
    if (e.name == "dw") depthwise = e.tensor.numel();
  }
  EXPECT_EQ(depthwise, 9u * 4u);
  const std::size_t standard_at_bottleneck = 9 * 4 * 4;
  EXPECT_EQ(standard_at_bottleneck, 144u);
  EXPECT_EQ(depthwise * 4, standard_at_bottleneck);  // ratio 1 / (C/2)
  // compress 8*4, two BN affines 2*(2*4), depthwise 36, expand 4*8
  EXPECT_EQ(total, 32u + 16u + 36u + 32u);
  EXPECT_EQ(param_count_lpr(cfg), total);
}

TEST(LPRParamCount, ClosedFormMatchesEnumerationAcrossWidths) {
  for (std::size_t C : {4u, 16u, 96u, 768u})
    for (bool ghost : {false, true}) {
      ParamStore<float> st;
      Rng rng(5);
      LPRBlock<float> blk(Init<float>(st, rng), cfg_of(C, ghost));
      EXPECT_EQ(param_count_lpr(cfg_of(C, ghost)), st.count()) << "C=" << C;
    }
}

TEST(LPRBlock, DepthwiseStageKeepsChannelsApart) {
  ParamStore<double> st;
  Rng rng(6);
  const std::size_t C = 8, Hc = 4, keep = 2;
  LPRBlock<double> blk(Init<double>(st, rng), cfg_of(C));
  randomize(st, rng);
  auto xl = rand_t<double>({1, 5, 5, Hc}, rng);
  for (std::size_t i = 0; i < 25; ++i)
    for (std::size_t c = 0; c < Hc; ++c)
      if (c != keep) xl.mutable_data()[i * Hc + c] = 0.0;
  auto y = blk.perceive(xl, false);
  const auto& bn = blk.bn_dw();
  for (std::size_t c = 0; c < Hc; ++c) {
    if (c == keep) continue;
    const double shift = bn.beta[c] - bn.gamma[c] * bn.stats.mean[c] / std::sqrt(bn.stats.var[c] + 1e-5);
    for (std::size_t i = 0; i < 25; ++i) EXPECT_NEAR(y[i * Hc + c], shift, 1e-12);
  }
}

TEST(LPRBlock, ResidualGradientIsExactlyOnesAtInit) {
  ParamStore<double> st;
  Rng rng(7);
  LPRBlock<double> blk(Init<double>(st, rng), cfg_of(8));
  auto x = rand_t<double>({2, 4, 4, 8}, rng, -1, 1, true);
  Tape<double> tape;
  TapeGuard<double> g(tape);
  tape.backward(sum(blk(x, false)));
  for (double v : x.grad()) EXPECT_EQ(v, 1.0);
}

TEST(LPRBlockGrad, FiniteDifferencesEvalAndTrainMode) {
  for (bool training : {false, true}) {
    ParamStore<double> st;
    Rng rng(8);
    LPRBlock<double> blk(Init<double>(st, rng), cfg_of(8));
    randomize(st, rng);
    auto x = rand_t<double>({2, 4, 4, 8}, rng, -1, 1, true);
    auto w = rand_t<double>({2, 4, 4, 8}, rng);
    std::vector<Tensor<double>> leaves{x};
    for (const auto& e : st.entries())
      if (e.kind != ParamKind::buffer) leaves.push_back(e.tensor);
    EXPECT_LT(finite_diff_check<double>([&] { return sum(mul(blk(x, training), w)); }, leaves), 1e-4)
        << (training ? "train" : "eval");
  }
}

TEST(LPRGhost, ConcatenatesPrimaryAndGhostFeatures) {
  ParamStore<float> st;
  Rng rng(9);
  LPRBlock<float> blk(Init<float>(st, rng), cfg_of(8, true));
  auto x = rand_t<float>({1, 4, 4, 8}, rng);
  auto y = blk(x, false);
  EXPECT_EQ(y.shape(), x.shape());
  auto primary = blk.compress(x, false);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y[i * 8 + c], primary[i * 4 + c]);
  EXPECT_THROW(blk.branch(x, false), std::logic_error);
  EXPECT_FALSE(st.contains("expand"));
}

}  // namespace
}  // namespace ssm
