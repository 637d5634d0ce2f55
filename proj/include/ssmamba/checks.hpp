// SPDX-License-Identifier: Apache-2.0
//
// Self-check suite behind the `check` subcommand: gradient agreement with
// central differences, the scan against a plain recurrence, parameter-count
// identities, masking, LPR identity and equivariance, metrics against
// brute-force references, and the MIL contract. Reference computations here
// are written directly from the definitions and never call the code under
// test.

#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "ssmamba/backbone.hpp"
#include "ssmamba/dms.hpp"
#include "ssmamba/gradcheck.hpp"
#include "ssmamba/lpr.hpp"
#include "ssmamba/mamim.hpp"
#include "ssmamba/metrics.hpp"
#include "ssmamba/mil.hpp"
#include "ssmamba/scan.hpp"
#include "ssmamba/training.hpp"

namespace ssm::checks {

struct Result {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct Group {
  int id = 0;
  std::string title;
  std::vector<Result> results;
  double seconds = 0;
  bool pass() const {
    for (const auto& r : results)
      if (!r.pass) return false;
    return !results.empty();
  }
};

namespace detail {

template <class T>
Tensor<T> rand_t(Shape s, Rng& rng, double lo = -1, double hi = 1, bool grad = false) {
  std::vector<T> v(numel_of(s));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>(std::move(s), std::move(v), grad);
}

inline Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum(mul(y, rand_t<double>(y.shape(), rng)));
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

inline Result below(const std::string& name, double value, double bound) {
  return {name, value < bound, "max rel err " + num(value) + " (bound " + num(bound) + ")"};
}

/// Sets every non-buffer parameter except log_A to U(-0.5, 0.5) so that no
/// gradient path sits at the difference-quotient noise floor.
inline void unit_scale(const ParamStore<double>& st, Rng& rng) {
  for (const auto& e : st.entries()) {
    if (e.name.find("log_A") != std::string::npos) continue;
    auto t = e.tensor;
    const bool var = e.name.find("running_var") != std::string::npos;
    for (auto& v : t.mutable_data()) v = var ? rng.uniform(0.5, 1.5) : rng.uniform(-0.5, 0.5);
  }
}

inline std::vector<Tensor<double>> trainable(const ParamStore<double>& st) {
  std::vector<Tensor<double>> out;
  for (const auto& e : st.entries())
    if (e.kind != ParamKind::buffer) out.push_back(e.tensor);
  return out;
}

}  // namespace detail

// --- 1: gradients -----------------------------------------------------------

inline Group gradients() {
  using detail::below;
  using detail::probe;
  using detail::rand_t;
  using T = Tensor<double>;
  Group g{1, "gradient oracle suite", {}, 0};
  const double prim = 1e-6, block = 1e-4, deep = 1e-3;

  auto unary = [&](const std::string& name, std::function<T(const T&)> f) {
    Rng rng(1);
    auto x = rand_t<double>({3, 4, 5}, rng, -1, 1, true);
    g.results.push_back(below("primitive " + name, finite_diff_check<double>([&] { return probe(f(x)); }, {x}), prim));
  };
  unary("exp", [](const T& x) { return exp(x); });
  unary("relu", [](const T& x) { return relu(x); });
  unary("silu", [](const T& x) { return silu(x); });
  unary("gelu", [](const T& x) { return gelu(x); });
  unary("softplus", [](const T& x) { return softplus(x); });
  unary("square", [](const T& x) { return square(x); });
  unary("reverse_axis", [](const T& x) { return reverse_axis(x, 1); });
  unary("permute", [](const T& x) { return permute(x, {2, 0, 1}); });
  {
    Rng rng(2);
    auto a = rand_t<double>({3, 4, 5}, rng, -1, 1, true), b = rand_t<double>({3, 4, 1}, rng, -1, 1, true);
    g.results.push_back(
        below("primitive mul (broadcast)", finite_diff_check<double>([&] { return probe(mul(a, b)); }, {a, b}), prim));
  }
  {
    Rng rng(3);
    auto x = rand_t<double>({2, 3, 5}, rng, -1, 1, true), w = rand_t<double>({4, 5}, rng, -1, 1, true),
         b = rand_t<double>({4}, rng, -1, 1, true);
    g.results.push_back(below("primitive linear",
                              finite_diff_check<double>([&] { return probe(linear(x, w, b)); }, {x, w, b}), prim));
  }
  {
    Rng rng(4);
    auto x = rand_t<double>({2, 4, 5, 3}, rng, -1, 1, true), w = rand_t<double>({3, 3, 3}, rng, -1, 1, true);
    g.results.push_back(below("primitive depthwise_conv2d",
                              finite_diff_check<double>([&] { return probe(depthwise_conv2d(x, w)); }, {x, w}), prim));
  }
  {
    Rng rng(5);
    auto x = rand_t<double>({3, 4, 6}, rng, -1, 1, true), ga = rand_t<double>({6}, rng, -1, 1, true),
         be = rand_t<double>({6}, rng, -1, 1, true);
    g.results.push_back(below("primitive layer_norm",
                              finite_diff_check<double>([&] { return probe(layer_norm(x, ga, be)); }, {x, ga, be}),
                              prim));
  }
  {
    Rng rng(6);
    auto x = rand_t<double>({2, 9, 6}, rng, -1, 1, true), dw = rand_t<double>({3, 6}, rng, -1, 1, true),
         pw = rand_t<double>({6, 6}, rng, -1, 1, true);
    g.results.push_back(below("sep_conv1d",
                              finite_diff_check<double>([&] { return probe(sep_conv1d(x, dw, pw)); }, {x, dw, pw}),
                              block));
  }
  {
    ParamStore<double> st;
    Rng rng(7);
    Init<double> init(st, rng);
    SSMParams<double> f(init.scope("f"), 3, 4), b(init.scope("b"), 3, 4);
    auto x = rand_t<double>({1, 7, 3}, rng, -1, 1, true);
    auto leaves = detail::trainable(st);
    leaves.insert(leaves.begin(), x);
    g.results.push_back(below("scan_sequential",
                              finite_diff_check<double>([&] { return probe(scan_sequential(f, x)); }, leaves), block));
    g.results.push_back(below(
        "scan_bidirectional", finite_diff_check<double>([&] { return probe(scan_bidirectional(f, b, x)); }, leaves),
        block));
  }
  {
    ParamStore<double> st;
    Rng rng(8);
    DMSConfig dc;
    dc.channels = 16;
    dc.state_dim = 4;
    DMSBlock<double> blk(Init<double>(st, rng), dc);
    detail::unit_scale(st, rng);
    auto x = rand_t<double>({1, 8, 16}, rng, -1, 1, true);
    auto leaves = detail::trainable(st);
    leaves.insert(leaves.begin(), x);
    g.results.push_back(below("dms_forward", finite_diff_check<double>([&] { return probe(blk(x)); }, leaves), block));
  }
  {
    ParamStore<double> st;
    Rng rng(9);
    LPRConfig lc;
    lc.channels = 8;
    LPRBlock<double> blk(Init<double>(st, rng), lc);
    detail::unit_scale(st, rng);
    auto x = rand_t<double>({2, 4, 4, 8}, rng, -1, 1, true);
    auto leaves = detail::trainable(st);
    leaves.insert(leaves.begin(), x);
    g.results.push_back(
        below("lpr_forward", finite_diff_check<double>([&] { return probe(blk(x, false)); }, leaves), block));
  }
  {
    ParamStore<double> st;
    Rng rng(10);
    DecoderConfig dc;
    dc.dim = 16;
    dc.depth = 1;
    dc.state_dim = 4;
    MaskedModel<double> m(Init<double>(st, rng), presets::tiny(), dc);
    detail::unit_scale(st, rng);
    auto img = rand_t<double>({2, 16, 16, 3}, rng, -1, 1, true);
    const auto masks = make_batch_masks(2, 8, 8, 0.75, 3);
    std::vector<Tensor<double>> leaves{img};
    for (const auto& e : st.entries())
      if (e.kind != ParamKind::buffer && e.name.find(".dms.") == std::string::npos &&
          (e.name.rfind("decoder.", 0) == 0 || e.name == "mask_token" || e.name.rfind("encoder.stem", 0) == 0))
        leaves.push_back(e.tensor);
    const auto target = patchify(img, 2);
    g.results.push_back(below("mamim_loss pipeline",
                              finite_diff_check<double>(
                                  [&] { return mamim_loss(m.reconstruct(img, masks, false), target, masks); }, leaves),
                              deep));
  }
  {
    MILConfig mc;
    mc.dim = 8;
    mc.state_dim = 4;
    mc.embed_dim = 8;
    mc.tasks = {{"c", TaskKind::classification, 3}, {"r", TaskKind::regression, 0}};
    ParamStore<double> st;
    Rng rng(11);
    MILModel<double> m(Init<double>(st, rng), mc);
    auto x = rand_t<double>({1, 4, 8}, rng, -1, 1, true);
    auto leaves = detail::trainable(st);
    leaves.insert(leaves.begin(), x);
    g.results.push_back(below(
        "aggregate (4 tiles, dim 8)",
        finite_diff_check<double>([&] { return *joint_loss(m.forward(x), m.tasks(), {2.0, 0.5}); }, leaves, 1e-3),
        deep));
  }
  return g;
}

// --- 2: scan recurrence -----------------------------------------------------

namespace detail {

// h[c][n] <- exp(-delta A[n]) h[c][n] + delta B[t][n] x[t][c];  y[t][c] = sum_n C[t][n] h[c][n]
inline std::vector<double> recurrence(const std::vector<double>& x, const std::vector<double>& delta,
                                      const std::vector<double>& A, const std::vector<double>& B,
                                      const std::vector<double>& C, std::size_t L, std::size_t D, std::size_t N) {
  std::vector<double> h(D * N, 0.0), y(L * D, 0.0);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t c = 0; c < D; ++c) {
      double acc = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const double d = delta[t * D + c];
        h[c * N + n] = std::exp(-d * A[n]) * h[c * N + n] + d * B[t * N + n] * x[t * D + c];
        acc += C[t * N + n] * h[c * N + n];
      }
      y[t * D + c] = acc;
    }
  return y;
}

inline std::vector<std::vector<double>> abs_jacobian(
    const std::function<Tensor<double>(const Tensor<double>&)>& f, const Tensor<double>& x0) {
  const std::size_t L = x0.dim(1), D = x0.dim(2);
  std::vector<std::vector<double>> jac(L, std::vector<double>(L, 0.0));
  for (std::size_t s = 0; s < L; ++s) {
    auto x = x0.clone(true);
    Tape<double> tape;
    TapeGuard<double> guard(tape);
    auto y = f(x);
    std::vector<double> sel(L * D, 0.0);
    for (std::size_t c = 0; c < D; ++c) sel[s * D + c] = 1.0;
    tape.backward(sum(mul(y, Tensor<double>({1, L, D}, sel))));
    const auto gx = x.grad_tensor();
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t c = 0; c < D; ++c) jac[s][t] += std::abs(gx[t * D + c]);
  }
  return jac;
}

}  // namespace detail

inline Group scan_recurrence() {
  Group g{2, "scan recurrence oracle", {}, 0};
  Rng rng(21);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t L = 1 + rng.below(64), D = 1 + rng.below(8), N = 1 + rng.below(8);
    auto x = detail::rand_t<float>({1, L, D}, rng), dl = detail::rand_t<float>({1, L, D}, rng, 0.01, 1.0);
    auto A = detail::rand_t<float>({N}, rng, 0.05, 3.0);
    auto B = detail::rand_t<float>({1, L, N}, rng), C = detail::rand_t<float>({1, L, N}, rng);
    const auto y = selective_scan(x, dl, A, B, C);
    auto wide = [](const Tensor<float>& t) { return std::vector<double>(t.values().begin(), t.values().end()); };
    const auto ref = detail::recurrence(wide(x), wide(dl), wide(A), wide(B), wide(C), L, D, N);
    for (std::size_t k = 0; k < ref.size(); ++k) worst = std::max(worst, std::abs(ref[k] - double(y[k])));
  }
  g.results.push_back({"100 random instances vs recurrence", worst < 1e-5, "max abs err " + detail::num(worst)});

  ParamStore<double> st;
  Rng prng(22);
  Init<double> init(st, prng);
  SSMParams<double> f(init.scope("f"), 3, 4), b(init.scope("b"), 3, 4);
  const auto x0 = detail::rand_t<double>({1, 10, 3}, prng);
  const auto jc = detail::abs_jacobian([&](const Tensor<double>& v) { return scan_sequential(f, v); }, x0);
  bool causal = true;
  for (std::size_t s = 0; s < 10; ++s)
    for (std::size_t t = s + 1; t < 10; ++t) causal = causal && jc[s][t] == 0.0;
  g.results.push_back({"causal scan: d y[s] / d x[t>s] == 0 exactly", causal && jc[9][0] > 0, ""});
  const auto jb = detail::abs_jacobian([&](const Tensor<double>& v) { return scan_bidirectional(f, b, v); }, x0);
  double future = 0;
  for (std::size_t s = 0; s < 10; ++s)
    for (std::size_t t = s + 1; t < 10; ++t) future += jb[s][t];
  g.results.push_back({"bidirectional scan fails the causality probe", future > 0,
                       "sum |d y[s] / d x[t>s]| = " + detail::num(future)});
  return g;
}

// --- 3: parameter counts ----------------------------------------------------

inline Group param_counts() {
  Group g{3, "parameter-count identities", {}, 0};
  bool ratio = true;
  for (std::size_t C : {2u, 8u, 32u, 96u, 384u})
    for (std::size_t k : {1u, 3u, 5u, 7u}) {
      const auto c = sep_conv_param_counts(C, k);
      // separable / standard == 1/k + 1/C  <=>  separable k C == standard (C + k)
      ratio = ratio && c.separable == k * C + C * C && c.standard == k * C * C &&
              c.separable * k * C == c.standard * (C + k);
    }
  g.results.push_back({"sep-conv / standard-conv == 1/k + 1/C (integer)", ratio, ""});
  bool dw = true;
  for (std::size_t C : {4u, 16u, 96u, 768u}) {
    ParamStore<float> st;
    Rng rng(31);
    LPRConfig lc;
    lc.channels = C;
    LPRBlock<float> blk(Init<float>(st, rng), lc);
    dw = dw && st.contains("dw") && st.get("dw").numel() == lc.kernel * lc.kernel * C / 2;
  }
  g.results.push_back({"LPR depthwise count == k^2 C / 2", dw, ""});
  const std::size_t total = param_count_total(presets::full());
  const bool band = total + kTargetTolerance >= kTargetParams && total <= kTargetParams + kTargetTolerance;
  g.results.push_back({"full preset total within 25.3M +- 1.0M", band, std::to_string(total)});
  return g;
}

// --- 4: masking ---------------------------------------------------------------

inline Group masking() {
  Group g{4, "masking invariants", {}, 0};
  bool count = true;
  for (std::size_t h : {1u, 2u, 7u, 8u, 14u, 56u})
    for (std::size_t w : {1u, 3u, 8u, 14u}) {
      const auto m = make_mask(h, w, 0.75, h * 97 + w);
      const auto want = static_cast<std::size_t>(std::llround(0.75 * double(h * w)));
      std::set<std::size_t> uniq(m.masked.begin(), m.masked.end());
      count = count && m.count() == want && uniq.size() == want && (want == 0 || *uniq.rbegin() < h * w);
    }
  g.results.push_back({"|M| == round(0.75 N) across grids", count, ""});

  Rng rng(41);
  auto pred = detail::rand_t<double>({2, 4, 4, 12}, rng, -1, 1, true);
  const auto target = detail::rand_t<double>({2, 4, 4, 12}, rng);
  const auto masks = make_batch_masks(2, 4, 4, 0.75, 9);
  {
    Tape<double> tape;
    TapeGuard<double> guard(tape);
    tape.backward(mamim_loss(pred, target, masks));
  }
  const auto gp = pred.grad_tensor();
  bool zero_off = true, some_on = false;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < 16; ++t)
      for (std::size_t e = 0; e < 12; ++e) {
        const double v = gp[(b * 16 + t) * 12 + e];
        if (masks[b].contains(t)) some_on = some_on || v != 0.0;
        else zero_off = zero_off && v == 0.0;
      }
  g.results.push_back({"loss gradient exactly zero on unmasked patches", zero_off && some_on, ""});
  const bool same = make_mask(14, 14, 0.75, 5).masked == make_mask(14, 14, 0.75, 5).masked;
  const bool differ = make_mask(14, 14, 0.75, 5).masked != make_mask(14, 14, 0.75, 6).masked;
  g.results.push_back({"mask determinism under seed", same && differ, ""});
  return g;
}

// --- 7: LPR -------------------------------------------------------------------

inline Group lpr_identity() {
  Group g{7, "LPR identity and equivariance", {}, 0};
  {
    ParamStore<float> st;
    Rng rng(71);
    LPRConfig lc;
    lc.channels = 16;
    LPRBlock<float> blk(Init<float>(st, rng), lc);
    const auto x = detail::rand_t<float>({2, 6, 7, 16}, rng);
    g.results.push_back({"zero-initialised expand: output == input bitwise",
                         blk(x, false).values() == x.values() && blk(x, true).values() == x.values(), ""});
  }
  ParamStore<double> st;
  Rng rng(72);
  LPRConfig lc;
  lc.channels = 8;
  LPRBlock<double> blk(Init<double>(st, rng), lc);
  detail::unit_scale(st, rng);
  const std::size_t H = 12, W = 13, C = 8, dy = 2, dx = 3, halo = lc.kernel / 2;
  const auto x = detail::rand_t<double>({1, H, W, C}, rng);
  std::vector<double> rolled(x.numel());
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      for (std::size_t c = 0; c < C; ++c) rolled[(((i + dy) % H) * W + (j + dx) % W) * C + c] = x[(i * W + j) * C + c];
  const auto base = blk.branch(x, false);
  const auto moved = blk.branch(Tensor<double>(x.shape(), rolled), false);
  double worst = 0;
  for (std::size_t i = halo + dy; i + halo < H; ++i)
    for (std::size_t j = halo + dx; j + halo < W; ++j)
      for (std::size_t c = 0; c < C; ++c)
        worst = std::max(worst, std::abs(moved[(i * W + j) * C + c] - base[((i - dy) * W + (j - dx)) * C + c]));
  g.results.push_back({"interior shift-equivariance (eval BN)", worst < 1e-6, "max abs diff " + detail::num(worst)});
  return g;
}

// --- 8: metrics ---------------------------------------------------------------

inline Group metrics_oracles() {
  Group g{8, "metrics correctness", {}, 0};
  Rng rng(81);
  bool exact = true;
  int first_bad = -1;
  for (int inst = 0; inst < 500 && exact; ++inst) {
    const std::size_t n = 2 + rng.below(40);
    std::vector<int> pos(n);
    std::vector<double> s(n);
    for (std::size_t i = 0; i < n; ++i) {
      pos[i] = rng.uniform() < 0.5;
      s[i] = inst % 2 ? double(rng.below(5)) / 4.0 : rng.uniform();
    }
    pos[0] = 1;
    pos[1] = 0;
    double good = 0, pairs = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (pos[i] && !pos[j]) {
          pairs += 1;
          good += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
        }
    if (auc_binary(pos, s) != good / pairs) {
      exact = false;
      first_bad = inst;
    }
  }
  g.results.push_back({"AUC == pairwise oracle on 500 instances", exact,
                       exact ? "" : "first mismatch at instance " + std::to_string(first_bad)});
  double worst = 0;
  for (std::size_t K : {2u, 3u, 6u, 10u}) {
    const auto y = one_hot<double>({0, K - 1, K / 2}, K);
    const double ce = cross_entropy(Tensor<double>::zeros({3, K}), y).item();
    worst = std::max(worst, std::abs(ce - std::log(double(K))));
  }
  g.results.push_back({"CE of uniform logits == ln K", worst < 1e-9, "max abs diff " + detail::num(worst)});
  return g;
}

// --- 9: MIL -------------------------------------------------------------------

inline Group mil_contract() {
  Group g{9, "MIL contract", {}, 0};
  MILConfig mc;
  mc.dim = 16;
  mc.state_dim = 4;
  mc.embed_dim = 6;
  mc.tasks = {{"grade", TaskKind::classification, 6}, {"os", TaskKind::regression, 0}};
  ParamStore<double> st;
  Rng rng(91);
  MILModel<double> m(Init<double>(st, rng), mc);
  Bag bag;
  bag.slide_id = "probe";
  bag.embed_dim = 6;
  for (auto c : rng.sample_without_replacement(100, 12)) bag.coords.push_back({std::int32_t(c / 10), std::int32_t(c % 10)});
  for (std::size_t i = 0; i < 12 * 6; ++i) bag.embeddings.push_back(float(rng.normal()));
  bag.labels = {std::nullopt, 2.0};

  const auto ref = m.forward(bag);
  bool invariant = true;
  for (std::uint64_t s = 0; s < 5; ++s) {
    Bag sh = bag;
    auto p = Rng(s).permutation(12);
    for (std::size_t i = 0; i < 12; ++i) {
      sh.coords[i] = bag.coords[p[i]];
      for (std::size_t e = 0; e < 6; ++e) sh.embeddings[i * 6 + e] = bag.embeddings[p[i] * 6 + e];
    }
    const auto out = m.forward(sh);
    for (const auto& [name, t] : ref) invariant = invariant && out.at(name).values() == t.values();
  }
  g.results.push_back({"shuffle invariance via canonical order", invariant, ""});

  st.zero_grad();
  {
    Tape<double> tape;
    TapeGuard<double> guard(tape);
    tape.backward(*joint_loss(m.forward(bag), m.tasks(), bag.labels));
  }
  bool zero = true, other = false;
  for (const auto& e : st.entries()) {
    double s = 0;
    for (double v : e.tensor.grad()) s += std::abs(v);
    if (e.name.rfind("heads.grade.", 0) == 0) zero = zero && s == 0.0;
    if (e.name.rfind("heads.os.", 0) == 0) other = other || s > 0;
  }
  g.results.push_back({"missing-label task gets exactly zero gradient", zero && other, ""});

  const auto a = predict_with_resampling(m, bag, 15, 5, false, 42);
  const auto b = predict_with_resampling(m, bag, 15, 5, false, 42);
  const auto c = predict_with_resampling(m, bag, 15, 5, false, 43);
  g.results.push_back({"15-round resampling is seed-deterministic", a == b && a != c, ""});
  const auto one = predict_with_resampling(m, bag, 1, 0, false, 7);
  bool degenerate = true;
  for (const auto& [name, t] : ref)
    for (std::size_t i = 0; i < t.numel(); ++i) degenerate = degenerate && one.at(name)[i] == t[i];
  g.results.push_back({"n_rounds = 1 on the full bag equals a plain forward", degenerate, ""});
  return g;
}

/// Runs one group, timing it; an exception becomes a failed result.
inline Group run(const std::function<Group()>& f, int id, const std::string& title) {
  const auto t0 = std::chrono::steady_clock::now();
  Group g;
  try {
    g = f();
  } catch (const std::exception& e) {
    g = Group{id, title, {{"exception", false, e.what()}}, 0};
  }
  g.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return g;
}

/// The groups that need no training: criteria 1, 2, 3, 4, 7, 8 and 9.
inline std::vector<std::pair<int, std::function<Group()>>> invariant_suite() {
  return {{1, gradients}, {2, scan_recurrence}, {3, param_counts}, {4, masking},
          {7, lpr_identity}, {8, metrics_oracles}, {9, mil_contract}};
}

}  // namespace ssm::checks
