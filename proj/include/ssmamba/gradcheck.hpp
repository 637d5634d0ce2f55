// SPDX-License-Identifier: Apache-2.0
//
// Central-difference gradient oracle.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "ssmamba/tensor.hpp"

namespace ssm {

/// Largest elementwise relative error between the tape gradient of `fn` with
/// respect to each tensor in `leaves` and its central difference:
///   |analytic - fd| / max(|analytic|, |fd|, 1e-8).
/// `fn` must produce a single-element tensor; the leaves are perturbed in
/// place and restored.
template <class T>
double finite_diff_check(const std::function<Tensor<T>()>& fn, std::vector<Tensor<T>> leaves,
                         double eps = 1e-5) {
  for (auto& l : leaves) {
    l.zero_grad();
    l.set_requires_grad(true);
  }
  {
    Tape<T> tape;
    TapeGuard<T> guard(tape);
    auto out = fn();
    if (out.numel() != 1) {
      throw ShapeError("finite_diff_check: fn must return a scalar, got " + shape_str(out.shape()));
    }
    tape.backward(out);
  }
  auto eval = [&] {
    NoGradGuard<T> no_grad;
    return static_cast<double>(fn().item());
  };
  double worst = 0.0;
  for (auto& l : leaves) {
    const auto analytic = l.grad_tensor();
    auto v = l.mutable_data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const T saved = v[i];
      v[i] = static_cast<T>(saved + eps);
      const double up = eval();
      v[i] = static_cast<T>(saved - eps);
      const double down = eval();
      v[i] = saved;
      const double fd = (up - down) / (2.0 * eps);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(fd), 1e-8});
      worst = std::max(worst, std::abs(a - fd) / denom);
    }
  }
  return worst;
}

/// Single-input form: fn maps `input` to a scalar.
template <class T>
double finite_diff_check(const std::function<Tensor<T>(const Tensor<T>&)>& fn, Tensor<T> input,
                         double eps = 1e-5) {
  return finite_diff_check<T>([&] { return fn(input); }, std::vector<Tensor<T>>{input}, eps);
}

}  // namespace ssm
