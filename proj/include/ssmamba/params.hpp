// SPDX-License-Identifier: Apache-2.0
//
// Named parameter/buffer registry. Every layer registers its tensors here
// under a dotted path; the optimizer, parameter counting and checkpoints all
// work off this table.

#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "ssmamba/ops.hpp"
#include "ssmamba/random.hpp"
#include "ssmamba/tensor.hpp"

namespace ssm {

enum class ParamKind {
  weight,  // trainable, receives weight decay
  no_decay,  // trainable, excluded from decay (biases, norm affine, A, mask token)
  buffer,  // persistent state, not trainable (batch-norm running stats)
};

template <class T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    ParamKind kind;
  };

  Tensor<T> add(const std::string& name, Tensor<T> t, ParamKind kind) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    t.set_requires_grad(kind != ParamKind::buffer);
    index_[name] = entries_.size();
    entries_.push_back({name, t, kind});
    return t;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return entries_[it->second].tensor;
  }
  const std::vector<Entry>& entries() const { return entries_; }

  /// Trainable element count. Buffers are not parameters.
  std::size_t count(const std::string& prefix = "") const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
      if (e.kind != ParamKind::buffer && e.name.rfind(prefix, 0) == 0) n += e.tensor.numel();
    }
    return n;
  }

  void zero_grad() const {
    for (const auto& e : entries_) e.tensor.zero_grad();
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Builder handed to layer constructors: scopes names and draws
/// initial values from a shared stream.
template <class T>
class Init {
 public:
  Init(ParamStore<T>& store, Rng& rng, std::string prefix = "")
      : store_(&store), rng_(&rng), prefix_(std::move(prefix)) {}

  Init scope(const std::string& name) const {
    return Init(*store_, *rng_, prefix_.empty() ? name : prefix_ + "." + name);
  }

  std::string path(const std::string& name) const {
    return prefix_.empty() ? name : prefix_ + "." + name;
  }

  Rng& rng() const { return *rng_; }

  Tensor<T> uniform(const std::string& name, Shape shape, double bound,
                    ParamKind kind = ParamKind::weight) {
    std::vector<T> v(numel_of(shape));
    for (auto& x : v) x = static_cast<T>(rng_->uniform(-bound, bound));
    return store_->add(path(name), Tensor<T>(std::move(shape), std::move(v)), kind);
  }

  Tensor<T> normal(const std::string& name, Shape shape, double stddev,
                   ParamKind kind = ParamKind::weight) {
    std::vector<T> v(numel_of(shape));
    for (auto& x : v) x = static_cast<T>(stddev * rng_->normal());
    return store_->add(path(name), Tensor<T>(std::move(shape), std::move(v)), kind);
  }

  Tensor<T> constant(const std::string& name, Shape shape, T value,
                     ParamKind kind = ParamKind::no_decay) {
    return store_->add(path(name), Tensor<T>::full(std::move(shape), value), kind);
  }

  Tensor<T> values(const std::string& name, Shape shape, std::vector<T> v, ParamKind kind) {
    return store_->add(path(name), Tensor<T>(std::move(shape), std::move(v)), kind);
  }

 private:
  ParamStore<T>* store_;
  Rng* rng_;
  std::string prefix_;
};

// --- Small reusable layers -------------------------------------------------

template <class T>
struct Linear {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out], undefined when bias-free

  Linear() = default;
  Linear(Init<T> init, std::size_t in, std::size_t out, bool with_bias = true, bool zero = false) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = zero ? init.constant("weight", {out, in}, T(0), ParamKind::weight)
                  : init.uniform("weight", {out, in}, bound);
    if (with_bias) bias = init.constant("bias", {out}, T(0));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }

  static std::size_t count(std::size_t in, std::size_t out, bool with_bias) {
    return in * out + (with_bias ? out : 0);
  }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma, beta;

  LayerNorm() = default;
  LayerNorm(Init<T> init, std::size_t dim) {
    gamma = init.constant("gamma", {dim}, T(1));
    beta = init.constant("beta", {dim}, T(0));
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }
  static std::size_t count(std::size_t dim) { return 2 * dim; }
};

template <class T>
struct BatchNorm {
  Tensor<T> gamma, beta;
  mutable BatchNormStats<T> stats;

  BatchNorm() = default;
  BatchNorm(Init<T> init, std::size_t dim) {
    gamma = init.constant("gamma", {dim}, T(1));
    beta = init.constant("beta", {dim}, T(0));
    stats.mean = init.constant("running_mean", {dim}, T(0), ParamKind::buffer);
    stats.var = init.constant("running_var", {dim}, T(1), ParamKind::buffer);
  }
  Tensor<T> operator()(const Tensor<T>& x, bool training) const {
    return batch_norm(x, gamma, beta, stats, training);
  }
  static std::size_t count(std::size_t dim) { return 2 * dim; }
};

}  // namespace ssm
