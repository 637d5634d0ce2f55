// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container. All integers little-endian.
//
//   magic       4 bytes  "SSMC"
//   version     u32      = 1
//   phase       u8       0 pretrain, 1 finetune, 2 mil
//   config_len  u64, then config_len bytes of UTF-8 JSON
//   n_tensors   u32, then n_tensors tensor records
//   has_optim   u8; if 1: step u64, n u32, then n tensor records
//
// tensor record:
//   name_len u32, name bytes, dtype u8 (0 float32, 1 float64),
//   ndim u32, dims u64[ndim], numel * sizeof(dtype) raw little-endian bytes

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssmamba/params.hpp"

namespace ssm {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

enum class CheckpointPhase : std::uint8_t { pretrain = 0, finetune = 1, mil = 2 };

inline const char* checkpoint_phase_name(CheckpointPhase p) {
  switch (p) {
    case CheckpointPhase::pretrain: return "pretrain";
    case CheckpointPhase::finetune: return "finetune";
    default: return "mil";
  }
}

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StoredTensor {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<double> values;  // widened copy; f32 values are exactly representable

  std::size_t numel() const { return numel_of(shape); }
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  CheckpointPhase phase = CheckpointPhase::finetune;
  std::string config;  // JSON text
  std::vector<StoredTensor> tensors;
  bool has_optimizer = false;
  std::uint64_t optimizer_step = 0;
  std::vector<StoredTensor> optimizer;

  const StoredTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

namespace detail {

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  template <class U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
  }
  void bytes(const std::string& s) { out_.write(s.data(), static_cast<std::streamsize>(s.size())); }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, std::string what) : in_(in), what_(std::move(what)) {}
  template <class U>
  U uint() {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      const int c = in_.get();
      if (c == EOF) throw CheckpointError(what_ + ": truncated file");
      v |= static_cast<U>(static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i));
    }
    return v;
  }
  std::string bytes(std::uint64_t n) {
    if (n > (std::uint64_t(1) << 32)) throw CheckpointError(what_ + ": implausible length " + std::to_string(n));
    std::string s(n, '\0');
    if (!in_.read(s.data(), static_cast<std::streamsize>(n))) throw CheckpointError(what_ + ": truncated file");
    return s;
  }
  float f32() { return std::bit_cast<float>(uint<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
  const std::string& what() const { return what_; }

 private:
  std::istream& in_;
  std::string what_;
};

inline void write_tensor(Writer& w, const StoredTensor& t) {
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(t.name.size()));
  w.bytes(t.name);
  w.uint<std::uint8_t>(static_cast<std::uint8_t>(t.dtype));
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
  for (auto d : t.shape) w.uint<std::uint64_t>(d);
  if (t.values.size() != t.numel()) throw CheckpointError("tensor " + t.name + ": value count does not match shape");
  for (double v : t.values) t.dtype == DType::f32 ? w.f32(static_cast<float>(v)) : w.f64(v);
}

inline StoredTensor read_tensor(Reader& r) {
  StoredTensor t;
  t.name = r.bytes(r.uint<std::uint32_t>());
  const auto dt = r.uint<std::uint8_t>();
  if (dt > 1) throw CheckpointError(r.what() + ": unknown dtype " + std::to_string(dt) + " for " + t.name);
  t.dtype = static_cast<DType>(dt);
  const auto nd = r.uint<std::uint32_t>();
  if (nd > 8) throw CheckpointError(r.what() + ": implausible rank for " + t.name);
  for (std::uint32_t i = 0; i < nd; ++i) t.shape.push_back(static_cast<std::size_t>(r.uint<std::uint64_t>()));
  const std::size_t n = t.numel();
  if (n > (std::size_t(1) << 31)) throw CheckpointError(r.what() + ": implausible size for " + t.name);
  t.values.resize(n);
  for (auto& v : t.values) v = t.dtype == DType::f32 ? double(r.f32()) : r.f64();
  return t;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + path);
    detail::Writer w(out);
    w.bytes("SSMC");
    w.uint<std::uint32_t>(Checkpoint::kVersion);
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(ck.phase));
    w.uint<std::uint64_t>(ck.config.size());
    w.bytes(ck.config);
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(ck.tensors.size()));
    for (const auto& t : ck.tensors) detail::write_tensor(w, t);
    w.uint<std::uint8_t>(ck.has_optimizer ? 1 : 0);
    if (ck.has_optimizer) {
      w.uint<std::uint64_t>(ck.optimizer_step);
      w.uint<std::uint32_t>(static_cast<std::uint32_t>(ck.optimizer.size()));
      for (const auto& t : ck.optimizer) detail::write_tensor(w, t);
    }
    if (!out) throw CheckpointError("write failed for checkpoint " + path);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  detail::Reader r(in, "checkpoint " + path);
  if (r.bytes(4) != "SSMC") throw CheckpointError(path + " is not a checkpoint (bad magic)");
  Checkpoint ck;
  const auto version = r.uint<std::uint32_t>();
  if (version != Checkpoint::kVersion) {
    throw CheckpointError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto phase = r.uint<std::uint8_t>();
  if (phase > 2) throw CheckpointError(path + ": unknown phase flag " + std::to_string(phase));
  ck.phase = static_cast<CheckpointPhase>(phase);
  ck.config = r.bytes(r.uint<std::uint64_t>());
  const auto n = r.uint<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) ck.tensors.push_back(detail::read_tensor(r));
  ck.has_optimizer = r.uint<std::uint8_t>() != 0;
  if (ck.has_optimizer) {
    ck.optimizer_step = r.uint<std::uint64_t>();
    const auto m = r.uint<std::uint32_t>();
    for (std::uint32_t i = 0; i < m; ++i) ck.optimizer.push_back(detail::read_tensor(r));
  }
  return ck;
}

// --- store <-> checkpoint ---------------------------------------------------

template <class T>
constexpr DType dtype_of() {
  return sizeof(T) == 4 ? DType::f32 : DType::f64;
}

template <class T>
StoredTensor to_stored(const std::string& name, const Tensor<T>& t) {
  StoredTensor s{name, dtype_of<T>(), t.shape(), {}};
  s.values.assign(t.values().begin(), t.values().end());
  return s;
}

/// Every entry of the store, buffers included.
template <class T>
std::vector<StoredTensor> export_store(const ParamStore<T>& store) {
  std::vector<StoredTensor> out;
  for (const auto& e : store.entries()) out.push_back(to_stored(e.name, e.tensor));
  return out;
}

struct ImportReport {
  std::size_t loaded = 0;
  std::vector<std::string> missing;  // store entries the checkpoint did not fill
};

/// Copies checkpoint tensors into the store. `map_name` turns a stored name
/// into a store name, or nullopt to skip it. Every mapped tensor must exist
/// in the store with the same shape. With `strict`, every store entry must
/// also be filled.
template <class T>
ImportReport import_store(const Checkpoint& ck, const ParamStore<T>& store,
                          const std::function<std::optional<std::string>(const std::string&)>& map_name = {},
                          bool strict = true) {
  std::map<std::string, bool> filled;
  for (const auto& e : store.entries()) filled[e.name] = false;
  ImportReport rep;
  for (const auto& t : ck.tensors) {
    const auto target = map_name ? map_name(t.name) : std::optional<std::string>(t.name);
    if (!target) continue;
    if (!store.contains(*target)) throw CheckpointError("checkpoint tensor " + t.name + " has no counterpart in the model");
    auto dst = store.get(*target);
    if (dst.shape() != t.shape) {
      throw CheckpointError("shape mismatch for " + *target + ": checkpoint " + shape_str(t.shape) + ", model " +
                            shape_str(dst.shape()));
    }
    auto d = dst.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(t.values[i]);
    filled[*target] = true;
    ++rep.loaded;
  }
  for (const auto& e : store.entries())
    if (!filled[e.name]) rep.missing.push_back(e.name);
  if (strict && !rep.missing.empty()) throw CheckpointError("checkpoint lacks model tensor " + rep.missing.front());
  return rep;
}

/// Name mapping from a pretraining checkpoint to a bare classifier:
/// keeps encoder weights minus the classification head.
inline std::optional<std::string> pretrained_encoder_name(const std::string& stored) {
  const std::string prefix = "encoder.";
  if (stored.rfind(prefix, 0) != 0) return std::nullopt;
  auto rest = stored.substr(prefix.size());
  if (rest.rfind("head.", 0) == 0) return std::nullopt;
  return rest;
}

/// Loads the encoder of a pretraining checkpoint into a bare classifier
/// store; only the classification head may remain at its initial values.
template <class T>
ImportReport load_pretrained_encoder(const Checkpoint& ck, const ParamStore<T>& store) {
  if (ck.phase != CheckpointPhase::pretrain) throw CheckpointError("expected a pretraining checkpoint");
  auto rep = import_store<T>(ck, store, pretrained_encoder_name, false);
  for (const auto& name : rep.missing)
    if (name.rfind("head.", 0) != 0) throw CheckpointError("pretraining checkpoint lacks encoder tensor " + name);
  return rep;
}

}  // namespace ssm
