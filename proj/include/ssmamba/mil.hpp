// SPDX-License-Identifier: Apache-2.0
//
// Slide-level multi-task prediction over bags of precomputed tile
// embeddings: projection, a stack of DMS blocks over the tile sequence,
// global average pooling and one head per task.
//
// Bag file, little-endian:
//   magic     4 bytes "SSMB"
//   version   u32 = 1
//   embed_dim u32
//   n_tiles   u32
//   coords    n_tiles x (i32 row, i32 col)
//   values    n_tiles x embed_dim float32, row-major
//
// Manifest: tab-separated text with a header row
//   slide_id <TAB> bag_path <TAB> task columns...
// where each task column is named "name:cls:K" (K classes, labels 0..K-1)
// or "name:reg" (real value). An empty cell or "NA" marks a missing label.
// Relative bag paths resolve against the manifest's directory.

#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ssmamba/checkpoint.hpp"
#include "ssmamba/dms.hpp"
#include "ssmamba/metrics.hpp"
#include "ssmamba/training.hpp"

namespace ssm {

using json = nlohmann::ordered_json;

enum class TaskKind { classification, regression };

struct TaskSpec {
  std::string name;
  TaskKind kind = TaskKind::classification;
  std::size_t num_classes = 2;

  std::size_t outputs() const { return kind == TaskKind::classification ? num_classes : 1; }
};

inline void validate_tasks(const std::vector<TaskSpec>& tasks) {
  if (tasks.empty()) throw std::invalid_argument("at least one task is required");
  std::set<std::string> names;
  for (const auto& t : tasks) {
    if (t.name.empty()) throw std::invalid_argument("task with an empty name");
    if (!names.insert(t.name).second) throw std::invalid_argument("duplicate task name " + t.name);
    if (t.kind == TaskKind::classification && t.num_classes < 2) {
      throw std::invalid_argument("task " + t.name + " needs at least 2 classes");
    }
  }
}

/// "name:cls:K" or "name:reg".
inline TaskSpec parse_task_column(const std::string& col) {
  const auto a = col.find(':');
  if (a == std::string::npos || a == 0) throw std::invalid_argument("bad task column '" + col + "'");
  TaskSpec t;
  t.name = col.substr(0, a);
  const auto rest = col.substr(a + 1);
  if (rest == "reg") {
    t.kind = TaskKind::regression;
    t.num_classes = 0;
  } else if (rest.rfind("cls:", 0) == 0) {
    t.kind = TaskKind::classification;
    try {
      std::size_t used = 0;
      const auto k = std::stoul(rest.substr(4), &used);
      if (used != rest.size() - 4) throw std::invalid_argument("");
      t.num_classes = k;
    } catch (const std::exception&) {
      throw std::invalid_argument("bad class count in task column '" + col + "'");
    }
  } else {
    throw std::invalid_argument("task column '" + col + "' must end in :reg or :cls:K");
  }
  return t;
}

inline std::string task_column(const TaskSpec& t) {
  return t.kind == TaskKind::regression ? t.name + ":reg" : t.name + ":cls:" + std::to_string(t.num_classes);
}

inline json to_json(const TaskSpec& t) { return task_column(t); }
inline TaskSpec task_from_json(const json& j) { return parse_task_column(j.get<std::string>()); }

struct MILConfig {
  std::size_t dim = 64;
  std::size_t depth = 2;
  std::size_t state_dim = 8;
  std::size_t kernel = 3;
  std::size_t rounds = 15;
  std::size_t tiles_per_round = 0;  // 0: whole bag each round
  bool with_replacement = false;
  std::size_t embed_dim = 0;  // taken from the bag files
  std::vector<TaskSpec> tasks;
};

inline json to_json(const MILConfig& m) {
  json tasks = json::array();
  for (const auto& t : m.tasks) tasks.push_back(to_json(t));
  return {{"dim", m.dim},
          {"depth", m.depth},
          {"state_dim", m.state_dim},
          {"kernel", m.kernel},
          {"rounds", m.rounds},
          {"tiles_per_round", m.tiles_per_round},
          {"with_replacement", m.with_replacement},
          {"embed_dim", m.embed_dim},
          {"tasks", tasks}};
}

inline MILConfig mil_from_json(const json& j) {
  MILConfig m;
  m.dim = j.at("dim").get<std::size_t>();
  m.depth = j.at("depth").get<std::size_t>();
  m.state_dim = j.at("state_dim").get<std::size_t>();
  m.kernel = j.at("kernel").get<std::size_t>();
  m.rounds = j.at("rounds").get<std::size_t>();
  m.tiles_per_round = j.at("tiles_per_round").get<std::size_t>();
  m.with_replacement = j.at("with_replacement").get<bool>();
  m.embed_dim = j.at("embed_dim").get<std::size_t>();
  for (const auto& t : j.at("tasks")) m.tasks.push_back(task_from_json(t));
  return m;
}

// --- bags -------------------------------------------------------------------

struct TileCoord {
  std::int32_t row = 0, col = 0;
  auto operator<=>(const TileCoord&) const = default;
};

struct Bag {
  std::string slide_id;
  std::size_t embed_dim = 0;
  std::vector<float> embeddings;  // n_tiles x embed_dim
  std::vector<TileCoord> coords;
  std::vector<std::optional<double>> labels;  // one per task

  std::size_t tiles() const { return coords.size(); }

  void validate() const {
    if (coords.empty()) throw std::invalid_argument("bag " + slide_id + " is empty");
    if (embed_dim == 0) throw std::invalid_argument("bag " + slide_id + ": embed_dim is 0");
    if (embeddings.size() != coords.size() * embed_dim) {
      throw std::invalid_argument("bag " + slide_id + ": embedding matrix does not match n_tiles x embed_dim");
    }
    std::set<TileCoord> seen;
    for (const auto& c : coords)
      if (!seen.insert(c).second) {
        throw std::invalid_argument("bag " + slide_id + ": duplicate tile coordinate (" + std::to_string(c.row) +
                                    ", " + std::to_string(c.col) + ")");
      }
  }
};

/// Tile order (row, then column) used before every forward pass.
inline std::vector<std::size_t> canonical_order(const std::vector<TileCoord>& coords,
                                                std::vector<std::size_t> idx = {}) {
  if (idx.empty()) {
    idx.resize(coords.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  }
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return coords[a] < coords[b]; });
  return idx;
}

/// [1, k, embed_dim] tensor of the chosen tiles, in the given order.
template <class T>
Tensor<T> bag_tensor(const Bag& bag, const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw std::invalid_argument("bag " + bag.slide_id + ": no tiles selected");
  const std::size_t E = bag.embed_dim;
  std::vector<T> v;
  v.reserve(idx.size() * E);
  for (auto i : idx)
    for (std::size_t e = 0; e < E; ++e) v.push_back(static_cast<T>(bag.embeddings.at(i * E + e)));
  return Tensor<T>({1, idx.size(), E}, std::move(v));
}

template <class T>
Tensor<T> bag_tensor(const Bag& bag) {
  return bag_tensor<T>(bag, canonical_order(bag.coords));
}

inline void write_bag(const std::string& path, const Bag& bag) {
  bag.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write bag " + path);
  detail::Writer w(out);
  w.bytes("SSMB");
  w.uint<std::uint32_t>(1);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(bag.embed_dim));
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(bag.tiles()));
  for (const auto& c : bag.coords) {
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(c.row));
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(c.col));
  }
  for (float v : bag.embeddings) w.f32(v);
  if (!out) throw std::runtime_error("write failed for bag " + path);
}

/// Reads embeddings and coordinates; labels come from the manifest.
inline Bag read_bag(const std::string& path, const std::string& slide_id = "") {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open bag " + path);
  detail::Reader r(in, "bag " + path);
  if (r.bytes(4) != "SSMB") throw std::runtime_error(path + " is not a bag file (bad magic)");
  const auto version = r.uint<std::uint32_t>();
  if (version != 1) throw std::runtime_error(path + ": unsupported bag version " + std::to_string(version));
  Bag bag;
  bag.slide_id = slide_id.empty() ? std::filesystem::path(path).stem().string() : slide_id;
  bag.embed_dim = r.uint<std::uint32_t>();
  const auto n = r.uint<std::uint32_t>();
  if (std::uint64_t(n) * bag.embed_dim > (std::uint64_t(1) << 31)) throw std::runtime_error(path + ": implausible size");
  bag.coords.resize(n);
  for (auto& c : bag.coords) {
    c.row = static_cast<std::int32_t>(r.uint<std::uint32_t>());
    c.col = static_cast<std::int32_t>(r.uint<std::uint32_t>());
  }
  bag.embeddings.resize(std::size_t(n) * bag.embed_dim);
  for (auto& v : bag.embeddings) v = r.f32();
  bag.validate();
  return bag;
}

struct BagManifest {
  std::vector<TaskSpec> tasks;
  struct Row {
    std::string slide_id, bag_path;  // bag_path resolved
    std::vector<std::optional<double>> labels;
  };
  std::vector<Row> rows;
};

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, '\t')) out.push_back(cell);
  if (!line.empty() && line.back() == '\t') out.emplace_back();
  return out;
}

inline BagManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path);
  const auto base = std::filesystem::path(path).parent_path();
  BagManifest m;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& msg) {
    throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto cells = split_tabs(line);
    if (m.tasks.empty()) {
      if (cells.size() < 3 || cells[0] != "slide_id" || cells[1] != "bag_path") {
        fail("header must be slide_id, bag_path, then at least one task column");
      }
      try {
        for (std::size_t i = 2; i < cells.size(); ++i) m.tasks.push_back(parse_task_column(cells[i]));
        validate_tasks(m.tasks);
      } catch (const std::invalid_argument& e) {
        fail(e.what());
      }
      continue;
    }
    cells.resize(std::max(cells.size(), m.tasks.size() + 2));
    if (cells.size() != m.tasks.size() + 2) fail("expected " + std::to_string(m.tasks.size() + 2) + " columns");
    BagManifest::Row row;
    row.slide_id = cells[0];
    if (row.slide_id.empty() || cells[1].empty()) fail("missing slide id or bag path");
    const std::filesystem::path p(cells[1]);
    row.bag_path = (p.is_absolute() ? p : base / p).string();
    for (std::size_t t = 0; t < m.tasks.size(); ++t) {
      const auto& c = cells[t + 2];
      if (c.empty() || c == "NA") {
        row.labels.emplace_back();
        continue;
      }
      double v = 0;
      try {
        std::size_t used = 0;
        v = std::stod(c, &used);
        if (used != c.size()) throw std::invalid_argument("");
      } catch (const std::exception&) {
        fail("label '" + c + "' for task " + m.tasks[t].name + " is not a number");
      }
      if (m.tasks[t].kind == TaskKind::classification &&
          (v != std::floor(v) || v < 0 || v >= double(m.tasks[t].num_classes))) {
        fail("label " + c + " out of range for task " + m.tasks[t].name);
      }
      row.labels.push_back(v);
    }
    m.rows.push_back(std::move(row));
  }
  if (m.tasks.empty()) throw std::runtime_error(path + ": empty manifest");
  return m;
}

inline void write_manifest(const std::string& path, const BagManifest& m) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest " + path);
  out << "slide_id\tbag_path";
  for (const auto& t : m.tasks) out << '\t' << task_column(t);
  out << '\n';
  for (const auto& r : m.rows) {
    out << r.slide_id << '\t' << r.bag_path;
    for (const auto& l : r.labels) {
      out << '\t';
      if (l) {
        std::ostringstream s;
        s.precision(17);
        s << *l;
        out << s.str();
      } else {
        out << "NA";
      }
    }
    out << '\n';
  }
}

/// Reads every bag named in a manifest and attaches its labels.
inline std::vector<Bag> load_bags(const BagManifest& m) {
  std::vector<Bag> bags;
  for (const auto& r : m.rows) {
    auto b = read_bag(r.bag_path, r.slide_id);
    b.labels = r.labels;
    if (!bags.empty() && b.embed_dim != bags.front().embed_dim) {
      throw std::runtime_error("bag " + r.slide_id + " has embed_dim " + std::to_string(b.embed_dim) + ", expected " +
                               std::to_string(bags.front().embed_dim));
    }
    bags.push_back(std::move(b));
  }
  if (bags.empty()) throw std::runtime_error("manifest lists no bags");
  return bags;
}

// --- model ------------------------------------------------------------------

template <class T>
class MILModel {
 public:
  MILModel() = default;
  MILModel(Init<T> init, const MILConfig& cfg) : cfg_(cfg) {
    validate_tasks(cfg.tasks);
    if (cfg.embed_dim == 0) throw std::invalid_argument("MIL model: embed_dim not set");
    if (cfg.dim % 2 != 0) throw std::invalid_argument("MIL model: dim must be even");
    const std::size_t D = cfg.dim;
    proj_ = Linear<T>(init.scope("proj"), cfg.embed_dim, D);
    for (std::size_t b = 0; b < cfg.depth; ++b) {
      auto blk = init.scope("block" + std::to_string(b));
      norms_.emplace_back(blk.scope("norm"), D);
      DMSConfig dc;
      dc.channels = D;
      dc.state_dim = cfg.state_dim;
      dc.kernel = cfg.kernel;
      dc.reg_kernel = cfg.kernel;
      blocks_.emplace_back(blk.scope("dms"), dc);
    }
    norm_ = LayerNorm<T>(init.scope("norm"), D);
    auto heads = init.scope("heads");
    for (const auto& t : cfg.tasks) heads_.emplace_back(heads.scope(t.name), D, t.outputs());
  }

  /// Tile sequence [B, n, embed_dim] -> slide vectors [B, dim].
  Tensor<T> aggregate(const Tensor<T>& tiles) const {
    if (tiles.ndim() != 3 || tiles.dim(2) != cfg_.embed_dim) {
      throw ShapeError("MIL aggregate: expected [B, n, " + std::to_string(cfg_.embed_dim) + "], got " +
                       shape_str(tiles.shape()));
    }
    if (tiles.dim(1) == 0) throw std::invalid_argument("MIL aggregate: empty bag");
    auto seq = proj_(tiles);
    for (std::size_t b = 0; b < blocks_.size(); ++b) seq = add(seq, blocks_[b](norms_[b](seq)));
    return global_avg_pool(norm_(seq));
  }

  /// Per-task outputs [B, K] (classification logits) or [B, 1].
  std::map<std::string, Tensor<T>> heads(const Tensor<T>& slide) const {
    std::map<std::string, Tensor<T>> out;
    for (std::size_t t = 0; t < heads_.size(); ++t) out.emplace(cfg_.tasks[t].name, heads_[t](slide));
    return out;
  }

  Tensor<T> head(const std::string& task, const Tensor<T>& slide) const { return heads_.at(task_index(task))(slide); }

  std::map<std::string, Tensor<T>> forward(const Tensor<T>& tiles) const { return heads(aggregate(tiles)); }

  /// Canonical order applied first.
  std::map<std::string, Tensor<T>> forward(const Bag& bag) const { return forward(bag_tensor<T>(bag)); }

  std::size_t task_index(const std::string& name) const {
    for (std::size_t t = 0; t < cfg_.tasks.size(); ++t)
      if (cfg_.tasks[t].name == name) return t;
    throw std::invalid_argument("unknown task " + name);
  }

  const MILConfig& config() const { return cfg_; }
  const std::vector<TaskSpec>& tasks() const { return cfg_.tasks; }

 private:
  MILConfig cfg_;
  Linear<T> proj_;
  std::vector<LayerNorm<T>> norms_;
  std::vector<DMSBlock<T>> blocks_;
  LayerNorm<T> norm_;
  std::vector<Linear<T>> heads_;
};

/// Sum over tasks with a label of CE (classification) or MAE (regression).
/// Unlabelled tasks, or tasks whose weight is 0, add nothing and send no
/// gradient into their heads. Outputs are [1, K]; returns nullopt when no
/// task contributes.
template <class T>
std::optional<Tensor<T>> joint_loss(const std::map<std::string, Tensor<T>>& outputs, const std::vector<TaskSpec>& tasks,
                                    const std::vector<std::optional<double>>& labels,
                                    const std::vector<double>& task_weights = {}) {
  if (labels.size() != tasks.size()) throw std::invalid_argument("joint_loss: one label slot per task expected");
  for (const auto& [name, _] : outputs) {
    bool known = false;
    for (const auto& t : tasks) known = known || t.name == name;
    if (!known) throw std::invalid_argument("joint_loss: unknown task " + name);
  }
  std::optional<Tensor<T>> total;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const double w = task_weights.empty() ? 1.0 : task_weights.at(t);
    if (!labels[t] || w == 0) continue;
    const auto it = outputs.find(tasks[t].name);
    if (it == outputs.end()) throw std::invalid_argument("joint_loss: no output for task " + tasks[t].name);
    Tensor<T> l;
    if (tasks[t].kind == TaskKind::classification) {
      l = cross_entropy(it->second, one_hot<T>({static_cast<std::size_t>(*labels[t])}, tasks[t].num_classes));
    } else {
      l = mae(it->second, Tensor<T>({1, 1}, {static_cast<T>(*labels[t])}));
    }
    if (w != 1.0) l = scale(l, static_cast<T>(w));
    total = total ? add(*total, l) : l;
  }
  return total;
}

/// Mean of per-round outputs; round r draws its tiles from Rng::stream(seed, r)
/// and restores canonical order before the forward pass.
template <class T>
std::map<std::string, std::vector<double>> predict_with_resampling(const MILModel<T>& model, const Bag& bag,
                                                                   std::size_t rounds, std::size_t tiles_per_round,
                                                                   bool with_replacement, std::uint64_t seed) {
  if (rounds == 0) throw std::invalid_argument("resampling: rounds must be >= 1");
  const std::size_t n = bag.tiles();
  if (n == 0) throw std::invalid_argument("bag " + bag.slide_id + " is empty");
  const std::size_t k = tiles_per_round == 0 ? n : tiles_per_round;
  if (k > n && !with_replacement) {
    throw std::invalid_argument("resampling: tiles_per_round " + std::to_string(k) + " exceeds the " +
                                std::to_string(n) + " tiles of bag " + bag.slide_id +
                                " and sampling with replacement is off");
  }
  NoGradGuard<T> no_grad;
  std::map<std::string, std::vector<double>> acc;
  for (std::size_t r = 0; r < rounds; ++r) {
    std::vector<std::size_t> idx;
    if (with_replacement) {
      auto rng = Rng::stream(seed, r);
      for (std::size_t i = 0; i < k; ++i) idx.push_back(static_cast<std::size_t>(rng.below(n)));
    } else if (k < n) {
      auto rng = Rng::stream(seed, r);
      idx = rng.sample_without_replacement(n, k);
    }
    const auto order = canonical_order(bag.coords, idx);
    const auto out = model.forward(bag_tensor<T>(bag, order));
    for (const auto& [name, t] : out) {
      auto& a = acc[name];
      a.resize(t.numel(), 0.0);
      const auto& v = t.values();
      for (std::size_t i = 0; i < v.size(); ++i) a[i] += double(v[i]);
    }
  }
  for (auto& [_, a] : acc)
    for (auto& v : a) v /= double(rounds);
  return acc;
}

// --- training and evaluation -------------------------------------------------

struct MILEpoch {
  double loss = 0;         // mean joint loss over bags with at least one label
  std::size_t labelled = 0;
};

/// One pass over the bags in shuffled order, `batch_size` bags per step.
template <class T>
MILEpoch mil_epoch(const MILModel<T>& model, const ParamStore<T>& store, AdamW<T>& opt, const std::vector<Bag>& bags,
                   const TrainConfig& cfg, const Schedule& sched, std::size_t epoch) {
  auto rng = Rng::stream(Rng::stream(cfg.seed, 11).next_u64(), epoch);
  const auto perm = rng.permutation(bags.size());
  MILEpoch res;
  double sum = 0;
  for (std::size_t i = 0; i < perm.size(); i += cfg.batch_size) {
    store.zero_grad();
    std::size_t used = 0;
    double batch_loss = 0;
    {
      Tape<T> tape;
      TapeGuard<T> guard(tape);
      std::optional<Tensor<T>> total;
      const std::size_t end = std::min(perm.size(), i + cfg.batch_size);
      for (std::size_t j = i; j < end; ++j) {
        const auto& bag = bags[perm[j]];
        auto l = joint_loss(model.forward(bag), model.tasks(), bag.labels);
        if (!l) continue;
        sum += double(l->item());
        ++used;
        total = total ? add(*total, *l) : *l;
      }
      if (!total) continue;
      auto loss = scale(*total, T(1) / static_cast<T>(used));
      batch_loss = double(loss.item());
      if (!std::isfinite(batch_loss)) throw std::runtime_error("MIL training diverged");
      tape.backward(loss);
    }
    if (cfg.clip_norm > 0) clip_grad_norm(store, cfg.clip_norm);
    opt.step(lr_at(opt.steps(), sched));
    res.labelled += used;
  }
  res.loss = res.labelled ? sum / double(res.labelled) : 0.0;
  return res;
}

struct TaskMetrics {
  std::string task;
  TaskKind kind = TaskKind::classification;
  std::size_t n = 0;  // bags with a label for this task
  ClassificationMetrics cls;
  double mae = 0;
};

/// Metrics per task over the labelled bags, predictions from resampling.
template <class T>
std::vector<TaskMetrics> evaluate_mil(const MILModel<T>& model, const std::vector<Bag>& bags, std::uint64_t seed) {
  const auto& cfg = model.config();
  const auto& tasks = model.tasks();
  std::vector<std::vector<std::size_t>> ys(tasks.size());
  std::vector<std::vector<double>> probs(tasks.size()), reg_err(tasks.size());
  for (std::size_t b = 0; b < bags.size(); ++b) {
    const auto out = predict_with_resampling(model, bags[b], cfg.rounds, cfg.tiles_per_round, cfg.with_replacement,
                                             Rng::stream(seed, b).next_u64());
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      if (!bags[b].labels.at(t)) continue;
      const auto& o = out.at(tasks[t].name);
      if (tasks[t].kind == TaskKind::classification) {
        ys[t].push_back(static_cast<std::size_t>(*bags[b].labels[t]));
        const auto p = softmax_rows(Tensor<double>({1, o.size()}, o));
        probs[t].insert(probs[t].end(), p.begin(), p.end());
      } else {
        reg_err[t].push_back(std::abs(o[0] - *bags[b].labels[t]));
      }
    }
  }
  std::vector<TaskMetrics> res;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    TaskMetrics m;
    m.task = tasks[t].name;
    m.kind = tasks[t].kind;
    if (tasks[t].kind == TaskKind::classification) {
      m.n = ys[t].size();
      if (m.n) m.cls = classification_metrics(ys[t], probs[t], tasks[t].num_classes);
    } else {
      m.n = reg_err[t].size();
      for (double e : reg_err[t]) m.mae += e;
      if (m.n) m.mae /= double(m.n);
    }
    res.push_back(m);
  }
  return res;
}

}  // namespace ssm
