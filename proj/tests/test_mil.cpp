// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "ssmamba/gradcheck.hpp"
#include "ssmamba/mil.hpp"

namespace fs = std::filesystem;
using namespace ssm;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("ssm_mil_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

Bag random_bag(std::size_t n, std::size_t E, std::uint64_t seed, std::size_t n_tasks = 1) {
  Rng rng(seed);
  Bag b;
  b.slide_id = "s" + std::to_string(seed);
  b.embed_dim = E;
  const auto cells = rng.sample_without_replacement(64, n);
  for (auto c : cells) b.coords.push_back({std::int32_t(c / 8), std::int32_t(c % 8)});
  for (std::size_t i = 0; i < n * E; ++i) b.embeddings.push_back(float(rng.normal()));
  b.labels.assign(n_tasks, std::nullopt);
  return b;
}

Bag shuffled(const Bag& b, std::uint64_t seed) {
  Rng rng(seed);
  const auto p = rng.permutation(b.tiles());
  Bag s = b;
  for (std::size_t i = 0; i < p.size(); ++i) {
    s.coords[i] = b.coords[p[i]];
    std::copy_n(b.embeddings.begin() + long(p[i] * b.embed_dim), b.embed_dim, s.embeddings.begin() + long(i * b.embed_dim));
  }
  return s;
}

MILConfig toy_config(std::size_t E, std::vector<TaskSpec> tasks) {
  MILConfig c;
  c.dim = 8;
  c.depth = 2;
  c.state_dim = 4;
  c.embed_dim = E;
  c.tasks = std::move(tasks);
  return c;
}

const std::vector<TaskSpec> kTwoTasks = {{"grade", TaskKind::classification, 6}, {"os", TaskKind::regression, 0}};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(BagFile, RoundTripAndLayout) {
  TempDir d("rt");
  const auto b = random_bag(5, 3, 1);
  const auto p = (d.path / "x.ssmb").string();
  write_bag(p, b);
  const auto bytes = slurp(p);
  EXPECT_EQ(bytes.size(), 16u + 5 * 8 + 5 * 3 * 4);
  EXPECT_EQ(bytes.substr(0, 4), "SSMB");
  EXPECT_EQ(bytes[8], 3);   // embed_dim
  EXPECT_EQ(bytes[12], 5);  // n_tiles
  const auto r = read_bag(p, "slide");
  EXPECT_EQ(r.slide_id, "slide");
  EXPECT_EQ(r.embed_dim, 3u);
  EXPECT_EQ(r.coords, b.coords);
  EXPECT_EQ(r.embeddings, b.embeddings);
  EXPECT_EQ(read_bag(p).slide_id, "x");
}

TEST(BagFile, Rejections) {
  TempDir d("bad");
  auto b = random_bag(3, 2, 2);
  b.coords[2] = b.coords[0];
  EXPECT_THROW(write_bag((d.path / "dup.ssmb").string(), b), std::invalid_argument);
  Bag empty;
  empty.embed_dim = 2;
  EXPECT_THROW(empty.validate(), std::invalid_argument);
  {
    std::ofstream out(d.path / "junk.ssmb", std::ios::binary);
    out << "JUNKJUNKJUNKJUNK";
  }
  EXPECT_THROW(read_bag((d.path / "junk.ssmb").string()), std::runtime_error);
  write_bag((d.path / "ok.ssmb").string(), random_bag(3, 2, 3));
  const auto full = slurp(d.path / "ok.ssmb");
  {
    std::ofstream out(d.path / "cut.ssmb", std::ios::binary);
    out << full.substr(0, full.size() - 1);
  }
  EXPECT_THROW(read_bag((d.path / "cut.ssmb").string()), std::runtime_error);
}

TEST(Manifest, ParsesTasksAndMissingLabels) {
  TempDir d("man");
  {
    std::ofstream out(d.path / "m.tsv");
    out << "slide_id\tbag_path\tgrade:cls:6\tos:reg\n";
    out << "a\tbags/a.ssmb\t3\t12.5\n";
    out << "# comment\n";
    out << "b\t/abs/b.ssmb\tNA\t\n";
    out << "c\tc.ssmb\t\t7\n";
  }
  const auto m = read_manifest((d.path / "m.tsv").string());
  ASSERT_EQ(m.tasks.size(), 2u);
  EXPECT_EQ(m.tasks[0].num_classes, 6u);
  EXPECT_EQ(m.tasks[1].kind, TaskKind::regression);
  ASSERT_EQ(m.rows.size(), 3u);
  EXPECT_EQ(m.rows[0].bag_path, (d.path / "bags/a.ssmb").string());
  EXPECT_EQ(m.rows[1].bag_path, "/abs/b.ssmb");
  EXPECT_EQ(*m.rows[0].labels[0], 3.0);
  EXPECT_EQ(*m.rows[0].labels[1], 12.5);
  EXPECT_FALSE(m.rows[1].labels[0]);
  EXPECT_FALSE(m.rows[1].labels[1]);
  EXPECT_FALSE(m.rows[2].labels[0]);
  EXPECT_EQ(*m.rows[2].labels[1], 7.0);

  write_manifest((d.path / "copy.tsv").string(), m);
  const auto again = read_manifest((d.path / "copy.tsv").string());
  ASSERT_EQ(again.rows.size(), 3u);
  EXPECT_EQ(again.rows[0].labels, m.rows[0].labels);
  EXPECT_EQ(again.rows[2].labels, m.rows[2].labels);
}

TEST(Manifest, RejectsBadInput) {
  TempDir d("manbad");
  auto check = [&](const std::string& text) {
    const auto p = d.path / "bad.tsv";
    std::ofstream(p) << text;
    EXPECT_THROW(read_manifest(p.string()), std::runtime_error) << text;
  };
  check("slide_id\tbag_path\n");
  check("slide\tpath\tg:cls:2\n");
  check("slide_id\tbag_path\tg:cls:1\n");
  check("slide_id\tbag_path\tg:oops\n");
  check("slide_id\tbag_path\tg:reg\tg:reg\n");
  check("slide_id\tbag_path\tg:cls:2\na\tx\t2\n");
  check("slide_id\tbag_path\tg:cls:2\na\tx\t0.5\n");
  check("slide_id\tbag_path\tg:reg\na\tx\tabc\n");
  check("slide_id\tbag_path\tg:reg\na\tx\t1\t2\n");
}

TEST(MILModel, SingleTilePoolIsIdentity) {
  // Same seed, same construction order: a hand-composed stack shares weights.
  const auto cfg = toy_config(5, {{"t", TaskKind::classification, 3}});
  ParamStore<double> st, st2;
  Rng rng(4), rng2(4);
  MILModel<double> m(Init<double>(st, rng), cfg);
  Init<double> init(st2, rng2);
  Linear<double> proj(init.scope("proj"), 5, 8);
  std::vector<LayerNorm<double>> norms;
  std::vector<DMSBlock<double>> blocks;
  for (std::size_t b = 0; b < 2; ++b) {
    auto blk = init.scope("block" + std::to_string(b));
    norms.emplace_back(blk.scope("norm"), 8);
    DMSConfig dc;
    dc.channels = 8;
    dc.state_dim = 4;
    dc.kernel = 3;
    dc.reg_kernel = 3;
    blocks.emplace_back(blk.scope("dms"), dc);
  }
  LayerNorm<double> norm(init.scope("norm"), 8);

  const auto bag = random_bag(1, 5, 5);
  const auto x = bag_tensor<double>(bag);
  auto seq = proj(x);
  for (std::size_t b = 0; b < 2; ++b) seq = add(seq, blocks[b](norms[b](seq)));
  const auto expect = reshape(norm(seq), {1, 8});
  EXPECT_EQ(m.aggregate(x).values(), expect.values());
}

TEST(MILModel, PoolingOfConstantSequenceIgnoresDuplication) {
  std::vector<double> row = {0.5, -1.0, 2.0};
  std::vector<double> n3, n6;
  for (int i = 0; i < 3; ++i) n3.insert(n3.end(), row.begin(), row.end());
  for (int i = 0; i < 6; ++i) n6.insert(n6.end(), row.begin(), row.end());
  const auto a = global_avg_pool(Tensor<double>({1, 3, 3}, n3));
  const auto b = global_avg_pool(Tensor<double>({1, 6, 3}, n6));
  EXPECT_EQ(a.values(), b.values());
  EXPECT_EQ(a.values(), row);
}

TEST(MILModel, StorageOrderDoesNotMatter) {
  const auto cfg = toy_config(6, kTwoTasks);
  ParamStore<float> st;
  Rng rng(6);
  MILModel<float> m(Init<float>(st, rng), cfg);
  const auto bag = random_bag(9, 6, 7, 2);
  const auto a = m.forward(bag);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto b = m.forward(shuffled(bag, s));
    for (const auto& [name, t] : a) EXPECT_EQ(t.values(), b.at(name).values()) << name;
  }
  EXPECT_EQ(a.at("grade").shape(), (Shape{1, 6}));
  EXPECT_EQ(a.at("os").shape(), (Shape{1, 1}));
}

TEST(MILModel, MissingLabelSendsNoGradientToItsHead) {
  const auto cfg = toy_config(4, kTwoTasks);
  ParamStore<double> st;
  Rng rng(8);
  MILModel<double> m(Init<double>(st, rng), cfg);
  const auto bag = random_bag(5, 4, 9, 2);
  auto grads_with = [&](std::vector<std::optional<double>> labels, std::vector<double> w = {}) {
    st.zero_grad();
    Tape<double> tape;
    {
      TapeGuard<double> g(tape);
      auto l = joint_loss(m.forward(bag), m.tasks(), labels, w);
      if (l) tape.backward(*l);
    }
    std::map<std::string, double> norm;
    for (const auto& e : st.entries()) {
      double s = 0;
      for (double v : e.tensor.grad()) s += std::abs(v);
      norm[e.name] = s;
    }
    return norm;
  };
  auto g = grads_with({std::nullopt, 3.0});
  EXPECT_EQ(g["heads.grade.weight"], 0.0);
  EXPECT_EQ(g["heads.grade.bias"], 0.0);
  EXPECT_GT(g["heads.os.weight"], 0.0);
  EXPECT_GT(g["proj.weight"], 0.0);
  g = grads_with({2.0, 3.0}, {1.0, 0.0});
  EXPECT_EQ(g["heads.os.weight"], 0.0);
  EXPECT_GT(g["heads.grade.weight"], 0.0);
  g = grads_with({std::nullopt, std::nullopt});
  for (const auto& [name, v] : g) EXPECT_EQ(v, 0.0) << name;
}

TEST(MILModel, JointLossValues) {
  const std::vector<TaskSpec> tasks = {{"c", TaskKind::classification, 3}, {"r", TaskKind::regression, 0}};
  std::map<std::string, Tensor<double>> out;
  out.emplace("c", Tensor<double>({1, 3}, {0.0, 0.0, 0.0}));
  out.emplace("r", Tensor<double>({1, 1}, {2.5}));
  EXPECT_NEAR(joint_loss(out, tasks, {1.0, std::nullopt})->item(), std::log(3.0), 1e-12);
  EXPECT_NEAR(joint_loss(out, tasks, {std::nullopt, 4.0})->item(), 1.5, 1e-12);
  EXPECT_NEAR(joint_loss(out, tasks, {0.0, 1.0})->item(), std::log(3.0) + 1.5, 1e-12);
  EXPECT_FALSE(joint_loss(out, tasks, {std::nullopt, std::nullopt}));
  out.emplace("zzz", Tensor<double>({1, 1}, {0.0}));
  EXPECT_THROW(joint_loss(out, tasks, {1.0, 1.0}), std::invalid_argument);
}

TEST(MILModel, Errors) {
  EXPECT_THROW(validate_tasks({}), std::invalid_argument);
  EXPECT_THROW(validate_tasks({{"a", TaskKind::regression, 0}, {"a", TaskKind::regression, 0}}), std::invalid_argument);
  ParamStore<float> st;
  Rng rng(1);
  MILModel<float> m(Init<float>(st, rng), toy_config(4, kTwoTasks));
  EXPECT_THROW(m.task_index("nope"), std::invalid_argument);
  EXPECT_THROW(m.aggregate(Tensor<float>::zeros({1, 0, 4})), std::invalid_argument);
  EXPECT_THROW(m.aggregate(Tensor<float>::zeros({1, 2, 5})), ShapeError);
  Bag empty;
  empty.embed_dim = 4;
  EXPECT_THROW(m.forward(empty), std::invalid_argument);
}

TEST(Resampling, OneFullRoundEqualsForward) {
  ParamStore<float> st;
  Rng rng(10);
  MILModel<float> m(Init<float>(st, rng), toy_config(4, kTwoTasks));
  const auto bag = random_bag(7, 4, 11, 2);
  const auto plain = m.forward(bag);
  const auto r = predict_with_resampling(m, bag, 1, 0, false, 3);
  for (const auto& [name, t] : plain) {
    ASSERT_EQ(r.at(name).size(), t.numel());
    for (std::size_t i = 0; i < t.numel(); ++i) EXPECT_EQ(r.at(name)[i], double(t[i]));
  }
}

TEST(Resampling, DeterministicAndSeedDependent) {
  ParamStore<float> st;
  Rng rng(12);
  MILModel<float> m(Init<float>(st, rng), toy_config(4, kTwoTasks));
  const auto bag = random_bag(12, 4, 13, 2);
  const auto a = predict_with_resampling(m, bag, 15, 5, false, 77);
  const auto b = predict_with_resampling(m, bag, 15, 5, false, 77);
  const auto c = predict_with_resampling(m, bag, 15, 5, false, 78);
  EXPECT_EQ(a, b);
  EXPECT_NE(a.at("grade"), c.at("grade"));
  // Mean of the explicitly computed rounds.
  std::vector<double> mean(6, 0.0);
  for (std::size_t r = 0; r < 15; ++r) {
    auto rr = Rng::stream(77, r);
    const auto idx = canonical_order(bag.coords, rr.sample_without_replacement(12, 5));
    const auto o = m.forward(bag_tensor<float>(bag, idx)).at("grade");
    for (std::size_t i = 0; i < 6; ++i) mean[i] += double(o[i]);
  }
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(a.at("grade")[i], mean[i] / 15, 1e-12);
}

TEST(Resampling, ConstantModelGivesConstant) {
  ParamStore<float> st;
  Rng rng(14);
  MILModel<float> m(Init<float>(st, rng), toy_config(4, kTwoTasks));
  for (const auto& e : st.entries())
    if (e.name.rfind("heads.", 0) == 0) {
      auto t = e.tensor;
      auto d = t.mutable_data();
      for (auto& v : d) v = e.name.find("bias") != std::string::npos ? 0.75f : 0.0f;
    }
  const auto bag = random_bag(10, 4, 15, 2);
  const auto r = predict_with_resampling(m, bag, 15, 3, true, 5);
  for (double v : r.at("grade")) EXPECT_DOUBLE_EQ(v, 0.75);
  EXPECT_DOUBLE_EQ(r.at("os")[0], 0.75);
}

TEST(Resampling, OversizedRoundNeedsReplacement) {
  ParamStore<float> st;
  Rng rng(16);
  MILModel<float> m(Init<float>(st, rng), toy_config(4, kTwoTasks));
  const auto bag = random_bag(3, 4, 17, 2);
  EXPECT_THROW(predict_with_resampling(m, bag, 2, 5, false, 1), std::invalid_argument);
  EXPECT_NO_THROW(predict_with_resampling(m, bag, 2, 5, true, 1));
  EXPECT_THROW(predict_with_resampling(m, bag, 0, 0, false, 1), std::invalid_argument);
}

TEST(MILGrad, FourTileBagFiniteDifferences) {
  const auto cfg = toy_config(8, kTwoTasks);
  ParamStore<double> st;
  Rng rng(18);
  MILModel<double> m(Init<double>(st, rng), cfg);
  const auto bag = random_bag(4, 8, 19, 2);
  auto x = bag_tensor<double>(bag);
  std::vector<Tensor<double>> leaves{x};
  for (const auto& e : st.entries()) leaves.push_back(e.tensor);
  // Some DMS-internal gradients here are ~1e-9; at eps 1e-5 the loss
  // rounding (~1e-11 after division) swamps them against the 1e-8 floor.
  // A wider step keeps truncation error well below the bound.
  const double err = finite_diff_check<double>(
      [&] { return *joint_loss(m.forward(x), m.tasks(), {4.0, 1.5}); }, leaves, 1e-3);
  EXPECT_LT(err, 1e-3);
}

TEST(MILTraining, LearnsMeanSignal) {
  // Label 1 when the first embedding channel is shifted upwards.
  std::vector<Bag> bags;
  for (std::uint64_t i = 0; i < 24; ++i) {
    auto b = random_bag(6, 4, 100 + i, 1);
    const bool pos = i % 2 == 1;
    for (std::size_t t = 0; t < 6; ++t) b.embeddings[t * 4] += pos ? 1.5f : -1.5f;
    b.labels = {pos ? 1.0 : 0.0};
    bags.push_back(b);
  }
  auto cfg = toy_config(4, {{"y", TaskKind::classification, 2}});
  cfg.rounds = 3;
  ParamStore<float> st;
  Rng rng(20);
  MILModel<float> m(Init<float>(st, rng), cfg);
  TrainConfig tc;
  tc.base_lr = 3e-3;
  tc.batch_size = 4;
  tc.epochs = 15;
  tc.warmup_epochs = 1;
  tc.seed = 1;
  AdamW<float> opt(st, {});
  const auto sched = Schedule::from(tc, 6);
  std::vector<double> losses;
  for (std::size_t e = 0; e < tc.epochs; ++e) losses.push_back(mil_epoch(m, st, opt, bags, tc, sched, e).loss);
  EXPECT_LT(losses.back(), 0.5 * losses.front());
  const auto metrics = evaluate_mil(m, bags, 9);
  ASSERT_EQ(metrics.size(), 1u);
  EXPECT_EQ(metrics[0].n, 24u);
  EXPECT_GE(metrics[0].cls.acc, 90.0);
  EXPECT_TRUE(metrics[0].cls.has_auc);
}

TEST(MILConfigJson, RoundTrip) {
  auto c = toy_config(12, kTwoTasks);
  c.with_replacement = true;
  c.tiles_per_round = 9;
  const auto back = mil_from_json(to_json(c));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
  EXPECT_EQ(back.tasks[0].num_classes, 6u);
}
