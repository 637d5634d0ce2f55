// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "ssmamba/trainer.hpp"

namespace fs = std::filesystem;
using namespace ssm;

namespace {

std::string tmp_file(const std::string& tag) {
  return (fs::temp_directory_path() / ("ssm_ck_" + tag + "_" + std::to_string(::getpid()) + ".ssmc")).string();
}

std::string slurp(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

DecoderConfig small_decoder() {
  DecoderConfig d;
  d.dim = 16;
  d.depth = 1;
  d.state_dim = 4;
  return d;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  ParamStore<float> st;
  Rng rng(1);
  Encoder<float> enc(Init<float>(st, rng), presets::desk());
  RunConfig rc;
  rc.class_names = {"a", "b"};
  rc.train.seed = 99;
  const auto path = tmp_file("rt");
  save_checkpoint(path, make_checkpoint(CheckpointPhase::finetune, rc, st));
  const auto ck = load_checkpoint(path);
  EXPECT_EQ(ck.phase, CheckpointPhase::finetune);
  EXPECT_FALSE(ck.has_optimizer);

  ParamStore<float> st2;
  Rng rng2(2);
  Encoder<float> enc2(Init<float>(st2, rng2), presets::desk());
  const auto rep = import_store(ck, st2);
  EXPECT_EQ(rep.loaded, st.entries().size());
  for (std::size_t i = 0; i < st.entries().size(); ++i) {
    const auto& a = st.entries()[i].tensor.values();
    const auto& b = st2.get(st.entries()[i].name).values();
    ASSERT_EQ(a.size(), b.size());
    EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)), 0) << st.entries()[i].name;
  }
  // Saving the reloaded store reproduces the file byte for byte.
  const auto path2 = tmp_file("rt2");
  save_checkpoint(path2, make_checkpoint(CheckpointPhase::finetune, parse_config(ck.config), st2));
  EXPECT_EQ(slurp(path), slurp(path2));
  fs::remove(path);
  fs::remove(path2);
}

TEST(Checkpoint, DoublePrecisionRoundTrip) {
  ParamStore<double> st;
  Rng rng(3);
  Init<double>(st, rng).normal("w", {3, 5}, 1.0);
  const auto path = tmp_file("f64");
  save_checkpoint(path, make_checkpoint(CheckpointPhase::mil, RunConfig{}, st));
  const auto ck = load_checkpoint(path);
  ASSERT_EQ(ck.tensors.size(), 1u);
  EXPECT_EQ(ck.tensors[0].dtype, DType::f64);
  EXPECT_EQ(ck.tensors[0].shape, (Shape{3, 5}));
  for (std::size_t i = 0; i < 15; ++i) EXPECT_EQ(ck.tensors[0].values[i], st.get("w")[i]);
  fs::remove(path);
}

TEST(Checkpoint, HeaderLayout) {
  ParamStore<float> st;
  Rng rng(4);
  Init<float>(st, rng).constant("b", {2}, 1.5f);
  const auto path = tmp_file("hdr");
  Checkpoint ck;
  ck.phase = CheckpointPhase::pretrain;
  ck.config = "{}";
  ck.tensors = export_store(st);
  save_checkpoint(path, ck);
  const auto bytes = slurp(path);
  // magic, version, phase, config length (8 bytes) and text, tensor count
  ASSERT_GE(bytes.size(), 4u + 4 + 1 + 8 + 2 + 4);
  EXPECT_EQ(bytes.substr(0, 4), "SSMC");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
  EXPECT_EQ(bytes[8], 0);  // pretrain
  EXPECT_EQ(bytes[9], 2);
  EXPECT_EQ(bytes.substr(17, 2), "{}");
  EXPECT_EQ(bytes[19], 1);
  // one record: 4 + 1 name + 1 dtype + 4 ndim + 8 dim + 2 floats, then has_optim
  EXPECT_EQ(bytes.size(), 23u + 4 + 1 + 1 + 4 + 8 + 8 + 1);
  EXPECT_EQ(bytes.back(), 0);
  fs::remove(path);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const auto path = tmp_file("bad");
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOPE0000";
  }
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  ParamStore<float> st;
  Rng rng(5);
  Init<float>(st, rng).normal("w", {4, 4}, 1.0);
  save_checkpoint(path, make_checkpoint(CheckpointPhase::finetune, RunConfig{}, st));
  auto bytes = slurp(path);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << bytes.substr(0, bytes.size() - 10);
  }
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  bytes[4] = 9;  // version
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << bytes;
  }
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  EXPECT_THROW(load_checkpoint(path + ".missing"), CheckpointError);
  fs::remove(path);
}

TEST(Checkpoint, ImportChecksNamesAndShapes) {
  ParamStore<float> a, b, c;
  Rng rng(6);
  Init<float>(a, rng).normal("w", {2, 3}, 1.0);
  Init<float>(b, rng).normal("w", {3, 2}, 1.0);
  Init<float>(c, rng).normal("v", {2, 3}, 1.0);
  const auto ck = make_checkpoint(CheckpointPhase::finetune, RunConfig{}, a);
  EXPECT_THROW(import_store(ck, b), CheckpointError);
  EXPECT_THROW(import_store(ck, c), CheckpointError);
  Init<float>(a, rng).normal("extra", {1}, 1.0);
  EXPECT_THROW(import_store(ck, a), CheckpointError);
  EXPECT_EQ(import_store(ck, a, {}, false).missing, std::vector<std::string>{"extra"});
}

TEST(Checkpoint, PretrainedEncoderLoadsIntoClassifier) {
  ParamStore<float> pre;
  Rng rng(7);
  MaskedModel<float> mm(Init<float>(pre, rng), presets::desk(), small_decoder());
  const auto ck = make_checkpoint(CheckpointPhase::pretrain, RunConfig{}, pre);

  auto cls_cfg = presets::desk();
  cls_cfg.num_classes = 5;  // head shape differs from the pretraining one
  ParamStore<float> st;
  Rng rng2(8);
  Encoder<float> enc(Init<float>(st, rng2), cls_cfg);
  const auto rep = load_pretrained_encoder(ck, st);
  for (const auto& n : rep.missing) EXPECT_EQ(n.rfind("head.", 0), 0u) << n;
  EXPECT_FALSE(rep.missing.empty());
  EXPECT_EQ(st.get("stem.weight").values(), pre.get("encoder.stem.weight").values());

  auto wrong = ck;
  wrong.phase = CheckpointPhase::finetune;
  EXPECT_THROW(load_pretrained_encoder(wrong, st), CheckpointError);
}

TEST(Checkpoint, OptimizerResumeMatchesUninterrupted) {
  auto make = [](ParamStore<double>& st) {
    Rng rng(9);
    Init<double>(st, rng).normal("w", {4}, 1.0);
  };
  auto loss_step = [](ParamStore<double>& st, AdamW<double>& opt) {
    st.zero_grad();
    Tape<double> tape;
    {
      TapeGuard<double> g(tape);
      auto w = st.get("w");
      tape.backward(sum(mul(w, w)));
    }
    opt.step(0.1);
  };
  ParamStore<double> a, b;
  make(a);
  make(b);
  AdamW<double> oa(a, {}), ob(b, {});
  for (int i = 0; i < 5; ++i) loss_step(a, oa);
  for (int i = 0; i < 2; ++i) loss_step(b, ob);
  const auto path = tmp_file("opt");
  save_checkpoint(path, make_checkpoint(CheckpointPhase::finetune, RunConfig{}, b, &ob));
  ParamStore<double> c;
  make(c);
  AdamW<double> oc(c, {});
  const auto ck = load_checkpoint(path);
  import_store(ck, c);
  restore_optimizer(ck, oc);
  EXPECT_EQ(oc.steps(), 2u);
  for (int i = 0; i < 3; ++i) loss_step(c, oc);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(c.get("w")[i], a.get("w")[i]);
  fs::remove(path);
}

TEST(Config, JsonRoundTrip) {
  RunConfig rc;
  rc.preset = "tiny";
  rc.encoder = presets::tiny();
  rc.encoder.order = TokenOrder::column;
  rc.train = TrainConfig::for_phase(Phase::pretrain);
  rc.train.seed = 123456789012345ULL;
  rc.mask_ratio = 0.6;
  rc.mil.rounds = 7;
  rc.class_names = {"x", "y", "z"};
  rc.stats.mean = {0.1, 0.2, 0.30000000000000004};
  rc.stats.std = {0.7, 1e-3, 2.5};
  const auto text = dump_config(rc);
  const auto back = parse_config(text);
  EXPECT_EQ(dump_config(back), text);
  EXPECT_EQ(back.encoder.order, TokenOrder::column);
  EXPECT_EQ(back.train.seed, rc.train.seed);
  EXPECT_EQ(back.train.base_lr, rc.train.base_lr);
  EXPECT_EQ(back.class_names, rc.class_names);
  EXPECT_EQ(back.stats.mean, rc.stats.mean);
  EXPECT_EQ(back.stats.std, rc.stats.std);
  EXPECT_THROW(parse_config("{not json"), std::runtime_error);
  EXPECT_THROW(parse_config("{}"), std::runtime_error);
}
